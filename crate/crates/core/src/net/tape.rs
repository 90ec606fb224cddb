//! A small reverse-mode autodiff tape over dense `f64` tensors.
//!
//! Every op appends a node holding its value; [`Tape::backward`] walks the
//! nodes in reverse and accumulates adjoints. Parameters enter as
//! [`Tape::param`] leaves and their gradients are collected by index.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} values",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn row(data: Vec<f64>) -> Self {
        Tensor::new(vec![1, data.len()], data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    /// No nonlinearity; makes the network linear in its input.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBT(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Act(Var, Activation),
    Scale(Var, f64),
    SoftmaxRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Param index → node, so a parameter used twice is one leaf.
    param_nodes: Vec<Option<Var>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Registers parameter `index` (once) and returns its leaf.
    pub fn param(&mut self, index: usize, t: &Tensor) -> Var {
        if self.param_nodes.len() <= index {
            self.param_nodes.resize(index + 1, None);
        }
        if let Some(v) = self.param_nodes[index] {
            return v;
        }
        let v = self.push(t.clone(), Op::Param);
        self.param_nodes[index] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        assert_eq!(k, bv.rows(), "matmul inner dims");
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let x = av.data[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv.data[p * m..(p + 1) * m];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        self.push(Tensor::new(vec![n, m], out), Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k, m) = (av.rows(), av.cols(), bv.rows());
        assert_eq!(k, bv.cols(), "matmul_bt inner dims");
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let arow = &av.data[i * k..(i + 1) * k];
            for j in 0..m {
                let brow = &bv.data[j * k..(j + 1) * k];
                out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        self.push(Tensor::new(vec![n, m], out), Op::MatMulBT(a, b))
    }

    /// Adds a length-`m` bias to every row of an `n × m` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        let m = xv.cols();
        assert_eq!(bv.len(), m, "bias length");
        let data = xv
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv.data[i % m])
            .collect();
        self.push(Tensor::new(xv.shape.clone(), data), Op::AddBias(x, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape, bv.shape, "add shapes");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        self.push(Tensor::new(av.shape.clone(), data), Op::Add(a, b))
    }

    pub fn act(&mut self, x: Var, f: Activation) -> Var {
        let xv = self.value(x);
        let data = match f {
            Activation::Relu => xv.data.iter().map(|v| v.max(0.0)).collect(),
            Activation::Tanh => xv.data.iter().map(|v| v.tanh()).collect(),
            Activation::Identity => xv.data.clone(),
        };
        self.push(Tensor::new(xv.shape.clone(), data), Op::Act(x, f))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data.iter().map(|v| v * c).collect();
        self.push(Tensor::new(xv.shape.clone(), data), Op::Scale(x, c))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.cols();
        let mut data = xv.data.clone();
        for row in data.chunks_mut(m) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(Tensor::new(xv.shape.clone(), data), Op::SoftmaxRows(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (n, m) = (xv.rows(), xv.cols());
        assert!(start + len <= m, "slice out of range");
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&xv.data[i * m + start..i * m + start + len]);
        }
        self.push(Tensor::new(vec![n, len], data), Op::SliceCols(x, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let m: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pv = self.value(p);
                assert_eq!(pv.rows(), n, "concat_cols rows");
                data.extend_from_slice(&pv.data[i * w..(i + 1) * w]);
            }
        }
        self.push(Tensor::new(vec![n, m], data), Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let m = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), m, "concat_rows cols");
            data.extend_from_slice(&pv.data);
            n += pv.rows();
        }
        self.push(Tensor::new(vec![n, m], data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Var {
        let tv = self.value(table);
        let m = tv.cols();
        let mut data = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            data.extend_from_slice(&tv.data[r * m..(r + 1) * m]);
        }
        self.push(
            Tensor::new(vec![rows.len(), m], data),
            Op::GatherRows(table, rows.to_vec()),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let data = self.value(x).data.clone();
        self.push(Tensor::new(shape, data), Op::Reshape(x))
    }

    /// `x: [C, H, W]`, `w: [O, C, k, k]`, `b: [O]` → `[O, H', W']`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let g = ConvGeom::new(&xv.shape, &wv.shape, stride, pad);
        let mut out = vec![0.0; g.o * g.oh * g.ow];
        for o in 0..g.o {
            let plane = &mut out[o * g.oh * g.ow..(o + 1) * g.oh * g.ow];
            plane.iter_mut().for_each(|v| *v = bv.data[o]);
            for c in 0..g.c {
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        let wt = wv.data[((o * g.c + c) * g.k + ki) * g.k + kj];
                        if wt == 0.0 {
                            continue;
                        }
                        for oy in 0..g.oh {
                            let Some(iy) = g.input_index(oy, ki, g.h) else { continue };
                            let xrow = &xv.data[(c * g.h + iy) * g.w..(c * g.h + iy + 1) * g.w];
                            let orow = &mut plane[oy * g.ow..(oy + 1) * g.ow];
                            for (ox, o_val) in orow.iter_mut().enumerate() {
                                if let Some(ix) = g.input_index(ox, kj, g.w) {
                                    *o_val += wt * xrow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::new(vec![g.o, g.oh, g.ow], out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        )
    }

    /// `[C, H, W]` → `[1, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.shape[0];
        let hw = xv.shape[1] * xv.shape[2];
        let data = xv
            .data
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        self.push(Tensor::new(vec![1, c], data), Op::GlobalAvgPool(x))
    }

    /// Propagates the given output adjoints back through the tape.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape, g.shape, "seed shape");
            accumulate(&mut grads, *v, g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            param_nodes: self.param_nodes.clone(),
        }
    }

    fn backward_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                let mut ga = vec![0.0; n * k];
                let mut gb = vec![0.0; k * m];
                for i in 0..n {
                    let grow = &g.data[i * m..(i + 1) * m];
                    for p in 0..k {
                        let brow = &bv.data[p * m..(p + 1) * m];
                        ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        let x = av.data[i * k + p];
                        if x != 0.0 {
                            for (gbv, &gv) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *gbv += x * gv;
                            }
                        }
                    }
                }
                accumulate(grads, *a, Tensor::new(av.shape.clone(), ga));
                accumulate(grads, *b, Tensor::new(bv.shape.clone(), gb));
            }
            Op::MatMulBT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                let mut ga = vec![0.0; n * k];
                let mut gb = vec![0.0; m * k];
                for i in 0..n {
                    for j in 0..m {
                        let gv = g.data[i * m + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            ga[i * k + p] += gv * bv.data[j * k + p];
                            gb[j * k + p] += gv * av.data[i * k + p];
                        }
                    }
                }
                accumulate(grads, *a, Tensor::new(av.shape.clone(), ga));
                accumulate(grads, *b, Tensor::new(bv.shape.clone(), gb));
            }
            Op::AddBias(x, b) => {
                let m = self.value(*x).cols();
                let mut gb = vec![0.0; m];
                for (i, v) in g.data.iter().enumerate() {
                    gb[i % m] += v;
                }
                accumulate(grads, *x, g.clone());
                accumulate(grads, *b, Tensor::new(self.value(*b).shape.clone(), gb));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Act(x, f) => {
                let out = &node.value.data;
                let data = match f {
                    Activation::Relu => g
                        .data
                        .iter()
                        .zip(out)
                        .map(|(gv, y)| if *y > 0.0 { *gv } else { 0.0 })
                        .collect(),
                    Activation::Tanh => g
                        .data
                        .iter()
                        .zip(out)
                        .map(|(gv, y)| gv * (1.0 - y * y))
                        .collect(),
                    Activation::Identity => g.data.clone(),
                };
                accumulate(grads, *x, Tensor::new(g.shape.clone(), data));
            }
            Op::Scale(x, c) => {
                let data = g.data.iter().map(|v| v * c).collect();
                accumulate(grads, *x, Tensor::new(g.shape.clone(), data));
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let m = y.cols();
                let mut data = vec![0.0; y.len()];
                for ((drow, yrow), grow) in data
                    .chunks_mut(m)
                    .zip(y.data.chunks(m))
                    .zip(g.data.chunks(m))
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d = yv * (gv - dot);
                    }
                }
                accumulate(grads, *x, Tensor::new(y.shape.clone(), data));
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let (n, m) = (xv.rows(), xv.cols());
                let len = g.cols();
                let mut data = vec![0.0; n * m];
                for i in 0..n {
                    data[i * m + start..i * m + start + len]
                        .copy_from_slice(&g.data[i * len..(i + 1) * len]);
                }
                accumulate(grads, *x, Tensor::new(xv.shape.clone(), data));
            }
            Op::ConcatCols(parts) => {
                let n = g.rows();
                let m = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut data = Vec::with_capacity(n * w);
                    for i in 0..n {
                        data.extend_from_slice(&g.data[i * m + offset..i * m + offset + w]);
                    }
                    accumulate(grads, p, Tensor::new(vec![n, w], data));
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let t = Tensor::new(
                        self.value(p).shape.clone(),
                        g.data[offset..offset + len].to_vec(),
                    );
                    accumulate(grads, p, t);
                    offset += len;
                }
            }
            Op::GatherRows(table, rows) => {
                let tv = self.value(*table);
                let m = tv.cols();
                let mut data = vec![0.0; tv.len()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..m {
                        data[r * m + j] += g.data[i * m + j];
                    }
                }
                accumulate(grads, *table, Tensor::new(tv.shape.clone(), data));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape.clone();
                accumulate(grads, *x, Tensor::new(shape, g.data.clone()));
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let geom = ConvGeom::new(&xv.shape, &wv.shape, *stride, *pad);
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut gb = vec![0.0; geom.o];
                let plane_len = geom.oh * geom.ow;
                for o in 0..geom.o {
                    let gplane = &g.data[o * plane_len..(o + 1) * plane_len];
                    gb[o] = gplane.iter().sum();
                    for c in 0..geom.c {
                        for ki in 0..geom.k {
                            for kj in 0..geom.k {
                                let widx = ((o * geom.c + c) * geom.k + ki) * geom.k + kj;
                                let wt = wv.data[widx];
                                let mut acc = 0.0;
                                for oy in 0..geom.oh {
                                    let Some(iy) = geom.input_index(oy, ki, geom.h) else { continue };
                                    let base = (c * geom.h + iy) * geom.w;
                                    let grow = &gplane[oy * geom.ow..(oy + 1) * geom.ow];
                                    for (ox, &gv) in grow.iter().enumerate() {
                                        if let Some(ix) = geom.input_index(ox, kj, geom.w) {
                                            acc += gv * xv.data[base + ix];
                                            gx[base + ix] += gv * wt;
                                        }
                                    }
                                }
                                gw[widx] = acc;
                            }
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.shape.clone(), gx));
                accumulate(grads, *w, Tensor::new(wv.shape.clone(), gw));
                accumulate(grads, *b, Tensor::new(self.value(*b).shape.clone(), gb));
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let hw = xv.shape[1] * xv.shape[2];
                let mut data = vec![0.0; xv.len()];
                for (c, chunk) in data.chunks_mut(hw).enumerate() {
                    let v = g.data[c] / hw as f64;
                    chunk.iter_mut().for_each(|d| *d = v);
                }
                accumulate(grads, *x, Tensor::new(xv.shape.clone(), data));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(x.len(), 3, "conv input must be [C, H, W]");
        assert_eq!(w.len(), 4, "conv weight must be [O, C, k, k]");
        assert_eq!(x[0], w[1], "conv channel mismatch");
        let k = w[2];
        ConvGeom {
            c: x[0],
            h: x[1],
            w: x[2],
            o: w[0],
            k,
            oh: (x[1] + 2 * pad - k) / stride + 1,
            ow: (x[2] + 2 * pad - k) / stride + 1,
            stride,
            pad,
        }
    }

    fn input_index(&self, out: usize, tap: usize, limit: usize) -> Option<usize> {
        let i = (out * self.stride + tap).checked_sub(self.pad)?;
        (i < limit).then_some(i)
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_nodes: Vec<Option<Var>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for parameter `index`, if it took part in the computation.
    pub fn param(&self, index: usize) -> Option<&Tensor> {
        self.param_nodes
            .get(index)
            .copied()
            .flatten()
            .and_then(|v| self.of(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` at `x`, perturbing each entry.
    fn numeric(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let eps = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data[i] += eps;
                let mut m = x.clone();
                m.data[i] -= eps;
                (f(&p) - f(&m)) / (2.0 * eps)
            })
            .collect()
    }

    fn weights(shape: Vec<usize>, seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| (((i as u64 + 1) * 2654435761 + seed * 97) % 1000) as f64 / 500.0 - 1.0)
            .collect();
        Tensor::new(shape, data)
    }

    /// Sum of `r ⊙ y` with fixed random `r`, so every output entry gets a distinct adjoint.
    fn probe(t: &Tape, y: Var) -> (f64, Tensor) {
        let r = weights(t.value(y).shape.clone(), 7);
        let v = t.value(y).data.iter().zip(&r.data).map(|(a, b)| a * b).sum();
        (v, r)
    }

    fn check(build: impl Fn(&mut Tape, Var) -> Var, x: Tensor) {
        let mut t = Tape::new();
        let xv = t.param(0, &x);
        let y = build(&mut t, xv);
        let (_, seed) = probe(&t, y);
        let g = t.backward(&[(y, seed)]);
        let analytic = g.param(0).unwrap().data.clone();
        let f = |p: &Tensor| {
            let mut t = Tape::new();
            let xv = t.param(0, p);
            let y = build(&mut t, xv);
            probe(&t, y).0
        };
        let num = numeric(&x, f);
        for (a, n) in analytic.iter().zip(&num) {
            assert!((a - n).abs() < 1e-6 * (1.0 + a.abs()), "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn matmul_grads() {
        let b = weights(vec![3, 4], 1);
        check(
            move |t, x| {
                let bv = t.input(b.clone());
                t.matmul(x, bv)
            },
            weights(vec![2, 3], 2),
        );
        let a = weights(vec![2, 3], 3);
        check(
            move |t, x| {
                let av = t.input(a.clone());
                t.matmul(av, x)
            },
            weights(vec![3, 5], 4),
        );
    }

    #[test]
    fn matmul_bt_and_softmax_grads() {
        let k = weights(vec![4, 3], 5);
        check(
            move |t, q| {
                let kv = t.input(k.clone());
                let s = t.matmul_bt(q, kv);
                t.softmax_rows(s)
            },
            weights(vec![2, 3], 6),
        );
    }

    #[test]
    fn conv_grads() {
        let w = weights(vec![2, 3, 3, 3], 8);
        let b = weights(vec![2], 9);
        check(
            {
                let (w, b) = (w.clone(), b.clone());
                move |t, x| {
                    let wv = t.input(w.clone());
                    let bv = t.input(b.clone());
                    let y = t.conv2d(x, wv, bv, 2, 1);
                    t.act(y, Activation::Tanh)
                }
            },
            weights(vec![3, 7, 7], 10),
        );
        let x = weights(vec![3, 6, 6], 11);
        check(
            move |t, w| {
                let xv = t.input(x.clone());
                let bv = t.input(b.clone());
                let y = t.conv2d(xv, w, bv, 1, 1);
                t.global_avg_pool(y)
            },
            w,
        );
    }

    #[test]
    fn structural_grads() {
        check(
            |t, x| {
                let a = t.slice_cols(x, 1, 2);
                let b = t.concat_cols(&[x, a]);
                let c = t.concat_rows(&[b, b]);
                let d = t.gather_rows(c, &[3, 0, 0]);
                let e = t.reshape(d, vec![1, 15]);
                let f = t.scale(e, -1.5);
                t.act(f, Activation::Tanh)
            },
            weights(vec![2, 3], 12),
        );
        let bias = weights(vec![3], 13);
        check(
            move |t, x| {
                let b = t.input(bias.clone());
                let y = t.add_bias(x, b);
                t.add(y, x)
            },
            weights(vec![4, 3], 14),
        );
    }

    #[test]
    fn shared_param_accumulates() {
        let x = Tensor::row(vec![2.0, -3.0]);
        let mut t = Tape::new();
        let a = t.param(0, &x);
        let b = t.param(0, &x);
        assert_eq!(a, b);
        let y = t.add(a, b);
        let g = t.backward(&[(y, Tensor::row(vec![1.0, 1.0]))]);
        assert_eq!(g.param(0).unwrap().data, vec![2.0, 2.0]);
    }

    #[test]
    fn conv_output_shape() {
        let mut t = Tape::new();
        let x = t.input(Tensor::zeros(vec![3, 64, 64]));
        let w = t.input(Tensor::zeros(vec![4, 3, 3, 3]));
        let b = t.input(Tensor::zeros(vec![4]));
        let y = t.conv2d(x, w, b, 2, 1);
        assert_eq!(t.shape(y), &[4, 32, 32]);
    }
}
