//! The parallel-backbone network.
//!
//! One small convnet per raster layer turns its grid into a feature vector;
//! a per-backbone head concatenates the target's kinematics and projects,
//! through two fully connected layers, to K trajectories plus confidence
//! logits. All N·K hypotheses are then pooled into one token set, passed
//! through a self-attention block, and reduced to M output modes by
//! attention pooling onto M learned seed vectors.
//!
//! Trajectories inside the network are in units of `traj_scale` meters.

pub mod gradcheck;
pub mod tape;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::raster::{Grid, RasterStack};

pub use tape::{Activation, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub raster_size: usize,
    /// Output channels of each stride-2 conv block.
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub activation: Activation,
    /// Width of the first projection layer in each head.
    pub hidden: usize,
    /// N: number of parallel backbones (one per raster layer).
    pub backbones: usize,
    /// K: hypotheses per backbone.
    pub hypotheses: usize,
    /// M: fused output modes.
    pub modes: usize,
    /// T: trajectory points.
    pub horizon: usize,
    pub attention_width: usize,
    pub attention_heads: usize,
    /// Adds a learned per-backbone embedding to each hypothesis token.
    pub backbone_id_embedding: bool,
    pub traj_scale: f64,
    /// Multipliers applied to `[speed, accel, heading_rate]` before the heads.
    pub kinematics_scale: [f64; 3],
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            raster_size: 64,
            conv_channels: vec![4, 8, 8],
            kernel: 3,
            activation: Activation::Relu,
            hidden: 64,
            backbones: 4,
            hypotheses: 12,
            modes: 12,
            horizon: 12,
            attention_width: 32,
            attention_heads: 4,
            backbone_id_embedding: true,
            traj_scale: 10.0,
            kinematics_scale: [0.1, 0.5, 2.0],
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("raster_size", self.raster_size),
            ("kernel", self.kernel),
            ("hidden", self.hidden),
            ("backbones", self.backbones),
            ("hypotheses", self.hypotheses),
            ("modes", self.modes),
            ("horizon", self.horizon),
            ("attention_width", self.attention_width),
            ("attention_heads", self.attention_heads),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::Config("conv_channels must be nonempty and positive".into()));
        }
        if self.attention_width % self.attention_heads != 0 {
            return Err(Error::Config(format!(
                "attention_width {} not divisible by {} heads",
                self.attention_width, self.attention_heads
            )));
        }
        if self.raster_size >> self.conv_channels.len() == 0 {
            return Err(Error::Config(format!(
                "{} conv blocks shrink a {} px raster to nothing",
                self.conv_channels.len(),
                self.raster_size
            )));
        }
        if !(self.traj_scale > 0.0 && self.traj_scale.is_finite()) {
            return Err(Error::Config("traj_scale must be positive".into()));
        }
        if !self.kinematics_scale.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("kinematics_scale must be finite".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.conv_channels.last().expect("validated nonempty")
    }

    /// Width of one hypothesis row: T·2 coordinates plus one logit/confidence.
    fn token_in(&self) -> usize {
        2 * self.horizon + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
struct MhaIdx {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct FfIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct BranchIdx {
    convs: Vec<(usize, usize)>,
    head: FfIdx,
}

#[derive(Clone, Debug, PartialEq)]
struct FusionIdx {
    w_in: usize,
    b_in: usize,
    id_embed: Option<usize>,
    self_attn: MhaIdx,
    self_ff: FfIdx,
    seeds: usize,
    pool_attn: MhaIdx,
    pool_ff: FfIdx,
    w_out: usize,
    b_out: usize,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// Uniform in ±√(3 / fan_in).
    Weight { fan_in: usize },
    Zero,
    Uniform(f64),
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    branches: Vec<BranchIdx>,
    fusion: FusionIdx,
}

struct Registry {
    entries: Vec<(String, Vec<usize>, Init)>,
}

impl Registry {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.entries.push((name, shape, init));
        self.entries.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        let w = self.add(format!("{prefix}.w"), vec![fan_in, fan_out], Init::Weight { fan_in });
        let b = self.add(format!("{prefix}.b"), vec![fan_out], Init::Zero);
        (w, b)
    }

    fn ff(&mut self, prefix: &str, d_in: usize, d_hidden: usize, d_out: usize) -> FfIdx {
        let (w1, b1) = self.linear(&format!("{prefix}.fc1"), d_in, d_hidden);
        let (w2, b2) = self.linear(&format!("{prefix}.fc2"), d_hidden, d_out);
        FfIdx { w1, b1, w2, b2 }
    }

    fn mha(&mut self, prefix: &str, d: usize) -> MhaIdx {
        let mut proj = |n: &str| self.add(format!("{prefix}.{n}"), vec![d, d], Init::Weight { fan_in: d });
        let (wq, wk, wv) = (proj("wq"), proj("wk"), proj("wv"));
        let (wo, bo) = self.linear(&format!("{prefix}.out"), d, d);
        MhaIdx { wq, wk, wv, wo, bo }
    }
}

fn build_layout(arch: &ArchConfig) -> (Layout, Vec<(String, Vec<usize>, Init)>) {
    let mut reg = Registry { entries: Vec::new() };
    let k = arch.kernel;
    let branches = (0..arch.backbones)
        .map(|b| {
            let mut in_ch = 3;
            let convs = arch
                .conv_channels
                .iter()
                .enumerate()
                .map(|(l, &out_ch)| {
                    let fan_in = in_ch * k * k;
                    let w = reg.add(
                        format!("backbone{b}.conv{l}.w"),
                        vec![out_ch, in_ch, k, k],
                        Init::Weight { fan_in },
                    );
                    let bias = reg.add(format!("backbone{b}.conv{l}.b"), vec![out_ch], Init::Zero);
                    in_ch = out_ch;
                    (w, bias)
                })
                .collect();
            let head = reg.ff(
                &format!("head{b}"),
                arch.feature_dim() + 3,
                arch.hidden,
                arch.hypotheses * arch.token_in(),
            );
            BranchIdx { convs, head }
        })
        .collect();
    let d = arch.attention_width;
    let (w_in, b_in) = reg.linear("fusion.embed", arch.token_in(), d);
    let id_embed = arch
        .backbone_id_embedding
        .then(|| reg.add("fusion.backbone_id".into(), vec![arch.backbones, d], Init::Uniform(0.1)));
    let self_attn = reg.mha("fusion.sab.attn", d);
    let self_ff = reg.ff("fusion.sab.ff", d, 2 * d, d);
    let seeds = reg.add("fusion.pma.seeds".into(), vec![arch.modes, d], Init::Uniform(0.5));
    let pool_attn = reg.mha("fusion.pma.attn", d);
    let pool_ff = reg.ff("fusion.pma.ff", d, 2 * d, d);
    let (w_out, b_out) = reg.linear("fusion.decode", d, arch.token_in());
    let fusion = FusionIdx {
        w_in,
        b_in,
        id_embed,
        self_attn,
        self_ff,
        seeds,
        pool_attn,
        pool_ff,
        w_out,
        b_out,
    };
    (Layout { branches, fusion }, reg.entries)
}

/// All learnable tensors plus the architecture that gives them meaning.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    layout: Layout,
}

impl ModelParams {
    /// Small-uniform weights, zero biases, drawn from a ChaCha stream seeded by `seed`.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let (layout, entries) = build_layout(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, shape, init) in entries {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zero => vec![0.0; n],
                Init::Weight { fan_in } => {
                    let a = (3.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-a..a)).collect()
                }
                Init::Uniform(a) => (0..n).map(|_| rng.random_range(-a..a)).collect(),
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data));
        }
        Ok(ModelParams {
            arch: arch.clone(),
            names,
            tensors,
            layout,
        })
    }

    /// Rebuilds parameters from named tensors, checking them against `arch`.
    pub fn from_tensors(arch: &ArchConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        arch.validate()?;
        let (layout, entries) = build_layout(arch);
        if entries.len() != named.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                entries.len(),
                named.len()
            )));
        }
        for ((name, shape, _), (got_name, t)) in entries.iter().zip(&named) {
            if name != got_name || *shape != t.shape {
                return Err(Error::Config(format!(
                    "parameter {got_name} {:?} does not match {name} {shape:?}",
                    t.shape
                )));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(ModelParams {
            arch: arch.clone(),
            names,
            tensors,
            layout,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.num_scalars(), "flat parameter length");
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| &t.data)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    fn param(&self, tape: &mut Tape, index: usize) -> Var {
        tape.param(index, &self.tensors[index])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// T points in meters, agent frame.
    pub trajectory: Vec<Vec2>,
    pub confidence_logit: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisSet {
    pub hypotheses: Vec<Hypothesis>,
    /// Softmax of the logits.
    pub confidences: Vec<f64>,
}

/// Fused output: M trajectories with confidences summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub trajectories: Vec<Vec<Vec2>>,
    pub confidences: Vec<f64>,
}

impl Prediction {
    pub fn modes(&self) -> usize {
        self.trajectories.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.trajectories.is_empty() || self.trajectories.len() != self.confidences.len() {
            return Err(Error::Argument(format!(
                "{} trajectories with {} confidences",
                self.trajectories.len(),
                self.confidences.len()
            )));
        }
        let t = self.trajectories[0].len();
        if self.trajectories.iter().any(|tr| tr.len() != t) {
            return Err(Error::Argument("trajectories of unequal length".into()));
        }
        Ok(())
    }
}

/// One pooled hypothesis: which backbone produced it, its path, and its confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledHypothesis {
    pub backbone: usize,
    pub trajectory: Vec<Vec2>,
    pub confidence: f64,
}

fn to_points(row: &[f64], scale: f64) -> Vec<Vec2> {
    row.chunks(2).map(|p| Vec2::new(p[0] * scale, p[1] * scale)).collect()
}

pub fn grid_tensor(grid: &Grid) -> Tensor {
    let n = grid.size();
    Tensor::new(vec![3, n, n], grid.data().iter().map(|&v| v as f64).collect())
}

fn kinematics_tensor(arch: &ArchConfig, kin: [f64; 3]) -> Tensor {
    Tensor::row((0..3).map(|i| kin[i] * arch.kinematics_scale[i]).collect())
}

fn backbone_graph(p: &ModelParams, tape: &mut Tape, branch: usize, x: Var) -> Var {
    let arch = &p.arch;
    let mut h = x;
    for &(w, b) in &p.layout.branches[branch].convs {
        let (wv, bv) = (p.param(tape, w), p.param(tape, b));
        let y = tape.conv2d(h, wv, bv, 2, arch.kernel / 2);
        h = tape.act(y, arch.activation);
    }
    tape.global_avg_pool(h)
}

fn ff_graph(p: &ModelParams, tape: &mut Tape, idx: &FfIdx, x: Var) -> Var {
    let (w1, b1, w2, b2) = (
        p.param(tape, idx.w1),
        p.param(tape, idx.b1),
        p.param(tape, idx.w2),
        p.param(tape, idx.b2),
    );
    let h = tape.matmul(x, w1);
    let h = tape.add_bias(h, b1);
    let h = tape.act(h, p.arch.activation);
    let y = tape.matmul(h, w2);
    tape.add_bias(y, b2)
}

struct HeadVars {
    /// `[K, 2T]` in trajectory units.
    traj: Var,
    /// `[1, K]`
    logits: Var,
    /// `[K, 1]`
    conf: Var,
}

fn head_graph(p: &ModelParams, tape: &mut Tape, branch: usize, feature: Var, kin: Var) -> HeadVars {
    let arch = &p.arch;
    let (k, t2) = (arch.hypotheses, 2 * arch.horizon);
    let x = tape.concat_cols(&[feature, kin]);
    let out = ff_graph(p, tape, &p.layout.branches[branch].head, x);
    let rows = tape.reshape(out, vec![k, t2 + 1]);
    let traj = tape.slice_cols(rows, 0, t2);
    let logit_col = tape.slice_cols(rows, t2, 1);
    let logits = tape.reshape(logit_col, vec![1, k]);
    let conf_row = tape.softmax_rows(logits);
    let conf = tape.reshape(conf_row, vec![k, 1]);
    HeadVars { traj, logits, conf }
}

fn mha_graph(p: &ModelParams, tape: &mut Tape, idx: &MhaIdx, q_in: Var, kv_in: Var) -> Var {
    let d = p.arch.attention_width;
    let heads = p.arch.attention_heads;
    let dh = d / heads;
    let (wq, wk, wv) = (p.param(tape, idx.wq), p.param(tape, idx.wk), p.param(tape, idx.wv));
    let q = tape.matmul(q_in, wq);
    let k = tape.matmul(kv_in, wk);
    let v = tape.matmul(kv_in, wv);
    let outs: Vec<Var> = (0..heads)
        .map(|h| {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let s = tape.matmul_bt(qh, kh);
            let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
            let a = tape.softmax_rows(s);
            tape.matmul(a, vh)
        })
        .collect();
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
    let (wo, bo) = (p.param(tape, idx.wo), p.param(tape, idx.bo));
    let o = tape.matmul(cat, wo);
    tape.add_bias(o, bo)
}

struct FusedVars {
    /// `[M, 2T]` in meters.
    traj_m: Var,
    /// `[1, M]`
    logits: Var,
    /// `[1, M]`
    conf: Var,
}

/// `tokens`: `[n, 2T+1]` rows of (trajectory units, confidence); `ids`: source backbone per row.
fn fusion_graph(p: &ModelParams, tape: &mut Tape, tokens: Var, ids: &[usize]) -> FusedVars {
    let arch = &p.arch;
    let f = &p.layout.fusion;
    let t2 = 2 * arch.horizon;
    let (w_in, b_in) = (p.param(tape, f.w_in), p.param(tape, f.b_in));
    let e = tape.matmul(tokens, w_in);
    let mut e = tape.add_bias(e, b_in);
    if let Some(id_idx) = f.id_embed {
        let table = p.param(tape, id_idx);
        let emb = tape.gather_rows(table, ids);
        e = tape.add(e, emb);
    }
    // Set attention block: H = X + MHA(X, X); H + FF(H).
    let a = mha_graph(p, tape, &f.self_attn, e, e);
    let h = tape.add(e, a);
    let ff = ff_graph(p, tape, &f.self_ff, h);
    let h = tape.add(h, ff);
    // Pooling onto M seeds.
    let seeds = p.param(tape, f.seeds);
    let a = mha_graph(p, tape, &f.pool_attn, seeds, h);
    let z = tape.add(seeds, a);
    let ff = ff_graph(p, tape, &f.pool_ff, z);
    let z = tape.add(z, ff);
    let (w_out, b_out) = (p.param(tape, f.w_out), p.param(tape, f.b_out));
    let o = tape.matmul(z, w_out);
    let o = tape.add_bias(o, b_out);
    let traj = tape.slice_cols(o, 0, t2);
    let traj_m = tape.scale(traj, arch.traj_scale);
    let logit_col = tape.slice_cols(o, t2, 1);
    let logits = tape.reshape(logit_col, vec![1, arch.modes]);
    let conf = tape.softmax_rows(logits);
    FusedVars { traj_m, logits, conf }
}

fn check_grid(arch: &ArchConfig, grid: &Grid) -> Result<()> {
    if grid.size() != arch.raster_size {
        return Err(Error::Config(format!(
            "grid is {} px but the backbone expects {} px",
            grid.size(),
            arch.raster_size
        )));
    }
    Ok(())
}

fn check_branch(arch: &ArchConfig, branch: usize) -> Result<()> {
    if branch >= arch.backbones {
        return Err(Error::Argument(format!(
            "backbone {branch} out of range for {} backbones",
            arch.backbones
        )));
    }
    Ok(())
}

/// Feature vector of backbone `branch` for one grid.
pub fn backbone_forward(grid: &Grid, params: &ModelParams, branch: usize) -> Result<Vec<f64>> {
    check_grid(&params.arch, grid)?;
    check_branch(&params.arch, branch)?;
    if grid.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("grid contains non-finite values".into()));
    }
    let mut tape = Tape::new();
    let x = tape.input(grid_tensor(grid));
    let f = backbone_graph(params, &mut tape, branch, x);
    Ok(tape.value(f).data.clone())
}

fn hypothesis_set(tape: &Tape, head: &HeadVars, scale: f64) -> HypothesisSet {
    let traj = tape.value(head.traj);
    let logits = &tape.value(head.logits).data;
    let hypotheses = traj
        .data
        .chunks(traj.cols())
        .zip(logits)
        .map(|(row, &l)| Hypothesis {
            trajectory: to_points(row, scale),
            confidence_logit: l,
        })
        .collect();
    HypothesisSet {
        hypotheses,
        confidences: tape.value(head.conf).data.clone(),
    }
}

/// K hypotheses from one backbone's feature vector and the raw kinematics.
pub fn head_forward(
    feature: &[f64],
    kinematics: [f64; 3],
    params: &ModelParams,
    branch: usize,
) -> Result<HypothesisSet> {
    let arch = &params.arch;
    check_branch(arch, branch)?;
    if feature.len() != arch.feature_dim() {
        return Err(Error::Config(format!(
            "feature has {} entries, head expects {}",
            feature.len(),
            arch.feature_dim()
        )));
    }
    if feature.iter().chain(&kinematics).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite head input".into()));
    }
    let mut tape = Tape::new();
    let f = tape.input(Tensor::row(feature.to_vec()));
    let k = tape.input(kinematics_tensor(arch, kinematics));
    let head = head_graph(params, &mut tape, branch, f, k);
    Ok(hypothesis_set(&tape, &head, arch.traj_scale))
}

/// Flattens per-backbone sets into one pool, tagging each hypothesis with its source.
pub fn pool_hypotheses(sets: &[HypothesisSet]) -> Vec<PooledHypothesis> {
    sets.iter()
        .enumerate()
        .flat_map(|(b, set)| {
            set.hypotheses
                .iter()
                .zip(&set.confidences)
                .map(move |(h, &c)| PooledHypothesis {
                    backbone: b,
                    trajectory: h.trajectory.clone(),
                    confidence: c,
                })
        })
        .collect()
}

/// Fuses a pooled hypothesis set into M modes. Invariant to the order of `pool`.
pub fn fuse_pooled(pool: &[PooledHypothesis], params: &ModelParams) -> Result<Prediction> {
    let arch = &params.arch;
    if pool.is_empty() {
        return Err(Error::Argument("no hypotheses to fuse".into()));
    }
    let mut data = Vec::with_capacity(pool.len() * arch.token_in());
    let mut ids = Vec::with_capacity(pool.len());
    for h in pool {
        if h.trajectory.len() != arch.horizon {
            return Err(Error::Config(format!(
                "hypothesis has {} points, fusion expects {}",
                h.trajectory.len(),
                arch.horizon
            )));
        }
        if h.backbone >= arch.backbones {
            return Err(Error::Config(format!("unknown backbone id {}", h.backbone)));
        }
        data.extend(h.trajectory.iter().flat_map(|p| [p.x / arch.traj_scale, p.y / arch.traj_scale]));
        data.push(h.confidence);
        ids.push(h.backbone);
    }
    let mut tape = Tape::new();
    let tokens = tape.input(Tensor::new(vec![pool.len(), arch.token_in()], data));
    let fused = fusion_graph(params, &mut tape, tokens, &ids);
    Ok(fused_prediction(&tape, &fused))
}

pub fn fuse_hypotheses(sets: &[HypothesisSet], params: &ModelParams) -> Result<Prediction> {
    if sets.is_empty() {
        return Err(Error::Argument("need at least one hypothesis set".into()));
    }
    let t = sets[0].hypotheses.first().map(|h| h.trajectory.len());
    if sets
        .iter()
        .flat_map(|s| &s.hypotheses)
        .any(|h| Some(h.trajectory.len()) != t)
    {
        return Err(Error::Config("hypothesis sets disagree on horizon T".into()));
    }
    fuse_pooled(&pool_hypotheses(sets), params)
}

fn fused_prediction(tape: &Tape, fused: &FusedVars) -> Prediction {
    let traj = tape.value(fused.traj_m);
    Prediction {
        trajectories: traj.data.chunks(traj.cols()).map(|r| to_points(r, 1.0)).collect(),
        confidences: tape.value(fused.conf).data.clone(),
    }
}

/// A recorded end-to-end forward pass, kept for backpropagation.
pub struct ForwardPass {
    tape: Tape,
    heads: Vec<HeadVars>,
    fused: FusedVars,
    scale: f64,
}

impl ForwardPass {
    pub fn prediction(&self) -> Prediction {
        fused_prediction(&self.tape, &self.fused)
    }

    pub fn fused_logits(&self) -> &[f64] {
        &self.tape.value(self.fused.logits).data
    }

    pub fn hypothesis_sets(&self) -> Vec<HypothesisSet> {
        self.heads
            .iter()
            .map(|h| hypothesis_set(&self.tape, h, self.scale))
            .collect()
    }

    /// Parameter gradients given adjoints of the fused trajectories (meters)
    /// and fused logits. Parameters that took no part get zero gradients.
    pub fn backward(&self, params: &ModelParams, d_traj: &[Vec<Vec2>], d_logits: &[f64]) -> Vec<Tensor> {
        let m = d_traj.len();
        let flat: Vec<f64> = d_traj.iter().flatten().flat_map(|p| [p.x, p.y]).collect();
        let t2 = flat.len() / m.max(1);
        let grads = self.tape.backward(&[
            (self.fused.traj_m, Tensor::new(vec![m, t2], flat)),
            (self.fused.logits, Tensor::row(d_logits.to_vec())),
        ]);
        params
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| {
                grads
                    .param(i)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape.clone()))
            })
            .collect()
    }
}

/// Runs the whole network on pre-converted layer tensors (`[3, S, S]` each).
pub fn forward_pass(params: &ModelParams, layers: &[Tensor], kinematics: [f64; 3]) -> Result<ForwardPass> {
    let arch = &params.arch;
    if layers.len() != arch.backbones {
        return Err(Error::Config(format!(
            "{} raster layers for {} backbones",
            layers.len(),
            arch.backbones
        )));
    }
    let mut tape = Tape::new();
    let kin = tape.input(kinematics_tensor(arch, kinematics));
    let mut heads = Vec::with_capacity(layers.len());
    for (b, layer) in layers.iter().enumerate() {
        if layer.shape != [3, arch.raster_size, arch.raster_size] {
            return Err(Error::Config(format!(
                "layer {b} has shape {:?}, expected [3, {}, {}]",
                layer.shape, arch.raster_size, arch.raster_size
            )));
        }
        let x = tape.input(layer.clone());
        let feat = backbone_graph(params, &mut tape, b, x);
        heads.push(head_graph(params, &mut tape, b, feat, kin));
    }
    let token_sets: Vec<Var> = heads
        .iter()
        .map(|h| tape.concat_cols(&[h.traj, h.conf]))
        .collect();
    let tokens = tape.concat_rows(&token_sets);
    let ids: Vec<usize> = (0..arch.backbones)
        .flat_map(|b| std::iter::repeat_n(b, arch.hypotheses))
        .collect();
    let fused = fusion_graph(params, &mut tape, tokens, &ids);
    Ok(ForwardPass {
        tape,
        heads,
        fused,
        scale: arch.traj_scale,
    })
}

pub fn stack_tensors(stack: &RasterStack) -> Vec<Tensor> {
    stack.layers.iter().map(|(_, g)| grid_tensor(g)).collect()
}

/// Fused prediction plus each backbone's own hypothesis set.
pub fn model_forward(
    stack: &RasterStack,
    kinematics: [f64; 3],
    params: &ModelParams,
) -> Result<(Prediction, Vec<HypothesisSet>)> {
    for (_, g) in &stack.layers {
        check_grid(&params.arch, g)?;
    }
    let pass = forward_pass(params, &stack_tensors(stack), kinematics)?;
    Ok((pass.prediction(), pass.hypothesis_sets()))
}
