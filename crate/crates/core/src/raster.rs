//! Bird's-eye-view rasterization of agent-frame scenes.
//!
//! Image axes: row 0 is the far-forward edge and column 0 the far-left edge,
//! so the target looks "up" the image. Polygons are filled by scanline with
//! pixel-center sampling; a pixel whose center lies exactly on an edge counts
//! as inside. Within one layer, kinds are painted in list order and the last
//! writer wins per pixel.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{oriented_box, point_segment_distance, Vec2};
use crate::scenegen::Scene;

/// Lanes thinner than a pixel are still drawn connected.
const MIN_STROKE_HALF_PX: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Drivable,
    Lane,
    PedCrossing,
    Walkway,
    Agents,
}

impl LayerKind {
    pub const ALL: [LayerKind; 5] = [
        LayerKind::Drivable,
        LayerKind::Lane,
        LayerKind::PedCrossing,
        LayerKind::Walkway,
        LayerKind::Agents,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Drivable => "drivable",
            LayerKind::Lane => "lane",
            LayerKind::PedCrossing => "ped_crossing",
            LayerKind::Walkway => "walkway",
            LayerKind::Agents => "agents",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        LayerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown layer kind {s:?}")))
    }
}

/// An ordered, duplicate-free list of kinds painted into one 3-channel grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LayerSpec {
    kinds: Vec<LayerKind>,
}

impl LayerSpec {
    pub fn new(kinds: Vec<LayerKind>) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::Argument("layer spec needs at least one kind".into()));
        }
        for (i, k) in kinds.iter().enumerate() {
            if kinds[..i].contains(k) {
                return Err(Error::Argument(format!("duplicate layer kind {}", k.name())));
            }
        }
        Ok(LayerSpec { kinds })
    }

    /// Parses `"drivable+lane"` style names.
    pub fn parse(s: &str) -> Result<Self> {
        LayerSpec::new(s.split('+').map(LayerKind::parse).collect::<Result<_>>()?)
    }

    pub fn kinds(&self) -> &[LayerKind] {
        &self.kinds
    }

    /// Layer codebook used by the layer ablation:
    /// 1 = drivable+lane, 2 = agents+lane, 3 = drivable, 4 = agents.
    /// Agents are painted after lanes so they cover them.
    pub fn codebook(index: usize) -> Result<Self> {
        use LayerKind::*;
        let kinds = match index {
            1 => vec![Drivable, Lane],
            2 => vec![Lane, Agents],
            3 => vec![Drivable],
            4 => vec![Agents],
            other => {
                return Err(Error::Argument(format!(
                    "layer codebook index {other} not in 1..=4"
                )))
            }
        };
        LayerSpec::new(kinds)
    }

    pub fn from_codebook(indices: &[usize]) -> Result<Vec<Self>> {
        if indices.is_empty() {
            return Err(Error::Argument("layer subset is empty".into()));
        }
        indices.iter().map(|&i| LayerSpec::codebook(i)).collect()
    }

    pub fn default_specs() -> Vec<Self> {
        LayerSpec::from_codebook(&[1, 2, 3, 4]).expect("codebook is valid")
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.kinds.iter().map(|k| k.name()).collect();
        f.write_str(&names.join("+"))
    }
}

impl TryFrom<String> for LayerSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        LayerSpec::parse(&s)
    }
}

impl From<LayerSpec> for String {
    fn from(s: LayerSpec) -> String {
        s.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColorTable {
    pub drivable: [f32; 3],
    pub lane: [f32; 3],
    pub ped_crossing: [f32; 3],
    pub walkway: [f32; 3],
    pub agents: [f32; 3],
}

impl Default for ColorTable {
    fn default() -> Self {
        ColorTable {
            drivable: [0.65, 0.81, 0.89],
            lane: [0.95, 0.95, 0.35],
            ped_crossing: [0.79, 0.70, 0.84],
            walkway: [0.12, 0.47, 0.71],
            agents: [1.0, 0.2, 0.2],
        }
    }
}

impl ColorTable {
    pub fn get(&self, kind: LayerKind) -> [f32; 3] {
        match kind {
            LayerKind::Drivable => self.drivable,
            LayerKind::Lane => self.lane,
            LayerKind::PedCrossing => self.ped_crossing,
            LayerKind::Walkway => self.walkway,
            LayerKind::Agents => self.agents,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RasterConfig {
    /// Side of the square image in pixels.
    pub size_px: usize,
    /// Side of the square window in meters.
    pub extent_m: f64,
    /// Target position in the image as (column, row) fractions of the side.
    pub target_offset: [f64; 2],
    pub colors: ColorTable,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            size_px: 64,
            extent_m: 100.0,
            target_offset: [0.5, 0.8],
            colors: ColorTable::default(),
        }
    }
}

impl RasterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size_px < 8 {
            return Err(Error::Config(format!("size_px {} < 8", self.size_px)));
        }
        let mpp = self.extent_m / self.size_px as f64;
        if !(self.extent_m > 0.0 && mpp.is_finite() && mpp > 0.0) {
            return Err(Error::Config(format!("invalid extent_m {}", self.extent_m)));
        }
        if !self.target_offset.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("target_offset must be finite".into()));
        }
        let colors = LayerKind::ALL.map(|k| self.colors.get(k));
        if colors.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config("colors must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn frame(&self) -> PixelFrame {
        PixelFrame {
            size: self.size_px,
            meters_per_pixel: self.extent_m / self.size_px as f64,
            origin_col: self.target_offset[0] * self.size_px as f64,
            origin_row: self.target_offset[1] * self.size_px as f64,
        }
    }
}

/// Affine map between agent-frame meters and continuous pixel coordinates.
/// Pixel `(row, col)` covers `[col, col+1) × [row, row+1)` in `(u, v)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelFrame {
    pub size: usize,
    pub meters_per_pixel: f64,
    pub origin_col: f64,
    pub origin_row: f64,
}

impl PixelFrame {
    /// Continuous `(u, v)` = (column, row) coordinates of a world point.
    pub fn to_pixel(&self, p: Vec2) -> (f64, f64) {
        (
            self.origin_col - p.y / self.meters_per_pixel,
            self.origin_row - p.x / self.meters_per_pixel,
        )
    }

    pub fn pixel_center(&self, row: usize, col: usize) -> Vec2 {
        Vec2::new(
            (self.origin_row - (row as f64 + 0.5)) * self.meters_per_pixel,
            (self.origin_col - (col as f64 + 0.5)) * self.meters_per_pixel,
        )
    }

    /// The pixel containing `p`, or `None` outside the window.
    pub fn pixel_of(&self, p: Vec2) -> Option<(usize, usize)> {
        let (u, v) = self.to_pixel(p);
        let (c, r) = (u.floor(), v.floor());
        let n = self.size as f64;
        if c >= 0.0 && r >= 0.0 && c < n && r < n {
            Some((r as usize, c as usize))
        } else {
            None
        }
    }
}

/// A `size × size × 3` image stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    size: usize,
    data: Vec<f32>,
}

impl Grid {
    pub fn zeros(size: usize) -> Self {
        Grid {
            size,
            data: vec![0.0; 3 * size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Channel-major values: index `c·size² + row·size + col`.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let plane = self.size * self.size;
        let i = row * self.size + col;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    fn set(&mut self, row: usize, col: usize, color: [f32; 3]) {
        let plane = self.size * self.size;
        let i = row * self.size + col;
        self.data[i] = color[0];
        self.data[plane + i] = color[1];
        self.data[2 * plane + i] = color[2];
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub frame: PixelFrame,
    cells: Vec<bool>,
}

impl Mask {
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.frame.size + col]
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    /// Nearest-pixel lookup; points outside the window are not drivable.
    pub fn contains(&self, p: Vec2) -> bool {
        self.frame
            .pixel_of(p)
            .is_some_and(|(r, c)| self.get(r, c))
    }

    /// A mask built directly from cell values, mainly for tests.
    pub fn from_cells(frame: PixelFrame, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != frame.size * frame.size {
            return Err(Error::Argument(format!(
                "mask needs {} cells, got {}",
                frame.size * frame.size,
                cells.len()
            )));
        }
        Ok(Mask { frame, cells })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RasterStack {
    pub layers: Vec<(LayerSpec, Grid)>,
}

impl RasterStack {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Calls `paint(row, col)` for every pixel whose center is inside `poly` or on its boundary.
fn fill_polygon(frame: &PixelFrame, poly: &[Vec2], mut paint: impl FnMut(usize, usize)) {
    if poly.len() < 3 {
        return;
    }
    let pts: Vec<(f64, f64)> = poly.iter().map(|&p| frame.to_pixel(p)).collect();
    let (vmin, vmax) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    let n = frame.size;
    let row_lo = (vmin - 0.5).ceil().max(0.0) as usize;
    let row_hi = (vmax - 0.5).floor();
    if row_hi < 0.0 {
        return;
    }
    let row_hi = (row_hi as usize).min(n.saturating_sub(1));
    let mut paint_span = |row: usize, u0: f64, u1: f64| {
        let c0 = (u0 - 0.5).ceil().max(0.0);
        let c1 = (u1 - 0.5).floor().min(n as f64 - 1.0);
        if c1 < c0 {
            return;
        }
        for col in c0 as usize..=c1 as usize {
            paint(row, col);
        }
    };
    let mut xs = Vec::new();
    for row in row_lo..=row_hi {
        let v = row as f64 + 0.5;
        xs.clear();
        for i in 0..pts.len() {
            let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
            if (a.1 <= v && b.1 > v) || (b.1 <= v && a.1 > v) {
                xs.push(a.0 + (v - a.1) * (b.0 - a.0) / (b.1 - a.1));
            }
            // Boundary points are inside.
            if a.1 == v && b.1 == v {
                paint_span(row, a.0.min(b.0), a.0.max(b.0));
            } else if a.1 == v {
                paint_span(row, a.0, a.0);
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            paint_span(row, pair[0], pair[1]);
        }
    }
}

fn stroke_polyline(frame: &PixelFrame, points: &[Vec2], width_m: f64, mut paint: impl FnMut(usize, usize)) {
    let half = (0.5 * width_m / frame.meters_per_pixel).max(MIN_STROKE_HALF_PX);
    let n = frame.size as f64;
    for w in points.windows(2) {
        let (au, av) = frame.to_pixel(w[0]);
        let (bu, bv) = frame.to_pixel(w[1]);
        let (a, b) = (Vec2::new(au, av), Vec2::new(bu, bv));
        let c0 = (au.min(bu) - half - 0.5).ceil().max(0.0);
        let c1 = (au.max(bu) + half - 0.5).floor().min(n - 1.0);
        let r0 = (av.min(bv) - half - 0.5).ceil().max(0.0);
        let r1 = (av.max(bv) + half - 0.5).floor().min(n - 1.0);
        if c1 < c0 || r1 < r0 {
            continue;
        }
        for row in r0 as usize..=r1 as usize {
            for col in c0 as usize..=c1 as usize {
                let center = Vec2::new(col as f64 + 0.5, row as f64 + 0.5);
                if point_segment_distance(center, a, b) <= half {
                    paint(row, col);
                }
            }
        }
    }
}

fn paint_kind(grid: &mut Grid, frame: &PixelFrame, scene: &Scene, kind: LayerKind, color: [f32; 3]) {
    let mut set = |r: usize, c: usize| grid.set(r, c, color);
    match kind {
        LayerKind::Drivable => scene.drivable.iter().for_each(|p| fill_polygon(frame, p, &mut set)),
        LayerKind::PedCrossing => scene.ped_crossings.iter().for_each(|p| fill_polygon(frame, p, &mut set)),
        LayerKind::Walkway => scene.walkways.iter().for_each(|p| fill_polygon(frame, p, &mut set)),
        LayerKind::Lane => scene
            .lanes
            .iter()
            .for_each(|l| stroke_polyline(frame, &l.points, l.width, &mut set)),
        LayerKind::Agents => {
            for a in &scene.agents {
                let corners = oriented_box(a.position, a.heading, a.half_extent);
                fill_polygon(frame, &corners, &mut set);
            }
        }
    }
}

/// Paints the kinds of `spec` in order into a fresh grid.
pub fn rasterize_layer(scene: &Scene, spec: &LayerSpec, cfg: &RasterConfig) -> Result<Grid> {
    cfg.validate()?;
    if spec.kinds.is_empty() {
        return Err(Error::Argument("layer spec has no kinds".into()));
    }
    let frame = cfg.frame();
    let mut grid = Grid::zeros(cfg.size_px);
    for &kind in &spec.kinds {
        paint_kind(&mut grid, &frame, scene, kind, cfg.colors.get(kind));
    }
    Ok(grid)
}

pub fn build_stack(scene: &Scene, specs: &[LayerSpec], cfg: &RasterConfig) -> Result<RasterStack> {
    if specs.is_empty() {
        return Err(Error::Argument("no layer specs given".into()));
    }
    let layers = specs
        .iter()
        .map(|s| Ok((s.clone(), rasterize_layer(scene, s, cfg)?)))
        .collect::<Result<_>>()?;
    Ok(RasterStack { layers })
}

/// True where the pixel center lies inside (or on) any drivable polygon.
pub fn drivable_mask(scene: &Scene, cfg: &RasterConfig) -> Result<Mask> {
    cfg.validate()?;
    let frame = cfg.frame();
    let n = frame.size;
    let mut cells = vec![false; n * n];
    for poly in &scene.drivable {
        fill_polygon(&frame, poly, |r, c| cells[r * n + c] = true);
    }
    Ok(Mask { frame, cells })
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a binary P6 portable pixmap.
pub fn write_ppm(path: &Path, grid: &Grid) -> Result<()> {
    let n = grid.size;
    let mut bytes = Vec::with_capacity(3 * n * n);
    for r in 0..n {
        for c in 0..n {
            bytes.extend(grid.pixel(r, c).map(to_byte));
        }
    }
    write_p6(path, n, &bytes)
}

pub fn write_mask_ppm(path: &Path, mask: &Mask) -> Result<()> {
    let bytes: Vec<u8> = mask
        .cells
        .iter()
        .flat_map(|&on| [if on { 255 } else { 0 }; 3])
        .collect();
    write_p6(path, mask.frame.size, &bytes)
}

fn write_p6(path: &Path, n: usize, rgb: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write!(w, "P6\n{n} {n}\n255\n")
        .and_then(|_| w.write_all(rgb))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// `<sample_id>_<spec>.ppm`
pub fn ppm_file_name(sample_id: &str, spec: &LayerSpec) -> String {
    format!("{sample_id}_{spec}.ppm")
}
