//! Vector scenes, randomized synthetic road scenes, and the agent-frame transform.
//!
//! Every scene is built in a local road frame where the target starts at the
//! origin heading along +x, then moved by a random rigid transform into a
//! "world" frame, and finally brought back with [`to_agent_frame`]. The
//! agent frame convention is +x forward, +y left.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{signed_area2, wrap_angle, Rigid, Vec2};

/// Version tag written in every dataset record.
pub const SAMPLE_FORMAT: &str = "trajlab-sample-v1";

pub type Polygon = Vec<Vec2>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub points: Vec<Vec2>,
    /// Painted stroke width in meters.
    pub width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub position: Vec2,
    /// Radians in (−π, π].
    pub heading: f64,
    /// Box half-length and half-width in meters.
    pub half_extent: Vec2,
    pub speed: f64,
    pub accel: f64,
    pub heading_rate: f64,
    pub is_target: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub drivable: Vec<Polygon>,
    pub lanes: Vec<Lane>,
    pub ped_crossings: Vec<Polygon>,
    pub walkways: Vec<Polygon>,
    pub agents: Vec<AgentState>,
}

impl Scene {
    pub fn target_index(&self) -> Option<usize> {
        self.agents.iter().position(|a| a.is_target)
    }

    pub fn target(&self) -> Option<&AgentState> {
        self.agents.iter().find(|a| a.is_target)
    }

    /// Checks the structural invariants: polygons with ≥3 vertices and nonzero
    /// area, lanes with ≥2 vertices, positive box extents, exactly one target.
    pub fn validate(&self) -> Result<()> {
        let polys = self
            .drivable
            .iter()
            .chain(&self.ped_crossings)
            .chain(&self.walkways);
        for poly in polys {
            if poly.len() < 3 {
                return Err(Error::Config(format!(
                    "polygon with {} vertices",
                    poly.len()
                )));
            }
            if signed_area2(poly) == 0.0 {
                return Err(Error::Config("polygon with zero area".into()));
            }
        }
        if let Some(lane) = self.lanes.iter().find(|l| l.points.len() < 2) {
            return Err(Error::Config(format!(
                "lane with {} vertices",
                lane.points.len()
            )));
        }
        for a in &self.agents {
            if !(a.half_extent.x > 0.0 && a.half_extent.y > 0.0) {
                return Err(Error::Config("agent half extent must be positive".into()));
            }
            if !(a.heading > -PI && a.heading <= PI) {
                return Err(Error::Config(format!("agent heading {} out of range", a.heading)));
            }
        }
        match self.agents.iter().filter(|a| a.is_target).count() {
            1 => Ok(()),
            n => Err(Error::Config(format!("{n} agents flagged as target"))),
        }
    }

    fn map_points(&self, t: &Rigid) -> Scene {
        let poly = |p: &Polygon| p.iter().map(|&v| t.apply(v)).collect::<Polygon>();
        Scene {
            drivable: self.drivable.iter().map(poly).collect(),
            lanes: self
                .lanes
                .iter()
                .map(|l| Lane {
                    points: l.points.iter().map(|&v| t.apply(v)).collect(),
                    width: l.width,
                })
                .collect(),
            ped_crossings: self.ped_crossings.iter().map(poly).collect(),
            walkways: self.walkways.iter().map(poly).collect(),
            agents: self
                .agents
                .iter()
                .map(|a| AgentState {
                    position: t.apply(a.position),
                    heading: wrap_angle(a.heading + t.rotation),
                    ..a.clone()
                })
                .collect(),
        }
    }
}

/// Future positions of the target in its own frame, one per time step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroundTruth {
    pub points: Vec<Vec2>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn final_point(&self) -> Option<Vec2> {
        self.points.last().copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneFamily {
    Straight,
    Curve,
    TJunction,
    FourWay,
}

impl SceneFamily {
    pub const ALL: [SceneFamily; 4] = [
        SceneFamily::Straight,
        SceneFamily::Curve,
        SceneFamily::TJunction,
        SceneFamily::FourWay,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SceneFamily::Straight => "straight",
            SceneFamily::Curve => "curve",
            SceneFamily::TJunction => "t_junction",
            SceneFamily::FourWay => "four_way",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "straight" => Ok(SceneFamily::Straight),
            "curve" => Ok(SceneFamily::Curve),
            "t" | "t_junction" | "t-junction" => Ok(SceneFamily::TJunction),
            "4way" | "four_way" | "four-way" => Ok(SceneFamily::FourWay),
            other => Err(Error::Argument(format!("unknown scene family {other:?}"))),
        }
    }
}

/// One training/evaluation record: a scene in the target's frame, the
/// target's kinematics and its future.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    pub rng_seed: u64,
    pub family: SceneFamily,
    /// `[speed (m/s), accel (m/s²), heading_rate (rad/s)]`
    pub kinematics: [f64; 3],
    pub gt: GroundTruth,
    pub scene: Scene,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamilyWeights {
    pub straight: f64,
    pub curve: f64,
    pub t_junction: f64,
    pub four_way: f64,
}

impl Default for FamilyWeights {
    fn default() -> Self {
        FamilyWeights {
            straight: 1.0,
            curve: 1.0,
            t_junction: 1.0,
            four_way: 1.0,
        }
    }
}

impl FamilyWeights {
    pub fn only(family: SceneFamily) -> Self {
        let mut w = FamilyWeights {
            straight: 0.0,
            curve: 0.0,
            t_junction: 0.0,
            four_way: 0.0,
        };
        *w.get_mut(family) = 1.0;
        w
    }

    pub fn get(&self, family: SceneFamily) -> f64 {
        match family {
            SceneFamily::Straight => self.straight,
            SceneFamily::Curve => self.curve,
            SceneFamily::TJunction => self.t_junction,
            SceneFamily::FourWay => self.four_way,
        }
    }

    pub fn get_mut(&mut self, family: SceneFamily) -> &mut f64 {
        match family {
            SceneFamily::Straight => &mut self.straight,
            SceneFamily::Curve => &mut self.curve,
            SceneFamily::TJunction => &mut self.t_junction,
            SceneFamily::FourWay => &mut self.four_way,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenParams {
    pub family_weights: FamilyWeights,
    /// Inclusive range of agents per scene, target included.
    pub min_agents: usize,
    pub max_agents: usize,
    pub horizon_s: f64,
    pub frequency_hz: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Bound on |longitudinal acceleration|.
    pub accel_max: f64,
    pub lane_width: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            family_weights: FamilyWeights::default(),
            min_agents: 1,
            max_agents: 6,
            horizon_s: 6.0,
            frequency_hz: 2.0,
            speed_min: 4.0,
            speed_max: 12.0,
            accel_max: 1.0,
            lane_width: 3.5,
        }
    }
}

impl GenParams {
    /// Number of ground-truth points, `horizon × frequency`, which must be a whole number.
    pub fn horizon_steps(&self) -> Result<usize> {
        let t = self.horizon_s * self.frequency_hz;
        if !(t.is_finite() && t >= 1.0) || (t - t.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "horizon {} s at {} Hz is not a positive whole number of steps",
                self.horizon_s, self.frequency_hz
            )));
        }
        Ok(t.round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.family_weights;
        let weights = [w.straight, w.curve, w.t_junction, w.four_way];
        if weights.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config("family weights must be finite and ≥ 0".into()));
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("all family weights are zero".into()));
        }
        if self.min_agents == 0 || self.max_agents < self.min_agents {
            return Err(Error::Config(format!(
                "invalid agent count range [{}, {}]",
                self.min_agents, self.max_agents
            )));
        }
        if !(self.speed_min > 0.0 && self.speed_max >= self.speed_min && self.speed_max.is_finite()) {
            return Err(Error::Config("speed range must satisfy 0 < min ≤ max".into()));
        }
        if !(self.accel_max >= 0.0 && self.accel_max.is_finite()) {
            return Err(Error::Config("accel_max must be ≥ 0".into()));
        }
        if !(self.lane_width > 0.0 && self.lane_width.is_finite()) {
            return Err(Error::Config("lane_width must be positive".into()));
        }
        self.horizon_steps().map(|_| ())
    }
}

/// Rigidly moves `scene` so that agent `target` sits at the origin heading along +x.
pub fn to_agent_frame(scene: &Scene, target: usize) -> Result<Scene> {
    let agent = scene.agents.get(target).ok_or_else(|| {
        Error::Argument(format!(
            "target index {target} out of range for {} agents",
            scene.agents.len()
        ))
    })?;
    let t = Rigid::into_frame_of(agent.position, agent.heading);
    let mut out = scene.map_points(&t);
    // Exact zeros for the target itself.
    out.agents[target].position = Vec2::ZERO;
    out.agents[target].heading = 0.0;
    Ok(out)
}

/// A path made of straight and constant-curvature pieces.
#[derive(Clone, Debug)]
struct PiecewisePath {
    start: Vec2,
    heading: f64,
    /// `(length, curvature)` pieces.
    pieces: Vec<(f64, f64)>,
}

impl PiecewisePath {
    fn new(start: Vec2, heading: f64) -> Self {
        PiecewisePath {
            start,
            heading,
            pieces: Vec::new(),
        }
    }

    fn line(mut self, length: f64) -> Self {
        self.pieces.push((length, 0.0));
        self
    }

    fn arc(mut self, length: f64, curvature: f64) -> Self {
        self.pieces.push((length, curvature));
        self
    }

    fn length(&self) -> f64 {
        self.pieces.iter().map(|p| p.0).sum()
    }

    /// Pose at arc length `s`; the path continues straight past either end.
    fn pose_at(&self, s: f64) -> (Vec2, f64) {
        if s <= 0.0 {
            return (self.start + Vec2::from_angle(self.heading) * s, self.heading);
        }
        let mut p = self.start;
        let mut h = self.heading;
        let mut remaining = s;
        for &(len, k) in &self.pieces {
            let step = remaining.min(len);
            p = advance(p, h, k, step);
            h += k * step;
            remaining -= step;
            if remaining <= 0.0 {
                return (p, h);
            }
        }
        (p + Vec2::from_angle(h) * remaining, h)
    }

    fn polyline(&self, spacing: f64) -> Vec<Vec2> {
        let total = self.length();
        let n = (total / spacing).ceil().max(1.0) as usize;
        (0..=n).map(|i| self.pose_at(total * i as f64 / n as f64).0).collect()
    }
}

fn advance(p: Vec2, h: f64, curvature: f64, s: f64) -> Vec2 {
    if curvature.abs() < 1e-12 {
        return p + Vec2::from_angle(h) * s;
    }
    let h1 = h + curvature * s;
    p + Vec2::new(
        (h1.sin() - h.sin()) / curvature,
        (h.cos() - h1.cos()) / curvature,
    )
}

fn vertex_normals(center: &[Vec2]) -> Vec<Vec2> {
    let n = center.len();
    (0..n)
        .map(|i| {
            let a = center[i.saturating_sub(1)];
            let b = center[(i + 1).min(n - 1)];
            let d = b - a;
            (d * (1.0 / d.norm())).perp()
        })
        .collect()
}

fn offset_polyline(center: &[Vec2], lateral: f64) -> Vec<Vec2> {
    center
        .iter()
        .zip(vertex_normals(center))
        .map(|(&c, n)| c + n * lateral)
        .collect()
}

/// Quads covering the band `[lat_min, lat_max]` to the left of `center`.
fn strip(center: &[Vec2], lat_min: f64, lat_max: f64) -> Vec<Polygon> {
    let normals = vertex_normals(center);
    center
        .windows(2)
        .zip(normals.windows(2))
        .map(|(c, n)| {
            vec![
                c[0] + n[0] * lat_min,
                c[1] + n[1] * lat_min,
                c[1] + n[1] * lat_max,
                c[0] + n[0] * lat_max,
            ]
        })
        .collect()
}

fn rect(x0: f64, x1: f64, y0: f64, y1: f64) -> Polygon {
    vec![
        Vec2::new(x0, y0),
        Vec2::new(x1, y0),
        Vec2::new(x1, y1),
        Vec2::new(x0, y1),
    ]
}

/// Constant-acceleration speed profile clamped to `[0, v_max]`.
#[derive(Clone, Copy, Debug)]
struct SpeedProfile {
    v0: f64,
    accel: f64,
    v_max: f64,
}

impl SpeedProfile {
    fn distance_at(&self, t: f64) -> f64 {
        let SpeedProfile { v0, accel, v_max } = *self;
        if accel == 0.0 {
            return v0 * t;
        }
        let (t_sat, v_end) = if accel > 0.0 {
            ((v_max - v0) / accel, v_max)
        } else {
            (v0 / -accel, 0.0)
        };
        if t <= t_sat {
            v0 * t + 0.5 * accel * t * t
        } else {
            v0 * t_sat + 0.5 * accel * t_sat * t_sat + v_end * (t - t_sat)
        }
    }
}

const ROAD_BACK: f64 = 40.0;
const ROAD_AHEAD: f64 = 150.0;
const WALKWAY_WIDTH: f64 = 2.0;
const TURN_RADIUS: f64 = 8.0;

struct Layout {
    scene: Scene,
    /// Path followed by the target, parameterized so that s = 0 at the origin.
    route: PiecewisePath,
    route_offset: f64,
}

fn straight_layout(rng: &mut ChaCha8Rng, lw: f64) -> Layout {
    let mut scene = Scene {
        drivable: vec![rect(-ROAD_BACK, ROAD_AHEAD, -0.5 * lw, 1.5 * lw)],
        ..Scene::default()
    };
    scene.lanes = vec![
        Lane {
            points: vec![Vec2::new(-ROAD_BACK, 0.0), Vec2::new(ROAD_AHEAD, 0.0)],
            width: 0.5,
        },
        Lane {
            points: vec![Vec2::new(ROAD_AHEAD, lw), Vec2::new(-ROAD_BACK, lw)],
            width: 0.5,
        },
    ];
    scene.walkways = vec![
        rect(-ROAD_BACK, ROAD_AHEAD, -0.5 * lw - WALKWAY_WIDTH, -0.5 * lw),
        rect(-ROAD_BACK, ROAD_AHEAD, 1.5 * lw, 1.5 * lw + WALKWAY_WIDTH),
    ];
    let cx = rng.random_range(15.0..60.0);
    scene.ped_crossings = vec![rect(cx, cx + 3.0, -0.5 * lw, 1.5 * lw)];
    Layout {
        scene,
        route: PiecewisePath::new(Vec2::new(-ROAD_BACK, 0.0), 0.0).line(ROAD_BACK + ROAD_AHEAD),
        route_offset: ROAD_BACK,
    }
}

fn curve_layout(rng: &mut ChaCha8Rng, lw: f64) -> Layout {
    let radius = rng.random_range(30.0..70.0);
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let arc_len = (0.95 * PI * radius).min(120.0);
    let route = PiecewisePath::new(Vec2::new(-ROAD_BACK, 0.0), 0.0)
        .line(ROAD_BACK)
        .arc(arc_len, side / radius)
        .line(30.0);
    let center = route.polyline(2.0);
    let mut scene = Scene {
        drivable: strip(&center, -0.5 * lw, 1.5 * lw),
        ..Scene::default()
    };
    let mut opposite = offset_polyline(&center, lw);
    opposite.reverse();
    scene.lanes = vec![
        Lane {
            points: center.clone(),
            width: 0.5,
        },
        Lane {
            points: opposite,
            width: 0.5,
        },
    ];
    scene.walkways = strip(&center, -0.5 * lw - WALKWAY_WIDTH, -0.5 * lw);
    scene
        .walkways
        .extend(strip(&center, 1.5 * lw, 1.5 * lw + WALKWAY_WIDTH));
    Layout {
        scene,
        route,
        route_offset: ROAD_BACK,
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Maneuver {
    Straight,
    Left,
    Right,
}

fn junction_layout(rng: &mut ChaCha8Rng, lw: f64, four_way: bool) -> Layout {
    let d = rng.random_range(8.0..25.0);
    let cross_x0 = d;
    let cross_x1 = d + 2.0 * lw;
    let reach = 100.0;
    let mut scene = Scene::default();
    scene.drivable.push(rect(-ROAD_BACK, cross_x0, -0.5 * lw, 1.5 * lw));
    scene.drivable.push(rect(cross_x0, cross_x1, -reach, reach));
    if four_way {
        scene.drivable.push(rect(cross_x1, ROAD_AHEAD, -0.5 * lw, 1.5 * lw));
    }
    let lane = |points: Vec<Vec2>| Lane { points, width: 0.5 };
    scene.lanes.push(lane(vec![Vec2::new(-ROAD_BACK, 0.0), Vec2::new(cross_x0, 0.0)]));
    scene.lanes.push(lane(vec![Vec2::new(cross_x0, lw), Vec2::new(-ROAD_BACK, lw)]));
    scene.lanes.push(lane(vec![
        Vec2::new(d + 0.5 * lw, reach),
        Vec2::new(d + 0.5 * lw, -reach),
    ]));
    scene.lanes.push(lane(vec![
        Vec2::new(d + 1.5 * lw, -reach),
        Vec2::new(d + 1.5 * lw, reach),
    ]));
    if four_way {
        scene.lanes.push(lane(vec![Vec2::new(cross_x1, 0.0), Vec2::new(ROAD_AHEAD, 0.0)]));
        scene.lanes.push(lane(vec![Vec2::new(ROAD_AHEAD, lw), Vec2::new(cross_x1, lw)]));
    }
    scene.walkways.push(rect(-ROAD_BACK, cross_x0, -0.5 * lw - WALKWAY_WIDTH, -0.5 * lw));
    scene.walkways.push(rect(-ROAD_BACK, cross_x0, 1.5 * lw, 1.5 * lw + WALKWAY_WIDTH));
    scene.ped_crossings.push(rect(d - 4.0, d - 1.0, -0.5 * lw, 1.5 * lw));

    // Turn connectors start where a right turn of TURN_RADIUS lands in the near crossing lane.
    let turn_start = d + 0.5 * lw - TURN_RADIUS;
    let lead = || PiecewisePath::new(Vec2::new(-ROAD_BACK, 0.0), 0.0).line(ROAD_BACK + turn_start);
    let right = lead().arc(0.5 * PI * TURN_RADIUS, -1.0 / TURN_RADIUS).line(reach);
    let left_r = TURN_RADIUS + lw;
    let left = lead().arc(0.5 * PI * left_r, 1.0 / left_r).line(reach);
    let straight = PiecewisePath::new(Vec2::new(-ROAD_BACK, 0.0), 0.0).line(ROAD_BACK + ROAD_AHEAD);
    for path in [&right, &left] {
        let pts = path.polyline(2.0);
        let connector: Vec<Vec2> = pts
            .into_iter()
            .filter(|p| p.x >= turn_start - 1e-9 && p.y.abs() <= 3.0 * lw + TURN_RADIUS)
            .collect();
        if connector.len() >= 2 {
            scene.lanes.push(lane(connector));
        }
    }

    let maneuver = if four_way {
        match rng.random_range(0..3) {
            0 => Maneuver::Straight,
            1 => Maneuver::Left,
            _ => Maneuver::Right,
        }
    } else if rng.random_bool(0.5) {
        Maneuver::Left
    } else {
        Maneuver::Right
    };
    let route = match maneuver {
        Maneuver::Straight => straight,
        Maneuver::Left => left,
        Maneuver::Right => right,
    };
    Layout {
        scene,
        route,
        route_offset: ROAD_BACK,
    }
}

fn point_on_polyline(points: &[Vec2], u: f64) -> (Vec2, f64) {
    let mut remaining = u;
    for w in points.windows(2) {
        let d = w[1] - w[0];
        let len = d.norm();
        if remaining <= len || len == 0.0 {
            let h = d.y.atan2(d.x);
            return (w[0] + d * (remaining / len.max(1e-12)), h);
        }
        remaining -= len;
    }
    let n = points.len();
    let d = points[n - 1] - points[n - 2];
    (points[n - 1], d.y.atan2(d.x))
}

fn polyline_length(points: &[Vec2]) -> f64 {
    points.windows(2).map(|w| w[0].distance(w[1])).sum()
}

fn pick_family(rng: &mut ChaCha8Rng, w: &FamilyWeights) -> SceneFamily {
    let total: f64 = SceneFamily::ALL.iter().map(|&f| w.get(f)).sum();
    let mut x = rng.random_range(0.0..total);
    for f in SceneFamily::ALL {
        let wf = w.get(f);
        if x < wf {
            return f;
        }
        x -= wf;
    }
    // Rounding can leave x just past the last bucket.
    *SceneFamily::ALL.iter().rev().find(|&&f| w.get(f) > 0.0).unwrap()
}

/// Generates one randomized sample. Pure function of `(seed, params)`.
pub fn generate_scene(seed: u64, params: &GenParams) -> Result<Sample> {
    params.validate()?;
    let steps = params.horizon_steps()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lw = params.lane_width;

    let family = pick_family(&mut rng, &params.family_weights);
    let Layout {
        mut scene,
        route,
        route_offset,
    } = match family {
        SceneFamily::Straight => straight_layout(&mut rng, lw),
        SceneFamily::Curve => curve_layout(&mut rng, lw),
        SceneFamily::TJunction => junction_layout(&mut rng, lw, false),
        SceneFamily::FourWay => junction_layout(&mut rng, lw, true),
    };

    let v0 = rng.random_range(params.speed_min..=params.speed_max);
    // Keep the target moving forward over the whole horizon.
    let accel_lo = (-params.accel_max).max(-0.5 * v0 / params.horizon_s);
    let accel = if params.accel_max > 0.0 {
        rng.random_range(accel_lo..=params.accel_max)
    } else {
        0.0
    };
    let profile = SpeedProfile {
        v0,
        accel,
        v_max: params.speed_max,
    };
    let curvature_now = {
        let (_, h0) = route.pose_at(route_offset);
        let (_, h1) = route.pose_at(route_offset + 1e-3);
        (h1 - h0) / 1e-3
    };
    let gt = GroundTruth {
        points: (1..=steps)
            .map(|i| {
                let t = i as f64 / params.frequency_hz;
                route.pose_at(route_offset + profile.distance_at(t)).0
            })
            .collect(),
    };

    let target = AgentState {
        position: Vec2::ZERO,
        heading: 0.0,
        half_extent: Vec2::new(rng.random_range(2.0..2.6), rng.random_range(0.85..1.05)),
        speed: v0,
        accel,
        heading_rate: v0 * curvature_now,
        is_target: true,
    };
    let n_agents = rng.random_range(params.min_agents..=params.max_agents);
    let mut agents = Vec::with_capacity(n_agents);
    for _ in 1..n_agents {
        let lane = &scene.lanes[rng.random_range(0..scene.lanes.len())];
        let u = rng.random_range(0.0..polyline_length(&lane.points));
        let (position, heading) = point_on_polyline(&lane.points, u);
        agents.push(AgentState {
            position,
            heading: wrap_angle(heading),
            half_extent: Vec2::new(rng.random_range(2.0..2.6), rng.random_range(0.85..1.05)),
            speed: rng.random_range(0.0..params.speed_max),
            accel: 0.0,
            heading_rate: 0.0,
            is_target: false,
        });
    }
    let target_slot = rng.random_range(0..=agents.len());
    agents.insert(target_slot, target);
    scene.agents = agents;

    // Move to an arbitrary world pose and back, as a recorded scene would be.
    let world = Rigid {
        rotation: rng.random_range(-PI..PI),
        translation: Vec2::new(rng.random_range(-1000.0..1000.0), rng.random_range(-1000.0..1000.0)),
    };
    let world_scene = scene.map_points(&world);
    let scene = to_agent_frame(&world_scene, target_slot)?;
    scene.validate()?;

    Ok(Sample {
        sample_id: format!("{seed:016x}"),
        rng_seed: seed,
        family,
        kinematics: [v0, accel, v0 * curvature_now],
        gt,
        scene,
    })
}

/// Generates `count` samples whose per-sample seeds are drawn from `base_seed`.
pub fn generate_dataset(base_seed: u64, count: usize, params: &GenParams) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(Error::Argument("sample count must be positive".into()));
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(base_seed);
    (0..count)
        .map(|i| {
            let mut s = generate_scene(seeds.random(), params)?;
            s.sample_id = format!("{base_seed}-{i:06}");
            Ok(s)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Record<T> {
    format: String,
    #[serde(flatten)]
    sample: T,
}

pub fn sample_to_line(sample: &Sample) -> String {
    let rec = Record {
        format: SAMPLE_FORMAT.to_string(),
        sample,
    };
    serde_json::to_string(&rec).expect("sample serialization cannot fail")
}

pub fn sample_from_line(line: &str) -> std::result::Result<Sample, String> {
    let rec: Record<Sample> = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if rec.format != SAMPLE_FORMAT {
        return Err(format!("unsupported record format {:?}", rec.format));
    }
    Ok(rec.sample)
}

pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        writeln!(w, "{}", sample_to_line(s)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s = sample_from_line(&line)
            .map_err(|m| Error::format(path, format!("line {}: {m}", i + 1)))?;
        out.push(s);
    }
    Ok(out)
}
