//! Synthetic road worlds and behavior-mixture scene priors.
//!
//! A scene is laid out once (lane, position, speed, type and size of every
//! agent slot). Given a layout, each agent independently picks a behavior
//! and its trajectory is the behavior's mean path plus diagonal Gaussian
//! noise in normalized space. The distribution over scenes for a fixed
//! layout is therefore an exact diagonal Gaussian mixture, which is what
//! [`SyntheticWorld::prior_as_mixture`] returns.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ContextPolyline, MixtureComponent, MixtureScenePrior, PolylineKind, RoadContext};
use crate::error::{invalid, Error, Result};
use crate::geometry::{is_simple, Point};
use crate::scene::{channel as c, AgentType, FeatureNormalizer, SceneTensor, SizeChannel, ValidityMask};

/// Simulation step in seconds.
pub const DT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Straight,
    Curve,
    Intersection,
}

impl std::str::FromStr for Template {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "straight" => Ok(Template::Straight),
            "curve" => Ok(Template::Curve),
            "intersection" => Ok(Template::Intersection),
            other => invalid(format!("unknown template '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    pub lanes: usize,
    pub lane_width: f64,
    /// Road length in meters (straight template; approach length otherwise).
    pub length: f64,
    /// Nominal lane speed in m/s before per-lane jitter.
    pub speed: f64,
    pub curve_radius: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            lanes: 2,
            lane_width: 3.7,
            length: 500.0,
            speed: 10.0,
            curve_radius: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub centerline: Vec<Point>,
    pub speed: f64,
    /// Arc length of the point closest to the scene origin.
    pub origin_s: f64,
    /// Neighbouring lane offsets available for lane changes: +1 left, -1 right.
    pub neighbours: Vec<i8>,
}

impl Lane {
    /// Position and heading at arc length `s`, extrapolating linearly past
    /// either end.
    pub fn pose_at(&self, s: f64) -> (Point, f64) {
        let pts = &self.centerline;
        let mut acc = 0.0;
        for (i, w) in pts.windows(2).enumerate() {
            let d = [w[1][0] - w[0][0], w[1][1] - w[0][1]];
            let len = d[0].hypot(d[1]);
            let last = i + 2 == pts.len();
            if s <= acc + len || last {
                let u = if len > 0.0 { (s - acc) / len } else { 0.0 };
                let u = if i == 0 { u } else { u.max(0.0) };
                return ([w[0][0] + u * d[0], w[0][1] + u * d[1]], d[1].atan2(d[0]));
            }
            acc += len;
        }
        (pts[0], 0.0)
    }
}

/// Lane centerlines, drivable-area polygons and road-edge polylines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadGraph {
    pub lanes: Vec<Lane>,
    /// Closed drivable-area polygons (first point repeated at the end).
    pub polygons: Vec<Vec<Point>>,
}

impl RoadGraph {
    /// Polylines in normalized units, resampled to at most 20 m per segment
    /// and clipped to a window around the origin.
    pub fn context(&self, normalizer: &FeatureNormalizer) -> RoadContext {
        let (lo, hi) = ([-60.0, -60.0], [120.0, 120.0]);
        let inside = |p: &Point| p[0] >= lo[0] && p[0] <= hi[0] && p[1] >= lo[1] && p[1] <= hi[1];
        let mut polylines = Vec::new();
        let mut push = |kind, line: &[Point]| {
            let dense = resample(line, 20.0);
            let mut run: Vec<Point> = Vec::new();
            for p in dense {
                if inside(&p) {
                    run.push([normalizer.norm_position(p[0]), normalizer.norm_position(p[1])]);
                } else if run.len() >= 2 {
                    polylines.push(ContextPolyline {
                        kind,
                        points: std::mem::take(&mut run),
                    });
                } else {
                    run.clear();
                }
            }
            if run.len() >= 2 {
                polylines.push(ContextPolyline { kind, points: run });
            }
        };
        for lane in &self.lanes {
            push(PolylineKind::LaneCenter, &lane.centerline);
        }
        for poly in &self.polygons {
            push(PolylineKind::RoadEdge, poly);
        }
        RoadContext { polylines }
    }

    /// Rebuilds a roadgraph from external polylines: lane centers become
    /// lanes at their own nominal speed, closed road edges become polygons.
    pub fn from_polylines(lanes: &[Vec<Point>], edges: &[Vec<Point>], speed: f64) -> Result<Self> {
        let mut polygons = Vec::new();
        for e in edges {
            if e.len() < 4 || e.first() != e.last() {
                return invalid("road edge polygons must be closed (first point repeated)");
            }
            polygons.push(e.clone());
        }
        let lanes = lanes
            .iter()
            .filter(|l| l.len() >= 2)
            .map(|l| Lane {
                centerline: l.clone(),
                speed,
                origin_s: closest_arc_length(l, [0.0, 0.0]),
                neighbours: Vec::new(),
            })
            .collect();
        Ok(Self { lanes, polygons })
    }
}

fn closest_arc_length(line: &[Point], p: Point) -> f64 {
    let mut best = (f64::INFINITY, 0.0);
    let mut acc = 0.0;
    for w in line.windows(2) {
        let q = crate::geometry::closest_on_segment(w[0], w[1], p);
        let d = crate::geometry::dist(q, p);
        if d < best.0 {
            best = (d, acc + crate::geometry::dist(w[0], q));
        }
        acc += crate::geometry::dist(w[0], w[1]);
    }
    best.1
}

fn resample(line: &[Point], spacing: f64) -> Vec<Point> {
    let mut out = Vec::new();
    for w in line.windows(2) {
        let len = crate::geometry::dist(w[0], w[1]);
        let n = (len / spacing).ceil().max(1.0) as usize;
        for i in 0..n {
            let u = i as f64 / n as f64;
            out.push([w[0][0] + u * (w[1][0] - w[0][0]), w[0][1] + u * (w[1][1] - w[0][1])]);
        }
    }
    if let Some(last) = line.last() {
        out.push(*last);
    }
    out
}

fn offset_polyline(line: &[Point], offset: f64) -> Vec<Point> {
    let n = line.len();
    (0..n)
        .map(|i| {
            let (a, b) = if i + 1 < n { (line[i], line[i + 1]) } else { (line[i - 1], line[i]) };
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len = dx.hypot(dy);
            [line[i][0] - offset * dy / len, line[i][1] + offset * dx / len]
        })
        .collect()
}

fn lane_speeds<R: Rng + ?Sized>(params: &WorldParams, count: usize, rng: &mut R) -> Vec<f64> {
    (0..count).map(|_| params.speed + rng.gen_range(-1.0..1.0)).collect()
}

fn neighbours(k: usize, lanes: usize) -> Vec<i8> {
    let mut n = Vec::new();
    if k + 1 < lanes {
        n.push(1);
    }
    if k > 0 {
        n.push(-1);
    }
    n
}

/// Builds a roadgraph. Geometry is fixed by the template and parameters;
/// the generator only draws small per-lane speed offsets.
pub fn build_world<R: Rng + ?Sized>(template: Template, params: &WorldParams, rng: &mut R) -> Result<RoadGraph> {
    if params.lanes == 0 || !(params.lane_width > 0.0) || !(params.length > 0.0) {
        return invalid("lanes, lane width and length must be positive");
    }
    if !(params.speed > 1.0) {
        return invalid("nominal speed must exceed 1 m/s");
    }
    let w = params.lane_width;
    let nl = params.lanes;
    let (lo, hi) = (-0.5 * w, (nl as f64 - 0.5) * w);
    let graph = match template {
        Template::Straight => {
            let x0 = -0.4 * params.length;
            let x1 = x0 + params.length;
            let speeds = lane_speeds(params, nl, rng);
            let lanes = (0..nl)
                .map(|k| Lane {
                    centerline: vec![[x0, k as f64 * w], [x1, k as f64 * w]],
                    speed: speeds[k],
                    origin_s: -x0,
                    neighbours: neighbours(k, nl),
                })
                .collect();
            let poly = vec![[x0, lo], [x1, lo], [x1, hi], [x0, hi], [x0, lo]];
            RoadGraph {
                lanes,
                polygons: vec![poly],
            }
        }
        Template::Curve => {
            let r = params.curve_radius;
            if !(r > hi + w) {
                return invalid("curve radius too small for the road width");
            }
            let approach = 0.4 * params.length;
            // reference line: straight approach along +x, then a left arc
            let mut reference = vec![[-approach, 0.0]];
            let segments = 36;
            for i in 0..=segments {
                let th = FRAC_PI_2 * i as f64 / segments as f64;
                reference.push([r * th.sin(), r - r * th.cos()]);
            }
            let exit = reference[reference.len() - 1];
            reference.push([exit[0], exit[1] + approach]);
            let speeds = lane_speeds(params, nl, rng);
            let lanes = (0..nl)
                .map(|k| Lane {
                    centerline: offset_polyline(&reference, k as f64 * w),
                    speed: speeds[k],
                    origin_s: approach,
                    neighbours: neighbours(k, nl),
                })
                .collect();
            let right = offset_polyline(&reference, lo);
            let mut left = offset_polyline(&reference, hi);
            left.reverse();
            let mut poly = right;
            poly.extend(left);
            poly.push(poly[0]);
            if !is_simple(&poly) {
                return invalid("curve boundary self-intersects");
            }
            RoadGraph {
                lanes,
                polygons: vec![poly],
            }
        }
        Template::Intersection => {
            let half = 0.4 * params.length;
            let xc = 40.0;
            let (vlo, vhi) = (xc + lo, xc + hi);
            let speeds = lane_speeds(params, 2 * nl, rng);
            let mut lanes: Vec<Lane> = (0..nl)
                .map(|k| Lane {
                    centerline: vec![[-half, k as f64 * w], [half + xc, k as f64 * w]],
                    speed: speeds[k],
                    origin_s: half,
                    neighbours: neighbours(k, nl),
                })
                .collect();
            for k in 0..nl {
                let x = xc + k as f64 * w;
                lanes.push(Lane {
                    // drives along +y; local left is -x, so lane k+1 is on the right
                    centerline: vec![[x, -half], [x, half]],
                    speed: speeds[nl + k],
                    origin_s: half,
                    neighbours: neighbours(k, nl).into_iter().map(|n| -n).collect(),
                });
            }
            let (ylo, yhi) = (-half, half);
            let (xlo, xhi) = (-half, half + xc);
            let poly = vec![
                [xlo, lo],
                [vlo, lo],
                [vlo, ylo],
                [vhi, ylo],
                [vhi, lo],
                [xhi, lo],
                [xhi, hi],
                [vhi, hi],
                [vhi, yhi],
                [vlo, yhi],
                [vlo, hi],
                [xlo, hi],
                [xlo, lo],
            ];
            RoadGraph {
                lanes,
                polygons: vec![poly],
            }
        }
    };
    Ok(graph)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    KeepSpeed,
    Decelerate,
    LaneChange,
}

/// Behavior weights, kinematic parameters and per-channel noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorMixture {
    pub weights: Vec<(Behavior, f64)>,
    /// Braking rate in m/s^2.
    pub decel: f64,
    /// Speed fraction at which braking stops.
    pub decel_floor: f64,
    /// Step offset, relative to the last history step, at which a
    /// behavior starts.
    pub onset: usize,
    /// Lane change duration in seconds.
    pub lane_change_time: f64,
    pub position_std: f64,
    pub heading_std: f64,
    /// Standard deviation of size, height and type channels (normalized).
    pub attribute_std: f64,
}

impl Default for BehaviorMixture {
    fn default() -> Self {
        Self {
            weights: vec![
                (Behavior::KeepSpeed, 0.5),
                (Behavior::Decelerate, 0.25),
                (Behavior::LaneChange, 0.25),
            ],
            decel: 3.0,
            decel_floor: 0.5,
            onset: 3,
            lane_change_time: 1.5,
            position_std: 0.25,
            heading_std: 0.01,
            attribute_std: 0.005,
        }
    }
}

impl BehaviorMixture {
    /// Behaviors available to a slot with their renormalized weights.
    fn options(&self, slot: &AgentSlot, world: &RoadGraph) -> Vec<(Behavior, f64)> {
        let can_change = !world.lanes[slot.lane].neighbours.is_empty();
        let opts: Vec<(Behavior, f64)> = self
            .weights
            .iter()
            .copied()
            .filter(|(b, w)| *w > 0.0 && (*b != Behavior::LaneChange || can_change))
            .collect();
        let total: f64 = opts.iter().map(|(_, w)| w).sum();
        opts.into_iter().map(|(b, w)| (b, w / total)).collect()
    }

    /// Per-channel noise variance in normalized space.
    fn channel_variance(&self, normalizer: &FeatureNormalizer, feature: usize) -> f64 {
        match feature {
            c::X | c::Y => normalizer.norm_position(self.position_std).powi(2),
            c::Z => normalizer.norm_position(0.05).powi(2),
            c::COS_HEADING | c::SIN_HEADING => self.heading_std.powi(2),
            _ => self.attribute_std.powi(2),
        }
    }
}

/// Fixed per-slot scene parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSlot {
    pub lane: usize,
    /// Arc length along the lane at the last history step.
    pub s_ref: f64,
    pub speed: f64,
    pub kind: AgentType,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    /// Lane-change direction (+1 left, -1 right), chosen at layout time.
    pub change_dir: i8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub capacity: usize,
    pub history: usize,
    pub future: usize,
    pub slots: Vec<AgentSlot>,
}

impl SceneLayout {
    pub fn steps(&self) -> usize {
        self.history + self.future
    }

    pub fn validity(&self) -> ValidityMask {
        ValidityMask::leading_agents(self.capacity, self.steps(), self.slots.len())
    }

    /// Same layout with a different future horizon.
    pub fn with_future(&self, future: usize) -> Self {
        Self {
            future,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutConfig {
    pub agents: usize,
    pub capacity: usize,
    pub history: usize,
    pub future: usize,
}

fn type_size<R: Rng + ?Sized>(kind: AgentType, rng: &mut R) -> (f64, f64, f64) {
    let (l, w, h) = match kind {
        AgentType::Av | AgentType::Car => (4.6, 1.9, 1.6),
        AgentType::Cyclist => (1.8, 0.7, 1.7),
        AgentType::Pedestrian => (0.6, 0.6, 1.8),
    };
    let j = |rng: &mut R, v: f64| v * (1.0 + 0.05 * rng.sample::<f64, _>(StandardNormal).clamp(-2.0, 2.0));
    (j(rng, l), j(rng, w), j(rng, h))
}

/// Draws a layout: the AV in lane 0 at the origin, other agents spread over
/// the lanes at least 10 m apart.
pub fn sample_layout<R: Rng + ?Sized>(world: &RoadGraph, cfg: &LayoutConfig, rng: &mut R) -> Result<SceneLayout> {
    if cfg.agents > cfg.capacity {
        return invalid(format!("{} agents exceed capacity {}", cfg.agents, cfg.capacity));
    }
    if world.lanes.is_empty() && cfg.agents > 0 {
        return invalid("world has no lanes");
    }
    let mut slots: Vec<AgentSlot> = Vec::with_capacity(cfg.agents);
    let mut placed: Vec<Point> = Vec::new();
    for a in 0..cfg.agents {
        let (lane, s_ref, kind) = if a == 0 {
            (0, world.lanes[0].origin_s, AgentType::Av)
        } else {
            let mut choice = None;
            for _ in 0..200 {
                let lane = rng.gen_range(0..world.lanes.len());
                let s = world.lanes[lane].origin_s + rng.gen_range(-40.0..60.0);
                let p = world.lanes[lane].pose_at(s).0;
                if placed.iter().all(|q| crate::geometry::dist(*q, p) >= 10.0) {
                    choice = Some((lane, s));
                    break;
                }
            }
            let Some((lane, s)) = choice else {
                return invalid("could not place agents without overlap; reduce the agent count");
            };
            let kind = if rng.gen::<f64>() < 0.15 {
                AgentType::Cyclist
            } else {
                AgentType::Car
            };
            (lane, s, kind)
        };
        placed.push(world.lanes[lane].pose_at(s_ref).0);
        let (length, width, height) = type_size(kind, rng);
        let base = world.lanes[lane].speed;
        let speed = match kind {
            AgentType::Cyclist => 0.5 * base,
            _ => base + rng.gen_range(-1.5..1.5),
        };
        let dirs = &world.lanes[lane].neighbours;
        let change_dir = if dirs.is_empty() {
            0
        } else {
            *dirs.choose(rng).expect("nonempty")
        };
        slots.push(AgentSlot {
            lane,
            s_ref,
            speed,
            kind,
            length,
            width,
            height,
            change_dir,
        });
    }
    Ok(SceneLayout {
        capacity: cfg.capacity,
        history: cfg.history,
        future: cfg.future,
        slots,
    })
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// World-frame mean pose `(x, y, heading)` of a slot under a behavior at
/// step `tau`.
pub fn behavior_pose(
    world: &RoadGraph,
    lane_width: f64,
    mixture: &BehaviorMixture,
    history: usize,
    slot: &AgentSlot,
    behavior: Behavior,
    tau: usize,
) -> (f64, f64, f64) {
    let rel = (tau as f64 - (history as f64 - 1.0)) * DT;
    let on = mixture.onset as f64 * DT;
    let v = slot.speed;
    let (s, ds) = match behavior {
        Behavior::Decelerate if rel > on => {
            let stop = (1.0 - mixture.decel_floor) * v / mixture.decel;
            let u = (rel - on).min(stop);
            let s = v * on + v * u - 0.5 * mixture.decel * u * u + mixture.decel_floor * v * (rel - on - u);
            (s, v - mixture.decel * u)
        }
        _ => (v * rel, v),
    };
    let (d, dd) = match behavior {
        Behavior::LaneChange => {
            let u = (rel - on) / mixture.lane_change_time;
            let w = slot.change_dir as f64 * lane_width;
            let deriv = if (0.0..=1.0).contains(&u) {
                w * 6.0 * u * (1.0 - u) / mixture.lane_change_time
            } else {
                0.0
            };
            (w * smoothstep(u), deriv)
        }
        _ => (0.0, 0.0),
    };
    let (p, heading) = world.lanes[slot.lane].pose_at(slot.s_ref + s);
    let (sin, cos) = heading.sin_cos();
    let x = p[0] - d * sin;
    let y = p[1] + d * cos;
    (x, y, wrap(heading + dd.atan2(ds.max(1e-3))))
}

fn wrap(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    } else if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// Mean normalized tensor for a joint behavior assignment.
pub fn mean_scene(
    world: &RoadGraph,
    lane_width: f64,
    mixture: &BehaviorMixture,
    layout: &SceneLayout,
    behaviors: &[Behavior],
    normalizer: &FeatureNormalizer,
) -> SceneTensor {
    let mut x = SceneTensor::zeros(layout.capacity, layout.history, layout.future, c::COUNT);
    for (a, (slot, &b)) in layout.slots.iter().zip(behaviors).enumerate() {
        for tau in 0..layout.steps() {
            let (px, py, h) = behavior_pose(world, lane_width, mixture, layout.history, slot, b, tau);
            let row = x.row_mut(a, tau);
            row[c::X] = normalizer.norm_position(px);
            row[c::Y] = normalizer.norm_position(py);
            row[c::Z] = 0.0;
            row[c::COS_HEADING] = h.cos();
            row[c::SIN_HEADING] = h.sin();
            row[c::LENGTH] = normalizer.norm_size(SizeChannel::Length, slot.length);
            row[c::WIDTH] = normalizer.norm_size(SizeChannel::Width, slot.width);
            row[c::HEIGHT] = normalizer.norm_size(SizeChannel::Height, slot.height);
            for k in 0..4 {
                let hot = if k == slot.kind.slot() { 1.0 } else { 0.0 };
                row[c::TYPE + k] = normalizer.norm_size(SizeChannel::Type, hot);
            }
        }
    }
    x
}

/// Per-entry variance; unused slots get the attribute variance everywhere.
fn variance_tensor(mixture: &BehaviorMixture, layout: &SceneLayout, normalizer: &FeatureNormalizer) -> Vec<f64> {
    let n = layout.capacity * layout.steps() * c::COUNT;
    let mut var = vec![0.0; n];
    for (i, v) in var.iter_mut().enumerate() {
        let a = i / (layout.steps() * c::COUNT);
        let f = i % c::COUNT;
        *v = if a < layout.slots.len() {
            mixture.channel_variance(normalizer, f)
        } else {
            mixture.attribute_std.powi(2)
        };
    }
    var
}

/// Everything needed to draw scenes from one world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub template: Template,
    pub params: WorldParams,
    pub graph: RoadGraph,
    pub mixture: BehaviorMixture,
    pub normalizer: FeatureNormalizer,
}

impl SyntheticWorld {
    pub fn new<R: Rng + ?Sized>(template: Template, params: WorldParams, mixture: BehaviorMixture, rng: &mut R) -> Result<Self> {
        let total: f64 = mixture.weights.iter().map(|(_, w)| w).sum();
        if mixture.weights.iter().any(|(_, w)| *w < 0.0) || (total - 1.0).abs() > 1e-9 {
            return invalid("behavior weights must be non-negative and sum to 1");
        }
        let graph = build_world(template, &params, rng)?;
        Ok(Self {
            template,
            params,
            graph,
            mixture,
            normalizer: FeatureNormalizer::default(),
        })
    }

    pub fn road_context(&self) -> RoadContext {
        self.graph.context(&self.normalizer)
    }

    /// Draws behaviors and noise for a fixed layout.
    pub fn sample_scene_with_layout<R: Rng + ?Sized>(
        &self,
        layout: &SceneLayout,
        rng: &mut R,
    ) -> SyntheticScene {
        let behaviors: Vec<Behavior> = layout
            .slots
            .iter()
            .map(|slot| {
                let opts = self.mixture.options(slot, &self.graph);
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (b, w) in &opts {
                    acc += w;
                    if u < acc {
                        return *b;
                    }
                }
                opts[opts.len() - 1].0
            })
            .collect();
        let mut scene = mean_scene(
            &self.graph,
            self.params.lane_width,
            &self.mixture,
            layout,
            &behaviors,
            &self.normalizer,
        );
        let var = variance_tensor(&self.mixture, layout, &self.normalizer);
        for (x, v) in scene.as_mut_slice().iter_mut().zip(&var) {
            *x += v.sqrt() * rng.sample::<f64, _>(StandardNormal);
        }
        SyntheticScene {
            scene,
            validity: layout.validity(),
            layout: layout.clone(),
            behaviors,
        }
    }

    pub fn sample_scene<R: Rng + ?Sized>(&self, cfg: &LayoutConfig, rng: &mut R) -> Result<SyntheticScene> {
        let layout = sample_layout(&self.graph, cfg, rng)?;
        Ok(self.sample_scene_with_layout(&layout, rng))
    }

    /// Exact prior over scenes with this layout, enumerating joint behaviors.
    pub fn prior_as_mixture(&self, layout: &SceneLayout, cap: usize) -> Result<MixtureScenePrior> {
        let options: Vec<Vec<(Behavior, f64)>> = layout
            .slots
            .iter()
            .map(|s| self.mixture.options(s, &self.graph))
            .collect();
        let count: usize = options.iter().map(|o| o.len()).product();
        if count > cap {
            return Err(Error::TooManyComponents { count, cap });
        }
        let var = variance_tensor(&self.mixture, layout, &self.normalizer);
        let mut components = Vec::with_capacity(count);
        for k in 0..count {
            let mut rest = k;
            let mut weight = 1.0;
            let mut behaviors = Vec::with_capacity(options.len());
            for o in &options {
                let (b, w) = o[rest % o.len()];
                rest /= o.len();
                weight *= w;
                behaviors.push(b);
            }
            let mean = mean_scene(
                &self.graph,
                self.params.lane_width,
                &self.mixture,
                layout,
                &behaviors,
                &self.normalizer,
            );
            components.push(MixtureComponent {
                weight,
                mean: mean.into_vec(),
                variance: var.clone(),
            });
        }
        // guard tiny rounding in the product weights
        let total: f64 = components.iter().map(|c| c.weight).sum();
        for comp in &mut components {
            comp.weight /= total;
        }
        MixtureScenePrior::new(layout.capacity, layout.history, layout.future, c::COUNT, components)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub scene: SceneTensor,
    pub validity: ValidityMask,
    pub layout: SceneLayout,
    pub behaviors: Vec<Behavior>,
}

impl SyntheticScene {
    /// Window of `history + future` steps starting at `offset`.
    pub fn crop(&self, offset: usize, history: usize, future: usize) -> Result<(SceneTensor, ValidityMask)> {
        Ok((
            self.scene.window(offset, history, future)?,
            self.validity.window(offset, history + future)?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{inside_any, polygon_area, winding_number};
    use crate::scene::denormalize_scene;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn straight_area_is_width_times_length() {
        let params = WorldParams {
            lanes: 2,
            length: 100.0,
            ..WorldParams::default()
        };
        let g = build_world(Template::Straight, &params, &mut rng(1)).unwrap();
        let area = polygon_area(&g.polygons[0]).abs();
        assert!((area - 2.0 * 3.7 * 100.0).abs() < 1e-9);
    }

    #[test]
    fn centerlines_inside_boundaries() {
        for template in [Template::Straight, Template::Curve, Template::Intersection] {
            let g = build_world(template, &WorldParams::default(), &mut rng(2)).unwrap();
            for p in &g.polygons {
                assert_eq!(p.first(), p.last());
                assert!(is_simple(p), "{template:?}");
            }
            for lane in &g.lanes {
                let total: f64 = lane
                    .centerline
                    .windows(2)
                    .map(|w| crate::geometry::dist(w[0], w[1]))
                    .sum();
                let mut s = 0.5;
                while s < total - 0.5 {
                    let (q, _) = lane.pose_at(s);
                    assert!(inside_any(&g.polygons, q), "{template:?}: {q:?} offroad");
                    s += 0.5;
                }
            }
        }
    }

    #[test]
    fn degenerate_geometry_rejected() {
        let params = WorldParams {
            lane_width: 0.0,
            ..WorldParams::default()
        };
        assert!(build_world(Template::Straight, &params, &mut rng(3)).is_err());
    }

    #[test]
    fn same_seed_same_world() {
        let a = build_world(Template::Curve, &WorldParams::default(), &mut rng(4)).unwrap();
        let b = build_world(Template::Curve, &WorldParams::default(), &mut rng(4)).unwrap();
        assert_eq!(a, b);
    }

    fn world() -> SyntheticWorld {
        SyntheticWorld::new(
            Template::Straight,
            WorldParams::default(),
            BehaviorMixture::default(),
            &mut rng(5),
        )
        .unwrap()
    }

    #[test]
    fn av_at_origin_with_zero_heading() {
        let w = world();
        let cfg = LayoutConfig {
            agents: 3,
            capacity: 4,
            history: 4,
            future: 8,
        };
        let layout = sample_layout(&w.graph, &cfg, &mut rng(6)).unwrap();
        for b in [Behavior::KeepSpeed, Behavior::Decelerate, Behavior::LaneChange] {
            let (x, y, h) = behavior_pose(&w.graph, 3.7, &w.mixture, 4, &layout.slots[0], b, 3);
            assert!(x.abs() < 1e-12 && y.abs() < 1e-12 && h.abs() < 1e-12);
        }
    }

    #[test]
    fn zero_agents_empty_validity() {
        let w = world();
        let cfg = LayoutConfig {
            agents: 0,
            capacity: 3,
            history: 2,
            future: 2,
        };
        let s = w.sample_scene(&cfg, &mut rng(7)).unwrap();
        assert_eq!(s.validity.valid_agent_count(), 0);
    }

    #[test]
    fn behavior_frequencies_match_weights() {
        let w = world();
        let cfg = LayoutConfig {
            agents: 1,
            capacity: 1,
            history: 2,
            future: 2,
        };
        let layout = sample_layout(&w.graph, &cfg, &mut rng(8)).unwrap();
        let mut r = rng(9);
        let n = 10_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let s = w.sample_scene_with_layout(&layout, &mut r);
            counts[s.behaviors[0] as usize] += 1;
        }
        for (k, p) in [0.5, 0.25, 0.25].iter().enumerate() {
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((counts[k] as f64 - n as f64 * p).abs() < 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn straight_scenes_stay_onroad() {
        let w = world();
        let cfg = LayoutConfig {
            agents: 4,
            capacity: 4,
            history: 11,
            future: 80,
        };
        let mut r = rng(10);
        let (mut on, mut total) = (0usize, 0usize);
        for _ in 0..50 {
            let s = w.sample_scene(&cfg, &mut r).unwrap();
            let raw = denormalize_scene(&s.scene, &s.validity, &w.normalizer);
            for a in &raw.agents {
                for st in &a.states {
                    total += 1;
                    on += (winding_number(&w.graph.polygons[0], [st.x, st.y]) != 0) as usize;
                }
            }
        }
        assert!(on as f64 / total as f64 >= 0.99);
    }

    #[test]
    fn mixture_component_counts_and_cap() {
        let w = world();
        let cfg = LayoutConfig {
            agents: 2,
            capacity: 2,
            history: 2,
            future: 3,
        };
        let layout = sample_layout(&w.graph, &cfg, &mut rng(11)).unwrap();
        let prior = w.prior_as_mixture(&layout, 27).unwrap();
        assert_eq!(prior.components().len(), 9);
        assert!(matches!(
            w.prior_as_mixture(&layout, 4),
            Err(Error::TooManyComponents { count: 9, cap: 4 })
        ));

        let single = SyntheticWorld::new(
            Template::Straight,
            WorldParams::default(),
            BehaviorMixture {
                weights: vec![(Behavior::KeepSpeed, 1.0)],
                ..BehaviorMixture::default()
            },
            &mut rng(12),
        )
        .unwrap();
        let l1 = sample_layout(&single.graph, &LayoutConfig { agents: 1, ..cfg.clone() }, &mut rng(13)).unwrap();
        assert_eq!(single.prior_as_mixture(&l1, 27).unwrap().components().len(), 1);

        let two = SyntheticWorld::new(
            Template::Straight,
            WorldParams::default(),
            BehaviorMixture {
                weights: vec![(Behavior::KeepSpeed, 0.6), (Behavior::Decelerate, 0.4)],
                ..BehaviorMixture::default()
            },
            &mut rng(14),
        )
        .unwrap();
        let l2 = sample_layout(&two.graph, &cfg, &mut rng(15)).unwrap();
        let p2 = two.prior_as_mixture(&l2, 27).unwrap();
        let mut w: Vec<f64> = p2.components().iter().map(|c| c.weight).collect();
        w.sort_by(f64::total_cmp);
        let expect = [0.16, 0.24, 0.24, 0.36];
        for (a, b) in w.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn prior_samples_match_scene_sampler_moments() {
        let w = world();
        let cfg = LayoutConfig {
            agents: 2,
            capacity: 2,
            history: 2,
            future: 4,
        };
        let layout = sample_layout(&w.graph, &cfg, &mut rng(16)).unwrap();
        let prior = w.prior_as_mixture(&layout, 27).unwrap();
        let n = 20_000;
        let (mut r1, mut r2) = (rng(17), rng(18));
        let len = prior.template().len();
        let mut m1 = vec![0.0; len];
        let mut m2 = vec![0.0; len];
        let mut sq = vec![0.0; len];
        for _ in 0..n {
            let a = w.sample_scene_with_layout(&layout, &mut r1).scene;
            let b = prior.sample(&mut r2);
            for i in 0..len {
                m1[i] += a.as_slice()[i] / n as f64;
                m2[i] += b.as_slice()[i] / n as f64;
                sq[i] += b.as_slice()[i].powi(2) / n as f64;
            }
        }
        for i in 0..len {
            let var = (sq[i] - m2[i] * m2[i]).max(1e-30);
            let se = (2.0 * var / n as f64).sqrt();
            assert!((m1[i] - m2[i]).abs() < 4.0 * se + 1e-12, "entry {i}");
        }
    }
}
