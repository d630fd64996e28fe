//! Histogram-NLL realism metrics over nine per-(agent, step) features,
//! aggregated per agent (rollout evaluation) or pooled per scene (scene
//! generation).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{inside_any, signed_boundary_distance, OrientedBox, Point};
use crate::scene::RawScene;

const HZ: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    LinearSpeed,
    LinearAcceleration,
    AngularSpeed,
    AngularAcceleration,
    DistanceToNearestObject,
    Collision,
    TimeToCollision,
    DistanceToRoadEdge,
    Offroad,
}

impl Metric {
    pub const ALL: [Metric; 9] = [
        Metric::LinearSpeed,
        Metric::LinearAcceleration,
        Metric::AngularSpeed,
        Metric::AngularAcceleration,
        Metric::DistanceToNearestObject,
        Metric::Collision,
        Metric::TimeToCollision,
        Metric::DistanceToRoadEdge,
        Metric::Offroad,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&m| m == self).expect("listed")
    }

    pub fn is_indicator(self) -> bool {
        matches!(self, Metric::Collision | Metric::Offroad)
    }
}

pub const METRIC_COUNT: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub bins: usize,
    pub floor: f64,
    pub weights: [f64; METRIC_COUNT],
    pub ttc_cap: f64,
    /// `(lo, hi)` histogram support per metric.
    pub supports: [(f64, f64); METRIC_COUNT],
}

impl Default for MetricConfig {
    fn default() -> Self {
        use std::f64::consts::PI;
        Self {
            bins: 128,
            floor: 1e-6,
            weights: [1.0; METRIC_COUNT],
            ttc_cap: 5.0,
            supports: [
                (0.0, 30.0),
                (0.0, 20.0),
                (0.0, 2.0 * PI),
                (0.0, 4.0 * PI),
                (-10.0, 50.0),
                (0.0, 1.0),
                (0.0, 5.0),
                (-10.0, 50.0),
                (0.0, 1.0),
            ],
        }
    }
}

/// Feature values indexed `[metric][agent][step]`; `None` where the agent
/// is invalid or the feature is undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub agents: usize,
    pub steps: usize,
    pub values: Vec<Vec<Vec<Option<f64>>>>,
}

impl FeatureTable {
    pub fn get(&self, m: Metric, agent: usize, step: usize) -> Option<f64> {
        self.values[m.index()][agent][step]
    }
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let r = (a + std::f64::consts::PI).rem_euclid(two_pi);
    r - std::f64::consts::PI
}

fn boxes_at(scene: &RawScene, s: usize) -> Vec<Option<OrientedBox>> {
    scene
        .agents
        .iter()
        .map(|t| {
            let st = t.states[s];
            st.valid
                .then(|| OrientedBox::new([st.x, st.y], st.heading, t.length, t.width))
        })
        .collect()
}

/// First time in `(0, cap]` at which agent `a`, moving at constant velocity
/// along its heading, overlaps an agent ahead of it moving the same way.
fn time_to_collision(boxes: &[Option<OrientedBox>], speeds: &[Option<f64>], a: usize, cap: f64) -> f64 {
    let Some(ba) = boxes[a] else { return cap };
    let va = speeds[a].unwrap_or(0.0);
    let vel = |b: &OrientedBox, v: f64| [v * b.heading.cos(), v * b.heading.sin()];
    let pa = vel(&ba, va);
    let mut best = cap;
    for (b, bb) in boxes.iter().enumerate() {
        let Some(bb) = bb else { continue };
        let ahead = (bb.center[0] - ba.center[0]) * ba.heading.cos() + (bb.center[1] - ba.center[1]) * ba.heading.sin();
        if b == a || ahead <= 0.0 {
            continue;
        }
        let pb = vel(bb, speeds[b].unwrap_or(0.0));
        let rel = [pa[0] - pb[0], pa[1] - pb[1]];
        let reach = 0.5 * (ba.length.hypot(ba.width) + bb.length.hypot(bb.width));
        let gap = (ba.center[0] - bb.center[0]).hypot(ba.center[1] - bb.center[1]);
        if gap - reach > rel[0].hypot(rel[1]) * best {
            continue;
        }
        let n = (best * HZ).round() as usize;
        for k in 1..=n {
            let tau = k as f64 / HZ;
            let mut ma = ba;
            ma.center = [ba.center[0] + pa[0] * tau, ba.center[1] + pa[1] * tau];
            let mut mb = *bb;
            mb.center = [bb.center[0] + pb[0] * tau, bb.center[1] + pb[1] * tau];
            if ma.overlaps(&mb) {
                best = best.min(tau);
                break;
            }
        }
    }
    best
}

/// Per-(agent, step) features of a world-frame scene.
pub fn extract_features(scene: &RawScene, road: &[Vec<Point>], config: &MetricConfig) -> FeatureTable {
    let na = scene.agents.len();
    let ns = scene.steps();
    let mut values = vec![vec![vec![None; ns]; na]; METRIC_COUNT];
    let idx = |m: Metric| m.index();
    // kinematics
    let mut speed = vec![vec![None; ns]; na];
    for (a, t) in scene.agents.iter().enumerate() {
        let mut omega = vec![None; ns];
        for s in 1..ns {
            let (p, q) = (t.states[s - 1], t.states[s]);
            if p.valid && q.valid {
                speed[a][s] = Some((q.x - p.x).hypot(q.y - p.y) * HZ);
                omega[s] = Some(wrap_angle(q.heading - p.heading) * HZ);
            }
        }
        for s in 1..ns {
            values[idx(Metric::LinearSpeed)][a][s] = speed[a][s];
            values[idx(Metric::AngularSpeed)][a][s] = omega[s].map(f64::abs);
            if s >= 2 {
                if let (Some(v1), Some(v0)) = (speed[a][s], speed[a][s - 1]) {
                    values[idx(Metric::LinearAcceleration)][a][s] = Some((v1 - v0).abs() * HZ);
                }
                if let (Some(w1), Some(w0)) = (omega[s], omega[s - 1]) {
                    values[idx(Metric::AngularAcceleration)][a][s] = Some((w1 - w0).abs() * HZ);
                }
            }
        }
    }
    let dist_cap = config.supports[idx(Metric::DistanceToNearestObject)].1;
    for s in 0..ns {
        let boxes = boxes_at(scene, s);
        let speeds: Vec<Option<f64>> = (0..na).map(|a| speed[a][s].or(if s + 1 < ns { speed[a][s + 1] } else { None })).collect();
        for a in 0..na {
            let Some(ba) = boxes[a] else { continue };
            let mut nearest = dist_cap;
            for (b, bb) in boxes.iter().enumerate() {
                if b != a {
                    if let Some(bb) = bb {
                        nearest = nearest.min(ba.signed_distance(bb));
                    }
                }
            }
            values[idx(Metric::DistanceToNearestObject)][a][s] = Some(nearest);
            values[idx(Metric::Collision)][a][s] = Some(if nearest < 0.0 { 1.0 } else { 0.0 });
            values[idx(Metric::TimeToCollision)][a][s] = Some(time_to_collision(&boxes, &speeds, a, config.ttc_cap));
            if !road.is_empty() {
                values[idx(Metric::DistanceToRoadEdge)][a][s] = signed_boundary_distance(road, ba.center);
                values[idx(Metric::Offroad)][a][s] = Some(if inside_any(road, ba.center) { 0.0 } else { 1.0 });
            }
        }
    }
    FeatureTable {
        agents: na,
        steps: ns,
        values,
    }
}

/// Fixed-edge histogram; out-of-support values clamp to the edge bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub probs: Vec<f64>,
}

impl Histogram {
    pub fn bin(&self, v: f64) -> usize {
        let n = self.probs.len();
        if !(v > self.lo) {
            return 0;
        }
        let k = ((v - self.lo) / (self.hi - self.lo) * n as f64).floor();
        (k as usize).min(n - 1)
    }

    /// Normalized counts; uniform when `values` is empty.
    pub fn from_values(lo: f64, hi: f64, bins: usize, values: impl IntoIterator<Item = f64>) -> Self {
        let mut h = Self {
            lo,
            hi,
            probs: vec![0.0; bins],
        };
        let mut n = 0usize;
        for v in values {
            let k = h.bin(v);
            h.probs[k] += 1.0;
            n += 1;
        }
        if n == 0 {
            h.probs.fill(1.0 / bins as f64);
        } else {
            for p in &mut h.probs {
                *p /= n as f64;
            }
        }
        h
    }
}

/// Histogram over one metric's support using the configured bin count
/// (two bins for indicators).
pub fn metric_histogram(m: Metric, config: &MetricConfig, values: impl IntoIterator<Item = f64>) -> Histogram {
    let (lo, hi) = config.supports[m.index()];
    let bins = if m.is_indicator() { 2 } else { config.bins };
    Histogram::from_values(lo, hi, bins, values)
}

/// `-ln p` of the bin holding `value`, with `p` floored.
pub fn nll(value: f64, hist: &Histogram, floor: f64) -> f64 {
    -hist.probs[hist.bin(value)].max(floor).ln()
}

/// NLL values indexed `[metric][agent][step]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllTable {
    pub values: Vec<Vec<Vec<Option<f64>>>>,
}

/// Per-agent histograms from `K` rollouts (pooled over samples and the
/// evaluated steps), scored on the logged values.
pub fn wosac_nll_table(
    log: &FeatureTable,
    rollouts: &[FeatureTable],
    eval_steps: std::ops::Range<usize>,
    config: &MetricConfig,
) -> Result<NllTable> {
    for r in rollouts {
        if r.agents != log.agents || r.steps != log.steps {
            return invalid("rollout feature table shape differs from the log");
        }
    }
    let mut values = vec![vec![vec![None; log.steps]; log.agents]; METRIC_COUNT];
    for m in Metric::ALL {
        let j = m.index();
        for a in 0..log.agents {
            let hist = metric_histogram(
                m,
                config,
                rollouts
                    .iter()
                    .flat_map(|r| eval_steps.clone().filter_map(move |s| r.values[j][a][s])),
            );
            for s in eval_steps.clone() {
                values[j][a][s] = log.values[j][a][s].map(|v| nll(v, &hist, config.floor));
            }
        }
    }
    Ok(NllTable { values })
}

/// Scene-level histograms pooled over agents, steps and samples, scored on
/// every logged value.
pub fn scenegen_nll_table(
    log: &FeatureTable,
    generated: &[FeatureTable],
    eval_steps: std::ops::Range<usize>,
    config: &MetricConfig,
) -> Result<NllTable> {
    let mut values = vec![vec![vec![None; log.steps]; log.agents]; METRIC_COUNT];
    for g in generated {
        if g.steps != log.steps {
            return invalid("generated feature table has a different step count");
        }
    }
    for m in Metric::ALL {
        let j = m.index();
        let hist = metric_histogram(
            m,
            config,
            generated.iter().flat_map(|g| {
                let steps = eval_steps.clone();
                (0..g.agents).flat_map(move |a| steps.clone().filter_map(move |s| g.values[j][a][s]))
            }),
        );
        for a in 0..log.agents {
            for s in eval_steps.clone() {
                values[j][a][s] = log.values[j][a][s].map(|v| nll(v, &hist, config.floor));
            }
        }
    }
    Ok(NllTable { values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    /// `m(i, j)`; `None` when no agent has values for the metric.
    pub metric_scores: Vec<Option<f64>>,
    /// `m(a, i, j)` indexed `[metric][agent]`.
    pub agent_scores: Vec<Vec<Option<f64>>>,
    /// `N(i, a)` indexed `[metric][agent]`.
    pub valid_counts: Vec<Vec<usize>>,
    pub composite: f64,
    pub nll: NllTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    pub weights: Vec<f64>,
    /// Per-metric scores averaged over included scenarios.
    pub metric_scores: Vec<Option<f64>>,
    pub composite: f64,
    pub scenarios: Vec<Option<ScenarioReport>>,
    /// Indices of scenarios without any valid value.
    pub excluded: Vec<usize>,
}

fn composite(scores: &[Option<f64>], weights: &[f64]) -> f64 {
    let present: Vec<(f64, f64)> = scores
        .iter()
        .zip(weights)
        .filter_map(|(s, &w)| s.map(|s| (s, w)))
        .collect();
    if present.is_empty() {
        return 0.0;
    }
    present.iter().map(|(s, w)| s * w).sum::<f64>() / present.len() as f64
}

fn finish_report(mode: &str, scenarios: Vec<Option<ScenarioReport>>, weights: &[f64]) -> MetricsReport {
    let excluded: Vec<usize> = scenarios
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_none())
        .map(|(i, _)| i)
        .collect();
    let included: Vec<&ScenarioReport> = scenarios.iter().flatten().collect();
    let metric_scores: Vec<Option<f64>> = (0..METRIC_COUNT)
        .map(|j| {
            let v: Vec<f64> = included.iter().filter_map(|r| r.metric_scores[j]).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    let composite = if included.is_empty() {
        0.0
    } else {
        included.iter().map(|r| r.composite).sum::<f64>() / included.len() as f64
    };
    MetricsReport {
        mode: mode.into(),
        weights: weights.to_vec(),
        metric_scores,
        composite,
        scenarios,
        excluded,
    }
}

fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.len() != METRIC_COUNT || weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
        return invalid("weights must be nine values in [0, 1]");
    }
    Ok(())
}

/// `m(a,i,j) = exp(-mean_t NLL)`, `m(i,j)` the mean over agents with at
/// least one value, composite `(1/M) sum_j w_j m(i,j)` over present metrics
/// and the final score the mean over scenarios.
pub fn wosac_aggregate(tables: &[NllTable], weights: &[f64]) -> Result<MetricsReport> {
    check_weights(weights)?;
    let scenarios = tables
        .iter()
        .map(|t| {
            let agents = t.values[0].len();
            let mut agent_scores = vec![vec![None; agents]; METRIC_COUNT];
            let mut valid_counts = vec![vec![0; agents]; METRIC_COUNT];
            let mut metric_scores = vec![None; METRIC_COUNT];
            for j in 0..METRIC_COUNT {
                let mut acc = Vec::new();
                for a in 0..agents {
                    let v: Vec<f64> = t.values[j][a].iter().flatten().copied().collect();
                    valid_counts[j][a] = v.len();
                    if !v.is_empty() {
                        let m = (-v.iter().sum::<f64>() / v.len() as f64).exp();
                        agent_scores[j][a] = Some(m);
                        acc.push(m);
                    }
                }
                if !acc.is_empty() {
                    metric_scores[j] = Some(acc.iter().sum::<f64>() / acc.len() as f64);
                }
            }
            metric_scores.iter().any(Option::is_some).then(|| ScenarioReport {
                composite: composite(&metric_scores, weights),
                metric_scores,
                agent_scores,
                valid_counts,
                nll: t.clone(),
            })
        })
        .collect();
    Ok(finish_report("wosac", scenarios, weights))
}

/// Per-scene `m(i,j) = exp(-mean_{a,t} NLL)` with no agent correspondence.
pub fn scenegen_aggregate(tables: &[NllTable], weights: &[f64]) -> Result<MetricsReport> {
    check_weights(weights)?;
    let scenarios = tables
        .iter()
        .map(|t| {
            let agents = t.values[0].len();
            let mut valid_counts = vec![vec![0; agents]; METRIC_COUNT];
            let mut metric_scores = vec![None; METRIC_COUNT];
            for j in 0..METRIC_COUNT {
                let mut v = Vec::new();
                for a in 0..agents {
                    let before = v.len();
                    v.extend(t.values[j][a].iter().flatten().copied());
                    valid_counts[j][a] = v.len() - before;
                }
                if !v.is_empty() {
                    metric_scores[j] = Some((-v.iter().sum::<f64>() / v.len() as f64).exp());
                }
            }
            metric_scores.iter().any(Option::is_some).then(|| ScenarioReport {
                composite: composite(&metric_scores, weights),
                metric_scores,
                agent_scores: vec![vec![None; agents]; METRIC_COUNT],
                valid_counts,
                nll: t.clone(),
            })
        })
        .collect();
    Ok(finish_report("scenegen", scenarios, weights))
}

/// One scenario to evaluate: logged scene, `K` simulated versions and the
/// drivable-area polygons, all in world units.
#[derive(Debug, Clone)]
pub struct EvalScenario {
    pub log: RawScene,
    pub samples: Vec<RawScene>,
    pub road: Vec<Vec<Point>>,
}

/// Rollout evaluation over the future steps of every scenario.
pub fn evaluate_wosac(scenarios: &[EvalScenario], config: &MetricConfig) -> Result<MetricsReport> {
    let tables: Result<Vec<NllTable>> = scenarios
        .par_iter()
        .map(|sc| {
            let log = extract_features(&sc.log, &sc.road, config);
            let sims: Vec<FeatureTable> = sc.samples.iter().map(|s| extract_features(s, &sc.road, config)).collect();
            wosac_nll_table(&log, &sims, sc.log.history..sc.log.steps(), config)
        })
        .collect();
    wosac_aggregate(&tables?, &config.weights)
}

/// Scene-generation evaluation over every step.
pub fn evaluate_scenegen(scenarios: &[EvalScenario], config: &MetricConfig) -> Result<MetricsReport> {
    let tables: Result<Vec<NllTable>> = scenarios
        .par_iter()
        .map(|sc| {
            let log = extract_features(&sc.log, &sc.road, config);
            let gen: Vec<FeatureTable> = sc.samples.iter().map(|s| extract_features(s, &sc.road, config)).collect();
            scenegen_nll_table(&log, &gen, 0..sc.log.steps(), config)
        })
        .collect();
    scenegen_aggregate(&tables?, &config.weights)
}
