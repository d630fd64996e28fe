//! Clipping operators applied to the clean estimate, either at every
//! denoising step or once after diffusion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{denoise_step, NoiseVector};
use crate::error::{invalid, Result};
use crate::geometry::{closest_boundary_point, inside_any, OrientedBox, Point};
use crate::scene::{channel, FeatureNormalizer, Mask, SceneTensor, SizeChannel, ValidityMask};

/// Clamp one channel into `[min, max]` (normalized units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeClip {
    pub feature: usize,
    pub min: f64,
    pub max: f64,
    /// `None` selects every agent.
    pub agents: Option<Vec<usize>>,
}

impl RangeClip {
    pub fn new(feature: usize, min: f64, max: f64) -> Result<Self> {
        if !(min <= max) {
            return invalid(format!("range min {min} exceeds max {max}"));
        }
        Ok(Self {
            feature,
            min,
            max,
            agents: None,
        })
    }

    /// Bounds given in world units for `feature`, normalized here.
    pub fn physical(feature: usize, min: f64, max: f64, normalizer: &FeatureNormalizer) -> Result<Self> {
        if !(min <= max) {
            return invalid(format!("range min {min} exceeds max {max}"));
        }
        Self::new(
            feature,
            normalizer.norm_channel(feature, min),
            normalizer.norm_channel(feature, max),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionFieldParams {
    pub epsilon: f64,
    pub cutoff: f64,
    pub step: f64,
    pub iterations: usize,
    /// Weight of the per-waypoint residual relative to the rigid
    /// per-agent translation in the descent direction.
    pub residual_weight: f64,
    pub normalizer: FeatureNormalizer,
}

impl Default for CollisionFieldParams {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            cutoff: 1.5,
            step: 0.05,
            iterations: 50,
            residual_weight: 0.25,
            normalizer: FeatureNormalizer::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnroadFieldParams {
    /// Closed drivable-area polygons in normalized coordinates.
    pub polygons: Vec<Vec<Point>>,
    pub min_onroad_fraction: f64,
    pub step: f64,
    pub iterations: usize,
}

impl OnroadFieldParams {
    pub fn new(polygons: Vec<Vec<Point>>) -> Result<Self> {
        for p in &polygons {
            if p.len() < 4 || p.first() != p.last() {
                return invalid("onroad polygons must be closed (first point repeated last)");
            }
        }
        Ok(Self {
            polygons,
            min_onroad_fraction: 0.2,
            step: 0.55,
            iterations: 50,
        })
    }

    /// Polygons in meters, normalized with `normalizer`.
    pub fn from_world(polygons: &[Vec<Point>], normalizer: &FeatureNormalizer) -> Result<Self> {
        Self::new(
            polygons
                .iter()
                .map(|ring| {
                    ring.iter()
                        .map(|p| [normalizer.norm_position(p[0]), normalizer.norm_position(p[1])])
                        .collect()
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClipOperator {
    Range(RangeClip),
    NonCollision(CollisionFieldParams),
    Onroad(OnroadFieldParams),
}

/// Applies `clips` in order. Entries set in `frozen` (typically the
/// inpainting mask) are never modified.
pub fn apply_clips(
    x: &SceneTensor,
    clips: &[ClipOperator],
    validity: &ValidityMask,
    frozen: Option<&Mask>,
) -> Result<SceneTensor> {
    let mut out = x.clone();
    for clip in clips {
        out = match clip {
            ClipOperator::Range(r) => clip_range(&out, r, frozen)?,
            ClipOperator::NonCollision(p) => clip_collision(&out, p, validity, frozen)?,
            ClipOperator::Onroad(p) => clip_onroad(&out, p, validity, frozen)?,
        };
    }
    Ok(out)
}

fn is_frozen(frozen: Option<&Mask>, a: usize, s: usize, d: usize) -> bool {
    frozen.is_some_and(|m| m.get(a, s, d))
}

pub fn clip_range(x: &SceneTensor, r: &RangeClip, frozen: Option<&Mask>) -> Result<SceneTensor> {
    if !(r.min <= r.max) {
        return invalid(format!("range min {} exceeds max {}", r.min, r.max));
    }
    if r.feature >= x.features() {
        return invalid(format!("range feature {} out of bounds", r.feature));
    }
    let mut out = x.clone();
    let agents: Vec<usize> = match &r.agents {
        Some(v) => v.iter().copied().filter(|&a| a < x.agents()).collect(),
        None => (0..x.agents()).collect(),
    };
    for a in agents {
        for s in 0..x.steps() {
            if !is_frozen(frozen, a, s, r.feature) {
                let v = out.get(a, s, r.feature);
                out.set(a, s, r.feature, v.max(r.min).min(r.max));
            }
        }
    }
    Ok(out)
}

/// Box of agent `a` at step `s` in normalized position units.
fn agent_box(x: &SceneTensor, a: usize, s: usize, nz: &FeatureNormalizer) -> OrientedBox {
    let d = x.features();
    let heading = if d > channel::SIN_HEADING {
        x.get(a, s, channel::SIN_HEADING).atan2(x.get(a, s, channel::COS_HEADING))
    } else {
        0.0
    };
    let extent = |ch: usize, sc: SizeChannel| {
        if d > ch {
            nz.norm_position(nz.denorm_size(sc, x.get(a, s, ch)).max(0.0))
        } else {
            0.0
        }
    };
    OrientedBox::new(
        [x.get(a, s, channel::X), x.get(a, s, channel::Y)],
        heading,
        extent(channel::LENGTH, SizeChannel::Length),
        extent(channel::WIDTH, SizeChannel::Width),
    )
}

/// Corners `center + i * l * u + j * w * v` for `i, j = ±1/2`.
fn corner_offsets(b: &OrientedBox) -> [Point; 4] {
    b.corners().map(|c| [c[0] - b.center[0], c[1] - b.center[1]])
}

struct CollisionProblem<'a> {
    params: &'a CollisionFieldParams,
    // per step: (agent, corner offsets, size) for valid agents
    offsets: Vec<Vec<(usize, [Point; 4])>>,
}

impl<'a> CollisionProblem<'a> {
    fn new(x: &SceneTensor, params: &'a CollisionFieldParams, validity: &ValidityMask) -> Self {
        let offsets = (0..x.steps())
            .map(|s| {
                (0..x.agents())
                    .filter(|&a| validity.get(a, s))
                    .map(|a| (a, corner_offsets(&agent_box(x, a, s, &params.normalizer))))
                    .collect()
            })
            .collect();
        Self { params, offsets }
    }

    fn phi(&self, p: Point, c: Point) -> (f64, Point) {
        let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
        if (dx * dx + dy * dy).sqrt() >= self.params.cutoff {
            return (0.0, [0.0, 0.0]);
        }
        let den = dx.powi(4) + dy.powi(4) + self.params.epsilon;
        let v = 1.0 / den;
        // gradient with respect to p
        let g = [-4.0 * dx.powi(3) * v * v, -4.0 * dy.powi(3) * v * v];
        (v, g)
    }

    /// Objective and its gradient with respect to every (agent, step) center.
    fn evaluate(&self, pos: &[Vec<Point>], want_grad: bool) -> (f64, Vec<Vec<Point>>) {
        let mut total = 0.0;
        let mut grad = if want_grad {
            pos.iter().map(|r| vec![[0.0; 2]; r.len()]).collect()
        } else {
            Vec::new()
        };
        for (s, agents) in self.offsets.iter().enumerate() {
            for &(a, offs) in agents {
                let ca = pos[a][s];
                for off in offs {
                    let p = [ca[0] + off[0], ca[1] + off[1]];
                    for &(b, _) in agents {
                        if b == a {
                            continue;
                        }
                        let (v, g) = self.phi(p, pos[b][s]);
                        total += v;
                        if want_grad && v != 0.0 {
                            grad[a][s][0] += g[0];
                            grad[a][s][1] += g[1];
                            grad[b][s][0] -= g[0];
                            grad[b][s][1] -= g[1];
                        }
                    }
                }
            }
        }
        (total, grad)
    }
}

fn positions(x: &SceneTensor) -> Vec<Vec<Point>> {
    (0..x.agents())
        .map(|a| {
            (0..x.steps())
                .map(|s| [x.get(a, s, channel::X), x.get(a, s, channel::Y)])
                .collect()
        })
        .collect()
}

fn any_overlap(x: &SceneTensor, pos: &[Vec<Point>], params: &CollisionFieldParams, validity: &ValidityMask) -> bool {
    for s in 0..x.steps() {
        let boxes: Vec<OrientedBox> = (0..x.agents())
            .filter(|&a| validity.get(a, s))
            .map(|a| {
                let mut b = agent_box(x, a, s, &params.normalizer);
                b.center = pos[a][s];
                b
            })
            .collect();
        for i in 0..boxes.len() {
            for j in i + 1..boxes.len() {
                if boxes[i].overlaps(&boxes[j]) {
                    return true;
                }
            }
        }
    }
    false
}

/// Number of overlapping box pairs summed over steps.
pub fn overlap_count(x: &SceneTensor, validity: &ValidityMask, normalizer: &FeatureNormalizer) -> usize {
    let mut n = 0;
    for s in 0..x.steps() {
        let boxes: Vec<OrientedBox> = (0..x.agents())
            .filter(|&a| validity.get(a, s))
            .map(|a| agent_box(x, a, s, normalizer))
            .collect();
        for i in 0..boxes.len() {
            for j in i + 1..boxes.len() {
                n += boxes[i].overlaps(&boxes[j]) as usize;
            }
        }
    }
    n
}

/// Summed corner potential of every agent against every other agent.
pub fn collision_objective(x: &SceneTensor, params: &CollisionFieldParams, validity: &ValidityMask) -> f64 {
    CollisionProblem::new(x, params, validity)
        .evaluate(&positions(x), false)
        .0
}

/// Gradient descent with backtracking on the corner potential, moving only
/// agent positions. The direction combines a rigid per-agent translation
/// with a damped per-waypoint residual. Stops as soon as no boxes overlap,
/// so an overlap-free scene is returned unchanged.
pub fn clip_collision(
    x: &SceneTensor,
    params: &CollisionFieldParams,
    validity: &ValidityMask,
    frozen: Option<&Mask>,
) -> Result<SceneTensor> {
    if !(params.epsilon > 0.0) {
        return invalid("collision epsilon must be positive");
    }
    let problem = CollisionProblem::new(x, params, validity);
    let mut pos = positions(x);
    let movable: Vec<Vec<bool>> = (0..x.agents())
        .map(|a| {
            (0..x.steps())
                .map(|s| {
                    validity.get(a, s)
                        && !is_frozen(frozen, a, s, channel::X)
                        && !is_frozen(frozen, a, s, channel::Y)
                })
                .collect()
        })
        .collect();
    let (mut value, _) = problem.evaluate(&pos, false);
    for _ in 0..params.iterations {
        if !any_overlap(x, &pos, params, validity) {
            break;
        }
        let (_, grad) = problem.evaluate(&pos, true);
        let mut dir = vec![vec![[0.0; 2]; x.steps()]; x.agents()];
        let mut finite = true;
        for a in 0..x.agents() {
            let idx: Vec<usize> = (0..x.steps()).filter(|&s| movable[a][s]).collect();
            if idx.is_empty() {
                continue;
            }
            let n = idx.len() as f64;
            let mut sum = [0.0; 2];
            for &s in &idx {
                sum[0] += grad[a][s][0];
                sum[1] += grad[a][s][1];
            }
            let mean = [sum[0] / n, sum[1] / n];
            for &s in &idx {
                let g = grad[a][s];
                for k in 0..2 {
                    dir[a][s][k] = -(sum[k] + params.residual_weight * (g[k] - mean[k]));
                    finite &= dir[a][s][k].is_finite();
                }
            }
        }
        if !finite {
            log::warn!("non-finite collision gradient; clip skipped");
            return Ok(x.clone());
        }
        let biggest = dir
            .iter()
            .flatten()
            .map(|d| d[0].hypot(d[1]))
            .fold(0.0, f64::max);
        if biggest == 0.0 {
            break;
        }
        let mut eta = params.step / biggest;
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<Vec<Point>> = pos
                .iter()
                .zip(&dir)
                .map(|(p, d)| p.iter().zip(d).map(|(p, d)| [p[0] + eta * d[0], p[1] + eta * d[1]]).collect())
                .collect();
            let (v, _) = problem.evaluate(&trial, false);
            if v < value {
                pos = trial;
                value = v;
                accepted = true;
                break;
            }
            eta *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let mut out = x.clone();
    for a in 0..x.agents() {
        for s in 0..x.steps() {
            if movable[a][s] {
                out.set(a, s, channel::X, pos[a][s][0]);
                out.set(a, s, channel::Y, pos[a][s][1]);
            }
        }
    }
    Ok(out)
}

/// Squared distance to the nearest boundary point when outside every
/// polygon, zero inside.
pub fn onroad_potential(polygons: &[Vec<Point>], p: Point) -> f64 {
    if inside_any(polygons, p) {
        return 0.0;
    }
    closest_boundary_point(polygons, p).map_or(0.0, |(_, d)| d * d)
}

/// Pulls offroad waypoints of mostly-onroad trajectories toward the closest
/// road boundary point.
pub fn clip_onroad(
    x: &SceneTensor,
    params: &OnroadFieldParams,
    validity: &ValidityMask,
    frozen: Option<&Mask>,
) -> Result<SceneTensor> {
    if params.polygons.is_empty() {
        log::warn!("onroad clip with an empty road graph is the identity");
        return Ok(x.clone());
    }
    let mut out = x.clone();
    for a in 0..x.agents() {
        let steps: Vec<usize> = (0..x.steps()).filter(|&s| validity.get(a, s)).collect();
        if steps.is_empty() {
            continue;
        }
        let on = steps
            .iter()
            .filter(|&&s| inside_any(&params.polygons, [x.get(a, s, channel::X), x.get(a, s, channel::Y)]))
            .count();
        if (on as f64) / (steps.len() as f64) <= params.min_onroad_fraction {
            continue;
        }
        for &s in &steps {
            if is_frozen(frozen, a, s, channel::X) || is_frozen(frozen, a, s, channel::Y) {
                continue;
            }
            let mut p = [x.get(a, s, channel::X), x.get(a, s, channel::Y)];
            for _ in 0..params.iterations {
                if inside_any(&params.polygons, p) {
                    break;
                }
                let Some((q, _)) = closest_boundary_point(&params.polygons, p) else {
                    break;
                };
                // gradient of |p - q|^2 is 2 (p - q)
                p = [p[0] - params.step * 2.0 * (p[0] - q[0]), p[1] - params.step * 2.0 * (p[1] - q[1])];
            }
            out.set(a, s, channel::X, p[0]);
            out.set(a, s, channel::Y, p[1]);
        }
    }
    Ok(out)
}

/// Ancestral step with the clean estimate replaced by its clipped version.
#[allow(clippy::too_many_arguments)]
pub fn constrained_denoise_step<R: Rng + ?Sized>(
    z: &SceneTensor,
    x_hat: &SceneTensor,
    s: &NoiseVector,
    t: &NoiseVector,
    clips: &[ClipOperator],
    validity: &ValidityMask,
    rng: &mut R,
) -> Result<SceneTensor> {
    if clips.is_empty() {
        return denoise_step(z, x_hat, s, t, rng);
    }
    let clipped = apply_clips(x_hat, clips, validity, None)?;
    denoise_step(z, &clipped, s, t, rng)
}

/// One composed application of `clips` to a finished sample.
pub fn post_diffusion_clip(x: &SceneTensor, clips: &[ClipOperator], validity: &ValidityMask) -> Result<SceneTensor> {
    apply_clips(x, clips, validity, None)
}
