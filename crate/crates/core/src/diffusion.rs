//! Variance-preserving diffusion math under the alpha-cosine schedule,
//! with noise levels that may differ per physical timestep.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scene::SceneTensor;

/// Lower bound applied to sigma wherever it is a divisor.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Default number of reverse-diffusion steps.
pub const DEFAULT_DENOISE_STEPS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevel {
    pub t: f64,
    pub alpha: f64,
    pub sigma: f64,
}

impl NoiseLevel {
    /// `alpha = cos(pi t / 2)`, `sigma = sin(pi t / 2)`, with the endpoints
    /// pinned exactly.
    pub fn new(t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return invalid(format!("diffusion time {t} outside [0, 1]"));
        }
        Ok(Self::from_unchecked(t))
    }

    fn from_unchecked(t: f64) -> Self {
        let (sigma, alpha) = if t == 0.0 {
            (0.0, 1.0)
        } else if t == 1.0 {
            (1.0, 0.0)
        } else {
            (FRAC_PI_2 * t).sin_cos()
        };
        Self { t, alpha, sigma }
    }
}

/// Schedule for a scalar time.
pub fn schedule(t: f64) -> Result<NoiseLevel> {
    NoiseLevel::new(t)
}

/// Schedule applied elementwise.
pub fn schedule_all(ts: &[f64]) -> Result<Vec<NoiseLevel>> {
    ts.iter().map(|&t| NoiseLevel::new(t)).collect()
}

/// One diffusion time per physical timestep, broadcast over agents and
/// features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseVector {
    levels: Vec<NoiseLevel>,
}

impl NoiseVector {
    pub fn new(ts: &[f64]) -> Result<Self> {
        Ok(Self {
            levels: schedule_all(ts)?,
        })
    }

    pub fn uniform(steps: usize, t: f64) -> Result<Self> {
        Self::new(&vec![t; steps])
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    #[inline]
    pub fn level(&self, step: usize) -> NoiseLevel {
        self.levels[step]
    }

    pub fn times(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.t).collect()
    }

    pub fn levels(&self) -> &[NoiseLevel] {
        &self.levels
    }

    pub fn is_monotone(&self) -> bool {
        self.levels.windows(2).all(|w| w[0].t <= w[1].t)
    }
}

/// Monotone temporal schedule: zero on history, `j / F` on future step `j`
/// (so the last future step sits at `(F - 1) / F`).
pub fn monotone_schedule(history: usize, future: usize) -> Result<NoiseVector> {
    if future == 0 {
        return invalid("monotone schedule needs at least one future step");
    }
    let ts: Vec<f64> = (0..history + future)
        .map(|tau| (tau as f64 - history as f64).max(0.0) / future as f64)
        .collect();
    NoiseVector::new(&ts)
}

/// Monotone schedule shifted later by `phase` in `[0, 1]` slots and
/// clamped to `[0, 1]`; `phase = 0` is [`monotone_schedule`], `phase = 1`
/// is the level layout a rolling buffer holds right before its denoiser
/// call.
pub fn shifted_monotone_schedule(history: usize, future: usize, phase: f64) -> Result<NoiseVector> {
    if future == 0 {
        return invalid("monotone schedule needs at least one future step");
    }
    if !(0.0..=1.0).contains(&phase) {
        return invalid(format!("phase {phase} outside [0, 1]"));
    }
    let ts: Vec<f64> = (0..history + future)
        .map(|tau| {
            if tau < history {
                0.0
            } else {
                ((tau - history) as f64 + phase).min(future as f64) / future as f64
            }
        })
        .collect();
    NoiseVector::new(&ts)
}

fn check_steps(x: &SceneTensor, t: &NoiseVector) -> Result<()> {
    if t.len() != x.steps() {
        return invalid(format!(
            "noise vector has {} levels for {} steps",
            t.len(),
            x.steps()
        ));
    }
    Ok(())
}

/// Applies `f(value, level)` to every entry, broadcasting the level along
/// agents and features.
fn map_levels(
    x: &SceneTensor,
    t: &NoiseVector,
    mut f: impl FnMut(usize, f64, NoiseLevel) -> f64,
) -> SceneTensor {
    let mut out = x.clone();
    let nf = x.features();
    let ns = x.steps();
    for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
        let step = (i / nf) % ns;
        *v = f(i, *v, t.level(step));
    }
    out
}

/// `z = alpha x + sigma eps`, per physical step.
pub fn forward_noise(x: &SceneTensor, t: &NoiseVector, eps: &SceneTensor) -> Result<SceneTensor> {
    check_steps(x, t)?;
    if !x.same_shape(eps) {
        return invalid("noise tensor shape differs from scene");
    }
    let e = eps.as_slice();
    Ok(map_levels(x, t, |i, xv, l| l.alpha * xv + l.sigma * e[i]))
}

pub fn standard_normal_like<R: Rng + ?Sized>(x: &SceneTensor, rng: &mut R) -> SceneTensor {
    let mut out = SceneTensor::zeros_like(x);
    for v in out.as_mut_slice() {
        *v = rng.sample(StandardNormal);
    }
    out
}

/// `v = alpha eps - sigma x`.
pub fn v_from_x_eps(x: &SceneTensor, eps: &SceneTensor, t: &NoiseVector) -> Result<SceneTensor> {
    check_steps(x, t)?;
    let e = eps.as_slice();
    Ok(map_levels(x, t, |i, xv, l| l.alpha * e[i] - l.sigma * xv))
}

/// `x = alpha z - sigma v`.
pub fn x_from_z_v(z: &SceneTensor, v: &SceneTensor, t: &NoiseVector) -> Result<SceneTensor> {
    check_steps(z, t)?;
    if !z.same_shape(v) {
        return invalid("v-prediction shape differs from z");
    }
    let vv = v.as_slice();
    Ok(map_levels(z, t, |i, zv, l| l.alpha * zv - l.sigma * vv[i]))
}

/// `v = (alpha z - x) / sigma`, with sigma floored.
pub fn v_from_z_x(z: &SceneTensor, x: &SceneTensor, t: &NoiseVector) -> Result<SceneTensor> {
    check_steps(z, t)?;
    let xv = x.as_slice();
    Ok(map_levels(z, t, |i, zv, l| {
        (l.alpha * zv - xv[i]) / l.sigma.max(SIGMA_FLOOR)
    }))
}

/// Coefficients of the Gaussian transition from level `t` down to `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionParams {
    pub s: NoiseLevel,
    pub t: NoiseLevel,
    pub alpha_ts: f64,
    pub sigma_ts_sq: f64,
    /// Weight on `z_t` in the posterior mean.
    pub coef_z: f64,
    /// Weight on the clean estimate in the posterior mean.
    pub coef_x: f64,
    /// Posterior variance.
    pub variance: f64,
}

impl TransitionParams {
    pub fn new(s: f64, t: f64) -> Result<Self> {
        if !(s < t) {
            return invalid(format!("transition needs s < t, got s={s}, t={t}"));
        }
        let ls = NoiseLevel::new(s)?;
        let lt = NoiseLevel::new(t)?;
        Ok(Self::from_levels(ls, lt))
    }

    fn from_levels(ls: NoiseLevel, lt: NoiseLevel) -> Self {
        let alpha_ts = lt.alpha / ls.alpha;
        let sigma_ts_sq = (lt.sigma * lt.sigma - alpha_ts * alpha_ts * ls.sigma * ls.sigma).max(0.0);
        let sigma_t_sq = lt.sigma.max(SIGMA_FLOOR).powi(2);
        let sigma_s_sq = ls.sigma * ls.sigma;
        Self {
            s: ls,
            t: lt,
            alpha_ts,
            sigma_ts_sq,
            coef_z: alpha_ts * sigma_s_sq / sigma_t_sq,
            coef_x: ls.alpha * sigma_ts_sq / sigma_t_sq,
            variance: sigma_ts_sq * sigma_s_sq / sigma_t_sq,
        }
    }
}

/// Per-step transition parameters. A step whose levels are both zero is
/// already clean and passes the clean estimate through.
fn step_params(s: &NoiseVector, t: &NoiseVector) -> Result<Vec<Option<TransitionParams>>> {
    if s.len() != t.len() {
        return invalid("s and t noise vectors differ in length");
    }
    s.levels()
        .iter()
        .zip(t.levels())
        .enumerate()
        .map(|(i, (ls, lt))| {
            if ls.t == 0.0 && lt.t == 0.0 {
                Ok(None)
            } else if lt.t == 0.0 {
                invalid(format!("step {i}: t = 0 cannot be denoised further"))
            } else if ls.t >= lt.t {
                invalid(format!("step {i}: need s < t, got s={}, t={}", ls.t, lt.t))
            } else {
                Ok(Some(TransitionParams::from_levels(*ls, *lt)))
            }
        })
        .collect()
}

/// Posterior mean of `z_s` given `z_t` and the clean estimate.
pub fn posterior_mean(
    z_t: &SceneTensor,
    x_hat: &SceneTensor,
    s: &NoiseVector,
    t: &NoiseVector,
) -> Result<SceneTensor> {
    check_steps(z_t, t)?;
    let params = step_params(s, t)?;
    let xv = x_hat.as_slice();
    let nf = z_t.features();
    let ns = z_t.steps();
    let mut out = z_t.clone();
    for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
        *v = match params[(i / nf) % ns] {
            Some(p) => p.coef_z * *v + p.coef_x * xv[i],
            None => xv[i],
        };
    }
    Ok(out)
}

/// Ancestral step `z_s ~ N(mu_{t->s}, sigma_{t->s}^2)` with fresh noise.
pub fn denoise_step<R: Rng + ?Sized>(
    z_t: &SceneTensor,
    x_hat: &SceneTensor,
    s: &NoiseVector,
    t: &NoiseVector,
    rng: &mut R,
) -> Result<SceneTensor> {
    check_steps(z_t, t)?;
    if !z_t.same_shape(x_hat) {
        return invalid("clean estimate shape differs from z");
    }
    let params = step_params(s, t)?;
    let xv = x_hat.as_slice();
    let nf = z_t.features();
    let ns = z_t.steps();
    let mut out = z_t.clone();
    for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
        *v = match params[(i / nf) % ns] {
            Some(p) => {
                let mean = p.coef_z * *v + p.coef_x * xv[i];
                if p.variance > 0.0 {
                    let e: f64 = rng.sample(StandardNormal);
                    mean + p.variance.sqrt() * e
                } else {
                    mean
                }
            }
            None => xv[i],
        };
    }
    Ok(out)
}

/// Deterministic (DDIM, eta = 0) step: `z_s = alpha_s x + sigma_s eps_hat`.
pub fn ddim_step(
    z_t: &SceneTensor,
    x_hat: &SceneTensor,
    s: &NoiseVector,
    t: &NoiseVector,
) -> Result<SceneTensor> {
    check_steps(z_t, t)?;
    step_params(s, t)?;
    let xv = x_hat.as_slice();
    let nf = z_t.features();
    let ns = z_t.steps();
    let mut out = z_t.clone();
    for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
        let step = (i / nf) % ns;
        let (ls, lt) = (s.level(step), t.level(step));
        *v = if ls.sigma == 0.0 || lt.t == 0.0 {
            xv[i]
        } else {
            let eps = (*v - lt.alpha * xv[i]) / lt.sigma.max(SIGMA_FLOOR);
            ls.alpha * xv[i] + ls.sigma * eps
        };
    }
    Ok(out)
}

/// Two-evaluation Heun corrector in clean-estimate space: predict at `t`,
/// take the deterministic step, re-predict at `s` and average both clean
/// and noise estimates. When `s` is all zeros only one evaluation is made.
pub fn second_order_step(
    z_t: &SceneTensor,
    s: &NoiseVector,
    t: &NoiseVector,
    mut predict_x: impl FnMut(&SceneTensor, &NoiseVector) -> Result<SceneTensor>,
) -> Result<SceneTensor> {
    let x_t = predict_x(z_t, t)?;
    let euler = ddim_step(z_t, &x_t, s, t)?;
    if s.levels().iter().all(|l| l.sigma == 0.0) {
        return Ok(euler);
    }
    let x_s = predict_x(&euler, s)?;
    let (xt, xs, zt, ze) = (x_t.as_slice(), x_s.as_slice(), z_t.as_slice(), euler.as_slice());
    let nf = z_t.features();
    let ns = z_t.steps();
    let mut out = euler.clone();
    for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
        let step = (i / nf) % ns;
        let (ls, lt) = (s.level(step), t.level(step));
        if ls.sigma == 0.0 || lt.t == 0.0 {
            *v = xt[i];
            continue;
        }
        let eps_t = (zt[i] - lt.alpha * xt[i]) / lt.sigma.max(SIGMA_FLOOR);
        let eps_s = (ze[i] - ls.alpha * xs[i]) / ls.sigma.max(SIGMA_FLOOR);
        *v = ls.alpha * 0.5 * (xt[i] + xs[i]) + ls.sigma * 0.5 * (eps_t + eps_s);
    }
    Ok(out)
}

/// Spacing of the reverse-diffusion time grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridSpacing {
    #[default]
    UniformT,
    /// Uniform in log signal-to-noise ratio between the clamped endpoints.
    LogSnr,
}

/// Strictly decreasing diffusion times `1 = t_0 > ... > t_N = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerGrid {
    times: Vec<f64>,
}

impl SamplerGrid {
    pub fn uniform(steps: usize) -> Result<Self> {
        Self::with_spacing(steps, GridSpacing::UniformT)
    }

    pub fn with_spacing(steps: usize, spacing: GridSpacing) -> Result<Self> {
        if steps == 0 {
            return invalid("sampler grid needs at least one step");
        }
        let n = steps as f64;
        let times = match spacing {
            GridSpacing::UniformT => (0..=steps).map(|i| 1.0 - i as f64 / n).collect(),
            GridSpacing::LogSnr => {
                // logsnr = 2 log(alpha / sigma); t = (2/pi) atan(exp(-logsnr/2))
                let (hi, lo) = (-12.0f64, 12.0f64);
                let mut ts: Vec<f64> = (0..=steps)
                    .map(|i| {
                        let l = hi + (lo - hi) * i as f64 / n;
                        (2.0 / std::f64::consts::PI) * (-l / 2.0).exp().atan()
                    })
                    .collect();
                ts[0] = 1.0;
                ts[steps] = 0.0;
                ts
            }
        };
        Ok(Self { times })
    }

    /// Grid restricted to levels at or below `t_star`, starting exactly at
    /// `t_star` and keeping at least one step. Empty when `t_star == 0`.
    pub fn truncated(&self, t_star: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t_star) {
            return invalid(format!("start level {t_star} outside [0, 1]"));
        }
        if t_star == 0.0 {
            return Ok(Self { times: vec![0.0] });
        }
        let mut times = vec![t_star];
        times.extend(self.times.iter().copied().filter(|&t| t < t_star));
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of transitions.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn pairs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.windows(2).map(|w| (w[0], w[1]))
    }
}
