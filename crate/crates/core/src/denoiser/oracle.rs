//! Closed-form posterior mean for a diagonal Gaussian-mixture scene prior.
//!
//! Under `z = alpha x + sigma eps` every component `k` gives an independent
//! Gaussian per entry, so `E[x | z]` is a responsibility-weighted sum of
//! per-component affine estimates. Inpainted entries are treated as exact
//! observations of `x`, which conditions each component exactly.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ConditioningContext, Denoiser, NfeCounter};
use crate::diffusion::{v_from_z_x, NoiseVector};
use crate::error::{invalid, Result};
use crate::scene::{InpaintingSpec, SceneTensor};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Mixture of diagonal Gaussians over a normalized `(A, T, D)` tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureScenePrior {
    agents: usize,
    history: usize,
    future: usize,
    features: usize,
    components: Vec<MixtureComponent>,
}

impl MixtureScenePrior {
    pub fn new(
        agents: usize,
        history: usize,
        future: usize,
        features: usize,
        components: Vec<MixtureComponent>,
    ) -> Result<Self> {
        let n = agents * (history + future) * features;
        if components.is_empty() {
            return invalid("mixture needs at least one component");
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return invalid(format!("mixture weights sum to {total}, expected 1"));
        }
        for (k, c) in components.iter().enumerate() {
            if !(c.weight > 0.0) {
                return invalid(format!("component {k} weight must be positive"));
            }
            if c.mean.len() != n || c.variance.len() != n {
                return invalid(format!("component {k} has wrong tensor size"));
            }
            if c.variance.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return invalid(format!("component {k} covariance must be strictly positive"));
            }
        }
        Ok(Self {
            agents,
            history,
            future,
            features,
            components,
        })
    }

    /// Single diagonal Gaussian.
    pub fn gaussian(template: &SceneTensor, mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        Self::new(
            template.agents(),
            template.history(),
            template.future(),
            template.features(),
            vec![MixtureComponent {
                weight: 1.0,
                mean,
                variance,
            }],
        )
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn template(&self) -> SceneTensor {
        SceneTensor::zeros(self.agents, self.history, self.future, self.features)
    }

    pub fn component_mean(&self, k: usize) -> SceneTensor {
        SceneTensor::from_vec(
            self.agents,
            self.history,
            self.future,
            self.features,
            self.components[k].mean.clone(),
        )
        .expect("component size checked at construction")
    }

    /// Mixture mean.
    pub fn mean(&self) -> SceneTensor {
        let mut out = self.template();
        for c in &self.components {
            for (o, m) in out.as_mut_slice().iter_mut().zip(&c.mean) {
                *o += c.weight * m;
            }
        }
        out
    }

    fn check_shape(&self, x: &SceneTensor) -> Result<()> {
        if x.agents() != self.agents || x.steps() != self.history + self.future || x.features() != self.features {
            return invalid("tensor shape does not match the prior");
        }
        Ok(())
    }

    /// Draw one sample and the index of the component it came from.
    pub fn sample_with_component<R: Rng + ?Sized>(&self, rng: &mut R) -> (SceneTensor, usize) {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut k = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                k = i;
                break;
            }
        }
        let c = &self.components[k];
        let mut out = self.template();
        for (i, o) in out.as_mut_slice().iter_mut().enumerate() {
            let e: f64 = rng.sample(StandardNormal);
            *o = c.mean[i] + c.variance[i].sqrt() * e;
        }
        (out, k)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SceneTensor {
        self.sample_with_component(rng).0
    }

    /// Posterior component probabilities given exactly observed entries.
    pub fn observed_responsibilities(&self, spec: &InpaintingSpec) -> Result<Vec<f64>> {
        self.check_shape(&spec.context)?;
        let ctx = spec.context.as_slice();
        let observed = observed_indices(spec);
        let logits: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                c.weight.ln()
                    + observed
                        .iter()
                        .map(|&i| log_normal(ctx[i], c.mean[i], c.variance[i]))
                        .sum::<f64>()
            })
            .collect();
        Ok(softmax(&logits))
    }

    /// Exact sample from the prior conditioned on the inpainted entries.
    pub fn sample_conditional<R: Rng + ?Sized>(
        &self,
        spec: &InpaintingSpec,
        rng: &mut R,
    ) -> Result<SceneTensor> {
        let r = self.observed_responsibilities(spec)?;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut k = r.len() - 1;
        for (i, p) in r.iter().enumerate() {
            acc += p;
            if u < acc {
                k = i;
                break;
            }
        }
        let c = &self.components[k];
        let mut out = self.template();
        for (i, o) in out.as_mut_slice().iter_mut().enumerate() {
            let e: f64 = rng.sample(StandardNormal);
            *o = c.mean[i] + c.variance[i].sqrt() * e;
        }
        crate::scene::apply_inpainting_in_place(&mut out, spec);
        Ok(out)
    }

    /// `E[x | observed entries]`.
    pub fn conditional_mean(&self, spec: &InpaintingSpec) -> Result<SceneTensor> {
        let r = self.observed_responsibilities(spec)?;
        let mut out = self.template();
        for (c, w) in self.components.iter().zip(&r) {
            for (o, m) in out.as_mut_slice().iter_mut().zip(&c.mean) {
                *o += w * m;
            }
        }
        crate::scene::apply_inpainting_in_place(&mut out, spec);
        Ok(out)
    }

    /// Closed-form `E[x | z_t, observed entries]` and the component
    /// responsibilities.
    pub fn posterior_mean(
        &self,
        z: &SceneTensor,
        t: &NoiseVector,
        spec: &InpaintingSpec,
    ) -> Result<(SceneTensor, Vec<f64>)> {
        self.check_shape(z)?;
        if t.len() != z.steps() {
            return invalid("noise vector length differs from the step count");
        }
        let zs = z.as_slice();
        let ctx = spec.context.as_slice();
        let nf = self.features;
        let ns = self.history + self.future;
        let n = zs.len();
        let mut observed = vec![false; n];
        for i in observed_indices(spec) {
            observed[i] = true;
        }
        let mut logits = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let mut ll = c.weight.ln();
            for i in 0..n {
                if observed[i] {
                    ll += log_normal(ctx[i], c.mean[i], c.variance[i]);
                } else {
                    let l = t.level((i / nf) % ns);
                    let var = l.alpha * l.alpha * c.variance[i] + l.sigma * l.sigma;
                    ll += log_normal(zs[i], l.alpha * c.mean[i], var);
                }
            }
            logits.push(ll);
        }
        let r = softmax(&logits);
        let mut out = self.template();
        let o = out.as_mut_slice();
        for (c, &w) in self.components.iter().zip(&r) {
            if w == 0.0 {
                continue;
            }
            for i in 0..n {
                if observed[i] {
                    continue;
                }
                let l = t.level((i / nf) % ns);
                let var = l.alpha * l.alpha * c.variance[i] + l.sigma * l.sigma;
                let gain = l.alpha * c.variance[i] / var;
                o[i] += w * (c.mean[i] + gain * (zs[i] - l.alpha * c.mean[i]));
            }
        }
        for i in 0..n {
            if observed[i] {
                o[i] = ctx[i];
            }
        }
        Ok((out, r))
    }
}

fn observed_indices(spec: &InpaintingSpec) -> Vec<usize> {
    let c = &spec.context;
    let mut out = Vec::new();
    let mut i = 0;
    for a in 0..c.agents() {
        for s in 0..c.steps() {
            for f in 0..c.features() {
                if spec.mask.get(a, s, f) {
                    out.push(i);
                }
                i += 1;
            }
        }
    }
    out
}

#[inline]
fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln() + d * d / var)
}

/// Normalized probabilities from log-weights via log-sum-exp.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Ground-truth conditional denoiser for a mixture prior.
#[derive(Debug)]
pub struct OracleDenoiser {
    prior: MixtureScenePrior,
    counter: NfeCounter,
}

impl OracleDenoiser {
    pub fn new(prior: MixtureScenePrior) -> Self {
        Self {
            prior,
            counter: NfeCounter::default(),
        }
    }

    pub fn prior(&self) -> &MixtureScenePrior {
        &self.prior
    }

    pub fn posterior_mean(
        &self,
        z: &SceneTensor,
        t: &NoiseVector,
        ctx: &ConditioningContext,
    ) -> Result<SceneTensor> {
        Ok(self.prior.posterior_mean(z, t, &ctx.inpainting)?.0)
    }
}

impl Denoiser for OracleDenoiser {
    fn predict_v(
        &self,
        z: &SceneTensor,
        t: &NoiseVector,
        ctx: &ConditioningContext,
    ) -> Result<SceneTensor> {
        self.counter.bump();
        let x_hat = self.posterior_mean(z, t, ctx)?;
        v_from_z_x(z, &x_hat, t)
    }

    fn nfe(&self) -> u64 {
        self.counter.get()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule;
    use crate::scene::Mask;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_template() -> SceneTensor {
        SceneTensor::zeros(1, 0, 1, 1)
    }

    #[test]
    fn single_gaussian_is_affine() {
        let tpl = SceneTensor::zeros(2, 1, 2, 2);
        let n = tpl.len();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mean: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..2.0)).collect();
        let prior = MixtureScenePrior::gaussian(&tpl, mean.clone(), var.clone()).unwrap();
        let ts = [0.2, 0.5, 0.9];
        let t = NoiseVector::new(&ts).unwrap();
        let mut z = tpl.clone();
        for v in z.as_mut_slice() {
            *v = rng.sample(StandardNormal);
        }
        let spec = InpaintingSpec::empty_like(&tpl);
        let (xh, r) = prior.posterior_mean(&z, &t, &spec).unwrap();
        assert_eq!(r, vec![1.0]);
        for i in 0..n {
            let l = schedule(ts[(i / 2) % 3]).unwrap();
            let expect = mean[i]
                + l.alpha * var[i] / (l.alpha * l.alpha * var[i] + l.sigma * l.sigma)
                    * (z.as_slice()[i] - l.alpha * mean[i]);
            assert!((xh.as_slice()[i] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn responsibilities_stay_finite_for_extreme_inputs() {
        let tpl = scalar_template();
        let sd = 0.01f64;
        let prior = MixtureScenePrior::new(
            1,
            0,
            1,
            1,
            vec![
                MixtureComponent {
                    weight: 0.5,
                    mean: vec![-0.5],
                    variance: vec![sd * sd],
                },
                MixtureComponent {
                    weight: 0.5,
                    mean: vec![0.5],
                    variance: vec![sd * sd],
                },
            ],
        )
        .unwrap();
        let spec = InpaintingSpec::empty_like(&tpl);
        for &t in &[0.0, 0.3, 0.9, 0.999] {
            for &zv in &[-50.0, -1.0, 0.0, 0.5, 3.0, 50.0] {
                let mut z = tpl.clone();
                z.set(0, 0, 0, zv);
                let (xh, r) = prior
                    .posterior_mean(&z, &NoiseVector::new(&[t]).unwrap(), &spec)
                    .unwrap();
                assert!(r.iter().all(|p| p.is_finite()));
                assert!(xh.all_finite());
            }
        }
    }

    #[test]
    fn observed_entries_pin_the_estimate() {
        let tpl = SceneTensor::zeros(1, 1, 1, 1);
        let prior = MixtureScenePrior::gaussian(&tpl, vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let mut ctx = tpl.clone();
        ctx.set(0, 0, 0, 0.7);
        let mask = Mask::new([1, 2, 1], [1, 2, 1], vec![true, false]).unwrap();
        let spec = InpaintingSpec::new(mask, ctx).unwrap();
        let z = tpl.clone();
        let (xh, _) = prior
            .posterior_mean(&z, &NoiseVector::uniform(2, 0.5).unwrap(), &spec)
            .unwrap();
        assert_eq!(xh.get(0, 0, 0), 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = prior.sample_conditional(&spec, &mut rng).unwrap();
        assert_eq!(s.get(0, 0, 0), 0.7);
    }

    #[test]
    fn rejects_bad_priors() {
        assert!(MixtureScenePrior::new(1, 0, 1, 1, vec![]).is_err());
        let c = |w: f64, v: f64| MixtureComponent {
            weight: w,
            mean: vec![0.0],
            variance: vec![v],
        };
        assert!(MixtureScenePrior::new(1, 0, 1, 1, vec![c(0.5, 1.0)]).is_err());
        assert!(MixtureScenePrior::new(1, 0, 1, 1, vec![c(1.0, 0.0)]).is_err());
        assert!(MixtureScenePrior::new(1, 0, 1, 1, vec![c(1.0, 1.0)]).is_ok());
    }
}
