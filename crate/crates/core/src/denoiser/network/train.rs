//! Training loop for the v-prediction loss with task and noise mixing.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tape::Mat;
use super::TrainableDenoiser;
use crate::denoiser::{ConditioningContext, RoadContext};
use crate::diffusion::{
    forward_noise, shifted_monotone_schedule, standard_normal_like, v_from_x_eps, NoiseVector,
};
use crate::error::{invalid, Error, Result};
use crate::scene::{
    make_bp_mask, sample_control_mask, sample_scenegen_mask, InpaintingSpec, Mask, SceneTensor,
    ValidityMask,
};

/// One clean scene with its validity and roadgraph.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub scene: SceneTensor,
    pub validity: ValidityMask,
    pub road: Arc<RoadContext>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Probability of the monotone temporal schedule over a shared scalar.
    pub p_monotone: f64,
    /// Probability of the behavior-prediction mask over scene generation.
    pub p_bp: f64,
    /// Probability of adding a control mask on top of the task mask.
    pub p_control: f64,
    /// Per-channel control probabilities.
    pub control_feature_probs: Vec<f64>,
}

impl TrainConfig {
    pub fn sgd(learning_rate: f64, features: usize) -> Self {
        Self {
            learning_rate,
            optimizer: OptimizerKind::SgdMomentum { momentum: 0.9 },
            clip_norm: 1.0,
            p_monotone: 0.5,
            p_bp: 0.5,
            p_control: 0.5,
            control_feature_probs: default_control_probs(features),
        }
    }

    pub fn adam(learning_rate: f64, features: usize) -> Self {
        Self {
            optimizer: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            ..Self::sgd(learning_rate, features)
        }
    }
}

/// Positions are controlled most often, the other channels occasionally.
fn default_control_probs(features: usize) -> Vec<f64> {
    (0..features).map(|d| if d < 2 { 0.5 } else { 0.1 }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub loss: f64,
    pub grad_norm: f64,
    /// Examples in the batch that used the monotone schedule.
    pub monotone: usize,
}

/// Noise levels for one training example: a shared uniform scalar, or the
/// monotone ramp shifted by a uniform phase so that every buffer layout a
/// rolling rollout can present is covered. Returns whether the monotone
/// branch was taken.
pub fn sample_noise_levels<R: Rng + ?Sized>(
    history: usize,
    future: usize,
    p_monotone: f64,
    rng: &mut R,
) -> Result<(NoiseVector, bool)> {
    if rng.gen::<f64>() < p_monotone {
        let phase: f64 = rng.gen();
        Ok((shifted_monotone_schedule(history, future, phase)?, true))
    } else {
        let t: f64 = rng.gen();
        Ok((NoiseVector::uniform(history + future, t)?, false))
    }
}

/// Task mask: behavior prediction or scene generation, optionally joined
/// with a control mask, restricted to valid entries.
pub fn sample_task_mask<R: Rng + ?Sized>(
    example: &TrainingExample,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Mask> {
    let s = &example.scene;
    let (na, ns, nf) = (s.agents(), s.steps(), s.features());
    let agent_valid = example.validity.agent_rows();
    let task = if rng.gen::<f64>() < config.p_bp && s.history() > 0 && s.future() > 0 {
        make_bp_mask(s.history(), ns, na, nf)?
    } else {
        sample_scenegen_mask(&agent_valid, ns, nf, rng)
    };
    let mut mask = if rng.gen::<f64>() < config.p_control {
        task.or(&sample_control_mask(&agent_valid, ns, &config.control_feature_probs, rng)?)?
    } else {
        task
    }
    .expand();
    for a in 0..na {
        for st in 0..ns {
            if !example.validity.get(a, st) {
                for f in 0..nf {
                    mask.set(a, st, f, false);
                }
            }
        }
    }
    Ok(mask)
}

struct Prepared {
    z: SceneTensor,
    t: NoiseVector,
    ctx: ConditioningContext,
    target: SceneTensor,
    weight: Vec<f64>,
}

/// Single-writer optimizer state around a network.
#[derive(Debug)]
pub struct Trainer {
    net: TrainableDenoiser,
    config: TrainConfig,
    first: Vec<Mat>,
    second: Vec<Mat>,
    steps: u64,
}

impl Trainer {
    pub fn new(net: TrainableDenoiser, config: TrainConfig) -> Result<Self> {
        if config.control_feature_probs.len() != net.config().features {
            return invalid("control probabilities must have one entry per feature");
        }
        if !(config.learning_rate > 0.0) || !(config.clip_norm > 0.0) {
            return invalid("learning rate and clip norm must be positive");
        }
        let zeros: Vec<Mat> = net.parameters().iter().map(|m| Mat::zeros(m.rows, m.cols)).collect();
        Ok(Self {
            net,
            config,
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        })
    }

    pub fn network(&self) -> &TrainableDenoiser {
        &self.net
    }

    pub fn into_network(self) -> TrainableDenoiser {
        self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn prepare<R: Rng + ?Sized>(&self, ex: &TrainingExample, rng: &mut R) -> Result<(Prepared, bool)> {
        let x = &ex.scene;
        let (t, monotone) = sample_noise_levels(x.history(), x.future(), self.config.p_monotone, rng)?;
        let eps = standard_normal_like(x, rng);
        let z = forward_noise(x, &t, &eps)?;
        let target = v_from_x_eps(x, &eps, &t)?;
        let mask = sample_task_mask(ex, &self.config, rng)?;
        let inpainting = InpaintingSpec::new(mask, x.clone())?;
        let ctx = ConditioningContext::new(inpainting, ex.validity.clone(), ex.road.clone())?;
        // Invalid entries and noise-free steps (where the prediction has no
        // effect on the clean estimate) carry no loss.
        let nf = x.features();
        let ns = x.steps();
        let weight = (0..x.len())
            .map(|i| {
                let (a, s) = (i / (nf * ns), (i / nf) % ns);
                if ex.validity.get(a, s) && t.level(s).t > 0.0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Ok((
            Prepared {
                z,
                t,
                ctx,
                target,
                weight,
            },
            monotone,
        ))
    }

    /// Batch-mean loss and gradients under freshly drawn noise and masks,
    /// without updating parameters.
    pub fn batch_gradients<R: Rng + ?Sized>(
        &self,
        batch: &[TrainingExample],
        rng: &mut R,
    ) -> Result<(f64, Vec<Mat>, usize)> {
        if batch.is_empty() {
            return invalid("empty training batch");
        }
        let mut prepared = Vec::with_capacity(batch.len());
        let mut monotone = 0;
        for ex in batch {
            let (p, m) = self.prepare(ex, rng)?;
            monotone += m as usize;
            prepared.push(p);
        }
        let results: Vec<Result<(f64, Vec<Mat>)>> = prepared
            .par_iter()
            .map(|p| self.net.loss_and_gradients(&p.z, &p.t, &p.ctx, &p.target, &p.weight))
            .collect();
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut grads: Vec<Mat> = self.net.parameters().iter().map(|m| Mat::zeros(m.rows, m.cols)).collect();
        for r in results {
            let (l, g) = r?;
            loss += scale * l;
            for (acc, gi) in grads.iter_mut().zip(&g) {
                for (a, b) in acc.data.iter_mut().zip(&gi.data) {
                    *a += scale * b;
                }
            }
        }
        Ok((loss, grads, monotone))
    }

    /// One optimizer step. A non-finite loss or gradient rejects the step
    /// and leaves the parameters untouched.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        batch: &[TrainingExample],
        rng: &mut R,
    ) -> Result<StepReport> {
        let (loss, mut grads, monotone) = self.batch_gradients(batch, rng)?;
        let norm = grads
            .iter()
            .flat_map(|g| g.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::NonFiniteLoss(loss));
        }
        if norm > self.config.clip_norm {
            let s = self.config.clip_norm / norm;
            for g in &mut grads {
                for x in &mut g.data {
                    *x *= s;
                }
            }
        }
        self.steps += 1;
        let lr = self.config.learning_rate;
        match self.config.optimizer {
            OptimizerKind::SgdMomentum { momentum } => {
                for ((p, g), m) in self.net.parameters_mut().iter_mut().zip(&grads).zip(&mut self.first) {
                    for ((pv, gv), mv) in p.data.iter_mut().zip(&g.data).zip(&mut m.data) {
                        *mv = momentum * *mv + gv;
                        *pv -= lr * *mv;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.steps as i32);
                let c2 = 1.0 - beta2.powi(self.steps as i32);
                let params = self.net.parameters_mut();
                for (i, p) in params.iter_mut().enumerate() {
                    let (m, v) = (&mut self.first[i].data, &mut self.second[i].data);
                    for (j, pv) in p.data.iter_mut().enumerate() {
                        let gv = grads[i].data[j];
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gv;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gv * gv;
                        *pv -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(StepReport {
            loss,
            grad_norm: norm,
            monotone,
        })
    }
}
