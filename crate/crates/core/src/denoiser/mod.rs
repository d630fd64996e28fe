//! Denoiser contract `v_hat(z_t, t, context)` and its implementations.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffusion::{x_from_z_v, NoiseVector};
use crate::error::{invalid, Result};
use crate::scene::{InpaintingSpec, SceneTensor, ValidityMask};

pub mod network;
pub mod oracle;

pub use network::{NetworkConfig, SizePreset, TrainableDenoiser};
pub use oracle::{MixtureComponent, MixtureScenePrior, OracleDenoiser};

/// Kind of a global-context polyline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolylineKind {
    LaneCenter,
    RoadEdge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextPolyline {
    pub kind: PolylineKind,
    /// Points in normalized position units.
    pub points: Vec<[f64; 2]>,
}

/// Global scene context (roadgraph) in normalized units.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoadContext {
    pub polylines: Vec<ContextPolyline>,
}

/// Everything a denoiser conditions on besides `z_t` and `t`.
#[derive(Debug, Clone)]
pub struct ConditioningContext {
    pub inpainting: InpaintingSpec,
    pub validity: ValidityMask,
    pub road: Arc<RoadContext>,
}

impl ConditioningContext {
    pub fn new(
        inpainting: InpaintingSpec,
        validity: ValidityMask,
        road: Arc<RoadContext>,
    ) -> Result<Self> {
        let c = &inpainting.context;
        if validity.agents() != c.agents() || validity.steps() != c.steps() {
            return invalid("validity shape differs from the inpainting context");
        }
        Ok(Self {
            inpainting,
            validity,
            road,
        })
    }

    /// Unconditioned context over a scene shape with every agent valid.
    pub fn unconditioned(shape_of: &SceneTensor) -> Self {
        Self {
            inpainting: InpaintingSpec::empty_like(shape_of),
            validity: ValidityMask::new(shape_of.agents(), shape_of.steps(), true),
            road: Arc::new(RoadContext::default()),
        }
    }
}

/// Monotone evaluation counter, safe to bump from parallel callers.
#[derive(Debug, Default)]
pub struct NfeCounter(AtomicU64);

impl NfeCounter {
    pub fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

pub trait Denoiser: Send + Sync {
    /// v-prediction for `z` at per-step levels `t`. Increments the
    /// evaluation counter by exactly one.
    fn predict_v(
        &self,
        z: &SceneTensor,
        t: &NoiseVector,
        ctx: &ConditioningContext,
    ) -> Result<SceneTensor>;

    /// Total number of `predict_v` calls so far.
    fn nfe(&self) -> u64;
}

/// Clean estimate `alpha z - sigma v_hat`.
pub fn predict_x<D: Denoiser + ?Sized>(
    denoiser: &D,
    z: &SceneTensor,
    t: &NoiseVector,
    ctx: &ConditioningContext,
) -> Result<SceneTensor> {
    let v = denoiser.predict_v(z, t, ctx)?;
    x_from_z_v(z, &v, t)
}

/// Predicts `v = 0` everywhere; used for cost accounting.
#[derive(Debug, Default)]
pub struct ZeroDenoiser {
    counter: NfeCounter,
}

impl Denoiser for ZeroDenoiser {
    fn predict_v(
        &self,
        z: &SceneTensor,
        _t: &NoiseVector,
        _ctx: &ConditioningContext,
    ) -> Result<SceneTensor> {
        self.counter.bump();
        Ok(SceneTensor::zeros_like(z))
    }

    fn nfe(&self) -> u64 {
        self.counter.get()
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Arc<D> {
    fn predict_v(
        &self,
        z: &SceneTensor,
        t: &NoiseVector,
        ctx: &ConditioningContext,
    ) -> Result<SceneTensor> {
        (**self).predict_v(z, t, ctx)
    }
    fn nfe(&self) -> u64 {
        (**self).nfe()
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict_v(
        &self,
        z: &SceneTensor,
        t: &NoiseVector,
        ctx: &ConditioningContext,
    ) -> Result<SceneTensor> {
        (**self).predict_v(z, t, ctx)
    }
    fn nfe(&self) -> u64 {
        (**self).nfe()
    }
}
