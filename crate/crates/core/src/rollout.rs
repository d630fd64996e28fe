//! One-shot, fully autoregressive and amortized autoregressive rollouts.
//!
//! All three work on a window of `H` history and `F` future steps. One-shot
//! denoises the whole future once. Full AR replans with a one-shot pass
//! every `10 / replan_hz` steps and commits only that many steps. Amortized
//! AR keeps the future in a buffer whose slot `j` sits at noise level
//! `j / F`; each physical step makes one denoiser call, commits the now
//! clean front slot and appends pure noise at the back.

use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::{apply_clips, ClipOperator};
use crate::denoiser::{predict_x, ConditioningContext, Denoiser, RoadContext};
use crate::diffusion::{
    denoise_step, forward_noise, second_order_step, shifted_monotone_schedule, standard_normal_like,
    GridSpacing, NoiseVector, SamplerGrid, DEFAULT_DENOISE_STEPS,
};
use crate::error::{invalid, Error, Result};
use crate::scene::{make_bp_mask, InpaintingSpec, Mask, SceneTensor, ValidityMask};

/// Physical simulation rate.
pub const STEP_HZ: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    OneShot,
    FullAr,
    AmortizedAr,
}

impl std::str::FromStr for RolloutMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one-shot" | "one_shot" => Ok(Self::OneShot),
            "full-ar" | "full_ar" => Ok(Self::FullAr),
            "amortized" | "amortized-ar" | "amortized_ar" => Ok(Self::AmortizedAr),
            other => invalid(format!("unknown rollout mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Ancestral,
    Heun,
}

/// How the amortized buffer moves from level `j / F` to `(j - 1) / F`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferUpdate {
    /// Forward-noise the clean estimate at the lower level with fresh noise.
    #[default]
    Renoise,
    /// Ancestral transition from the current buffer state.
    Ancestral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub mode: RolloutMode,
    pub replan_hz: f64,
    pub denoise_steps: usize,
    pub history: usize,
    pub future: usize,
    pub sampler: SamplerKind,
    pub spacing: GridSpacing,
    pub buffer_update: BufferUpdate,
    pub seed: u64,
}

impl RolloutConfig {
    pub fn new(mode: RolloutMode, history: usize, future: usize, seed: u64) -> Self {
        Self {
            mode,
            replan_hz: STEP_HZ,
            denoise_steps: DEFAULT_DENOISE_STEPS,
            history,
            future,
            sampler: SamplerKind::Ancestral,
            spacing: GridSpacing::UniformT,
            buffer_update: BufferUpdate::Renoise,
            seed,
        }
    }

    pub fn with_replan_hz(mut self, hz: f64) -> Self {
        self.replan_hz = hz;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.denoise_steps == 0 {
            return invalid("denoise_steps must be at least 1");
        }
        if self.history == 0 || self.future == 0 {
            return invalid("history and future must be positive");
        }
        if self.mode == RolloutMode::FullAr {
            self.replan_interval()?;
        }
        Ok(())
    }

    /// Steps between replans; `replan_hz` must divide the 10 Hz grid.
    pub fn replan_interval(&self) -> Result<usize> {
        let hz = self.replan_hz;
        if !(hz > 0.0 && hz <= STEP_HZ) {
            return invalid(format!("replan rate {hz} Hz outside (0, {STEP_HZ}]"));
        }
        let k = STEP_HZ / hz;
        let r = k.round();
        if (k - r).abs() > 1e-9 * k.max(1.0) {
            return invalid(format!("replan rate {hz} Hz does not divide the {STEP_HZ} Hz step grid"));
        }
        Ok(r as usize)
    }

    fn evals_per_pass(&self) -> u64 {
        match self.sampler {
            SamplerKind::Ancestral => self.denoise_steps as u64,
            SamplerKind::Heun => 2 * self.denoise_steps as u64 - 1,
        }
    }

    /// Number of denoiser evaluations the configured mode consumes.
    pub fn expected_nfe(&self) -> Result<u64> {
        self.validate()?;
        let pass = self.evals_per_pass();
        Ok(match self.mode {
            RolloutMode::OneShot => pass,
            RolloutMode::FullAr => {
                let k = self.replan_interval()?;
                pass * self.future.div_ceil(k) as u64
            }
            RolloutMode::AmortizedAr => self.future as u64 + pass,
        })
    }

    fn grid(&self) -> Result<SamplerGrid> {
        SamplerGrid::with_spacing(self.denoise_steps, self.spacing)
    }
}

/// Scene to roll out: the history slice of `scene` is the observed past;
/// its future slice is ignored. `control` optionally pins further entries
/// over the same `H + F` window.
#[derive(Debug, Clone)]
pub struct RolloutInput {
    pub scene: SceneTensor,
    pub validity: ValidityMask,
    pub road: Arc<RoadContext>,
    pub control: Option<InpaintingSpec>,
    pub clips: Vec<ClipOperator>,
}

impl RolloutInput {
    pub fn new(scene: SceneTensor, validity: ValidityMask, road: Arc<RoadContext>) -> Self {
        Self {
            scene,
            validity,
            road,
            control: None,
            clips: Vec::new(),
        }
    }

    fn check(&self, config: &RolloutConfig) -> Result<()> {
        if self.scene.history() != config.history || self.scene.future() != config.future {
            return invalid(format!(
                "scene split ({}, {}) differs from the configured ({}, {})",
                self.scene.history(),
                self.scene.future(),
                config.history,
                config.future
            ));
        }
        if self.validity.agents() != self.scene.agents() || self.validity.steps() != self.scene.steps() {
            return invalid("validity shape differs from the scene");
        }
        if let Some(c) = &self.control {
            if !c.context.same_shape(&self.scene) {
                return invalid("control spec shape differs from the scene");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub mode: RolloutMode,
    /// Normalized `H + F` scene; history equals the input history.
    pub scene: SceneTensor,
    pub validity: ValidityMask,
    pub nfe: u64,
    /// Noise levels of every denoiser call, in call order.
    pub noise_levels: Vec<Vec<f64>>,
    pub seed: u64,
    /// Wall-clock seconds per physical step (or per pass for one-shot).
    #[serde(skip)]
    pub step_seconds: Vec<f64>,
}

/// Called after every committed physical step of a closed-loop rollout.
pub trait StepHook {
    fn after_step(&mut self, buffer: &mut RolloutBuffer) -> Result<()>;
}

/// Rolling state of a closed-loop rollout. `committed` holds the full
/// `H + F` output; steps before `H + elapsed` are final.
#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    pub committed: SceneTensor,
    pub validity: ValidityMask,
    /// Amortized mode only: the noisy window and its per-slot levels.
    pub window: Option<(SceneTensor, NoiseVector)>,
    pub elapsed: usize,
}

impl RolloutBuffer {
    /// First absolute step of the current conditioning window.
    pub fn window_start(&self) -> usize {
        self.elapsed
    }

    pub fn history_len(&self) -> usize {
        self.committed.history()
    }

    /// Per-slot noise levels of the amortized window.
    pub fn slot_levels(&self) -> Option<Vec<f64>> {
        self.window.as_ref().map(|(_, t)| t.times())
    }
}

/// Overwrites agent `agent`'s already elapsed steps with externally
/// supplied normalized feature rows `(absolute step, row)`.
pub fn inject_external_agent(buffer: &mut RolloutBuffer, agent: usize, states: &[(usize, Vec<f64>)]) -> Result<()> {
    if agent >= buffer.committed.agents() || !buffer.validity.agent_any(agent) {
        return invalid(format!("agent {agent} is not a valid slot"));
    }
    let limit = buffer.history_len() + buffer.elapsed;
    for (step, row) in states {
        if *step >= limit {
            return invalid(format!(
                "step {step} has not elapsed yet (first open step is {limit})"
            ));
        }
        if row.len() != buffer.committed.features() {
            return invalid("injected row has the wrong feature count");
        }
    }
    for (step, row) in states {
        buffer.committed.row_mut(agent, *step).copy_from_slice(row);
        if let Some((window, _)) = buffer.window.as_mut() {
            let start = buffer.elapsed;
            if *step >= start && *step < start + window.history() {
                window.row_mut(agent, *step - start).copy_from_slice(row);
            }
        }
    }
    Ok(())
}

/// Inpainting spec over the window starting at absolute step `start`: the
/// window's history comes from `committed`, control entries are shifted
/// into window coordinates and dropped outside the original horizon.
fn window_spec(
    committed: &SceneTensor,
    control: Option<&InpaintingSpec>,
    start: usize,
) -> Result<InpaintingSpec> {
    let (h, f) = (committed.history(), committed.future());
    let (na, nf) = (committed.agents(), committed.features());
    let total = h + f;
    let mut context = SceneTensor::zeros(na, h, f, nf);
    let bp = make_bp_mask(h, total, na, nf)?;
    let mut mask = bp.expand();
    for a in 0..na {
        for s in 0..h {
            context.row_mut(a, s).copy_from_slice(committed.row(a, start + s));
        }
    }
    if let Some(c) = control {
        for a in 0..na {
            for s in h..total {
                let abs = start + s;
                if abs >= total {
                    break;
                }
                for d in 0..nf {
                    if c.mask.get(a, abs, d) {
                        mask.set(a, s, d, true);
                        context.set(a, s, d, c.context.get(a, abs, d));
                    }
                }
            }
        }
    }
    InpaintingSpec::new(mask, context)
}

/// Validity over the window starting at `start`, repeating the final
/// step's validity past the horizon.
fn window_validity(validity: &ValidityMask, start: usize, len: usize) -> ValidityMask {
    let last = validity.steps() - 1;
    let mut out = ValidityMask::new(validity.agents(), len, false);
    for a in 0..validity.agents() {
        for s in 0..len {
            out.set(a, s, validity.get(a, (start + s).min(last)));
        }
    }
    out
}

fn denoiser_error(step: usize, e: Error) -> Error {
    match e {
        Error::Denoiser { .. } => e,
        other => Error::Denoiser {
            step,
            message: other.to_string(),
        },
    }
}

/// Clean estimate followed by clipping (inpainted entries frozen) and
/// inpainting.
fn constrained_estimate<D: Denoiser + ?Sized>(
    denoiser: &D,
    z: &SceneTensor,
    t: &NoiseVector,
    ctx: &ConditioningContext,
    clips: &[ClipOperator],
    step: usize,
) -> Result<SceneTensor> {
    let x = predict_x(denoiser, z, t, ctx).map_err(|e| denoiser_error(step, e))?;
    let mut x = apply_clips(&x, clips, &ctx.validity, Some(&ctx.inpainting.mask))?;
    crate::scene::apply_inpainting_in_place(&mut x, &ctx.inpainting);
    Ok(x)
}

/// Reverse diffusion from `z` along `grid` with inpainting and in-diffusion
/// clipping at every step. The last transition lands on the clipped,
/// inpainted clean estimate.
#[allow(clippy::too_many_arguments)]
pub fn reverse_diffusion<D: Denoiser + ?Sized>(
    denoiser: &D,
    z: SceneTensor,
    grid: &SamplerGrid,
    ctx: &ConditioningContext,
    sampler: SamplerKind,
    clips: &[ClipOperator],
    rng: &mut ChaCha8Rng,
    levels_log: &mut Vec<Vec<f64>>,
) -> Result<SceneTensor> {
    let steps = z.steps();
    let mut z = z;
    if grid.steps() == 0 {
        crate::scene::apply_inpainting_in_place(&mut z, &ctx.inpainting);
        return Ok(z);
    }
    for (i, (t, s)) in grid.pairs().enumerate() {
        let tv = NoiseVector::uniform(steps, t)?;
        let sv = NoiseVector::uniform(steps, s)?;
        z = match sampler {
            SamplerKind::Ancestral => {
                levels_log.push(tv.times());
                let x = constrained_estimate(denoiser, &z, &tv, ctx, clips, i)?;
                denoise_step(&z, &x, &sv, &tv, rng)?
            }
            SamplerKind::Heun => second_order_step(&z, &sv, &tv, |zz, lv| {
                levels_log.push(lv.times());
                constrained_estimate(denoiser, zz, lv, ctx, clips, i)
            })?,
        };
    }
    Ok(z)
}

fn one_shot_pass<D: Denoiser + ?Sized>(
    denoiser: &D,
    input: &RolloutInput,
    committed: &SceneTensor,
    start: usize,
    config: &RolloutConfig,
    rng: &mut ChaCha8Rng,
    levels_log: &mut Vec<Vec<f64>>,
) -> Result<SceneTensor> {
    let spec = window_spec(committed, input.control.as_ref(), start)?;
    let validity = window_validity(&input.validity, start, committed.steps());
    let ctx = ConditioningContext::new(spec, validity, input.road.clone())?;
    let z = standard_normal_like(committed, rng);
    reverse_diffusion(denoiser, z, &config.grid()?, &ctx, config.sampler, &input.clips, rng, levels_log)
}

fn finish(
    config: &RolloutConfig,
    committed: SceneTensor,
    validity: ValidityMask,
    nfe: u64,
    noise_levels: Vec<Vec<f64>>,
    step_seconds: Vec<f64>,
) -> RolloutResult {
    RolloutResult {
        mode: config.mode,
        scene: committed,
        validity,
        nfe,
        noise_levels,
        seed: config.seed,
        step_seconds,
    }
}

/// Open-loop generation of the whole future in one reverse pass.
pub fn one_shot<D: Denoiser + ?Sized>(input: &RolloutInput, denoiser: &D, config: &RolloutConfig) -> Result<RolloutResult> {
    config.validate()?;
    input.check(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let before = denoiser.nfe();
    let clock = Instant::now();
    let mut log = Vec::new();
    let out = one_shot_pass(denoiser, input, &input.scene, 0, config, &mut rng, &mut log)?;
    let mut committed = out;
    // history stays bitwise equal to the input
    for a in 0..committed.agents() {
        for s in 0..config.history {
            committed.row_mut(a, s).copy_from_slice(input.scene.row(a, s));
        }
    }
    Ok(finish(
        config,
        committed,
        input.validity.clone(),
        denoiser.nfe() - before,
        log,
        vec![clock.elapsed().as_secs_f64()],
    ))
}

/// Receding-horizon replanning: a one-shot pass every replan interval,
/// committing only the first interval of each plan.
pub fn full_ar<D: Denoiser + ?Sized>(
    input: &RolloutInput,
    denoiser: &D,
    config: &RolloutConfig,
    mut hook: Option<&mut dyn StepHook>,
) -> Result<RolloutResult> {
    config.validate()?;
    input.check(config)?;
    let k = config.replan_interval()?;
    let (h, f) = (config.history, config.future);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let before = denoiser.nfe();
    let mut log = Vec::new();
    let mut seconds = Vec::new();
    let mut buffer = RolloutBuffer {
        committed: input.scene.clone(),
        validity: input.validity.clone(),
        window: None,
        elapsed: 0,
    };
    while buffer.elapsed < f {
        let clock = Instant::now();
        let start = buffer.elapsed;
        let window = window_from(&buffer.committed, start);
        let plan = one_shot_pass(denoiser, input, &window, start, config, &mut rng, &mut log)?;
        let n = k.min(f - start);
        for j in 0..n {
            for a in 0..plan.agents() {
                buffer
                    .committed
                    .row_mut(a, h + start + j)
                    .copy_from_slice(plan.row(a, h + j));
            }
            buffer.elapsed += 1;
            if let Some(hk) = hook.as_deref_mut() {
                hk.after_step(&mut buffer)?;
            }
        }
        seconds.push(clock.elapsed().as_secs_f64());
    }
    Ok(finish(
        config,
        buffer.committed,
        input.validity.clone(),
        denoiser.nfe() - before,
        log,
        seconds,
    ))
}

/// `H + F` tensor whose history is the committed steps `start..start + H`.
fn window_from(committed: &SceneTensor, start: usize) -> SceneTensor {
    let (h, f) = (committed.history(), committed.future());
    let mut w = SceneTensor::zeros(committed.agents(), h, f, committed.features());
    for a in 0..committed.agents() {
        for s in 0..h {
            w.row_mut(a, s).copy_from_slice(committed.row(a, start + s));
        }
    }
    w
}

/// One denoising step per physical step over a noise-ramped buffer.
pub fn amortized_ar<D: Denoiser + ?Sized>(
    input: &RolloutInput,
    denoiser: &D,
    config: &RolloutConfig,
    mut hook: Option<&mut dyn StepHook>,
) -> Result<RolloutResult> {
    config.validate()?;
    input.check(config)?;
    let (h, f) = (config.history, config.future);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let before = denoiser.nfe();
    let mut log = Vec::new();
    let mut seconds = Vec::new();

    // warm-up: a full one-shot pass, then perturb future slot j to level j/F
    let clock = Instant::now();
    let warm = one_shot_pass(denoiser, input, &input.scene, 0, config, &mut rng, &mut log)?;
    let levels = shifted_monotone_schedule(h, f, 1.0)?;
    let eps = standard_normal_like(&warm, &mut rng);
    let mut z = forward_noise(&warm, &levels, &eps)?;
    for a in 0..z.agents() {
        for s in 0..h {
            z.row_mut(a, s).copy_from_slice(input.scene.row(a, s));
        }
    }
    seconds.push(clock.elapsed().as_secs_f64());
    let lower = shifted_monotone_schedule(h, f, 0.0)?;

    let mut buffer = RolloutBuffer {
        committed: input.scene.clone(),
        validity: input.validity.clone(),
        window: Some((z, levels.clone())),
        elapsed: 0,
    };
    for i in 0..f {
        let clock = Instant::now();
        let (z, _) = buffer.window.take().expect("amortized buffer present");
        debug_assert!(levels.is_monotone());
        let spec = window_spec(&buffer.committed, input.control.as_ref(), i)?;
        let validity = window_validity(&input.validity, i, h + f);
        let ctx = ConditioningContext::new(spec, validity, input.road.clone())?;
        log.push(levels.times());
        let x = constrained_estimate(denoiser, &z, &levels, &ctx, &input.clips, i)?;
        let down = match config.buffer_update {
            BufferUpdate::Renoise => {
                let eps = standard_normal_like(&x, &mut rng);
                forward_noise(&x, &lower, &eps)?
            }
            BufferUpdate::Ancestral => denoise_step(&z, &x, &lower, &levels, &mut rng)?,
        };
        // front slot is clean now: commit it, shift, append pure noise
        for a in 0..down.agents() {
            buffer.committed.row_mut(a, h + i).copy_from_slice(down.row(a, h));
        }
        buffer.elapsed += 1;
        let mut next = SceneTensor::zeros_like(&down);
        for a in 0..down.agents() {
            for s in 0..h {
                next.row_mut(a, s).copy_from_slice(buffer.committed.row(a, i + 1 + s));
            }
            for s in h..h + f - 1 {
                next.row_mut(a, s).copy_from_slice(down.row(a, s + 1));
            }
        }
        let fresh = standard_normal_like(&next, &mut rng);
        for a in 0..next.agents() {
            next.row_mut(a, h + f - 1).copy_from_slice(fresh.row(a, h + f - 1));
        }
        buffer.window = Some((next, levels.clone()));
        if let Some(hk) = hook.as_deref_mut() {
            hk.after_step(&mut buffer)?;
        }
        seconds.push(clock.elapsed().as_secs_f64());
    }
    Ok(finish(
        config,
        buffer.committed,
        input.validity.clone(),
        denoiser.nfe() - before,
        log,
        seconds,
    ))
}

/// Dispatches on `config.mode`.
pub fn rollout<D: Denoiser + ?Sized>(input: &RolloutInput, denoiser: &D, config: &RolloutConfig) -> Result<RolloutResult> {
    match config.mode {
        RolloutMode::OneShot => one_shot(input, denoiser, config),
        RolloutMode::FullAr => full_ar(input, denoiser, config, None),
        RolloutMode::AmortizedAr => amortized_ar(input, denoiser, config, None),
    }
}

/// SplitMix64 finalizer used to derive independent per-sample seeds.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `samples` independent rollouts with derived seeds, run in parallel and
/// returned in sample order.
pub fn rollout_samples<D: Denoiser + ?Sized>(
    input: &RolloutInput,
    denoiser: &D,
    config: &RolloutConfig,
    samples: usize,
) -> Result<Vec<RolloutResult>> {
    (0..samples)
        .into_par_iter()
        .map(|k| {
            let cfg = RolloutConfig {
                seed: derive_seed(config.seed, k as u64),
                ..config.clone()
            };
            rollout(input, denoiser, &cfg)
        })
        .collect()
}

/// Union of an existing mask with extra entries; shapes must agree.
pub fn merge_masks(a: &Mask, b: &Mask) -> Result<Mask> {
    a.or(b)
}
