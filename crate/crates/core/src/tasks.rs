//! Scene generation, behavior prediction and log perturbation as
//! inpainting problems, plus the constraint config compiler.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{self, block, scalar, Entry};
use crate::constraints::{ClipOperator, CollisionFieldParams, OnroadFieldParams, RangeClip};
use crate::denoiser::{ConditioningContext, Denoiser, RoadContext};
use crate::diffusion::{forward_noise, standard_normal_like, GridSpacing, NoiseVector, SamplerGrid, DEFAULT_DENOISE_STEPS};
use crate::error::{invalid, Error, Result};
use crate::geometry::Point;
use crate::rollout::{derive_seed, reverse_diffusion, SamplerKind};
use crate::scene::{channel, make_bp_mask, AgentType, FeatureNormalizer, InpaintingSpec, Mask, SceneTensor, ValidityMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Scenegen,
    Bp,
    ConditionalScenegen,
    ConditionalBp,
    LogPerturb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Start level for log perturbation; absent for every other task.
    pub level: Option<f64>,
    pub samples: usize,
    pub denoise_steps: usize,
    pub spacing: GridSpacing,
    pub sampler: SamplerKind,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, samples: usize, seed: u64) -> Self {
        Self {
            kind,
            level: None,
            samples,
            denoise_steps: DEFAULT_DENOISE_STEPS,
            spacing: GridSpacing::UniformT,
            sampler: SamplerKind::Ancestral,
            seed,
        }
    }

    pub fn perturbation(level: f64, samples: usize, seed: u64) -> Self {
        Self {
            level: Some(level),
            ..Self::new(TaskKind::LogPerturb, samples, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.level) {
            (TaskKind::LogPerturb, Some(t)) if (0.0..=1.0).contains(&t) => {}
            (TaskKind::LogPerturb, Some(t)) => return invalid(format!("perturbation level {t} outside [0, 1]")),
            (TaskKind::LogPerturb, None) => return invalid("log perturbation needs a level"),
            (_, Some(_)) => return invalid("only log perturbation takes a level"),
            _ => {}
        }
        if self.denoise_steps == 0 {
            return invalid("denoise_steps must be at least 1");
        }
        Ok(())
    }
}

/// Compiled constraint config over one scene shape.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledConstraints {
    pub control: InpaintingSpec,
    pub clips: Vec<ClipOperator>,
    /// Input validity with injected agents marked valid.
    pub validity: ValidityMask,
    pub injected: Vec<usize>,
}

impl CompiledConstraints {
    pub fn none(scene: &SceneTensor, validity: &ValidityMask) -> Self {
        Self {
            control: InpaintingSpec::empty_like(scene),
            clips: Vec::new(),
            validity: validity.clone(),
            injected: Vec::new(),
        }
    }
}

/// Conditioning shared by every sample of a task: the scene provides both
/// the shape and the values of conditioned entries.
#[derive(Debug, Clone)]
pub struct TaskContext {
    pub scene: SceneTensor,
    pub validity: ValidityMask,
    pub road: Arc<RoadContext>,
    pub constraints: Option<CompiledConstraints>,
}

impl TaskContext {
    pub fn new(scene: SceneTensor, validity: ValidityMask, road: Arc<RoadContext>) -> Self {
        Self {
            scene,
            validity,
            road,
            constraints: None,
        }
    }

    fn validity(&self) -> &ValidityMask {
        self.constraints.as_ref().map_or(&self.validity, |c| &c.validity)
    }

    fn clips(&self) -> &[ClipOperator] {
        self.constraints.as_ref().map_or(&[], |c| &c.clips)
    }

    /// Task mask united with the compiled control mask; context values come
    /// from the scene, overridden by control values.
    fn inpainting(&self, kind: TaskKind) -> Result<InpaintingSpec> {
        let x = &self.scene;
        let base = match kind {
            TaskKind::Bp | TaskKind::ConditionalBp => {
                make_bp_mask(x.history(), x.steps(), x.agents(), x.features())?
            }
            _ => Mask::for_scene(x, false),
        };
        let use_control = matches!(kind, TaskKind::ConditionalScenegen | TaskKind::ConditionalBp | TaskKind::LogPerturb);
        match (&self.constraints, use_control) {
            (Some(c), true) => {
                let mask = base.or(&c.control.mask)?;
                let mut context = x.clone();
                for a in 0..x.agents() {
                    for s in 0..x.steps() {
                        for d in 0..x.features() {
                            if c.control.mask.get(a, s, d) {
                                context.set(a, s, d, c.control.context.get(a, s, d));
                            }
                        }
                    }
                }
                InpaintingSpec::new(mask, context)
            }
            _ => InpaintingSpec::new(base, x.clone()),
        }
    }
}

fn sample_many<F>(spec: &TaskSpec, f: F) -> Result<Vec<SceneTensor>>
where
    F: Fn(&mut ChaCha8Rng) -> Result<SceneTensor> + Sync,
{
    (0..spec.samples)
        .into_par_iter()
        .map(|k| f(&mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, k as u64))))
        .collect()
}

/// `K` independent samples over the whole window for scenegen and
/// behavior-prediction style tasks.
pub fn run_scenegen<D: Denoiser + ?Sized>(ctx: &TaskContext, spec: &TaskSpec, denoiser: &D) -> Result<Vec<SceneTensor>> {
    spec.validate()?;
    if spec.kind == TaskKind::LogPerturb {
        return invalid("use run_log_perturbation for log perturbation");
    }
    let validity = ctx.validity().clone();
    if validity.valid_agent_count() == 0 {
        return Ok(vec![SceneTensor::zeros_like(&ctx.scene); spec.samples]);
    }
    let inpainting = ctx.inpainting(spec.kind)?;
    let cond = ConditioningContext::new(inpainting, validity, ctx.road.clone())?;
    let grid = SamplerGrid::with_spacing(spec.denoise_steps, spec.spacing)?;
    sample_many(spec, |rng| {
        let z = standard_normal_like(&ctx.scene, rng);
        let mut log = Vec::new();
        reverse_diffusion(denoiser, z, &grid, &cond, spec.sampler, ctx.clips(), rng, &mut log)
    })
}

/// Noises the log to level `t*` and runs the reverse chain from there on
/// the standard grid restricted to levels at or below `t*`.
pub fn run_log_perturbation<D: Denoiser + ?Sized>(
    ctx: &TaskContext,
    spec: &TaskSpec,
    denoiser: &D,
) -> Result<Vec<SceneTensor>> {
    spec.validate()?;
    let level = spec.level.ok_or_else(|| Error::InvalidArgument("log perturbation needs a level".into()))?;
    if level == 0.0 {
        return Ok(vec![ctx.scene.clone(); spec.samples]);
    }
    let inpainting = ctx.inpainting(TaskKind::LogPerturb)?;
    let cond = ConditioningContext::new(inpainting, ctx.validity().clone(), ctx.road.clone())?;
    let grid = SamplerGrid::with_spacing(spec.denoise_steps, spec.spacing)?.truncated(level)?;
    let t = NoiseVector::uniform(ctx.scene.steps(), level)?;
    sample_many(spec, |rng| {
        let eps = standard_normal_like(&ctx.scene, rng);
        let z = forward_noise(&ctx.scene, &t, &eps)?;
        let mut log = Vec::new();
        reverse_diffusion(denoiser, z, &grid, &cond, spec.sampler, ctx.clips(), rng, &mut log)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlPoint {
    /// Relative to the current step: `-H..0` is history, `0..F` future.
    pub time_step: i64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConstraint {
    /// Existing slot; `None` injects a new agent.
    pub slot: Option<usize>,
    pub kind: Option<AgentType>,
    pub control_points: Vec<ControlPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum HardConstraint {
    NonCollision,
    Onroad,
    Range { feature: String, min: f64, max: f64, agent: Option<usize> },
}

/// Parsed constraint config.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConstraintConfig {
    pub agents: Vec<AgentConstraint>,
    pub hard: Vec<HardConstraint>,
}

fn type_name(t: AgentType) -> &'static str {
    match t {
        AgentType::Av => "AV",
        AgentType::Car => "CAR",
        AgentType::Pedestrian => "PEDESTRIAN",
        AgentType::Cyclist => "CYCLIST",
    }
}

fn parse_type(e: &Entry) -> Result<AgentType> {
    match e.scalar()?.to_ascii_uppercase().as_str() {
        "AV" | "SDC" => Ok(AgentType::Av),
        "CAR" | "VEHICLE" => Ok(AgentType::Car),
        "PEDESTRIAN" => Ok(AgentType::Pedestrian),
        "CYCLIST" => Ok(AgentType::Cyclist),
        other => Err(e.error(format!("unknown agent type '{other}'"))),
    }
}

/// Channel for a range feature name.
pub fn feature_channel(name: &str) -> Option<usize> {
    Some(match name.to_ascii_uppercase().as_str() {
        "X" => channel::X,
        "Y" => channel::Y,
        "Z" => channel::Z,
        "LENGTH" => channel::LENGTH,
        "WIDTH" => channel::WIDTH,
        "HEIGHT" => channel::HEIGHT,
        _ => return None,
    })
}

fn unknown(e: &Entry) -> Error {
    e.error(format!("unknown key '{}'", e.key))
}

fn parse_control_point(e: &Entry) -> Result<ControlPoint> {
    let (mut t, mut x, mut y) = (None, None, None);
    for f in e.block()? {
        match f.key.as_str() {
            "time_step" => t = Some(f.integer()?),
            "x" => x = Some(f.number()?),
            "y" => y = Some(f.number()?),
            _ => return Err(unknown(f)),
        }
    }
    match (t, x, y) {
        (Some(time_step), Some(x), Some(y)) => Ok(ControlPoint { time_step, x, y }),
        _ => Err(e.error("control_point needs time_step, x and y")),
    }
}

impl ConstraintConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for e in config::parse(text)? {
            match e.key.as_str() {
                "agent" => {
                    let mut a = AgentConstraint {
                        slot: None,
                        kind: None,
                        control_points: Vec::new(),
                    };
                    for f in e.block()? {
                        match f.key.as_str() {
                            "type" => a.kind = Some(parse_type(f)?),
                            "slot" => {
                                let v = f.integer()?;
                                a.slot = Some(usize::try_from(v).map_err(|_| f.error("slot must be non-negative"))?);
                            }
                            "control_point" => a.control_points.push(parse_control_point(f)?),
                            _ => return Err(unknown(f)),
                        }
                    }
                    cfg.agents.push(a);
                }
                "hard_constraint" => {
                    let body = e.block()?;
                    let get = |k: &str| body.iter().find(|f| f.key == k);
                    let kind = get("kind").ok_or_else(|| e.error("hard_constraint needs a kind"))?;
                    let allowed: &[&str] = match kind.scalar()?.to_ascii_uppercase().as_str() {
                        "NON_COLLISION" => {
                            cfg.hard.push(HardConstraint::NonCollision);
                            &["kind"]
                        }
                        "ONROAD" => {
                            cfg.hard.push(HardConstraint::Onroad);
                            &["kind"]
                        }
                        "RANGE" => {
                            let feature = get("feature").ok_or_else(|| e.error("range needs a feature"))?;
                            if feature_channel(feature.scalar()?).is_none() {
                                return Err(feature.error(format!("unknown feature '{}'", feature.scalar()?)));
                            }
                            let min = get("min").ok_or_else(|| e.error("range needs min"))?.number()?;
                            let max = get("max").ok_or_else(|| e.error("range needs max"))?.number()?;
                            if min > max {
                                return Err(e.error(format!("range min {min} exceeds max {max}")));
                            }
                            let agent = match get("agent") {
                                Some(f) => Some(usize::try_from(f.integer()?).map_err(|_| f.error("agent must be non-negative"))?),
                                None => None,
                            };
                            cfg.hard.push(HardConstraint::Range {
                                feature: feature.scalar()?.to_ascii_uppercase(),
                                min,
                                max,
                                agent,
                            });
                            &["kind", "feature", "min", "max", "agent"]
                        }
                        other => return Err(kind.error(format!("unknown constraint kind '{other}'"))),
                    };
                    if let Some(f) = body.iter().find(|f| !allowed.contains(&f.key.as_str())) {
                        return Err(unknown(f));
                    }
                }
                _ => return Err(unknown(&e)),
            }
        }
        Ok(cfg)
    }

    /// Canonical text form; parsing it yields the same config.
    pub fn to_text(&self) -> String {
        let mut entries = Vec::new();
        for a in &self.agents {
            let mut body = Vec::new();
            if let Some(s) = a.slot {
                body.push(scalar("slot", s));
            }
            if let Some(k) = a.kind {
                body.push(scalar("type", type_name(k)));
            }
            for c in &a.control_points {
                body.push(block(
                    "control_point",
                    vec![
                        scalar("time_step", c.time_step),
                        scalar("x", format!("{:?}", c.x)),
                        scalar("y", format!("{:?}", c.y)),
                    ],
                ));
            }
            entries.push(block("agent", body));
        }
        for h in &self.hard {
            let body = match h {
                HardConstraint::NonCollision => vec![scalar("kind", "NON_COLLISION")],
                HardConstraint::Onroad => vec![scalar("kind", "ONROAD")],
                HardConstraint::Range { feature, min, max, agent } => {
                    let mut b = vec![
                        scalar("kind", "RANGE"),
                        scalar("feature", feature),
                        scalar("min", format!("{min:?}")),
                        scalar("max", format!("{max:?}")),
                    ];
                    if let Some(a) = agent {
                        b.push(scalar("agent", a));
                    }
                    b
                }
            };
            entries.push(block("hard_constraint", body));
        }
        config::to_text(&entries)
    }

    /// Maps control points to inpainting entries and hard constraints to
    /// clip operators for a scene of the given shape. Agents without a slot
    /// take the lowest invalid slot, which becomes valid for every step.
    pub fn compile(
        &self,
        scene: &SceneTensor,
        validity: &ValidityMask,
        road_polygons: &[Vec<Point>],
        normalizer: &FeatureNormalizer,
    ) -> Result<CompiledConstraints> {
        let (na, h, f, nf) = (scene.agents(), scene.history(), scene.future(), scene.features());
        let mut out = CompiledConstraints::none(scene, validity);
        let mut mask = Mask::for_scene(scene, false);
        let mut context = SceneTensor::zeros_like(scene);
        let mut taken: BTreeSet<usize> = (0..na).filter(|&a| validity.agent_any(a)).collect();
        let mut seen = BTreeSet::new();
        for ac in &self.agents {
            let slot = match ac.slot {
                Some(s) if s < na => s,
                Some(s) => return invalid(format!("agent slot {s} out of range (capacity {na})")),
                None => {
                    let s = (0..na)
                        .find(|a| !taken.contains(a))
                        .ok_or_else(|| Error::InvalidArgument("no free agent slot for an injected agent".into()))?;
                    taken.insert(s);
                    out.validity.set_agent(s, true);
                    out.injected.push(s);
                    s
                }
            };
            for cp in &ac.control_points {
                if cp.time_step < -(h as i64) || cp.time_step >= f as i64 {
                    return invalid(format!("control point time {} outside [-{h}, {f})", cp.time_step));
                }
                let step = (cp.time_step + h as i64) as usize;
                if !seen.insert((slot, step)) {
                    return invalid(format!("duplicate control point for agent {slot} at time {}", cp.time_step));
                }
                for (ch, v) in [(channel::X, cp.x), (channel::Y, cp.y)] {
                    mask.set(slot, step, ch, true);
                    context.set(slot, step, ch, normalizer.norm_position(v));
                }
            }
            if let Some(kind) = ac.kind {
                if nf >= channel::COUNT {
                    for s in 0..scene.steps() {
                        for k in 0..4 {
                            let ch = channel::TYPE + k;
                            mask.set(slot, s, ch, true);
                            let onehot = if k == kind.slot() { 1.0 } else { 0.0 };
                            context.set(slot, s, ch, normalizer.norm_channel(ch, onehot));
                        }
                    }
                }
            }
        }
        out.control = InpaintingSpec::new(mask, context)?;
        for hc in &self.hard {
            out.clips.push(match hc {
                HardConstraint::NonCollision => ClipOperator::NonCollision(CollisionFieldParams {
                    normalizer: *normalizer,
                    ..Default::default()
                }),
                HardConstraint::Onroad => ClipOperator::Onroad(OnroadFieldParams::from_world(road_polygons, normalizer)?),
                HardConstraint::Range { feature, min, max, agent } => {
                    let ch = feature_channel(feature)
                        .ok_or_else(|| Error::InvalidArgument(format!("unknown feature '{feature}'")))?;
                    if ch >= nf {
                        return invalid(format!("feature {feature} not present in a {nf}-channel scene"));
                    }
                    let mut r = RangeClip::physical(ch, *min, *max, normalizer)?;
                    r.agents = agent.map(|a| vec![a]);
                    ClipOperator::Range(r)
                }
            });
        }
        Ok(out)
    }
}

/// Parses and compiles in one call.
pub fn compile_constraint_config(
    text: &str,
    scene: &SceneTensor,
    validity: &ValidityMask,
    road_polygons: &[Vec<Point>],
    normalizer: &FeatureNormalizer,
) -> Result<CompiledConstraints> {
    ConstraintConfig::parse(text)?.compile(scene, validity, road_polygons, normalizer)
}

/// Lateral cut-in by an injected car: starts one lane to the left, then
/// merges into the AV's lane ahead of it.
pub const CUT_IN_CONFIG: &str = "\
# injected car merging into the AV lane
agent {
  type: CAR
  control_point { time_step: 0 x: 10.0 y: 3.7 }
  control_point { time_step: 10 x: 20.0 y: 3.0 }
  control_point { time_step: 20 x: 30.0 y: 1.5 }
  control_point { time_step: 30 x: 40.0 y: 0.0 }
}
hard_constraint { kind: NON_COLLISION }
";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{MixtureScenePrior, OracleDenoiser, ZeroDenoiser};

    fn shape(agents: usize, h: usize, f: usize) -> (SceneTensor, ValidityMask) {
        let x = SceneTensor::zeros(agents, h, f, channel::COUNT);
        let mut v = ValidityMask::new(agents, h + f, false);
        v.set_agent(0, true);
        (x, v)
    }

    #[test]
    fn spec_level_rules() {
        assert!(TaskSpec::new(TaskKind::Scenegen, 1, 0).validate().is_ok());
        assert!(TaskSpec::perturbation(0.5, 1, 0).validate().is_ok());
        assert!(TaskSpec::perturbation(1.5, 1, 0).validate().is_err());
        let mut s = TaskSpec::new(TaskKind::Bp, 1, 0);
        s.level = Some(0.2);
        assert!(s.validate().is_err());
        s.kind = TaskKind::LogPerturb;
        s.level = None;
        assert!(s.validate().is_err());
    }

    #[test]
    fn empty_config_compiles_to_nothing() {
        let (x, v) = shape(3, 2, 4);
        let c = compile_constraint_config("", &x, &v, &[], &FeatureNormalizer::default()).unwrap();
        assert_eq!(c.control.mask.count_true(), 0);
        assert!(c.clips.is_empty());
        assert_eq!(c.validity, v);
    }

    #[test]
    fn cut_in_masks_exact_entries() {
        let (x, v) = shape(4, 11, 40);
        let nz = FeatureNormalizer::default();
        let c = compile_constraint_config(CUT_IN_CONFIG, &x, &v, &[], &nz).unwrap();
        assert_eq!(c.injected, vec![1]);
        assert!(c.validity.agent_any(1));
        let expected: BTreeSet<(usize, usize, usize)> = [0usize, 10, 20, 30]
            .iter()
            .flat_map(|t| [(1, 11 + t, channel::X), (1, 11 + t, channel::Y)])
            .collect();
        let mut got = BTreeSet::new();
        for a in 0..4 {
            for s in 0..51 {
                for d in [channel::X, channel::Y] {
                    if c.control.mask.get(a, s, d) {
                        got.insert((a, s, d));
                    }
                }
            }
        }
        assert_eq!(got, expected);
        assert_eq!(c.control.context.get(1, 21, channel::X), nz.norm_position(20.0));
        assert_eq!(c.control.context.get(1, 21, channel::Y), nz.norm_position(3.0));
        assert!(c.control.mask.get(1, 0, channel::TYPE + 1));
        assert_eq!(c.clips.len(), 1);
    }

    #[test]
    fn config_errors() {
        let (x, v) = shape(2, 2, 4);
        let nz = FeatureNormalizer::default();
        let late = "agent { slot: 0 control_point { time_step: 4 x: 0 y: 0 } }";
        assert!(compile_constraint_config(late, &x, &v, &[], &nz).is_err());
        let early = "agent { slot: 0 control_point { time_step: -3 x: 0 y: 0 } }";
        assert!(compile_constraint_config(early, &x, &v, &[], &nz).is_err());
        let dup = "agent { slot: 0 control_point { time_step: 1 x: 0 y: 0 } control_point { time_step: 1 x: 1 y: 0 } }";
        assert!(compile_constraint_config(dup, &x, &v, &[], &nz).is_err());
        match ConstraintConfig::parse("agent {\n  colour: red\n}") {
            Err(Error::Parse { line, column, .. }) => assert_eq!((line, column), (2, 3)),
            other => panic!("{other:?}"),
        }
        assert!(ConstraintConfig::parse("hard_constraint { kind: RANGE feature: LENGTH min: 9 max: 7 }").is_err());
    }

    #[test]
    fn config_round_trip_is_fixed_point() {
        let text = format!("{CUT_IN_CONFIG}hard_constraint {{ kind: RANGE feature: length min: 7 max: 9 agent: 1 }}\nhard_constraint {{ kind: ONROAD }}");
        let a = ConstraintConfig::parse(&text).unwrap();
        let b = ConstraintConfig::parse(&a.to_text()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_text(), b.to_text());
        let (x, v) = shape(3, 11, 40);
        let sq = vec![vec![[-100.0, -100.0], [100.0, -100.0], [100.0, 100.0], [-100.0, 100.0], [-100.0, -100.0]]];
        let nz = FeatureNormalizer::default();
        assert_eq!(a.compile(&x, &v, &sq, &nz).unwrap(), b.compile(&x, &v, &sq, &nz).unwrap());
    }

    #[test]
    fn zero_valid_agents_costs_nothing() {
        let x = SceneTensor::zeros(2, 1, 3, 2);
        let ctx = TaskContext::new(x.clone(), ValidityMask::new(2, 4, false), Arc::new(RoadContext::default()));
        let d = ZeroDenoiser::default();
        let out = run_scenegen(&ctx, &TaskSpec::new(TaskKind::Scenegen, 3, 0), &d).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(d.nfe(), 0);
    }

    #[test]
    fn fully_conditioned_scene_is_reproduced() {
        let mut x = SceneTensor::zeros(1, 1, 2, 2);
        for (i, v) in x.as_mut_slice().iter_mut().enumerate() {
            *v = i as f64 * 0.1 - 0.2;
        }
        let v = ValidityMask::new(1, 3, true);
        let mut ctx = TaskContext::new(x.clone(), v.clone(), Arc::new(RoadContext::default()));
        let mut c = CompiledConstraints::none(&x, &v);
        c.control = InpaintingSpec::new(Mask::for_scene(&x, true), x.clone()).unwrap();
        ctx.constraints = Some(c);
        let d = ZeroDenoiser::default();
        let out = run_scenegen(&ctx, &TaskSpec::new(TaskKind::ConditionalScenegen, 2, 0), &d).unwrap();
        assert!(out.iter().all(|s| *s == x));
    }

    #[test]
    fn perturbation_endpoints_and_distinct_samples() {
        let mut x = SceneTensor::zeros(2, 1, 3, 2);
        for (i, v) in x.as_mut_slice().iter_mut().enumerate() {
            *v = (i as f64).cos();
        }
        let v = ValidityMask::new(2, 4, true);
        let prior = MixtureScenePrior::gaussian(&x, vec![0.0; x.len()], vec![0.5; x.len()]).unwrap();
        let d = OracleDenoiser::new(prior);
        let ctx = TaskContext::new(x.clone(), v, Arc::new(RoadContext::default()));
        let same = run_log_perturbation(&ctx, &TaskSpec::perturbation(0.0, 3, 1), &d).unwrap();
        assert!(same.iter().all(|s| *s == x));
        assert_eq!(d.nfe(), 0);
        let out = run_log_perturbation(&ctx, &TaskSpec::perturbation(0.5, 4, 1), &d).unwrap();
        assert_eq!(d.nfe(), 4 * 8);
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(out[i], out[j]);
            }
        }
    }
}
