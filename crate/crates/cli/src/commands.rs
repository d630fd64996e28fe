use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use trafficdiff::denoiser::network::{TrainConfig, Trainer, TrainingExample};
use trafficdiff::denoiser::{NetworkConfig, SizePreset, TrainableDenoiser};
use trafficdiff::diffusion::GridSpacing;
use trafficdiff::io::{self, SampleFile, Scenario, ScenarioSamples, FORMAT_VERSION};
use trafficdiff::metrics::{evaluate_scenegen, evaluate_wosac, EvalScenario, MetricConfig};
use trafficdiff::render::{render_scene, RenderSpec};
use trafficdiff::rollout::{derive_seed, rollout_samples, RolloutConfig, RolloutInput, RolloutMode, SamplerKind};
use trafficdiff::scene::{channel, denormalize_scene, FeatureNormalizer, RawScene, SceneTensor, ValidityMask};
use trafficdiff::tasks::{run_log_perturbation, run_scenegen, CompiledConstraints, ConstraintConfig, TaskContext, TaskKind, TaskSpec};
use trafficdiff::world::{BehaviorMixture, LayoutConfig, SyntheticWorld, Template, WorldParams};

use crate::{
    output_path, CliError, CliResult, EvalModeArg, EvaluateArgs, GenerateArgs, ModeArg, ModelArgs, OptimizerArg,
    PerturbArgs, PresetArg, RenderArgs, RolloutArgs, SamplerArg, SynthArgs, TaskArg, TemplateArg, TrainArgs,
};

fn scenario_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("scenarios.json")
    } else {
        path.to_path_buf()
    }
}

fn load_scenarios(path: &Path) -> CliResult<Vec<Scenario>> {
    let s = io::load_scenarios(&scenario_file(path))?;
    if s.is_empty() {
        return Err(CliError::invalid(format!("{} holds no scenarios", path.display())));
    }
    Ok(s)
}

fn print_summary<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).unwrap_or_default());
}

pub fn synth_data(a: SynthArgs) -> CliResult<()> {
    let template = match a.template {
        TemplateArg::Straight => Template::Straight,
        TemplateArg::Curve => Template::Curve,
        TemplateArg::Intersection => Template::Intersection,
    };
    let mut mixture = BehaviorMixture::default();
    if let Some(std) = a.position_std {
        if !(std >= 0.0 && std.is_finite()) {
            return Err(CliError::invalid("--position-std must be a finite non-negative number"));
        }
        mixture.position_std = std;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.common.seed);
    let world = SyntheticWorld::new(template, WorldParams::default(), mixture, &mut rng)?;
    let cfg = LayoutConfig {
        agents: a.agents,
        capacity: a.capacity.unwrap_or(a.agents),
        history: a.history,
        future: a.future,
    };
    if cfg.history == 0 || cfg.future == 0 {
        return Err(CliError::invalid("--history and --future must be positive"));
    }
    let scenarios = (0..a.scenes)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(a.common.seed, i as u64));
            let s = world.sample_scene(&cfg, &mut rng)?;
            Ok(Scenario::from_synthetic(format!("scene-{i:05}"), &world, &s))
        })
        .collect::<trafficdiff::Result<Vec<_>>>()?;
    let out = output_path(&a.common.out, "data");
    let file = if out.extension().is_some_and(|e| e == "json") {
        out
    } else {
        out.join("scenarios.json")
    };
    io::save_scenarios(&file, &scenarios)?;
    print_summary(&serde_json::json!({ "scenarios": scenarios.len(), "out": file }));
    Ok(())
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let scenarios = load_scenarios(&a.data)?;
    let normalizer = FeatureNormalizer::default();
    let first = &scenarios[0].scene;
    let history = a.history.unwrap_or(first.history);
    let future = a.future.unwrap_or(first.future);
    let window = history + future;
    let capacity = scenarios.iter().map(|s| s.capacity).max().unwrap_or(1);
    // Every scenario contributes all windows that keep the history observed.
    let mut pool = Vec::new();
    for s in &scenarios {
        if s.scene.steps() < window {
            return Err(CliError::invalid(format!(
                "scenario {} has {} steps, shorter than the {window}-step window",
                s.id,
                s.scene.steps()
            )));
        }
        let (x, v) = trafficdiff::scene::normalize_scene(&s.scene, &normalizer, capacity)?;
        let road = Arc::new(s.road.context(&normalizer));
        pool.push((x, v, road));
    }
    if a.batch == 0 || a.steps == 0 {
        return Err(CliError::invalid("--batch and --steps must be positive"));
    }
    let preset = match a.preset {
        PresetArg::S => SizePreset::S,
        PresetArg::M => SizePreset::M,
        PresetArg::L => SizePreset::L,
    };
    let cfg = NetworkConfig::from_preset(preset, a.width_factor, capacity, history, future, channel::COUNT, a.patch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.common.seed);
    let net = TrainableDenoiser::new(cfg, &mut rng)?;
    let params = net.parameter_count();
    let tc = match a.optimizer {
        OptimizerArg::Sgd => TrainConfig::sgd(a.lr, channel::COUNT),
        OptimizerArg::Adam => TrainConfig::adam(a.lr, channel::COUNT),
    };
    let mut trainer = Trainer::new(net, tc)?;
    let mut last = f64::NAN;
    for step in 0..a.steps {
        let batch = (0..a.batch)
            .map(|_| {
                let (x, v, road) = &pool[rng.gen_range(0..pool.len())];
                let off = rng.gen_range(0..=x.steps() - window);
                Ok(TrainingExample {
                    scene: x.window(off, history, future)?,
                    validity: v.window(off, window)?,
                    road: road.clone(),
                })
            })
            .collect::<trafficdiff::Result<Vec<_>>>()?;
        let r = trainer.train_step(&batch, &mut rng)?;
        last = r.loss;
        if a.log_every > 0 && (step % a.log_every == 0 || step + 1 == a.steps) {
            eprintln!("step {step} loss {:.5} grad_norm {:.4}", r.loss, r.grad_norm);
        }
    }
    let out = output_path(&a.common.out, "checkpoint.json");
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    trainer.network().save(&out)?;
    print_summary(&serde_json::json!({
        "steps": a.steps,
        "parameters": params,
        "final_loss": last,
        "checkpoint": out,
    }));
    Ok(())
}

/// Loaded checkpoint plus the scenarios shaped to its window.
struct Model {
    net: TrainableDenoiser,
    normalizer: FeatureNormalizer,
    scenarios: Vec<Scenario>,
    constraints: Option<ConstraintConfig>,
}

struct Prepared {
    scene: SceneTensor,
    validity: ValidityMask,
    compiled: CompiledConstraints,
    road: Arc<trafficdiff::denoiser::RoadContext>,
}

impl Model {
    fn load(m: &ModelArgs) -> CliResult<Self> {
        let path = m.checkpoint.as_ref().ok_or_else(|| {
            CliError::invalid("no checkpoint: pass --checkpoint or set TRAFFICDIFF_CHECKPOINT")
        })?;
        if m.samples == 0 || m.steps == 0 {
            return Err(CliError::invalid("--samples and --steps must be positive"));
        }
        let net = TrainableDenoiser::load(path)?;
        let constraints = match &m.constraints {
            Some(p) => Some(ConstraintConfig::parse(&std::fs::read_to_string(p)?)?),
            None => None,
        };
        Ok(Self {
            net,
            normalizer: FeatureNormalizer::default(),
            scenarios: load_scenarios(&m.scenario)?,
            constraints,
        })
    }

    fn history(&self) -> usize {
        self.net.config().history
    }

    fn future(&self) -> usize {
        self.net.config().future
    }

    /// Leading `H + F` window of the scenario over the network's slots.
    fn prepare(&self, s: &Scenario) -> CliResult<Prepared> {
        let (h, f) = (self.history(), self.future());
        if s.scene.history != h || s.scene.steps() < h + f {
            return Err(CliError::invalid(format!(
                "scenario {} (history {}, {} steps) does not fit the checkpoint window ({h}, {f})",
                s.id,
                s.scene.history,
                s.scene.steps()
            )));
        }
        let (x, v) = trafficdiff::scene::normalize_scene(&s.scene, &self.normalizer, self.net.config().agents)?;
        let scene = x.window(0, h, f)?;
        let validity = v.window(0, h + f)?;
        let compiled = match &self.constraints {
            Some(c) => c.compile(&scene, &validity, &s.road.polygons, &self.normalizer)?,
            None => CompiledConstraints::none(&scene, &validity),
        };
        Ok(Prepared {
            scene,
            validity,
            compiled,
            road: Arc::new(s.road.context(&self.normalizer)),
        })
    }

    fn decode(&self, x: &SceneTensor, validity: &ValidityMask) -> RawScene {
        denormalize_scene(x, validity, &self.normalizer)
    }
}

/// Index of each injected slot among the valid agents kept by decoding.
fn injected_indices(compiled: &CompiledConstraints) -> Vec<usize> {
    compiled
        .injected
        .iter()
        .map(|&slot| (0..slot).filter(|&a| compiled.validity.agent_any(a)).count())
        .collect()
}

fn sampler(s: SamplerArg) -> SamplerKind {
    match s {
        SamplerArg::Ancestral => SamplerKind::Ancestral,
        SamplerArg::Heun => SamplerKind::Heun,
    }
}

fn write_samples(out: &Path, kind: &str, seed: u64, scenarios: Vec<ScenarioSamples>) -> CliResult<()> {
    let n = scenarios.len();
    let total: u64 = scenarios.iter().map(|s| s.nfe * s.samples.len() as u64).sum();
    io::write_json(
        out,
        &SampleFile {
            version: FORMAT_VERSION,
            kind: kind.into(),
            seed,
            scenarios,
        },
    )?;
    print_summary(&serde_json::json!({ "kind": kind, "scenarios": n, "total_nfe": total, "out": out }));
    Ok(())
}

fn task_samples(model: &Model, m: &ModelArgs, seed: u64, kind: TaskKind, level: Option<f64>) -> CliResult<Vec<ScenarioSamples>> {
    let mut out = Vec::with_capacity(model.scenarios.len());
    for (i, s) in model.scenarios.iter().enumerate() {
        let p = model.prepare(s)?;
        let spec = TaskSpec {
            kind,
            level,
            samples: m.samples,
            denoise_steps: m.steps,
            spacing: GridSpacing::UniformT,
            sampler: sampler(m.sampler),
            seed: derive_seed(seed, i as u64),
        };
        let injected = injected_indices(&p.compiled);
        let ctx = TaskContext {
            scene: p.scene,
            validity: p.validity,
            road: p.road,
            constraints: Some(p.compiled.clone()),
        };
        let xs = match kind {
            TaskKind::LogPerturb => run_log_perturbation(&ctx, &spec, &model.net)?,
            _ => run_scenegen(&ctx, &spec, &model.net)?,
        };
        let pass = match spec.sampler {
            SamplerKind::Ancestral => spec.denoise_steps as u64,
            SamplerKind::Heun => 2 * spec.denoise_steps as u64 - 1,
        };
        let nfe = match level {
            Some(t) if t == 0.0 => 0,
            Some(t) => trafficdiff::diffusion::SamplerGrid::with_spacing(spec.denoise_steps, spec.spacing)?
                .truncated(t)?
                .steps() as u64,
            None if p.compiled.validity.valid_agent_count() == 0 => 0,
            None => pass,
        };
        out.push(ScenarioSamples {
            id: s.id.clone(),
            nfe,
            samples: xs.iter().map(|x| model.decode(x, &p.compiled.validity)).collect(),
            noise_levels: Vec::new(),
            injected,
        });
    }
    Ok(out)
}

pub fn generate(a: GenerateArgs) -> CliResult<()> {
    let model = Model::load(&a.model)?;
    let conditional = model.constraints.is_some();
    let kind = match (a.task, conditional) {
        (TaskArg::Scenegen, false) => TaskKind::Scenegen,
        (TaskArg::Scenegen, true) => TaskKind::ConditionalScenegen,
        (TaskArg::Bp, false) => TaskKind::Bp,
        (TaskArg::Bp, true) => TaskKind::ConditionalBp,
    };
    let samples = task_samples(&model, &a.model, a.common.seed, kind, None)?;
    write_samples(&output_path(&a.common.out, "scenes.json"), "generate", a.common.seed, samples)
}

pub fn perturb(a: PerturbArgs) -> CliResult<()> {
    if !(0.0..=1.0).contains(&a.level) {
        return Err(CliError::invalid(format!("--level {} outside [0, 1]", a.level)));
    }
    let model = Model::load(&a.model)?;
    let samples = task_samples(&model, &a.model, a.common.seed, TaskKind::LogPerturb, Some(a.level))?;
    write_samples(&output_path(&a.common.out, "perturbed.json"), "perturb", a.common.seed, samples)
}

pub fn rollout(a: RolloutArgs) -> CliResult<()> {
    let mode = match a.mode {
        ModeArg::OneShot => RolloutMode::OneShot,
        ModeArg::FullAr => RolloutMode::FullAr,
        ModeArg::Amortized => RolloutMode::AmortizedAr,
    };
    // Checked before anything is loaded so a bad rate fails fast.
    let probe = RolloutConfig::new(mode, 1, 1, 0).with_replan_hz(a.replan_hz);
    if mode == RolloutMode::FullAr {
        probe.replan_interval()?;
    }
    let model = Model::load(&a.model)?;
    let mut out = Vec::with_capacity(model.scenarios.len());
    for (i, s) in model.scenarios.iter().enumerate() {
        let p = model.prepare(s)?;
        let mut cfg = RolloutConfig::new(mode, model.history(), model.future(), derive_seed(a.common.seed, i as u64))
            .with_replan_hz(a.replan_hz);
        cfg.denoise_steps = a.model.steps;
        cfg.sampler = sampler(a.model.sampler);
        let mut input = RolloutInput::new(p.scene, p.compiled.validity.clone(), p.road);
        if model.constraints.is_some() {
            input.control = Some(p.compiled.control.clone());
            input.clips = p.compiled.clips.clone();
        }
        let results = rollout_samples(&input, &model.net, &cfg, a.model.samples)?;
        out.push(ScenarioSamples {
            id: s.id.clone(),
            nfe: results.first().map_or(0, |r| r.nfe),
            samples: results.iter().map(|r| model.decode(&r.scene, &r.validity)).collect(),
            noise_levels: results.iter().map(|r| r.noise_levels.clone()).collect(),
            injected: injected_indices(&p.compiled),
        });
    }
    let kind = match mode {
        RolloutMode::OneShot => "one-shot",
        RolloutMode::FullAr => "full-ar",
        RolloutMode::AmortizedAr => "amortized",
    };
    write_samples(&output_path(&a.common.out, "rollouts.json"), kind, a.common.seed, out)
}

/// Log tracks cut to the sample length.
fn truncate(log: &RawScene, steps: usize) -> CliResult<RawScene> {
    if log.steps() < steps || log.history > steps {
        return Err(CliError::invalid(format!(
            "log has {} steps, samples have {steps}",
            log.steps()
        )));
    }
    let mut out = log.clone();
    out.future = steps - log.history;
    for t in &mut out.agents {
        t.states.truncate(steps);
    }
    Ok(out)
}

pub fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    if a.bins < 2 {
        return Err(CliError::invalid("--bins must be at least 2"));
    }
    let samples = io::load_samples(&a.rollouts)?;
    let logs = load_scenarios(&a.log)?;
    let mut scenarios = Vec::with_capacity(samples.scenarios.len());
    for s in &samples.scenarios {
        let log = logs
            .iter()
            .find(|l| l.id == s.id)
            .ok_or_else(|| CliError::invalid(format!("no logged scenario with id {}", s.id)))?;
        let steps = s.samples.first().map_or(log.scene.steps(), |x| x.steps());
        scenarios.push(EvalScenario {
            log: truncate(&log.scene, steps)?,
            samples: s.samples.clone(),
            road: log.road.polygons.clone(),
        });
    }
    let cfg = MetricConfig {
        bins: a.bins,
        ..Default::default()
    };
    let report = match a.mode {
        EvalModeArg::Wosac => evaluate_wosac(&scenarios, &cfg)?,
        EvalModeArg::Scenegen => evaluate_scenegen(&scenarios, &cfg)?,
    };
    let out = output_path(&a.common.out, "report.json");
    io::write_json(&out, &report)?;
    print_summary(&serde_json::json!({
        "mode": report.mode,
        "composite": report.composite,
        "metric_scores": report.metric_scores,
        "out": out,
    }));
    Ok(())
}

pub fn render(a: RenderArgs) -> CliResult<()> {
    let scenarios = load_scenarios(&a.scenario)?;
    let scenario = match &a.id {
        Some(id) => scenarios
            .iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| CliError::invalid(format!("no scenario with id {id}")))?,
        None => &scenarios[0],
    };
    let mut spec = RenderSpec {
        scale: a.scale,
        stride: a.stride,
        ..Default::default()
    };
    if !(a.scale > 0.0 && a.scale.is_finite()) || a.stride == 0 {
        return Err(CliError::invalid("--scale and --stride must be positive"));
    }
    let scene = match &a.samples {
        Some(path) => {
            let f = io::load_samples(path)?;
            let s = f
                .scenarios
                .iter()
                .find(|s| s.id == scenario.id)
                .ok_or_else(|| CliError::invalid(format!("no samples for scenario {}", scenario.id)))?;
            spec.injected = s.injected.clone();
            s.samples
                .get(a.sample)
                .cloned()
                .ok_or_else(|| CliError::invalid(format!("sample {} out of range ({} samples)", a.sample, s.samples.len())))?
        }
        None => scenario.scene.clone(),
    };
    let svg = render_scene(&scene, &scenario.road, &spec);
    let out = output_path(&a.common.out, "scene.svg");
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&out, svg)?;
    print_summary(&serde_json::json!({ "out": out }));
    Ok(())
}
