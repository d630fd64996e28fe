//! Trains a small denoiser on the straight synthetic world and compares
//! closed-loop realism across rollout modes and replan rates.
//!
//! cargo run --release -p trafficdiff --example replan_study -- [steps] [scenarios] [samples]

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use trafficdiff::denoiser::network::{NetworkConfig, TrainConfig, Trainer, TrainingExample};
use trafficdiff::denoiser::TrainableDenoiser;
use trafficdiff::metrics::{evaluate_wosac, EvalScenario, MetricConfig};
use trafficdiff::rollout::{derive_seed, rollout, RolloutConfig, RolloutInput, RolloutMode};
use trafficdiff::scene::{channel, denormalize_scene};
use trafficdiff::world::{BehaviorMixture, LayoutConfig, SyntheticWorld, Template, WorldParams};

const H: usize = 4;
const F: usize = 16;

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
    let steps = args.first().copied().unwrap_or(1000);
    let scenarios = args.get(1).copied().unwrap_or(64);
    let samples = args.get(2).copied().unwrap_or(8);
    let pos_std: f64 = std::env::var("POS_STD").ok().map_or(0.05, |v| v.parse().unwrap());

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mixture = BehaviorMixture {
        position_std: pos_std,
        ..Default::default()
    };
    let world = SyntheticWorld::new(Template::Straight, WorldParams::default(), mixture, &mut rng).unwrap();
    let road = Arc::new(world.road_context());
    let long = LayoutConfig { agents: 3, capacity: 4, history: H, future: 2 * F };
    let data: Vec<_> = (0..512).map(|_| world.sample_scene(&long, &mut rng).unwrap()).collect();

    let cfg = NetworkConfig {
        agents: 4,
        history: H,
        future: F,
        features: channel::COUNT,
        patch: 2,
        dim: 32,
        layers: 2,
        heads: 4,
        mlp_ratio: 2,
        context_tokens: 4,
    };
    let net = TrainableDenoiser::new(cfg, &mut rng).unwrap();
    println!("params {}", net.parameter_count());
    let mut trainer = Trainer::new(net, TrainConfig::adam(2e-3, channel::COUNT)).unwrap();
    let clock = Instant::now();
    let batch = 16;
    let mut ema = f64::NAN;
    for step in 0..steps {
        let b: Vec<TrainingExample> = (0..batch)
            .map(|_| {
                let s = &data[rng.gen_range(0..data.len())];
                let off = rng.gen_range(0..=F);
                let (scene, validity) = s.crop(off, H, F).unwrap();
                TrainingExample { scene, validity, road: road.clone() }
            })
            .collect();
        if step == steps * 3 / 4 {
            trainer.set_learning_rate(5e-4);
        }
        let r = trainer.train_step(&b, &mut rng).unwrap();
        ema = if ema.is_nan() { r.loss } else { 0.98 * ema + 0.02 * r.loss };
        if step % 200 == 0 || step + 1 == steps {
            println!("step {step} loss {:.4} ema {:.4} ({:.1}s)", r.loss, ema, clock.elapsed().as_secs_f64());
        }
    }
    let net = trainer.into_network();

    let eval_cfg = LayoutConfig { agents: 3, capacity: 4, history: H, future: F };
    let mut erng = ChaCha8Rng::seed_from_u64(99);
    let logs: Vec<_> = (0..scenarios).map(|_| world.sample_scene(&eval_cfg, &mut erng).unwrap()).collect();
    let metric_cfg = MetricConfig { bins: 32, ..Default::default() };
    let polys = world.graph.polygons.clone();
    let run = |mode: RolloutMode, hz: f64| {
        let clock = Instant::now();
        let sc: Vec<EvalScenario> = logs
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let input = RolloutInput::new(s.scene.clone(), s.validity.clone(), road.clone());
                let sims = (0..samples)
                    .map(|k| {
                        let c = RolloutConfig::new(mode, H, F, derive_seed(i as u64, k as u64)).with_replan_hz(hz);
                        let r = rollout(&input, &net, &c).unwrap();
                        denormalize_scene(&r.scene, &r.validity, &world.normalizer)
                    })
                    .collect();
                EvalScenario { log: denormalize_scene(&s.scene, &s.validity, &world.normalizer), samples: sims, road: polys.clone() }
            })
            .collect();
        let rep = evaluate_wosac(&sc, &metric_cfg).unwrap();
        let ms: Vec<String> = rep.metric_scores.iter().map(|m| format!("{:.3}", m.unwrap_or(f64::NAN))).collect();
        println!("{mode:?} {hz} Hz composite {:.4} [{}] ({:.1}s)", rep.composite, ms.join(" "), clock.elapsed().as_secs_f64());
    };
    run(RolloutMode::AmortizedAr, 10.0);
    run(RolloutMode::FullAr, 10.0);
    run(RolloutMode::FullAr, 2.0);
    run(RolloutMode::FullAr, 0.625);
    run(RolloutMode::OneShot, 10.0);
}
