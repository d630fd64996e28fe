use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trafficdiff::denoiser::OracleDenoiser;
use trafficdiff::metrics::{evaluate_wosac, EvalScenario, MetricConfig};
use trafficdiff::rollout::{derive_seed, rollout, RolloutConfig, RolloutInput, RolloutMode};
use trafficdiff::scene::denormalize_scene;
use trafficdiff::world::{BehaviorMixture, LayoutConfig, SyntheticWorld, Template, WorldParams};

const H: usize = 3;
const F: usize = 10;

#[test]
fn oracle_rollouts_keep_history_and_score_in_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let world = SyntheticWorld::new(Template::Straight, WorldParams::default(), BehaviorMixture::default(), &mut rng).unwrap();
    let road = Arc::new(world.road_context());
    let cfg = LayoutConfig { agents: 2, capacity: 3, history: H, future: F };
    let polys = world.graph.polygons.clone();
    let metric_cfg = MetricConfig { bins: 16, ..Default::default() };

    for mode in [RolloutMode::OneShot, RolloutMode::FullAr, RolloutMode::AmortizedAr] {
        let mut scenarios = Vec::new();
        for i in 0..3u64 {
            let s = world.sample_scene(&cfg, &mut rng).unwrap();
            let oracle = OracleDenoiser::new(world.prior_as_mixture(&s.layout, 256).unwrap());
            let input = RolloutInput::new(s.scene.clone(), s.validity.clone(), road.clone());
            let mut samples = Vec::new();
            for k in 0..2 {
                let c = RolloutConfig::new(mode, H, F, derive_seed(i, k)).with_replan_hz(5.0);
                let r = rollout(&input, &oracle, &c).unwrap();
                assert_eq!(r.nfe, c.expected_nfe().unwrap(), "{mode:?}");
                assert_eq!(r.noise_levels.len() as u64, r.nfe);
                for a in 0..3 {
                    for t in 0..H {
                        assert_eq!(r.scene.row(a, t), s.scene.row(a, t), "{mode:?} history changed");
                    }
                }
                assert!(r.scene.as_slice().iter().all(|v| v.is_finite()));
                // Same seed, same rollout.
                assert_eq!(rollout(&input, &oracle, &c).unwrap().scene, r.scene);
                samples.push(denormalize_scene(&r.scene, &r.validity, &world.normalizer));
            }
            scenarios.push(EvalScenario {
                log: denormalize_scene(&s.scene, &s.validity, &world.normalizer),
                samples,
                road: polys.clone(),
            });
        }
        let rep = evaluate_wosac(&scenarios, &metric_cfg).unwrap();
        assert!((0.0..=1.0).contains(&rep.composite), "{mode:?} {}", rep.composite);
    }
}
