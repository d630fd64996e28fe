//! JSON scenario and rollout files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scene::{denormalize_scene, normalize_scene, FeatureNormalizer, RawScene, SceneTensor, ValidityMask};
use crate::world::{Behavior, RoadGraph, SceneLayout, SyntheticScene, SyntheticWorld};

pub const FORMAT_VERSION: u32 = 1;

/// One logged or synthetic scene with its roadgraph, in world units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    /// Agent slots of the scene tensor.
    pub capacity: usize,
    pub scene: RawScene,
    pub road: RoadGraph,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<SceneLayout>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behaviors: Option<Vec<Behavior>>,
}

impl Scenario {
    pub fn from_synthetic(id: impl Into<String>, world: &SyntheticWorld, s: &SyntheticScene) -> Self {
        Self {
            id: id.into(),
            capacity: s.scene.agents(),
            scene: denormalize_scene(&s.scene, &s.validity, &world.normalizer),
            road: world.graph.clone(),
            layout: Some(s.layout.clone()),
            behaviors: Some(s.behaviors.clone()),
        }
    }

    pub fn tensor(&self, normalizer: &FeatureNormalizer) -> Result<(SceneTensor, ValidityMask)> {
        normalize_scene(&self.scene, normalizer, self.capacity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub version: u32,
    pub scenarios: Vec<Scenario>,
}

/// Simulated versions of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSamples {
    pub id: String,
    /// Denoiser calls per sample.
    pub nfe: u64,
    pub samples: Vec<RawScene>,
    /// Per sample, the noise levels of every denoiser call in call order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub noise_levels: Vec<Vec<Vec<f64>>>,
    /// Agents of the samples added by a constraint config.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub injected: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFile {
    pub version: u32,
    /// Producing command: rollout mode, "generate" or "perturb".
    pub kind: String,
    pub seed: u64,
    pub scenarios: Vec<ScenarioSamples>,
}

fn check_version(v: u32) -> Result<()> {
    if v != FORMAT_VERSION {
        return invalid(format!("unsupported file version {v}"));
    }
    Ok(())
}

/// Reads a scenario file; a bare scenario object is accepted too.
pub fn load_scenarios(path: &Path) -> Result<Vec<Scenario>> {
    let bytes = std::fs::read(path)?;
    let value: serde_json::Value = serde_json::from_slice(&bytes)?;
    if value.get("scenarios").is_some() {
        let f: ScenarioFile = serde_json::from_value(value)?;
        check_version(f.version)?;
        Ok(f.scenarios)
    } else {
        Ok(vec![serde_json::from_value(value)?])
    }
}

pub fn save_scenarios(path: &Path, scenarios: &[Scenario]) -> Result<()> {
    write_json(
        path,
        &ScenarioFile {
            version: FORMAT_VERSION,
            scenarios: scenarios.to_vec(),
        },
    )
}

pub fn load_samples(path: &Path) -> Result<SampleFile> {
    let f: SampleFile = serde_json::from_slice(&std::fs::read(path)?)?;
    check_version(f.version)?;
    Ok(f)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{BehaviorMixture, LayoutConfig, Template, WorldParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scenario_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let world = SyntheticWorld::new(Template::Straight, WorldParams::default(), BehaviorMixture::default(), &mut rng).unwrap();
        let cfg = LayoutConfig {
            agents: 3,
            capacity: 4,
            history: 4,
            future: 8,
        };
        let s = world.sample_scene(&cfg, &mut rng).unwrap();
        let sc = Scenario::from_synthetic("a", &world, &s);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        save_scenarios(&path, std::slice::from_ref(&sc)).unwrap();
        let back = load_scenarios(&path).unwrap();
        assert_eq!(back, vec![sc.clone()]);
        let (x, v) = back[0].tensor(&world.normalizer).unwrap();
        assert_eq!(v, s.validity);
        for a in 0..3 {
            for t in 0..12 {
                for d in 0..2 {
                    assert!((x.get(a, t, d) - s.scene.get(a, t, d)).abs() < 1e-12);
                }
            }
        }
        std::fs::write(&path, serde_json::to_vec(&sc).unwrap()).unwrap();
        assert_eq!(load_scenarios(&path).unwrap().len(), 1);
    }
}
