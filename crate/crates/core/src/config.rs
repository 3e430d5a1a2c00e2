//! The run configuration file (TOML, one section per module).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ablation::AblationSpec;
use crate::backbone::BackboneConfig;
use crate::dataset::SyntheticConfig;
use crate::detection::BoxStrategy;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::inference::InferenceSettings;
use crate::training::{Stage, StageConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub images: PathBuf,
    pub annotations: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    /// Boxes used for instance crops (stage 2) and fused inputs (stage 3).
    #[serde(default)]
    pub box_strategy: BoxStrategy,
    /// Side of instance crops; defaults to the backbone resolution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_resolution: Option<usize>,
    pub full: StageConfig,
    pub instance: StageConfig,
    pub fusion: StageConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            box_strategy: BoxStrategy::default(),
            instance_resolution: None,
            full: StageConfig::paper(Stage::Full),
            instance: StageConfig::paper(Stage::Instance),
            fusion: StageConfig::paper(Stage::Fusion),
        }
    }
}

impl TrainingConfig {
    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Full => &self.full,
            Stage::Instance => &self.instance,
            Stage::Fusion => &self.fusion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AblationConfig {
    #[serde(flatten)]
    pub spec: AblationSpec,
    /// Train fresh heads for the placement's layers instead of reusing the
    /// trained ones.
    #[serde(default)]
    pub retrain: bool,
}

/// Which predictions `evaluate` scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalModel {
    #[default]
    Fused,
    FullImage,
    /// The ground truth itself; a sanity check of the protocol.
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    pub model: EvalModel,
    pub instance_level: bool,
    /// Separate evaluation data; the training data is used when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            model: EvalModel::Fused,
            instance_level: true,
            data: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Every stochastic component derives its seed from this one.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    /// Used by `gen-fixture`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture: Option<SyntheticConfig>,
}

/// The part of the configuration that determines trained parameters.
#[derive(Serialize)]
struct TrainingIdentity<'a> {
    seed: u64,
    backbone: &'a BackboneConfig,
    fusion: &'a FusionConfig,
    training: &'a TrainingConfig,
}

impl RunConfig {
    /// Reads a config file. Relative paths inside it are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        let mut cfg: RunConfig = toml::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.propagate_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for d in std::iter::once(&mut self.data).chain(self.evaluation.data.as_mut()) {
            fix(&mut d.images);
            fix(&mut d.annotations);
            if let Some(m) = d.masks.as_mut() {
                fix(m);
            }
        }
    }

    /// Copies `seed` into every component: backbone init, head init and the
    /// per-stage shuffling streams.
    pub fn propagate_seed(&mut self) {
        let s = self.seed;
        self.backbone.seed = s;
        self.fusion.seed = s.wrapping_add(1);
        self.training.full.seed = s.wrapping_add(2);
        self.training.instance.seed = s.wrapping_add(3);
        self.training.fusion.seed = s.wrapping_add(4);
        if let Some(f) = self.fixture.as_mut() {
            f.seed = s.wrapping_add(5);
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.propagate_seed();
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        for stage in Stage::ALL {
            let c = self.training.stage(stage);
            c.validate()?;
            if c.stage != stage {
                return Err(Error::Config(format!(
                    "[training.{}] declares stage {:?}",
                    stage.name(),
                    c.stage
                )));
            }
        }
        if self.training.instance_resolution == Some(0) {
            return Err(Error::Config("instance_resolution must be positive".into()));
        }
        if self.fusion.max_instances == 0 {
            return Err(Error::Config("max_instances must be at least 1".into()));
        }
        Ok(())
    }

    /// Hash stored in every checkpoint manifest of this run.
    pub fn training_hash(&self) -> String {
        crate::params::config_hash(&TrainingIdentity {
            seed: self.seed,
            backbone: &self.backbone,
            fusion: &self.fusion,
            training: &self.training,
        })
    }

    pub fn instance_resolution(&self) -> usize {
        self.training
            .instance_resolution
            .unwrap_or(self.backbone.base_resolution)
    }

    pub fn inference_settings(&self) -> InferenceSettings {
        InferenceSettings {
            resolution: self.backbone.base_resolution,
            instance_resolution: self.instance_resolution(),
            spec: AblationSpec {
                box_strategy: self.training.box_strategy,
                ..AblationSpec::default()
            },
            softmax: self.fusion.softmax,
            max_instances: self.fusion.max_instances,
        }
    }

    pub fn evaluation_data(&self) -> &DataConfig {
        self.evaluation.data.as_ref().unwrap_or(&self.data)
    }

    /// A small configuration for the synthetic fixture written by `gen-fixture`.
    pub fn toy(output_dir: impl Into<PathBuf>, data_dir: &Path) -> Self {
        let mut backbone = BackboneConfig::toy(vec![16, 32, 32, 32, 16, 16], 32);
        backbone.fusion_layers = (0..backbone.num_layers()).collect();
        let mut training = TrainingConfig::default();
        for (c, epochs) in [(&mut training.full, 4), (&mut training.instance, 4), (&mut training.fusion, 2)] {
            c.epochs = epochs;
            c.learning_rate = 2e-3;
            c.beta1 = 0.9;
        }
        let mut cfg = RunConfig {
            seed: 7,
            output_dir: output_dir.into(),
            data: DataConfig {
                images: data_dir.join("images"),
                annotations: data_dir.join("annotations.json"),
                masks: Some(data_dir.join("masks")),
            },
            backbone,
            fusion: FusionConfig::default(),
            training,
            ablation: AblationConfig::default(),
            evaluation: EvaluationConfig::default(),
            fixture: Some(SyntheticConfig {
                size: 32,
                ..SyntheticConfig::default()
            }),
        };
        cfg.propagate_seed();
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::toy("out", Path::new("data"));
        let path = dir.path().join("run.toml");
        fs::write(&path, cfg.to_toml().unwrap()).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(back.output_dir, dir.path().join("out"));
        assert_eq!(back.data.images, dir.path().join("data/images"));
        assert_eq!(back.backbone, cfg.backbone);
        assert_eq!(back.training, cfg.training);
        assert_eq!(back.training_hash(), cfg.training_hash());
    }

    #[test]
    fn seed_changes_hash_and_components() {
        let mut cfg = RunConfig::toy("out", Path::new("data"));
        let h = cfg.training_hash();
        cfg.set_seed(99);
        assert_ne!(cfg.training_hash(), h);
        assert_eq!(cfg.backbone.seed, 99);
        assert_eq!(cfg.training.fusion.seed, 103);
    }

    #[test]
    fn invalid_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::toy("out", Path::new("data"));
        cfg.training.instance.learning_rate = -1.0;
        let path = dir.path().join("bad.toml");
        fs::write(&path, cfg.to_toml().unwrap()).unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));
        fs::write(&path, "seed = 1\nbogus = 2\n").unwrap();
        assert!(RunConfig::load(&path).is_err());
    }

    #[test]
    fn ablation_section_is_flat() {
        let text = r#"
fusion_placement = "encoder_only"
blend_mode = "box_mask"
retrain = true
box_strategy = { strategy = "threshold", tau = 0.5 }
"#;
        let a: AblationConfig = toml::from_str(text).unwrap();
        assert!(a.retrain);
        assert_eq!(a.spec.box_strategy, BoxStrategy::Threshold { tau: 0.5 });
    }
}
