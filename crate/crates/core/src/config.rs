//! The experiment configuration: one TOML document covering every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{DenoiserConfig, NoiseSchedule, SamplerConfig, TrainConfig};
use crate::duge::DecrementalPlan;
use crate::error::{CoreError, Result};
use crate::evalkit::ClassifierConfig;
use crate::glyph::GlyphConfig;
use duge_tensor::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            beta_start: 5e-4,
            beta_end: 0.1,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Generated images per class (accuracy) and per condition (FID/KID).
    pub n: usize,
    /// Sample grids written by the report: images per class.
    pub grid_per_class: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n: 128,
            grid_per_class: 8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Root seed; every stage draws from a named split of it.
    pub seed: u64,
    pub dataset: GlyphConfig,
    pub model: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub classifier: ClassifierConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
    pub plan: DecrementalPlan,
    /// Output root; not part of the config hash.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        if self.model.num_classes != self.dataset.num_classes {
            return Err(CoreError::Config(format!(
                "model.num_classes = {} but dataset.num_classes = {}",
                self.model.num_classes, self.dataset.num_classes
            )));
        }
        self.schedule.build()?;
        self.plan.validate(self.dataset.num_classes)?;
        if self.eval.n == 0 {
            return Err(CoreError::Config("eval.n must be at least 1".into()));
        }
        if self.sampler.steps == 0 || self.sampler.batch == 0 {
            return Err(CoreError::Config(
                "sampler.steps and sampler.batch must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// SHA-256 of the canonical TOML with the output root removed.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = None;
        let text = c.to_toml().expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Random stream of the named stage.
    pub fn stage_rng(&self, stage: &str) -> Rng {
        Rng::new(self.seed).split_named(stage)
    }

    /// Seed of the named stage's stream, for run logs.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        self.stage_rng(stage).seed()
    }
}
