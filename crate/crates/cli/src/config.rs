//! Pipeline configuration file: TOML with one section per stage. Unknown
//! keys are configuration errors.

use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub samples: SamplesSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub explain: ExplainSection,
    #[serde(default)]
    pub analyze: AnalyzeSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Stages to execute, in order. Defaults to the full pipeline.
    #[serde(default = "default_stages")]
    pub stages: Vec<String>,
    /// Hidden-width multiplier; 1.0 is the full architecture.
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Worker threads; 0 keeps the library default. The HERDCAST_THREADS
    /// environment variable overrides this.
    #[serde(default)]
    pub threads: usize,
}

pub fn default_stages() -> Vec<String> {
    ["simulate", "build-samples", "train", "eval", "explain", "analyze", "report"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn default_scale() -> f64 {
    0.25
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub pairs: usize,
    pub trials_per_pair: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            pairs: 6,
            trials_per_pair: 20,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplesSection {
    pub t_hor: u16,
    pub stride: u8,
    /// "balanced" or "representative".
    pub balance: String,
    pub n_train: usize,
    pub n_test: usize,
    pub n_test_sets: usize,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
}

fn default_validation_fraction() -> f64 {
    0.10
}

impl Default for SamplesSection {
    fn default() -> Self {
        SamplesSection {
            t_hor: 16,
            stride: 2,
            balance: "balanced".into(),
            n_train: 8000,
            n_test: 2000,
            n_test_sets: 3,
            validation_fraction: 0.10,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub alpha: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub standardize: bool,
    /// "final" or "all".
    pub loss: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            alpha: 0.0018,
            batch_size: 64,
            max_epochs: 40,
            patience: 5,
            min_delta: 1e-4,
            standardize: true,
            loss: "final".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainSection {
    pub n_samples: usize,
    pub n_perms: usize,
    pub background_size: usize,
}

impl Default for ExplainSection {
    fn default() -> Self {
        ExplainSection {
            n_samples: 6,
            n_perms: 30,
            background_size: 50,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeSection {
    pub bin_ms: f64,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        AnalyzeSection { bin_ms: 40.0 }
    }
}

pub const KNOWN_STAGES: [&str; 7] = [
    "simulate",
    "build-samples",
    "train",
    "eval",
    "explain",
    "analyze",
    "report",
];

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), String> {
        for stage in &self.pipeline.stages {
            if !KNOWN_STAGES.contains(&stage.as_str()) {
                return Err(format!(
                    "unknown stage '{stage}' (known: {})",
                    KNOWN_STAGES.join(", ")
                ));
            }
        }
        if !(self.pipeline.scale > 0.0 && self.pipeline.scale <= 1.0) {
            return Err(format!(
                "scale must be in (0, 1], got {}",
                self.pipeline.scale
            ));
        }
        match self.samples.balance.as_str() {
            "balanced" | "representative" => {}
            other => return Err(format!("balance must be 'balanced' or 'representative', got '{other}'")),
        }
        match self.train.loss.as_str() {
            "final" | "all" => {}
            other => return Err(format!("loss must be 'final' or 'all', got '{other}'")),
        }
        Ok(())
    }

    /// Canonical serialization used for content hashing.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
