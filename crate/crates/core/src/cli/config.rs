//! The TOML run configuration. Every section is optional; missing keys take
//! their defaults and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::crf::CrfConfig;
use crate::cues::CueConfig;
use crate::datasets::{JitterConfig, SynthConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    /// Estimate missing flow by block matching instead of failing.
    pub estimate: bool,
    pub block: usize,
    pub search: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            estimate: false,
            block: 8,
            search: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JitterSection {
    pub dilation_radius: usize,
    pub shift_min: u32,
    pub shift_max: u32,
    pub copies: usize,
    pub seed: u64,
}

impl Default for JitterSection {
    fn default() -> Self {
        let j = JitterConfig::default();
        Self {
            dilation_radius: j.dilation_radius,
            shift_min: j.shift_min,
            shift_max: j.shift_max,
            copies: 3,
            seed: 0,
        }
    }
}

impl JitterSection {
    pub fn config(&self) -> JitterConfig {
        JitterConfig {
            dilation_radius: self.dilation_radius,
            shift_min: self.shift_min,
            shift_max: self.shift_max,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SetsConfig {
    /// Shuffle seed of the random scheme.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub trust_factors: Vec<f64>,
    /// Each seed sets both the initialization and the shuffle seed.
    pub seeds: Vec<u64>,
    /// Run grid cells concurrently.
    pub parallel: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            trust_factors: vec![0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            seeds: vec![0],
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub cues: CueConfig,
    pub crf: CrfConfig,
    pub flow: FlowConfig,
    pub jitter: JitterSection,
    pub sets: SetsConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| {
            CliError::Validation(format!("config: {}", e.to_string().replace("unknown field", "unknown key")))
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Replaces every seed in the document.
    pub fn apply_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.jitter.seed = seed;
        self.sets.seed = seed;
        self.train.init_seed = seed;
        self.train.shuffle_seed = seed;
        self.sweep.seeds = vec![seed];
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| CliError::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.crf.lambda2 = 2.5;
        c.crf.beta = crate::crf::Beta::Fixed(3.0);
        c.sweep.seeds = vec![1, 2];
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
        assert!(RunConfig::default().to_toml().contains("beta = \"auto\""));
    }

    #[test]
    fn unknown_keys_rejected() {
        for doc in ["bogus = 1", "[crf]\nlamda2 = 1.0", "[nosuch]\n"] {
            let err = RunConfig::parse(doc).unwrap_err().to_string();
            assert!(err.contains("unknown key"), "{err}");
        }
    }

    #[test]
    fn partial_section() {
        let c = RunConfig::parse("[train]\nepochs = 3\n[synth]\nnum_sequences = 2").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.learning_rate, TrainConfig::default().learning_rate);
        assert_eq!(c.synth.num_sequences, 2);
    }
}
