//! Run configuration: a flat TOML table with one key per knob.

use std::path::{Path, PathBuf};

use csr_core::decode::BeamParams;
use csr_core::prefopt::{CsrConfig, DpoConfig};
use csr_core::reward::RewardConfig;
use csr_core::toyworld::WorldSpec;
use csr_core::Vocabulary;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Every setting of an end-to-end run. Missing keys take their defaults;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds both the toy world and the seed policy.
    pub seed: u64,
    pub lambda: f64,
    pub iterations: usize,

    pub num_beams: usize,
    pub num_token_beams: usize,
    pub num_beam_groups: usize,
    pub diversity_penalty: f64,
    pub max_length: usize,
    pub max_new_tokens: usize,
    pub top_k: usize,
    pub bottom_k: usize,

    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs_per_iteration: usize,
    pub logprob_floor: f64,

    pub num_objects: usize,
    pub num_images: usize,
    pub embed_dim: usize,
    pub fillers: Vec<String>,
    /// Standard deviation of the seed policy's logits.
    pub init_scale: f64,

    /// Prompts to train on instead of the world's own images.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let world = WorldSpec::default();
        let dpo = DpoConfig::default();
        let vocab = Vocabulary::new(&[], &[]).expect("structural tokens are distinct");
        let beam = BeamParams::defaults_for(&vocab);
        Self {
            seed: 0,
            lambda: RewardConfig::default().lambda,
            iterations: dpo.iterations,
            num_beams: beam.num_beams,
            num_token_beams: beam.num_token_beams,
            num_beam_groups: beam.num_beam_groups,
            diversity_penalty: beam.diversity_penalty,
            max_length: beam.max_length,
            max_new_tokens: beam.max_new_tokens,
            top_k: beam.top_k,
            bottom_k: beam.bottom_k,
            alpha: dpo.alpha,
            learning_rate: dpo.learning_rate,
            epochs_per_iteration: dpo.epochs_per_iteration,
            logprob_floor: dpo.logprob_floor,
            num_objects: world.num_objects,
            num_images: world.num_images,
            embed_dim: world.embed_dim,
            fillers: world.fillers,
            init_scale: 1.0,
            dataset: None,
            out: PathBuf::from("csr-run"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 of the canonical TOML with the output directory cleared, so
    /// the same run written to two places hashes the same.
    pub fn hash(&self) -> String {
        let canonical = RunConfig {
            out: PathBuf::new(),
            ..self.clone()
        };
        hex::encode(Sha256::digest(canonical.to_toml().as_bytes()))
    }

    pub fn world_spec(&self) -> WorldSpec {
        WorldSpec {
            seed: self.seed,
            num_objects: self.num_objects,
            num_images: self.num_images,
            embed_dim: self.embed_dim,
            fillers: self.fillers.clone(),
        }
    }

    pub fn csr_config(&self, vocab: &Vocabulary) -> CsrConfig {
        CsrConfig {
            beam: BeamParams {
                num_beams: self.num_beams,
                num_token_beams: self.num_token_beams,
                num_beam_groups: self.num_beam_groups,
                diversity_penalty: self.diversity_penalty,
                max_length: self.max_length,
                max_new_tokens: self.max_new_tokens,
                top_k: self.top_k,
                bottom_k: self.bottom_k,
                delimiter_token: vocab.delimiter(),
                eos_token: vocab.eos(),
                max_sentences: None,
            },
            dpo: DpoConfig {
                alpha: self.alpha,
                learning_rate: self.learning_rate,
                epochs_per_iteration: self.epochs_per_iteration,
                iterations: self.iterations,
                logprob_floor: self.logprob_floor,
            },
            reward: RewardConfig {
                lambda: self.lambda,
                ..RewardConfig::default()
            },
        }
    }

    /// Checks ranges and that referenced files exist.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad(format!("init_scale {} must be finite and non-negative", self.init_scale));
        }
        if let Some(path) = &self.dataset {
            if !path.is_file() {
                return bad(format!("dataset {} does not exist", path.display()));
            }
        }
        if self.num_objects < 2 || self.num_objects > self.embed_dim {
            return bad(format!(
                "need 2 <= num_objects <= embed_dim, got {} and {}",
                self.num_objects, self.embed_dim
            ));
        }
        let vocab = Vocabulary::new(&[], &self.fillers).map_err(|e| CliError::Config(e.to_string()))?;
        let config = self.csr_config(&vocab);
        config.beam.validate().map_err(|e| CliError::Config(e.to_string()))?;
        config.dpo.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn awkward_floats_round_trip() {
        let c = RunConfig {
            lambda: 0.1 + 0.2,
            learning_rate: 1e-7 / 3.0,
            dataset: Some("data/prompts.jsonl".into()),
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_fail() {
        assert!(matches!(RunConfig::parse("lambda = 0.5\nlamda = 0.4\n"), Err(CliError::Config(_))));
    }

    #[test]
    fn partial_files_take_defaults() {
        let c = RunConfig::parse("seed = 7\niterations = 1\n").unwrap();
        assert_eq!((c.seed, c.iterations, c.lambda), (7, 1, 0.9));
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        let c = RunConfig { lambda: 1.5, ..RunConfig::default() };
        assert!(c.validate().is_err());
        let c = RunConfig { num_beams: 4, ..RunConfig::default() };
        assert!(c.validate().is_err());
        let c = RunConfig { dataset: Some("/nonexistent/x.jsonl".into()), ..RunConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_ignores_output_directory() {
        let a = RunConfig::default();
        let b = RunConfig { out: "elsewhere".into(), ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
    }
}
