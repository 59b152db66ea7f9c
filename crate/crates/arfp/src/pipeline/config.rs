//! Experiment configuration: one TOML file drives every subcommand.
//! All fields default to the standard operating values, so a minimal file
//! only overrides what an experiment changes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversary::AttackConfig;
use crate::condnet::{CondArch, GenArch};
use crate::error::{Error, Result};
use crate::frmetrics::EmbedderConfig;
use crate::objectives::TrainConfig;
use crate::pipeline::dataset::DatasetSpec;

/// Which components the trained variant keeps enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationToggles {
    pub arat: bool,
    pub kmb: bool,
    pub arr: bool,
}

impl Default for AblationToggles {
    fn default() -> Self {
        AblationToggles {
            arat: true,
            kmb: true,
            arr: true,
        }
    }
}

impl AblationToggles {
    pub fn label(&self) -> String {
        let mark = |b: bool| if b { "on" } else { "off" };
        format!("arat={},kmb={},arr={}", mark(self.arat), mark(self.kmb), mark(self.arr))
    }
}

/// How the recovery pipeline obtains the nonce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NoncePolicy {
    /// Decode the nonce from the protected image itself (self-contained).
    #[default]
    Decode,
    /// Use the nonce stored alongside the image at protection time.
    Stored,
}

/// How evaluation assigns keys to probe images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KeyPolicy {
    /// One key per identity, derived from the evaluation seed.
    #[default]
    PerIdentity,
    /// A fresh key per image.
    PerImage,
}

/// Identification protocol for the protection success rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PsrProtocol {
    /// Rank-1 closed-set identification (argmax cosine).
    #[default]
    ClosedSet,
    /// Verification against the true identity at a cosine threshold.
    Verification,
}

/// Evaluation-time options shared by the canned experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub ber_threshold: f64,
    pub jpeg_quality: u8,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub key_policy: KeyPolicy,
    pub nonce_policy: NoncePolicy,
    pub psr_protocol: PsrProtocol,
    pub verification_threshold: f64,
    /// Retrain per alpha in the trade-off sweep instead of rescaling the
    /// trained model's mask.
    pub sweep_retrain: bool,
    pub splice_min_area: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ber_threshold: crate::recovery::DEFAULT_BER_THRESHOLD,
            jpeg_quality: 75,
            blur_sigma: 1.0,
            noise_sigma: 0.1,
            key_policy: KeyPolicy::default(),
            nonce_policy: NoncePolicy::default(),
            psr_protocol: PsrProtocol::default(),
            verification_threshold: 0.5,
            sweep_retrain: false,
            splice_min_area: 0.25,
        }
    }
}

/// Network architecture knobs surfaced in the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub key_bits: usize,
    pub nonce_bits: usize,
    pub mix_dim: usize,
    pub mix_sigma: f64,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub base_channels: usize,
    pub res_blocks: usize,
    pub adversary_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let cond = CondArch::default();
        let gen = GenArch::default();
        ModelConfig {
            key_bits: cond.key_bits,
            nonce_bits: cond.nonce_bits,
            mix_dim: cond.mix_dim,
            mix_sigma: cond.mix_sigma,
            hidden_dim: cond.hidden_dim,
            embed_dim: cond.embed_dim,
            base_channels: gen.base_channels,
            res_blocks: gen.res_blocks,
            adversary_channels: 16,
        }
    }
}

impl ModelConfig {
    pub fn gen_arch(&self, kmb_enabled: bool) -> GenArch {
        GenArch {
            cond: CondArch {
                key_bits: self.key_bits,
                nonce_bits: self.nonce_bits,
                mix_dim: self.mix_dim,
                mix_sigma: self.mix_sigma,
                hidden_dim: self.hidden_dim,
                embed_dim: self.embed_dim,
                enabled: kmb_enabled,
            },
            base_channels: self.base_channels,
            res_blocks: self.res_blocks,
        }
    }
}

/// The complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub embedder: EmbedderConfig,
    pub attack: AttackConfig,
    pub ablation: AblationToggles,
    pub eval: EvalConfig,
    pub alpha_grid: Vec<f64>,
    pub key_error_grid: Vec<usize>,
    pub include_random_key: bool,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            embedder: EmbedderConfig::default(),
            attack: AttackConfig::default(),
            ablation: AblationToggles::default(),
            eval: EvalConfig::default(),
            alpha_grid: vec![0.01, 0.03, 0.05, 0.08, 0.15],
            key_error_grid: vec![0, 1, 16],
            include_random_key: true,
            output_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate().map_err(config_err)?;
        self.train.validate().map_err(config_err)?;
        self.attack.validate().map_err(config_err)?;
        if self.alpha_grid.is_empty() {
            return Err(Error::Config("alpha grid must be non-empty".into()));
        }
        if self.alpha_grid.iter().any(|&a| a < 0.0) {
            return Err(Error::Config("alpha grid entries must be non-negative".into()));
        }
        if self.key_error_grid.is_empty() {
            return Err(Error::Config("key error grid must be non-empty".into()));
        }
        if self.key_error_grid.iter().any(|&k| k > self.model.key_bits) {
            return Err(Error::Config(
                "key error grid entries cannot exceed the key length".into(),
            ));
        }
        if !(self.eval.ber_threshold > 0.0 && self.eval.ber_threshold < 0.5) {
            return Err(Error::Config("ber threshold must lie in (0, 0.5)".into()));
        }
        if !(0.0..1.0).contains(&self.eval.splice_min_area) {
            return Err(Error::Config("splice area fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Hash of the fully resolved configuration; stamped on every report
    /// row's header so results trace back to their config.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn config_err(e: Error) -> Error {
    Error::Config(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_hashes_stably() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(c.content_hash(), c.content_hash());
        let mut other = c.clone();
        other.seed = 1;
        assert_ne!(c.content_hash(), other.content_hash());
    }

    #[test]
    fn minimal_toml_round_trip() {
        let text = r#"
seed = 7
[dataset]
image-size = 32
"#;
        // Field names use the struct's serde defaults (snake_case), so the
        // kebab-case key above must fail while the snake_case one parses.
        assert!(toml::from_str::<ExperimentConfig>(text).is_err());
        let text = r#"
seed = 7
[dataset]
image_size = 32
"#;
        let c: ExperimentConfig = toml::from_str(text).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.dataset.image_size, 32);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);

        let dumped = toml::to_string_pretty(&c).unwrap();
        let back: ExperimentConfig = toml::from_str(&dumped).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ExperimentConfig::default();
        c.alpha_grid.clear();
        assert!(c.validate().is_err());

        let mut c = ExperimentConfig::default();
        c.key_error_grid = vec![c.model.key_bits + 1];
        assert!(c.validate().is_err());

        let mut c = ExperimentConfig::default();
        c.eval.ber_threshold = 0.5;
        assert!(c.validate().is_err());
    }
}
