//! Experiment configuration: a flat TOML file with dotted keys in the
//! `env`, `asa`, `policy` and `train` sections plus a top-level `seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, ReachConfig};
use crate::error::{Error, Result};
use crate::policy::PolicyConfig;
use crate::quant::CodecTrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AsaKind {
    Uniform,
    Vq,
    Rvq,
    Semlang,
    Lang,
    Pred,
}

impl AsaKind {
    pub fn name(self) -> &'static str {
        match self {
            AsaKind::Uniform => "uniform",
            AsaKind::Vq => "vq",
            AsaKind::Rvq => "rvq",
            AsaKind::Semlang => "semlang",
            AsaKind::Lang => "lang",
            AsaKind::Pred => "pred",
        }
    }

    pub fn uses_codec(self) -> bool {
        matches!(self, AsaKind::Vq | AsaKind::Rvq)
    }

    pub fn uses_vocab(self) -> bool {
        matches!(self, AsaKind::Semlang | AsaKind::Lang)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsaConfig {
    pub kind: AsaKind,
    /// Uniform bins per dimension.
    pub bins: usize,
    /// Codes per codebook (K).
    pub codes: usize,
    /// Number of codebooks (M). Forced to 1 for `vq`.
    pub codebooks: usize,
    pub latent: usize,
    pub hidden: usize,
    pub beta: f64,
    pub ema_decay: f64,
    pub epochs: usize,
    pub min_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Unquantized warm-up fraction of codec training.
    pub warmup: f64,
    /// Fraction of episodes held out when training a codec.
    pub holdout: f64,
    /// Smallest vocabulary size for word adapters; padded with fillers.
    pub vocab_size: usize,
    /// Constrain word-adapter sampling to valid action sequences.
    pub filter: bool,
    /// Codec file; defaults to `codec.bin` in the output directory.
    pub codec: Option<PathBuf>,
}

impl Default for AsaConfig {
    fn default() -> Self {
        let c = CodecTrainConfig::default();
        Self {
            kind: AsaKind::Rvq,
            bins: 512,
            codes: c.codes,
            codebooks: c.codebooks,
            latent: c.latent_dim,
            hidden: c.hidden,
            beta: c.beta,
            ema_decay: c.ema_decay,
            epochs: c.epochs,
            min_steps: c.min_steps,
            batch_size: c.batch_size,
            lr: c.lr,
            warmup: c.warmup,
            holdout: 0.1,
            vocab_size: 64,
            filter: true,
            codec: None,
        }
    }
}

impl AsaConfig {
    pub fn codec_config(&self) -> CodecTrainConfig {
        CodecTrainConfig {
            latent_dim: self.latent,
            codebooks: if self.kind == AsaKind::Vq {
                1
            } else {
                self.codebooks
            },
            codes: self.codes,
            hidden: self.hidden,
            beta: self.beta,
            ema_decay: self.ema_decay,
            epochs: self.epochs,
            min_steps: self.min_steps,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup: self.warmup,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainerKind {
    Bc,
    Pg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    K,
    M,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub kind: TrainerKind,
    /// Episodes generated by `gen-demos`.
    pub demos: usize,
    /// Demonstration file; defaults to `demos.jsonl` in the output directory.
    pub demos_path: Option<PathBuf>,
    /// Checkpoint read by `eval`; defaults to `policy.ckpt` in the output
    /// directory.
    pub checkpoint: Option<PathBuf>,
    pub lr: f64,
    pub warmup: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Optimizer steps for behaviour cloning.
    pub steps: usize,
    pub batch_size: usize,
    pub log_every: usize,
    pub eval_episodes: usize,
    /// Environment-step budget for policy-gradient training.
    pub env_steps: usize,
    /// Parallel environments per policy-gradient rollout.
    pub rollout_envs: usize,
    /// Environment steps per environment between updates.
    pub rollout_len: usize,
    pub gamma: f64,
    pub entropy: f64,
    pub value_coef: f64,
    pub temperature: f64,
    pub sweep_axis: SweepAxis,
    pub sweep_values: Vec<usize>,
    pub sweep_seeds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: TrainerKind::Bc,
            demos: 500,
            demos_path: None,
            checkpoint: None,
            lr: 3e-4,
            warmup: 0.1,
            weight_decay: 0.0,
            grad_clip: 1.0,
            steps: 2000,
            batch_size: 32,
            log_every: 100,
            eval_episodes: 100,
            env_steps: 200_000,
            rollout_envs: 16,
            rollout_len: 16,
            gamma: 0.99,
            entropy: 0.01,
            value_coef: 0.5,
            temperature: 1.0,
            sweep_axis: SweepAxis::K,
            sweep_values: vec![16, 64, 256],
            sweep_seeds: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    #[serde(default = "default_env")]
    pub env: EnvConfig,
    #[serde(default)]
    pub asa: AsaConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub out: Option<PathBuf>,
}

fn default_env() -> EnvConfig {
    EnvConfig::Reach(ReachConfig::default())
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: None,
            env: default_env(),
            asa: AsaConfig::default(),
            policy: PolicyConfig::default(),
            train: TrainConfig::default(),
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The seed every random stream derives from.
    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("a seed is required (config `seed` or --seed)".into()))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn demos_path(&self) -> PathBuf {
        self.train
            .demos_path
            .clone()
            .unwrap_or_else(|| self.out_dir().join("demos.jsonl"))
    }

    pub fn codec_path(&self) -> PathBuf {
        self.asa
            .codec
            .clone()
            .unwrap_or_else(|| self.out_dir().join("codec.bin"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.train
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir().join("policy.ckpt"))
    }

    /// Checks that the pieces fit together.
    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        let continuous = self.env.action_space().is_continuous();
        let kind = self.asa.kind;
        if continuous && kind.uses_vocab() {
            return Err(Error::Config(format!(
                "asa.kind {} needs a discrete action space",
                kind.name()
            )));
        }
        if !continuous && matches!(kind, AsaKind::Uniform | AsaKind::Vq | AsaKind::Rvq) {
            return Err(Error::Config(format!(
                "asa.kind {} needs a continuous action space",
                kind.name()
            )));
        }
        if kind == AsaKind::Uniform && self.asa.bins < 2 {
            return Err(Error::Config("asa.bins must be at least 2".into()));
        }
        if kind.uses_codec() && (self.asa.codes == 0 || self.asa.codebooks == 0) {
            return Err(Error::Config(
                "asa.codes and asa.codebooks must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.asa.holdout) {
            return Err(Error::Config("asa.holdout must lie in [0, 1)".into()));
        }
        let t = &self.train;
        if t.steps == 0 || t.batch_size == 0 || t.log_every == 0 {
            return Err(Error::Config(
                "train.steps, train.batch_size and train.log_every must be positive".into(),
            ));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) || !(0.0..1.0).contains(&t.warmup) {
            return Err(Error::Config(
                "train.lr must be positive and train.warmup in [0, 1)".into(),
            ));
        }
        if t.rollout_envs == 0 || t.rollout_len == 0 {
            return Err(Error::Config(
                "train.rollout_envs and train.rollout_len must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::GridConfig;

    #[test]
    fn dotted_keys_parse() {
        let c = ExperimentConfig::from_toml(
            "seed = 3\nenv.kind = \"reach\"\nenv.dims = 4\nasa.kind = \"uniform\"\nasa.bins = 16\n\
             policy.width = 32\ntrain.steps = 10\ntrain.sweep_axis = \"M\"\n",
        )
        .unwrap();
        assert_eq!(c.seed, Some(3));
        assert!(matches!(c.env, EnvConfig::Reach(ref r) if r.dims == 4 && r.mirror));
        assert_eq!(c.asa.kind, AsaKind::Uniform);
        assert_eq!(c.asa.bins, 16);
        assert_eq!(c.policy.width, 32);
        assert_eq!(c.policy.layers, PolicyConfig::default().layers);
        assert_eq!(c.train.sweep_axis, SweepAxis::M);
        c.validate().unwrap();
    }

    #[test]
    fn tables_and_round_trip() {
        let c = ExperimentConfig::from_toml(
            "seed = 1\n[env]\nkind = \"grid\"\nsize = 5\n[asa]\nkind = \"semlang\"\n",
        )
        .unwrap();
        assert!(matches!(c.env, EnvConfig::Grid(GridConfig { size: 5, .. })));
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(ExperimentConfig::from_toml("seed = 1\nasa.bogus = 2\n").is_err());
        assert!(ExperimentConfig::from_toml("seed = 1\nbogus = 2\n").is_err());
        assert!(
            ExperimentConfig::from_toml("seed = 1\nenv.kind = \"reach\"\nenv.dim = 2\n").is_err()
        );
        assert!(ExperimentConfig::from_toml("seed = 1\npolicy.widht = 2\n").is_err());
        assert!(ExperimentConfig::from_toml("seed = \"x\"\n").is_err());
    }

    #[test]
    fn incompatible_kinds_rejected() {
        let c = ExperimentConfig::from_toml("seed = 1\nenv.kind = \"grid\"\nasa.kind = \"rvq\"\n")
            .unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = ExperimentConfig::from_toml("seed = 1\nasa.kind = \"lang\"\n").unwrap();
        assert!(c.validate().is_err());
        let c = ExperimentConfig::from_toml("asa.kind = \"rvq\"\n").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn vq_means_one_codebook() {
        let c = ExperimentConfig::from_toml("seed = 1\nasa.kind = \"vq\"\nasa.codebooks = 4\n")
            .unwrap();
        assert_eq!(c.asa.codec_config().codebooks, 1);
    }
}
