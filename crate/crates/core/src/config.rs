//! JSON run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::entropy::{DEFAULT_LIKELIHOOD_FLOOR, DEFAULT_SCALE_FLOOR};
use crate::error::{Error, Result};
use crate::network::{Network, Topology};
use crate::ops::OptimizerKind;
use crate::prune::PruneConfig;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntropyConfig {
    pub scale_floor: f64,
    pub likelihood_floor: f64,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self { scale_floor: DEFAULT_SCALE_FLOOR, likelihood_floor: DEFAULT_LIKELIHOOD_FLOOR }
    }
}

/// Plain rate-distortion training of the whole codec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Square crop size; must be a multiple of the network's downsampling
    /// factor.
    pub patch: usize,
    /// Number of fixed random crops drawn from the training images.
    pub patches: usize,
    pub lr: f64,
    /// Fraction of `steps` after which the learning rate is multiplied by
    /// `lr_decay`.
    pub decay_at: f64,
    pub lr_decay: f64,
    pub optimizer: OptimizerKind,
    /// Steps between progress records.
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 8,
            patch: 64,
            patches: 256,
            lr: 1e-3,
            decay_at: 0.7,
            lr_decay: 0.1,
            optimizer: OptimizerKind::adam(),
            log_interval: 100,
        }
    }
}

/// Pruning-stage settings that are not top-level keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSection {
    pub threshold: f64,
    pub selection_interval: usize,
    pub max_steps: usize,
    pub lr: f64,
    pub min_keep: usize,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub eval_interval: usize,
    pub plateau_sweeps: usize,
}

impl Default for PruneSection {
    fn default() -> Self {
        let p = PruneConfig::default();
        Self {
            threshold: p.threshold,
            selection_interval: p.selection_interval,
            max_steps: p.max_steps,
            lr: p.lr,
            min_keep: p.min_keep,
            finetune_steps: p.finetune_steps,
            finetune_lr: p.finetune_lr,
            eval_interval: p.eval_interval,
            plateau_sweeps: p.plateau_sweeps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub lambda: f64,
    pub beta: f64,
    pub prune_target: f64,
    pub seed: u64,
    pub paths: Topology,
    pub entropy: EntropyConfig,
    pub train: TrainConfig,
    pub prune: PruneSection,
}

impl Default for Config {
    fn default() -> Self {
        let p = PruneConfig::default();
        Self {
            n: 32,
            m: 48,
            lambda: 0.01,
            beta: p.beta,
            prune_target: p.prune_target,
            seed: 0,
            paths: Topology::default(),
            entropy: EntropyConfig::default(),
            train: TrainConfig::default(),
            prune: PruneSection::default(),
        }
    }
}

fn check(ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg.to_string()))
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        check(self.n > 0 && self.m > 0, "N and M must be positive")?;
        check(self.lambda >= 0.0 && self.lambda.is_finite(), "lambda must be a nonnegative number")?;
        check(self.beta >= 0.0 && self.beta.is_finite(), "beta must be nonnegative")?;
        check(self.prune_target > 0.0 && self.prune_target <= 1.0, "prune_target must lie in (0, 1]")?;
        check(self.entropy.scale_floor > 0.0 && self.entropy.likelihood_floor > 0.0, "entropy floors must be positive")?;
        check(self.train.batch_size > 0 && self.train.patch > 0, "batch_size and patch must be positive")?;
        check(self.train.lr > 0.0 && self.prune.lr > 0.0 && self.prune.finetune_lr > 0.0, "learning rates must be positive")?;
        check((0.0..=1.0).contains(&self.train.decay_at), "decay_at must lie in [0, 1]")?;
        check(self.train.lr_decay > 0.0 && self.train.lr_decay <= 1.0, "lr_decay must lie in (0, 1]")?;
        check(self.prune.min_keep >= 1, "min_keep must be at least 1")?;
        check(self.prune.selection_interval > 0 && self.prune.eval_interval > 0, "intervals must be positive")?;
        check(self.prune.threshold >= 0.0, "threshold must be nonnegative")?;
        Ok(())
    }

    pub fn prune_config(&self) -> PruneConfig {
        let p = &self.prune;
        PruneConfig {
            beta: self.beta,
            lambda: self.lambda,
            prune_target: self.prune_target,
            threshold: p.threshold,
            selection_interval: p.selection_interval,
            max_steps: p.max_steps,
            lr: p.lr,
            min_keep: p.min_keep,
            finetune_steps: p.finetune_steps,
            finetune_lr: p.finetune_lr,
            eval_interval: p.eval_interval,
            plateau_sweeps: p.plateau_sweeps,
            batch_size: self.train.batch_size,
            optimizer: self.train.optimizer,
            seed: self.seed,
        }
    }

    /// Builds a freshly initialised network for this configuration.
    pub fn build<T: Scalar>(&self) -> Result<Network<T>> {
        build_hyperprior(self)
    }
}

/// Builds the codec described by `cfg`, initialised from `cfg.seed`.
pub fn build_hyperprior<T: Scalar>(cfg: &Config) -> Result<Network<T>> {
    cfg.validate()?;
    let mut net = Network::new(cfg.n, cfg.m, cfg.paths.resolve(cfg.n, cfg.m), cfg.seed)?;
    net.gaussian = crate::entropy::GaussianConditional::new(T::of(cfg.entropy.scale_floor), T::of(cfg.entropy.likelihood_floor))?;
    net.factorized.scale_floor = T::of(cfg.entropy.scale_floor);
    net.factorized.likelihood_floor = T::of(cfg.entropy.likelihood_floor);
    net.factorized.clamp_scales();
    Ok(net)
}
