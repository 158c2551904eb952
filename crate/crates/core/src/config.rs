//! Run configuration, read from a flat `key = value` TOML file.
//!
//! Every key is optional; unknown keys are rejected. See `docs/config.md`
//! for the key list.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autoencoder::{AutoencoderConfig, Regularizer};
use crate::diffusion::{DenoiserConfig, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    Kl,
    Es,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Number of diffusion steps T.
    pub steps: usize,
    pub schedule: String,
    pub k: usize,
    pub sigma0: f64,
    pub ae_hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub denoiser_hidden: usize,
    pub denoiser_layers: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub ae_lr: Option<f64>,
    pub ldm_lr: Option<f64>,
    pub ae_iterations: usize,
    pub ldm_iterations: usize,
    /// Fraction of each stage over which the learning rate decays to zero.
    pub lr_decay: f64,
    pub regularizer: RegularizerKind,
    pub kl_weight: f64,
    pub es_warmup: usize,
    pub conditional: bool,
    pub synthetic_count: usize,
    pub jitter: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 1000,
            schedule: ScheduleKind::Polynomial.name().to_string(),
            k: 1,
            sigma0: 0.01,
            ae_hidden: 32,
            encoder_layers: 1,
            decoder_layers: 4,
            denoiser_hidden: 64,
            denoiser_layers: 4,
            batch_size: 32,
            lr: 1e-4,
            ae_lr: None,
            ldm_lr: None,
            ae_iterations: 1000,
            ldm_iterations: 1000,
            lr_decay: 0.0,
            regularizer: RegularizerKind::Es,
            kl_weight: 0.01,
            es_warmup: 1000,
            conditional: false,
            synthetic_count: 2000,
            jitter: 0.02,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::invalid(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule_kind()?;
        self.autoencoder().validate()?;
        if self.steps == 0 {
            return Err(Error::invalid("steps must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        for (name, lr) in [
            ("lr", Some(self.lr)),
            ("ae_lr", self.ae_lr),
            ("ldm_lr", self.ldm_lr),
        ] {
            if let Some(lr) = lr {
                if !(lr > 0.0 && lr.is_finite()) {
                    return Err(Error::invalid(format!("{name} must be positive, got {lr}")));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.lr_decay) {
            return Err(Error::invalid(format!(
                "lr_decay must lie in [0, 1], got {}",
                self.lr_decay
            )));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::invalid(format!(
                "jitter must be >= 0, got {}",
                self.jitter
            )));
        }
        Ok(())
    }

    pub fn schedule_kind(&self) -> Result<ScheduleKind> {
        ScheduleKind::parse(&self.schedule)
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.steps, self.schedule_kind()?)
    }

    pub fn regularizer(&self) -> Regularizer {
        match self.regularizer {
            RegularizerKind::Kl => Regularizer::Kl {
                weight: self.kl_weight,
            },
            RegularizerKind::Es => Regularizer::EarlyStop {
                warmup: self.es_warmup,
            },
        }
    }

    pub fn autoencoder(&self) -> AutoencoderConfig {
        AutoencoderConfig {
            k: self.k,
            hidden: self.ae_hidden,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            sigma0: self.sigma0,
            regularizer: self.regularizer(),
            conditional: self.conditional,
            ..AutoencoderConfig::default()
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            k: self.k,
            hidden: self.denoiser_hidden,
            layers: self.denoiser_layers,
            conditional: self.conditional,
            ..DenoiserConfig::default()
        }
    }

    pub fn ae_training(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.ae_iterations,
            batch_size: self.batch_size,
            lr: self.ae_lr.unwrap_or(self.lr),
            seed: self.seed,
            lr_decay: self.lr_decay,
        }
    }

    pub fn ldm_training(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.ldm_iterations,
            batch_size: self.batch_size,
            lr: self.ldm_lr.unwrap_or(self.lr),
            seed: self.seed,
            lr_decay: self.lr_decay,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_hyperparameters() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c.k, 1);
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.ae_training().lr, 1e-4);
        assert_eq!(c.regularizer(), Regularizer::EarlyStop { warmup: 1000 });
    }

    #[test]
    fn overrides_and_round_trip() {
        let c = RunConfig::parse(
            "seed = 9\nsteps = 250\nregularizer = \"kl\"\nkl_weight = 0.001\nae_lr = 1e-3\n",
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.steps, 250);
        assert_eq!(c.regularizer(), Regularizer::Kl { weight: 0.001 });
        assert_eq!(c.ae_training().lr, 1e-3);
        assert_eq!(c.ldm_training().lr, 1e-4);
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("stepz = 3").is_err());
        assert!(RunConfig::parse("steps = 0").is_err());
        assert!(RunConfig::parse("schedule = \"cosine\"").is_err());
        assert!(RunConfig::parse("lr = -1.0").is_err());
        assert!(RunConfig::parse("lr_decay = 1.5").is_err());
        assert!(RunConfig::parse("k = \"one\"").is_err());
    }
}
