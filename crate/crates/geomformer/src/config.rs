//! Flat JSON run configuration. Every key is optional; resolution order is
//! built-in default < config file < `GEOMF_SEED` (seed only) < flags.

use std::fs;
use std::path::{Path, PathBuf};

use geomformer_core::attention::EquScoreScale;
use geomformer_core::model::{Ablation, DropoutRates, ModelConfig, Mutation, SymmetryMode};
use geomformer_core::nbody::SimConfig;
use geomformer_core::verify::AuditConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::SplitCounts;
use crate::error::{CliError, Result};
use crate::trainer::TrainConfig;

pub const SEED_ENV: &str = "GEOMF_SEED";

macro_rules! settings {
    ($($(#[$doc:meta])* $field:ident: $ty:ty,)*) => {
        #[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct Settings {
            $($(#[$doc])* #[serde(default, skip_serializing_if = "Option::is_none")] pub $field: Option<$ty>,)*
        }

        impl Settings {
            /// Field-wise override: values set in `over` win.
            pub fn merge(self, over: Settings) -> Settings {
                Settings { $($field: over.$field.or(self.$field),)* }
            }
        }
    };
}

settings! {
    seed: u64,
    // dataset generation
    particles: usize,
    dt: f64,
    steps: usize,
    eps_soft: f64,
    velocity_scale: f64,
    energy_tol: f64,
    n_train: usize,
    n_valid: usize,
    n_test: usize,
    // model
    layers: usize,
    width: usize,
    heads: usize,
    ffn_width: usize,
    kernels: usize,
    /// Uniform rate for all four dropout sites.
    dropout: f64,
    drop_path: f64,
    symmetry: SymmetryMode,
    equ_score_scale: EquScoreScale,
    velocities: bool,
    /// Ablation switches to turn off, by field name.
    disable: Vec<String>,
    mutate: Mutation,
    // training
    dataset: PathBuf,
    checkpoint: PathBuf,
    metrics: PathBuf,
    batch_size: usize,
    epochs: usize,
    lr: f64,
    eval_every: usize,
    patience: usize,
    clip: f64,
    train_size: usize,
    valid_size: usize,
    test_size: usize,
    wallclock: bool,
    // audits
    trials: usize,
    tol: f64,
    permutation_tol: f64,
    gradient_tol: f64,
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Settings> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// `GEOMF_SEED` as a settings layer.
    pub fn from_env() -> Result<Settings> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                let seed = v
                    .trim()
                    .parse()
                    .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
                Ok(Settings {
                    seed: Some(seed),
                    ..Settings::default()
                })
            }
            Err(_) => Ok(Settings::default()),
        }
    }

    /// File (if any), then environment, then flags.
    pub fn resolve(file: Option<&Path>, flags: Settings) -> Result<Settings> {
        let base = match file {
            Some(p) => Settings::from_file(p)?,
            None => Settings::default(),
        };
        Ok(base.merge(Settings::from_env()?).merge(flags))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let d = SimConfig::default();
        let cfg = SimConfig {
            particles: self.particles.unwrap_or(d.particles),
            dt: self.dt.unwrap_or(d.dt),
            steps: self.steps.unwrap_or(d.steps),
            eps_soft: self.eps_soft.unwrap_or(d.eps_soft),
            velocity_scale: self.velocity_scale.unwrap_or(d.velocity_scale),
            energy_tol: self.energy_tol.unwrap_or(d.energy_tol),
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn counts(&self) -> SplitCounts {
        let d = SplitCounts::default();
        SplitCounts {
            train: self.n_train.unwrap_or(d.train),
            valid: self.n_valid.unwrap_or(d.valid),
            test: self.n_test.unwrap_or(d.test),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let d = ModelConfig::default();
        let cfg = ModelConfig {
            layers: self.layers.unwrap_or(d.layers),
            width: self.width.unwrap_or(d.width),
            heads: self.heads.unwrap_or(d.heads),
            ffn_width: self.ffn_width.unwrap_or(d.ffn_width),
            kernels: self.kernels.unwrap_or(d.kernels),
            use_velocities: self.velocities.unwrap_or(d.use_velocities),
            dropout: self.dropout.map_or(d.dropout, DropoutRates::uniform),
            drop_path: self.drop_path.unwrap_or(d.drop_path),
            symmetry: self.symmetry.unwrap_or(d.symmetry),
            equ_score_scale: self.equ_score_scale.unwrap_or(d.equ_score_scale),
            ablation: disable(self.disable.as_deref().unwrap_or(&[]))?,
            mutation: self.mutate,
            seed: self.seed(),
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            model: self.model_config()?,
            dataset: self.dataset.clone().unwrap_or(d.dataset),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            epochs: self.epochs.unwrap_or(d.epochs),
            lr: self.lr.unwrap_or(d.lr),
            eval_every: self.eval_every.unwrap_or(d.eval_every),
            patience: self.patience.unwrap_or(d.patience),
            clip: self.clip.or(d.clip),
            checkpoint: self.checkpoint.clone().unwrap_or(d.checkpoint),
            metrics: self.metrics.clone().unwrap_or(d.metrics),
            seed: self.seed(),
            train_size: self.train_size,
            valid_size: self.valid_size,
            test_size: self.test_size,
            wallclock: self.wallclock.unwrap_or(d.wallclock),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn audit_config(&self) -> Result<AuditConfig> {
        let d = AuditConfig::default();
        let cfg = AuditConfig {
            trials: self.trials.unwrap_or(d.trials),
            seed: self.seed(),
            tol: self.tol.unwrap_or(d.tol),
            permutation_tol: self.permutation_tol.unwrap_or(d.permutation_tol),
            gradient_tol: self.gradient_tol.unwrap_or(d.gradient_tol),
            ..d
        };
        if cfg.trials == 0 {
            return Err(CliError::Config("trials must be positive".into()));
        }
        Ok(cfg)
    }
}

/// Ablation with the named switches turned off.
pub fn disable(names: &[String]) -> Result<Ablation> {
    let mut map = match serde_json::to_value(Ablation::ALL).expect("ablation serializes") {
        serde_json::Value::Object(m) => m,
        _ => unreachable!(),
    };
    for name in names {
        match map.get_mut(name.as_str()) {
            Some(v) => *v = serde_json::Value::Bool(false),
            None => {
                let known: Vec<&str> = map.keys().map(String::as_str).collect();
                return Err(CliError::Config(format!("unknown module {name:?}; known: {}", known.join(", "))));
            }
        }
    }
    Ok(serde_json::from_value(serde_json::Value::Object(map)).expect("ablation deserializes"))
}

/// Parses a kebab/lowercase enum name through its serde representation;
/// used as a clap value parser.
pub fn parse_named<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}
