//! Mini-batch Adam on the N-body position task with per-epoch metrics,
//! early stopping and a best-validation checkpoint.
//!
//! Randomness is keyed by position, not by execution order: the shuffle of
//! epoch `e` uses `derive_seed(seed, e)` and the dropout stream of the
//! `k`-th sample of that epoch `derive_seed(derive_seed(seed, e), k)`.
//! Per-sample gradients are computed in parallel and summed in sample
//! order, so metrics and checkpoints do not depend on the thread count.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use geomformer_core::model::{Model, ModelConfig};
use geomformer_core::nbody::TrajectoryRecord;
use geomformer_core::rng::{derive_seed, seeded};
use geomformer_core::train::{accumulate, adam_step, clip_grad_norm, AdamConfig, AdamState};
use geomformer_core::Tensor;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::{load_dataset, record_system, Dataset};
use crate::error::{CliError, Result};
use crate::evaluate::{baseline_mse, evaluate};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub dataset: PathBuf,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Validate every this many epochs (and always on the last one).
    pub eval_every: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    /// Global-norm gradient clipping; off when `None`.
    pub clip: Option<f64>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub seed: u64,
    pub train_size: Option<usize>,
    pub valid_size: Option<usize>,
    pub test_size: Option<usize>,
    /// Log elapsed seconds in the metrics file. Off gives byte-identical
    /// logs across runs.
    pub wallclock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            dataset: PathBuf::from("data.ndjson"),
            batch_size: 100,
            epochs: 2000,
            lr: 3e-4,
            eval_every: 1,
            patience: 200,
            clip: None,
            checkpoint: PathBuf::from("model.ckpt"),
            metrics: PathBuf::from("metrics.ndjson"),
            seed: 0,
            train_size: None,
            valid_size: None,
            test_size: None,
            wallclock: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every == 0 {
            return Err(CliError::Config("batch size, epochs and eval cadence must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(CliError::Config(format!("learning rate must be finite and ≥ 0, got {}", self.lr)));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(CliError::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_mse: Option<f64>,
    pub wallclock_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_valid_mse: f64,
    pub test_mse: f64,
    pub baseline_test_mse: f64,
    pub stopped_early: bool,
    pub batch_size: usize,
}

/// Loads the dataset named in `cfg` and trains.
pub fn train(cfg: &TrainConfig, on_epoch: &mut dyn FnMut(&EpochMetrics)) -> Result<TrainSummary> {
    cfg.validate()?;
    let mut data = load_dataset(&cfg.dataset)?;
    data.truncate(cfg.train_size, cfg.valid_size, cfg.test_size);
    train_on(cfg, &data, on_epoch)
}

/// Sum of per-sample gradients over `batch`, with the loss normalized so
/// the batch value is the MSE over all its coordinates.
fn batch_gradient(
    model: &Model,
    batch: &[&TrajectoryRecord],
    epoch_seed: u64,
    first_index: usize,
) -> Result<(f64, Vec<Tensor>)> {
    let coords: usize = batch.iter().map(|r| r.p_t.len() * 3).sum();
    let denom = coords as f64;
    let mut acc: Vec<Tensor> = model.params().tensors().iter().map(Tensor::zeros_like).collect();
    let mut loss = 0.0;
    // Bounded fan-out keeps at most a few per-sample gradient sets alive.
    let width = 2 * rayon::current_num_threads().max(1);
    for (c, chunk) in batch.chunks(width).enumerate() {
        let parts: Vec<Result<(f64, Vec<Tensor>)>> = chunk
            .par_iter()
            .enumerate()
            .map(|(j, r)| {
                let k = first_index + c * width + j;
                let mut rng = seeded(derive_seed(epoch_seed, k as u64));
                let sys = record_system(r)?;
                Ok(model.loss_and_grad(&sys, &r.p_t, denom, Some(&mut rng))?)
            })
            .collect();
        for p in parts {
            let (l, g) = p?;
            loss += l;
            accumulate(&mut acc, &g);
        }
    }
    Ok((loss, acc))
}

struct MetricsLog {
    out: BufWriter<fs::File>,
    path: PathBuf,
}

impl MetricsLog {
    fn create(path: &Path) -> Result<Self> {
        let f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
        Ok(MetricsLog {
            out: BufWriter::new(f),
            path: path.to_path_buf(),
        })
    }

    fn append(&mut self, m: &EpochMetrics) -> Result<()> {
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| CliError::io(&self.path, e))
    }
}

pub fn train_on(cfg: &TrainConfig, data: &Dataset, on_epoch: &mut dyn FnMut(&EpochMetrics)) -> Result<TrainSummary> {
    cfg.validate()?;
    if data.train.is_empty() || data.valid.is_empty() || data.test.is_empty() {
        return Err(CliError::Config(format!(
            "every split needs at least one record (train {}, valid {}, test {})",
            data.train.len(),
            data.valid.len(),
            data.test.len()
        )));
    }
    let start = Instant::now();
    let batch_size = cfg.batch_size.min(data.train.len());
    let mut model = Model::new(ModelConfig {
        seed: cfg.seed,
        ..cfg.model.clone()
    })?;
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let mut log = MetricsLog::create(&cfg.metrics)?;
    let mut best: Option<(usize, f64, Model)> = None;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut epochs_run = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let epoch_seed = derive_seed(cfg.seed, epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut seeded(epoch_seed));
        let mut weighted = 0.0;
        for (b, idx) in order.chunks(batch_size).enumerate() {
            let batch: Vec<&TrajectoryRecord> = idx.iter().map(|&i| &data.train[i]).collect();
            let (loss, mut grads) = batch_gradient(&model, &batch, epoch_seed, b * batch_size)?;
            if !loss.is_finite() {
                return Err(CliError::Numeric(format!("non-finite loss at epoch {epoch}, batch {b}")));
            }
            if let Some(c) = cfg.clip {
                clip_grad_norm(&mut grads, c);
            }
            adam_step(model.params_mut(), &grads, &mut adam)
                .map_err(|e| CliError::Numeric(format!("epoch {epoch}, batch {b}: {e}")))?;
            weighted += loss * batch.len() as f64;
        }
        let train_loss = weighted / data.train.len() as f64;
        epochs_run = epoch;

        let valid_mse = if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let v = evaluate(&model, &data.valid)?;
            if !v.is_finite() {
                return Err(CliError::Numeric(format!("non-finite validation MSE at epoch {epoch}")));
            }
            if best.as_ref().is_none_or(|(_, b, _)| v < *b) {
                checkpoint::save(&model, Some(epoch), &cfg.checkpoint)?;
                best = Some((epoch, v, model.clone()));
            }
            Some(v)
        } else {
            None
        };
        let m = EpochMetrics {
            epoch,
            train_loss,
            valid_mse,
            wallclock_s: cfg.wallclock.then(|| start.elapsed().as_secs_f64()),
        };
        log.append(&m)?;
        on_epoch(&m);
        if let Some((best_epoch, _, _)) = best {
            if epoch - best_epoch >= cfg.patience {
                stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }

    let (best_epoch, best_valid_mse, best_model) = best.expect("the last epoch always validates");
    Ok(TrainSummary {
        epochs_run,
        best_epoch,
        best_valid_mse,
        test_mse: evaluate(&best_model, &data.test)?,
        baseline_test_mse: baseline_mse(&data.test, data.header.horizon())?,
        stopped_early,
        batch_size,
    })
}

/// Repeated Adam steps on one fixed batch with dropout off. Returns the
/// batch MSE before the first step and after every step.
pub fn overfit_one_batch(config: ModelConfig, batch: &[TrajectoryRecord], steps: usize, lr: f64) -> Result<Vec<f64>> {
    let mut model = Model::new(config)?;
    let mut adam = AdamState::new(
        AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let refs: Vec<&TrajectoryRecord> = batch.iter().collect();
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let (loss, grads) = batch_gradient_eval(&model, &refs)?;
        losses.push(loss);
        if step < steps {
            adam_step(model.params_mut(), &grads, &mut adam)?;
        }
    }
    Ok(losses)
}

fn batch_gradient_eval(model: &Model, batch: &[&TrajectoryRecord]) -> Result<(f64, Vec<Tensor>)> {
    let coords: usize = batch.iter().map(|r| r.p_t.len() * 3).sum();
    let parts: Vec<Result<(f64, Vec<Tensor>)>> = batch
        .par_iter()
        .map(|r| Ok(model.loss_and_grad(&record_system(r)?, &r.p_t, coords as f64, None)?))
        .collect();
    let mut acc: Vec<Tensor> = model.params().tensors().iter().map(Tensor::zeros_like).collect();
    let mut loss = 0.0;
    for p in parts {
        let (l, g) = p?;
        loss += l;
        accumulate(&mut acc, &g);
    }
    Ok((loss, acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, SplitCounts};
    use geomformer_core::model::DropoutRates;
    use geomformer_core::nbody::SimConfig;

    fn data() -> Dataset {
        let sim = SimConfig {
            steps: 200,
            ..SimConfig::default()
        };
        let counts = SplitCounts {
            train: 10,
            valid: 4,
            test: 4,
        };
        generate_dataset(counts, 100, &sim).unwrap()
    }

    fn config(dir: &Path) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                dropout: DropoutRates::uniform(0.1),
                ..ModelConfig::tiny()
            },
            batch_size: 4,
            epochs: 3,
            lr: 1e-3,
            checkpoint: dir.join("m.ckpt"),
            metrics: dir.join("metrics.ndjson"),
            seed: 5,
            wallclock: false,
            ..TrainConfig::default()
        }
    }

    fn metrics(path: &Path) -> Vec<EpochMetrics> {
        fs::read_to_string(path)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }

    #[test]
    fn one_epoch_writes_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 100,
            ..config(dir.path())
        };
        let s = train_on(&cfg, &data(), &mut |_| {}).unwrap();
        assert_eq!((s.epochs_run, s.best_epoch, s.batch_size), (1, 1, 10));
        assert!(s.test_mse.is_finite() && s.baseline_test_mse > 0.0);
        let (model, manifest) = checkpoint::load(&cfg.checkpoint).unwrap();
        assert_eq!(manifest.epoch, Some(1));
        let ds = data();
        assert_eq!(evaluate(&model, &ds.test).unwrap(), s.test_mse);
        let log = metrics(&cfg.metrics);
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].valid_mse, Some(s.best_valid_mse));
        assert_eq!(log[0].wallclock_s, None);
    }

    #[test]
    fn runs_are_byte_identical_across_thread_counts() {
        let ds = data();
        let run = |threads: usize| {
            let dir = tempfile::tempdir().unwrap();
            let cfg = config(dir.path());
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| train_on(&cfg, &ds, &mut |_| {})).unwrap();
            (fs::read(&cfg.metrics).unwrap(), fs::read(&cfg.checkpoint).unwrap())
        };
        let a = run(1);
        assert_eq!(a, run(1));
        assert_eq!(a, run(3));
    }

    #[test]
    fn zero_learning_rate_keeps_untrained_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            lr: 0.0,
            ..config(dir.path())
        };
        let ds = data();
        train_on(&cfg, &ds, &mut |_| {}).unwrap();
        let fresh = Model::new(ModelConfig {
            seed: cfg.seed,
            ..cfg.model.clone()
        })
        .unwrap();
        let untrained = evaluate(&fresh, &ds.valid).unwrap();
        for m in metrics(&cfg.metrics) {
            assert_eq!(m.valid_mse, Some(untrained));
        }
    }

    #[test]
    fn eval_cadence_and_early_stopping() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 7,
            eval_every: 3,
            lr: 0.0,
            patience: 3,
            ..config(dir.path())
        };
        let s = train_on(&cfg, &data(), &mut |_| {}).unwrap();
        // lr 0: the first validation stays best, patience runs out at epoch 6.
        assert_eq!((s.best_epoch, s.epochs_run, s.stopped_early), (3, 6, true));
        let log = metrics(&cfg.metrics);
        let evaluated: Vec<usize> = log.iter().filter(|m| m.valid_mse.is_some()).map(|m| m.epoch).collect();
        assert_eq!(evaluated, vec![3, 6]);
    }

    #[test]
    fn non_finite_loss_names_epoch_and_batch() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = data();
        ds.train[6].p_t[0][0] = 1e300;
        let cfg = TrainConfig {
            model: ModelConfig::tiny(),
            ..config(dir.path())
        };
        match train_on(&cfg, &ds, &mut |_| {}) {
            Err(CliError::Numeric(m)) => assert!(m.contains("epoch 1, batch"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_split_and_bad_config_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = data();
        ds.valid.clear();
        assert!(matches!(train_on(&config(dir.path()), &ds, &mut |_| {}), Err(CliError::Config(_))));
        let cfg = TrainConfig {
            batch_size: 0,
            ..config(dir.path())
        };
        assert!(matches!(train_on(&cfg, &data(), &mut |_| {}), Err(CliError::Config(_))));
    }

    #[test]
    fn overfitting_one_batch_reduces_loss() {
        let ds = data();
        let losses = overfit_one_batch(ModelConfig::tiny(), &ds.train[..2], 20, 1e-2).unwrap();
        assert_eq!(losses.len(), 21);
        assert!(losses[20] < losses[0]);
    }
}
