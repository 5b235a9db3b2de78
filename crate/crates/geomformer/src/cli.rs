//! The `geomf` command line.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use geomformer_core::attention::EquScoreScale;
use geomformer_core::model::{Model, ModelConfig, Mutation, SymmetryMode};
use geomformer_core::verify::{check_gradients, run_audit, CheckRow, SymmetryReport};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::config::{parse_named, Settings};
use crate::dataset::{generate_dataset, load_dataset, save_dataset, Split};
use crate::error::{CliError, Result};
use crate::evaluate::{baseline_mse, evaluate};
use crate::report::{failed_rows, write_report};
use crate::trainer::train;

#[derive(Debug, Parser)]
#[command(name = "geomf", version, about = "Two-stream equivariant transformer: data, training, evaluation and audits")]
pub struct Cli {
    /// Worker threads for generation, gradients and evaluation [default: available cores]
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the charged N-body dataset.
    GenData(GenDataArgs),
    /// Train on a dataset; writes the best checkpoint and a metrics log.
    Train(TrainArgs),
    /// MSE of a checkpoint (or the linear baseline) on a split.
    Eval(EvalArgs),
    /// Randomized symmetry and gradient audits.
    Check(CheckArgs),
    /// Print a checkpoint manifest.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SeedArgs {
    /// Flat JSON config file; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed (overrides GEOMF_SEED and the config file) [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output file (newline-delimited JSON)
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: SeedArgs,
    /// Training trajectories [default: 3000]
    #[arg(long)]
    pub n_train: Option<usize>,
    /// Validation trajectories [default: 2000]
    #[arg(long)]
    pub n_valid: Option<usize>,
    /// Test trajectories [default: 2000]
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Particles per system [default: 5]
    #[arg(long)]
    pub particles: Option<usize>,
    /// Integrator step [default: 0.001]
    #[arg(long)]
    pub dt: Option<f64>,
    /// Integrator steps to the target [default: 1000]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Force softening length [default: 0.01]
    #[arg(long)]
    pub eps_soft: Option<f64>,
    /// Initial velocity scale [default: 0.5]
    #[arg(long)]
    pub velocity_scale: Option<f64>,
    /// Largest accepted relative energy drift before a trajectory is resampled [default: 0.01]
    #[arg(long)]
    pub energy_tol: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Transformer blocks [default: 4]
    #[arg(long)]
    pub layers: Option<usize>,
    /// Hidden width d [default: 80]
    #[arg(long)]
    pub width: Option<usize>,
    /// Attention heads [default: 8]
    #[arg(long)]
    pub heads: Option<usize>,
    /// Feed-forward width [default: 80]
    #[arg(long)]
    pub ffn_width: Option<usize>,
    /// Gaussian basis kernels [default: 64]
    #[arg(long)]
    pub kernels: Option<usize>,
    /// Dropout rate for every dropout site [default: 0.4]
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Residual-branch drop probability [default: 0]
    #[arg(long)]
    pub drop_path: Option<f64>,
    /// Equivariant logit scaling: three-head-dim or unscaled [default: three-head-dim]
    #[arg(long, value_parser = parse_named::<EquScoreScale>)]
    pub equ_score_scale: Option<EquScoreScale>,
    /// Module switches to turn off (e.g. equ_cross_attn), repeatable
    #[arg(long)]
    pub disable: Vec<String>,
}

impl ModelArgs {
    fn settings(&self) -> Settings {
        Settings {
            layers: self.layers,
            width: self.width,
            heads: self.heads,
            ffn_width: self.ffn_width,
            kernels: self.kernels,
            dropout: self.dropout,
            drop_path: self.drop_path,
            equ_score_scale: self.equ_score_scale,
            disable: (!self.disable.is_empty()).then(|| self.disable.clone()),
            ..Settings::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset file from gen-data [default: data.ndjson]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Best-validation checkpoint path [default: model.ckpt]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Metrics log path [default: metrics.ndjson]
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[command(flatten)]
    pub common: SeedArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Maximum epochs [default: 2000]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size, capped at the training split size [default: 100]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate [default: 0.0003]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Validate every N epochs [default: 1]
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Early-stopping patience in epochs [default: 200]
    #[arg(long)]
    pub patience: Option<usize>,
    /// Clip gradients to this global norm [default: off]
    #[arg(long)]
    pub clip: Option<f64>,
    /// Use only the first N training trajectories [default: all]
    #[arg(long)]
    pub train_size: Option<usize>,
    /// Use only the first N validation trajectories [default: all]
    #[arg(long)]
    pub valid_size: Option<usize>,
    /// Use only the first N test trajectories [default: all]
    #[arg(long)]
    pub test_size: Option<usize>,
    /// Write null instead of elapsed seconds in the metrics log, making it byte-reproducible
    #[arg(long)]
    pub no_wallclock: bool,
    /// Only print the final summary
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset file
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to evaluate (not needed with --baseline)
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Split to evaluate: train, valid or test [default: test]
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Evaluate a reference predictor instead of a checkpoint; only `linear` (p0 + v0·T)
    #[arg(long, value_parser = ["linear"])]
    pub baseline: Option<String>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[command(flatten)]
    pub common: SeedArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Audit a saved model instead of a random one
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Symmetry group: se3, or e3 to add reflections [default: se3]
    #[arg(long, value_parser = parse_named::<SymmetryMode>)]
    pub mode: Option<SymmetryMode>,
    /// Inject a deliberate equivariance bug: gelu-on-equ, uncentered-positions, spatial-head-split, bias-from-raw-coordinates
    #[arg(long, value_parser = parse_named::<Mutation>)]
    pub mutate: Option<Mutation>,
    /// Random trials per symmetry check [default: 100]
    #[arg(long)]
    pub trials: Option<usize>,
    /// Relative tolerance for rotation, translation and reflection [default: 1e-8]
    #[arg(long)]
    pub tol: Option<f64>,
    /// Tolerance for permutation equivariance [default: 1e-12]
    #[arg(long)]
    pub permutation_tol: Option<f64>,
    /// Tolerance for the finite-difference gradient audit [default: 1e-5]
    #[arg(long)]
    pub gradient_tol: Option<f64>,
    /// Skip the gradient audit on the tiny model
    #[arg(long)]
    pub skip_gradients: bool,
    /// Harness self-test: compare f(R·x) with f(x), which must fail on equivariant outputs
    #[arg(long)]
    pub omit_rotation: bool,
    /// Write the report as newline-delimited JSON
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Checkpoint file
    pub checkpoint: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Check(a) => cmd_check(a),
        Command::Inspect(a) => cmd_inspect(a),
    })
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let flags = Settings {
        seed: a.common.seed,
        n_train: a.n_train,
        n_valid: a.n_valid,
        n_test: a.n_test,
        particles: a.particles,
        dt: a.dt,
        steps: a.steps,
        eps_soft: a.eps_soft,
        velocity_scale: a.velocity_scale,
        energy_tol: a.energy_tol,
        ..Settings::default()
    };
    let s = Settings::resolve(a.common.config.as_deref(), flags)?;
    let sim = s.sim_config()?;
    let counts = s.counts();
    let ds = generate_dataset(counts, s.seed(), &sim)?;
    save_dataset(&ds, &a.out)?;
    let bytes = fs::read(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let resampled = ds
        .train
        .iter()
        .chain(&ds.valid)
        .chain(&ds.test)
        .filter(|r| r.resamples > 0)
        .count();
    let seed = s.seed();
    println!("wrote {}", a.out.display());
    println!(
        "counts train {} valid {} test {} (seeds {seed}..{})",
        counts.train,
        counts.valid,
        counts.test,
        seed + counts.total() as u64
    );
    println!("resampled trajectories {resampled}");
    println!("sha256 {}", hex::encode(Sha256::digest(&bytes)));
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let flags = Settings {
        seed: a.common.seed,
        dataset: a.data,
        checkpoint: a.checkpoint,
        metrics: a.metrics,
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        eval_every: a.eval_every,
        patience: a.patience,
        clip: a.clip,
        train_size: a.train_size,
        valid_size: a.valid_size,
        test_size: a.test_size,
        wallclock: a.no_wallclock.then_some(false),
        ..a.model.settings()
    };
    let s = Settings::resolve(a.common.config.as_deref(), flags)?;
    let cfg = s.train_config()?;
    if !cfg.dataset.exists() {
        return Err(CliError::Config(format!("dataset {} does not exist", cfg.dataset.display())));
    }
    let quiet = a.quiet;
    let summary = train(&cfg, &mut |m| {
        if !quiet {
            let valid = m.valid_mse.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
            eprintln!("epoch {:>5}  train {:.6}  valid {valid}", m.epoch, m.train_loss);
        }
    })?;
    println!(
        "epochs {} (best {}{})",
        summary.epochs_run,
        summary.best_epoch,
        if summary.stopped_early { ", early stop" } else { "" }
    );
    println!("best valid MSE {}", summary.best_valid_mse);
    println!("test MSE {}", summary.test_mse);
    println!(
        "linear baseline test MSE {} (ratio {:.4})",
        summary.baseline_test_mse,
        summary.test_mse / summary.baseline_test_mse
    );
    println!("checkpoint {}", cfg.checkpoint.display());
    println!("metrics {}", cfg.metrics.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let records = ds.split(a.split);
    let mse = match (&a.baseline, &a.checkpoint) {
        (Some(_), _) => baseline_mse(records, ds.header.horizon())?,
        (None, Some(path)) => {
            let (model, _) = checkpoint::load(path)?;
            evaluate(&model, records)?
        }
        (None, None) => return Err(CliError::Config("eval needs --checkpoint or --baseline linear".into())),
    };
    println!("{mse}");
    Ok(())
}

fn cmd_check(a: CheckArgs) -> Result<()> {
    let flags = Settings {
        seed: a.common.seed,
        symmetry: a.mode,
        mutate: a.mutate,
        trials: a.trials,
        tol: a.tol,
        permutation_tol: a.permutation_tol,
        gradient_tol: a.gradient_tol,
        ..a.model.settings()
    };
    let s = Settings::resolve(a.common.config.as_deref(), flags)?;
    let mut audit = s.audit_config()?;
    audit.omit_rotation = a.omit_rotation;
    let mut model = match &a.checkpoint {
        Some(path) => checkpoint::load(path)?.0,
        None => Model::random(s.model_config()?, s.seed())?,
    };
    if let Some(mode) = s.symmetry {
        model.config_mut().symmetry = mode;
    }
    if s.mutate.is_some() {
        model.config_mut().mutation = s.mutate;
    }
    let mut reports = vec![run_audit(&model, &audit, false)?];
    if !a.skip_gradients {
        let tiny = Model::random(
            ModelConfig {
                symmetry: model.config().symmetry,
                mutation: model.config().mutation,
                ..ModelConfig::tiny()
            },
            s.seed(),
        )?;
        reports.push(SymmetryReport {
            seed: audit.seed,
            config_hash: geomformer_core::verify::config_hash(&tiny),
            rows: check_gradients(&tiny, &audit)?,
        });
    }
    print_report(&reports);
    if let Some(path) = &a.report {
        let f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
        write_report(&reports, std::io::BufWriter::new(f)).map_err(|e| CliError::io(path, e))?;
    }
    let failed = failed_rows(&reports);
    if failed.is_empty() {
        Ok(())
    } else {
        let names: Vec<&str> = failed.iter().map(|r| r.name.as_str()).collect();
        Err(CliError::Audit(names.join(", ")))
    }
}

fn print_report(reports: &[SymmetryReport]) {
    let mut out = std::io::stdout().lock();
    let rows: Vec<&CheckRow> = reports.iter().flat_map(|r| &r.rows).collect();
    let (grad, sym): (Vec<&CheckRow>, Vec<&CheckRow>) = rows.into_iter().partition(|r| r.name.starts_with("gradient."));
    for r in &sym {
        let _ = writeln!(
            out,
            "{:<22} {:>4} trials  max dev {:<10.3e} tol {:.0e}  {}",
            r.name,
            r.trials,
            r.max_deviation,
            r.tolerance,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    if !grad.is_empty() {
        let worst = grad.iter().map(|r| r.max_deviation).fold(0.0, f64::max);
        let bad: Vec<_> = grad.iter().filter(|r| !r.passed).collect();
        let _ = writeln!(
            out,
            "{:<22} {:>4} params  max rel {:<10.3e} tol {:.0e}  {}",
            "gradient",
            grad.len(),
            worst,
            grad[0].tolerance,
            if bad.is_empty() { "PASS" } else { "FAIL" }
        );
        for r in bad {
            let _ = writeln!(out, "  {} rel err {:.3e}", r.name, r.max_deviation);
        }
    }
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let bytes = fs::read(&a.checkpoint)
        .map_err(|e| CliError::Config(format!("cannot read checkpoint {}: {e}", a.checkpoint.display())))?;
    let (manifest, _) = checkpoint::read_manifest(&bytes)?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    println!("{text}");
    let total: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    println!("{} tensors, {total} values", manifest.params.len());
    Ok(())
}
