//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines are always printed.
//! The full-scale learning run (hours) is skipped unless
//! `GEOMF_FULL_ACCEPTANCE=1` is set.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use geomformer::dataset::{generate_dataset, write_dataset, Dataset, SplitCounts};
use geomformer::trainer::{overfit_one_batch, train_on, TrainConfig};
use geomformer_core::geometry::random_rotation;
use geomformer_core::linalg::sub;
use geomformer_core::model::layers::equ_ln;
use geomformer_core::model::{Ablation, DropoutRates, Model, ModelConfig, SymmetryMode};
use geomformer_core::nbody::{
    energy_drift, integrate, sample_initial, simulate_record, total_energy, kinetic_energy, potential_energy,
    ParticleState, SimConfig,
};
use geomformer_core::rng::{normal, seeded};
use geomformer_core::verify::{
    check_gradients, check_permutation, check_reflection, check_rotation_equivariance, check_translation,
    random_system, AuditConfig, CheckRow,
};
use geomformer_core::{Error, Tensor};
use rayon::ThreadPoolBuilder;

const SYMMETRY_TOL: f64 = 1e-8;
const PERMUTATION_TOL: f64 = 1e-12;
const SYMMETRY_TRIALS: usize = 100;
const SYMMETRY_BUDGET: Duration = Duration::from_secs(60);
const GRADIENT_TOL: f64 = 1e-5;
const GRADIENT_BUDGET: Duration = Duration::from_secs(120);
const WHITENING_TOL: f64 = 5e-3;
const ENERGY_TOL: f64 = 0.01;
const MOMENTUM_TOL: f64 = 1e-9;
const REFERENCE_DT: f64 = 1e-5;
const SMOKE_RATIO: f64 = 0.9;
const SMOKE_BUDGET: Duration = Duration::from_secs(30 * 60);
const FULL_RATIO: f64 = 0.5;
const OVERFIT_RATIO: f64 = 0.1;
const OVERFIT_STEPS: usize = 50;
const OVERFIT_LR: f64 = 1e-3;

struct Verdicts {
    failed: Vec<u32>,
}

impl Verdicts {
    fn report(&mut self, id: u32, title: &str, passed: bool, detail: String) {
        println!("[{}] {id}. {title}: {detail}", if passed { "PASS" } else { "FAIL" });
        if !passed {
            self.failed.push(id);
        }
    }
}

fn worst(rows: &[CheckRow]) -> (f64, bool) {
    let dev = rows.iter().map(|r| r.max_deviation).fold(0.0, |a: f64, b| if b.is_nan() { f64::NAN } else { a.max(b) });
    (dev, rows.iter().all(|r| r.passed))
}

fn symmetry_suite(v: &mut Verdicts) {
    let start = Instant::now();
    let audit = AuditConfig {
        trials: SYMMETRY_TRIALS,
        seed: 1,
        tol: SYMMETRY_TOL,
        permutation_tol: PERMUTATION_TOL,
        ..AuditConfig::default()
    };
    let model = Model::random(ModelConfig::default(), 11).unwrap();
    let rot = check_rotation_equivariance(&model, &audit).unwrap();
    let trans = check_translation(&model, &audit).unwrap();
    let perm = check_permutation(&model, &audit).unwrap();
    let elapsed = start.elapsed();
    let (t_dev, t_ok) = worst(&trans);
    let passed = rot.passed && t_ok && perm.passed && elapsed < SYMMETRY_BUDGET;
    v.report(
        1,
        "symmetry suite",
        passed,
        format!(
            "{SYMMETRY_TRIALS} trials each, n in 2..=6, default-size random model; rotation {:.2e}, translation/rigid {:.2e} (tol {SYMMETRY_TOL:.0e}); permutation {:.2e} (tol {PERMUTATION_TOL:.0e}); {:.1} s (budget {} s)",
            rot.max_deviation,
            t_dev,
            perm.max_deviation,
            elapsed.as_secs_f64(),
            SYMMETRY_BUDGET.as_secs()
        ),
    );
}

fn e3_mode(v: &mut Verdicts) {
    let audit = AuditConfig {
        trials: SYMMETRY_TRIALS,
        seed: 2,
        ..AuditConfig::default()
    };
    let e3 = Model::random(
        ModelConfig {
            symmetry: SymmetryMode::E3,
            ..ModelConfig::default()
        },
        12,
    )
    .unwrap();
    let refl = check_reflection(&e3, &audit).unwrap();
    let rot = check_rotation_equivariance(&e3, &audit).unwrap();
    let se3 = Model::random(ModelConfig::default(), 12).unwrap();
    let se3_refused = matches!(check_reflection(&se3, &audit), Err(Error::Mode(_)));
    v.report(
        2,
        "E(3) mode",
        refl.passed && rot.passed && se3_refused,
        format!(
            "reflection {:.2e}, rotation {:.2e} (tol {SYMMETRY_TOL:.0e}); SE(3)-mode model not subjected to reflection: {se3_refused}",
            refl.max_deviation, rot.max_deviation
        ),
    );
}

fn gradient_audit(v: &mut Verdicts) {
    let start = Instant::now();
    let audit = AuditConfig {
        seed: 3,
        gradient_atoms: 4,
        gradient_tol: GRADIENT_TOL,
        ..AuditConfig::default()
    };
    let model = Model::random(ModelConfig::tiny(), 13).unwrap();
    let rows = check_gradients(&model, &audit).unwrap();
    let elapsed = start.elapsed();
    let (dev, ok) = worst(&rows);
    let bad: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    v.report(
        3,
        "gradient audit",
        ok && elapsed < GRADIENT_BUDGET,
        format!(
            "{} parameter tensors of the 2-block d=8 H=2 model, n=4, h=1e-5; worst relative error {dev:.2e} (tol {GRADIENT_TOL:.0e}); {:.1} s (budget {} s){}",
            rows.len(),
            elapsed.as_secs_f64(),
            GRADIENT_BUDGET.as_secs(),
            if bad.is_empty() { String::new() } else { format!("; failing: {}", bad.join(", ")) }
        ),
    );
}

/// Channel covariance of one `3×d` slab, computed directly.
fn covariance(z: &Tensor) -> [[f64; 3]; 3] {
    let d = z.shape()[2];
    let x = z.data();
    let mean: Vec<f64> = (0..3).map(|s| x[s * d..(s + 1) * d].iter().sum::<f64>() / d as f64).collect();
    let mut c = [[0.0; 3]; 3];
    for s in 0..3 {
        for t in 0..3 {
            c[s][t] = (0..d).map(|k| (x[s * d + k] - mean[s]) * (x[t * d + k] - mean[t])).sum::<f64>() / d as f64;
        }
    }
    c
}

fn equ_ln_whitening(v: &mut Verdicts) {
    let d = 64;
    let gamma = Tensor::ones(&[d]);
    let mut rng = seeded(4);
    let (mut frob_worst, mut rot_worst) = (0.0f64, 0.0f64);
    for trial in 0..100 {
        // Anisotropic, correlated input: a random full-rank mix of
        // Gaussian rows plus an offset.
        let g: Vec<f64> = (0..3 * d).map(|_| normal(&mut rng)).collect();
        let a: Vec<f64> = (0..9).map(|_| normal(&mut rng)).collect();
        let mut x = vec![0.0; 3 * d];
        for s in 0..3 {
            let offset = 2.0 * normal(&mut rng);
            for k in 0..d {
                x[s * d + k] = offset + (0..3).map(|t| a[s * 3 + t] * g[t * d + k]).sum::<f64>();
            }
        }
        let z = Tensor::new(&[1, 3, d], x).unwrap();
        let out = equ_ln(&z, &gamma, 1e-6).unwrap();
        let c = covariance(&out);
        let frob = (0..9)
            .map(|i| {
                let (s, t) = (i / 3, i % 3);
                let e = c[s][t] - if s == t { 1.0 } else { 0.0 };
                e * e
            })
            .sum::<f64>()
            .sqrt();
        frob_worst = frob_worst.max(frob);
        let r = random_rotation(1000 + trial, false);
        let lhs = equ_ln(&r.rotate_slabs(&z), &gamma, 1e-6).unwrap();
        let rhs = r.rotate_slabs(&out);
        let diff = lhs.zip_map(&rhs, |p, q| p - q).unwrap();
        rot_worst = rot_worst.max(diff.norm() / (rhs.norm() + 1e-12));
    }
    v.report(
        4,
        "Equ-LN whitening",
        frob_worst <= WHITENING_TOL && rot_worst <= SYMMETRY_TOL,
        format!(
            "100 random full-rank 3x64 inputs, gamma=1, eps=1e-6; covariance-identity Frobenius {frob_worst:.2e} (tol {WHITENING_TOL:.0e}); rotation deviation {rot_worst:.2e} (tol {SYMMETRY_TOL:.0e})"
        ),
    );
}

fn momentum(s: &ParticleState) -> [f64; 3] {
    s.momentum()
}

fn simulator_physics(v: &mut Verdicts) {
    let sim = SimConfig::default();
    let reference = SimConfig {
        dt: REFERENCE_DT,
        steps: (sim.horizon() / REFERENCE_DT).round() as usize,
        energy_tol: f64::INFINITY,
        ..sim
    };
    let (mut drift_worst, mut vs_ref_worst, mut mom_worst) = (0.0f64, 0.0f64, 0.0f64);
    let records = 20;
    for seed in 0..records {
        let rec = simulate_record(seed, &sim).unwrap();
        let init = rec.initial_state();
        let coarse = integrate(&init, &sim).unwrap();
        let fine = integrate(&init, &reference).unwrap();
        let scale = kinetic_energy(&init) + potential_energy(&init, sim.eps_soft).abs();
        drift_worst = drift_worst.max(energy_drift(&init, &coarse, sim.eps_soft));
        vs_ref_worst =
            vs_ref_worst.max((total_energy(&coarse, sim.eps_soft) - total_energy(&fine, sim.eps_soft)).abs() / scale);
        let dp = sub(&momentum(&coarse), &momentum(&init));
        mom_worst = mom_worst.max(dp.iter().fold(0.0f64, |a, b| a.max(b.abs())));
    }
    // Unguarded view: raw samples before the energy guard resamples.
    let raw = 300;
    let unresolved = (0..raw)
        .filter(|&s| {
            let init = sample_initial(s, &sim);
            integrate(&init, &sim).is_none_or(|end| energy_drift(&init, &end, sim.eps_soft) > ENERGY_TOL)
        })
        .count();
    v.report(
        5,
        "simulator physics",
        drift_worst <= ENERGY_TOL && vs_ref_worst <= ENERGY_TOL && mom_worst <= MOMENTUM_TOL,
        format!(
            "{records} dataset trajectories, 1000 steps at dt=1e-3: energy drift {drift_worst:.2e}, energy vs dt=1e-5 reference {vs_ref_worst:.2e} (tol {ENERGY_TOL}), momentum drift {mom_worst:.2e} (tol {MOMENTUM_TOL:.0e}); note: {unresolved}/{raw} raw samples exceed the drift bound and are resampled by the energy guard"
        ),
    );
}

fn learning_run(cfg: &TrainConfig, data: &Dataset, dir: &Path) -> (geomformer::trainer::TrainSummary, Duration) {
    let cfg = TrainConfig {
        checkpoint: dir.join("model.ckpt"),
        metrics: dir.join("metrics.ndjson"),
        ..cfg.clone()
    };
    let start = Instant::now();
    let summary = train_on(&cfg, data, &mut |_| {}).unwrap();
    (summary, start.elapsed())
}

fn nbody_learning(v: &mut Verdicts) {
    let sim = SimConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let smoke_data = generate_dataset(
        SplitCounts {
            train: 300,
            valid: 200,
            test: 200,
        },
        7,
        &sim,
    )
    .unwrap();
    let smoke = TrainConfig {
        model: ModelConfig {
            width: 32,
            heads: 4,
            ffn_width: 32,
            kernels: 32,
            dropout: DropoutRates::uniform(0.1),
            ..ModelConfig::default()
        },
        batch_size: 10,
        epochs: 300,
        seed: 7,
        ..TrainConfig::default()
    };
    let (s, elapsed) = learning_run(&smoke, &smoke_data, dir.path());
    let ratio = s.test_mse / s.baseline_test_mse;
    let smoke_ok = ratio <= SMOKE_RATIO && elapsed < SMOKE_BUDGET;
    let smoke_line = format!(
        "smoke (300/200/200, 300 epochs, d=32 H=4 K=32 batch 10 dropout 0.1): test MSE {:.5} vs linear baseline B {:.5}, ratio {ratio:.3} (gate {SMOKE_RATIO}), best epoch {}, {:.1} min (budget {} min)",
        s.test_mse,
        s.baseline_test_mse,
        s.best_epoch,
        elapsed.as_secs_f64() / 60.0,
        SMOKE_BUDGET.as_secs() / 60
    );

    let full = std::env::var("GEOMF_FULL_ACCEPTANCE").is_ok_and(|x| x == "1");
    if !full {
        v.report(
            6,
            "N-body learning",
            smoke_ok,
            format!("{smoke_line}; full 3000/2000/2000 run with default hyperparameters NOT RUN (set GEOMF_FULL_ACCEPTANCE=1)"),
        );
        return;
    }
    let data = generate_dataset(SplitCounts::default(), 7, &sim).unwrap();
    let (f, elapsed) = learning_run(&TrainConfig { seed: 7, ..TrainConfig::default() }, &data, dir.path());
    let full_ratio = f.test_mse / f.baseline_test_mse;
    v.report(
        6,
        "N-body learning",
        smoke_ok && full_ratio <= FULL_RATIO,
        format!(
            "{smoke_line}; full: test MSE {:.5} vs B {:.5}, ratio {full_ratio:.3} (gate {FULL_RATIO}), {} epochs, {:.1} h",
            f.test_mse,
            f.baseline_test_mse,
            f.epochs_run,
            elapsed.as_secs_f64() / 3600.0
        ),
    );
}

const ATTENTION: [(&str, fn(&mut Ablation)); 4] = [
    ("inv_self", |a| a.inv_self_attn = false),
    ("equ_self", |a| a.equ_self_attn = false),
    ("inv_cross", |a| a.inv_cross_attn = false),
    ("equ_cross", |a| a.equ_cross_attn = false),
];

fn ablation_structure(v: &mut Verdicts) {
    // Zero-diff: every non-empty subset of attention modules switched off
    // must equal the full model with those modules' output projections
    // zeroed, bit for bit.
    let full = Model::random(
        ModelConfig {
            dropout: DropoutRates::NONE,
            ..ModelConfig::default()
        },
        17,
    )
    .unwrap();
    let systems: Vec<_> = (0..5).map(|i| random_system(&mut seeded(100 + i), 2 + i as usize, 2, true)).collect();
    let mut zero_diff_ok = true;
    for mask in 1u32..16 {
        let mut off = full.clone();
        let mut zeroed = full.clone();
        for (bit, (name, flag)) in ATTENTION.iter().enumerate() {
            if mask & (1 << bit) == 0 {
                continue;
            }
            flag(&mut off.config_mut().ablation);
            for l in 0..full.config().layers {
                let id = zeroed.param_id(&format!("block{l}.{name}.w_o")).unwrap();
                let shape = zeroed.params().get(id).shape().to_vec();
                *zeroed.params_mut().get_mut(id) = Tensor::zeros(&shape);
            }
        }
        for sys in &systems {
            let a = off.forward(sys).unwrap();
            zero_diff_ok &= a == zeroed.forward(sys).unwrap() && a != full.forward(sys).unwrap();
        }
    }

    // Overfit one batch for every configuration that keeps at least one
    // equivariant attention module (the task predicts positions).
    let sim = SimConfig::default();
    let batch: Vec<_> = (0..4).map(|s| simulate_record(5000 + s, &sim).unwrap()).collect();
    let mut worst_ratio = 0.0f64;
    let mut configs = 0;
    let mut upticks = 0;
    for mask in 0u32..16 {
        let mut ablation = Ablation::ALL;
        for (bit, (_, flag)) in ATTENTION.iter().enumerate() {
            if mask & (1 << bit) != 0 {
                flag(&mut ablation);
            }
        }
        if !ablation.equ_self_attn && !ablation.equ_cross_attn {
            continue;
        }
        configs += 1;
        let cfg = ModelConfig {
            dropout: DropoutRates::NONE,
            ablation,
            ..ModelConfig::default()
        };
        let losses = overfit_one_batch(cfg, &batch, OVERFIT_STEPS, OVERFIT_LR).unwrap();
        worst_ratio = worst_ratio.max(losses[OVERFIT_STEPS] / losses[0]);
        upticks += losses.windows(2).filter(|w| w[1] >= w[0]).count();
    }
    v.report(
        7,
        "ablation structure",
        zero_diff_ok && worst_ratio <= OVERFIT_RATIO,
        format!(
            "zero-diff vs zeroed output projections for all 15 attention-module subsets x 5 systems: {}; overfit one batch of 4 ({OVERFIT_STEPS} Adam steps, lr {OVERFIT_LR}) over {configs} configurations keeping an equivariant attention module: worst final/initial {worst_ratio:.2e} (gate {OVERFIT_RATIO}), {upticks} non-decreasing steps in total",
            if zero_diff_ok { "identical" } else { "MISMATCH" }
        ),
    );
}

fn determinism(v: &mut Verdicts) {
    let sim = SimConfig::default();
    let counts = SplitCounts {
        train: 40,
        valid: 10,
        test: 10,
    };
    let dataset_bytes = |threads: usize| {
        let pool = ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let ds = pool.install(|| generate_dataset(counts, 21, &sim)).unwrap();
        let mut out = Vec::new();
        write_dataset(&ds, &mut out).unwrap();
        (ds, out)
    };
    let (ds, bytes) = dataset_bytes(1);
    let data_ok = bytes == dataset_bytes(1).1 && bytes == dataset_bytes(3).1;

    let cfg = TrainConfig {
        model: ModelConfig {
            layers: 2,
            width: 16,
            heads: 2,
            ffn_width: 16,
            kernels: 8,
            dropout: DropoutRates::uniform(0.2),
            ..ModelConfig::default()
        },
        batch_size: 8,
        epochs: 4,
        lr: 1e-3,
        seed: 21,
        wallclock: false,
        ..TrainConfig::default()
    };
    let run = |threads: usize| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            checkpoint: dir.path().join("m.ckpt"),
            metrics: dir.path().join("m.ndjson"),
            ..cfg.clone()
        };
        let pool = ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| train_on(&cfg, &ds, &mut |_| {})).unwrap();
        (fs::read(&cfg.metrics).unwrap(), fs::read(&cfg.checkpoint).unwrap())
    };
    let first = run(1);
    let train_ok = first == run(1) && first == run(3);
    v.report(
        8,
        "determinism",
        data_ok && train_ok,
        format!(
            "dataset file ({} bytes) identical across runs and 1/3 threads: {data_ok}; metrics log and checkpoint identical across runs and 1/3 threads: {train_ok}",
            bytes.len()
        ),
    );
}

fn main() {
    let mut v = Verdicts { failed: Vec::new() };
    symmetry_suite(&mut v);
    e3_mode(&mut v);
    gradient_audit(&mut v);
    equ_ln_whitening(&mut v);
    simulator_physics(&mut v);
    ablation_structure(&mut v);
    determinism(&mut v);
    nbody_learning(&mut v);
    if v.failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {:?}", v.failed);
        std::process::exit(1);
    }
}
