//! Randomized symmetry and gradient audits.
//!
//! Each check draws random systems (`n ∈ {2..6}`, positions `N(0, 1)`,
//! uniform types, velocities `0.5·N(0, 1)` when the model reads them) and
//! random group elements, and reports the largest relative deviation
//! `‖a − b‖ / (‖ref‖ + 1e-12)` over all trials.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{finite_diff_gradient, Faults, Tape};
use crate::error::{Error, Result};
use crate::geometry::{apply_rigid_motion, random_rotation_with, MolecularSystem, RigidMotion};
use crate::linalg::{Mat3, Vec3};
use crate::model::{positions_tensor, Model, SymmetryMode};
use crate::rng::{derive_seed, normal, seeded, SeededRng};
use crate::tensor::Tensor;

pub const SYMMETRY_TOL: f64 = 1e-8;
pub const PERMUTATION_TOL: f64 = 1e-12;
pub const GRADIENT_TOL: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-12;

/// One line of a report.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub trials: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckRow {
    fn new(name: impl Into<String>, trials: usize, max_deviation: f64, tolerance: f64) -> Self {
        CheckRow {
            name: name.into(),
            trials,
            max_deviation,
            tolerance,
            // NaN deviations fail.
            passed: max_deviation <= tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SymmetryReport {
    pub seed: u64,
    pub config_hash: u64,
    pub rows: Vec<CheckRow>,
}

impl SymmetryReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }
}

/// Harness settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuditConfig {
    pub trials: usize,
    pub seed: u64,
    pub min_atoms: usize,
    pub max_atoms: usize,
    pub tol: f64,
    pub permutation_tol: f64,
    pub gradient_tol: f64,
    pub gradient_atoms: usize,
    /// Harness mutation: compare `f(R·x)` against `f(x)` instead of `R·f(x)`.
    pub omit_rotation: bool,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            trials: 100,
            seed: 0,
            min_atoms: 2,
            max_atoms: 6,
            tol: SYMMETRY_TOL,
            permutation_tol: PERMUTATION_TOL,
            gradient_tol: GRADIENT_TOL,
            gradient_atoms: 4,
            omit_rotation: false,
        }
    }
}

/// FNV-1a over the debug rendering of the model configuration.
pub fn config_hash(model: &Model) -> u64 {
    let text = format!("{:?}", model.config());
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// A random system with `n` atoms.
pub fn random_system(rng: &mut SeededRng, n: usize, vocab: usize, velocities: bool) -> MolecularSystem {
    let vec3 = |rng: &mut SeededRng, s: f64| -> Vec3 { [s * normal(rng), s * normal(rng), s * normal(rng)] };
    let types = (0..n).map(|_| rng.random_range(0..vocab)).collect();
    let positions = (0..n).map(|_| vec3(rng, 1.0)).collect();
    let vel = velocities.then(|| (0..n).map(|_| vec3(rng, 0.5)).collect());
    MolecularSystem {
        types,
        positions,
        velocities: vel,
    }
}

fn trial_system(model: &Model, audit: &AuditConfig, rng: &mut SeededRng) -> MolecularSystem {
    let n = rng.random_range(audit.min_atoms..=audit.max_atoms);
    random_system(rng, n, model.config().vocab, model.config().use_velocities)
}

fn rel_dev(a: &Tensor, b: &Tensor, reference: &Tensor) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    libm::sqrt(diff) / (reference.norm() + FLOOR)
}

fn translate_rows(t: &Tensor, shift: &Vec3) -> Tensor {
    let mut out = t.clone();
    for (i, x) in out.data_mut().iter_mut().enumerate() {
        *x += shift[i % 3];
    }
    out
}

fn random_translation(rng: &mut SeededRng) -> Vec3 {
    [normal(rng), normal(rng), normal(rng)]
}

/// Largest relative deviation of `z_equ` and predicted positions under
/// `motion` (rotation part checked, translation included in the input).
fn equivariance_deviation(model: &Model, sys: &MolecularSystem, g: &RigidMotion, omit: bool) -> Result<f64> {
    let base = model.forward(sys)?;
    let moved_sys = apply_rigid_motion(sys, g)?;
    let moved = model.forward(&moved_sys)?;
    let expect_equ = if omit { base.z_equ.clone() } else { g.rotate_slabs(&base.z_equ) };
    let mut dev = rel_dev(&moved.z_equ, &expect_equ, &base.z_equ);
    dev = nan_max(dev, rel_dev(&moved.z_inv, &base.z_inv, &base.z_inv));
    let pred = model.predict_positions(sys)?;
    let pred_moved = model.predict_positions(&moved_sys)?;
    let expect = if omit {
        pred.clone()
    } else {
        let pts: Vec<Vec3> = pred.data().chunks(3).map(|c| g.apply_point(&[c[0], c[1], c[2]])).collect();
        positions_tensor(&pts)?
    };
    Ok(nan_max(dev, rel_dev(&pred_moved, &expect, &pred)))
}

/// Rotation equivariance of `z_equ` and of predicted positions (and
/// invariance of `z_inv`) under random proper rotations.
pub fn check_rotation_equivariance(model: &Model, audit: &AuditConfig) -> Result<CheckRow> {
    let mut rng = seeded(derive_seed(audit.seed, 1));
    let mut worst: f64 = 0.0;
    for _ in 0..audit.trials {
        let sys = trial_system(model, audit, &mut rng);
        let g = random_rotation_with(&mut rng, false);
        worst = nan_max(worst, equivariance_deviation(model, &sys, &g, audit.omit_rotation)?);
    }
    Ok(CheckRow::new("rotation", audit.trials, worst, audit.tol))
}

/// Three rows: `z_equ` unchanged under translation, `z_inv` unchanged under
/// rigid motion, predicted positions shifted by exactly `t`.
pub fn check_translation(model: &Model, audit: &AuditConfig) -> Result<Vec<CheckRow>> {
    let mut rng = seeded(derive_seed(audit.seed, 2));
    let (mut equ, mut inv, mut pos) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..audit.trials {
        let sys = trial_system(model, audit, &mut rng);
        let t = random_translation(&mut rng);
        let shifted = apply_rigid_motion(&sys, &RigidMotion::translation(t))?;
        let base = model.forward(&sys)?;
        let after = model.forward(&shifted)?;
        equ = nan_max(equ, rel_dev(&after.z_equ, &base.z_equ, &base.z_equ));
        let pred = model.predict_positions(&sys)?;
        let pred_shifted = model.predict_positions(&shifted)?;
        pos = nan_max(pos, rel_dev(&pred_shifted, &translate_rows(&pred, &t), &pred));

        let mut g = random_rotation_with(&mut rng, false);
        g.translation = random_translation(&mut rng);
        let moved = model.forward(&apply_rigid_motion(&sys, &g)?)?;
        inv = nan_max(inv, rel_dev(&moved.z_inv, &base.z_inv, &base.z_inv));
        if model.config().invariant_head {
            let a = model.predict_scalar(&sys)?;
            let b = model.predict_scalar(&apply_rigid_motion(&sys, &g)?)?;
            inv = nan_max(inv, (a - b).abs() / (a.abs() + FLOOR));
        }
    }
    Ok(alloc::vec![
        CheckRow::new("translation.z_equ", audit.trials, equ, audit.tol),
        CheckRow::new("rigid_motion.z_inv", audit.trials, inv, audit.tol),
        CheckRow::new("translation.positions", audit.trials, pos, audit.tol),
    ])
}

fn reflect(m: &Mat3) -> Mat3 {
    let mut r = *m;
    for row in r.iter_mut() {
        row[2] = -row[2];
    }
    r
}

/// Equivariance under improper orthogonal maps (`det = −1`), always
/// including the point inversion `−I`. Mode error outside E(3) mode.
pub fn check_reflection(model: &Model, audit: &AuditConfig) -> Result<CheckRow> {
    if model.config().symmetry != SymmetryMode::E3 {
        return Err(Error::Mode("reflection check requires an E3-mode model".into()));
    }
    let mut rng = seeded(derive_seed(audit.seed, 3));
    let mut worst: f64 = 0.0;
    for trial in 0..audit.trials {
        let sys = trial_system(model, audit, &mut rng);
        let proper = random_rotation_with(&mut rng, false);
        let rotation = if trial == 0 {
            RigidMotion::inversion().rotation
        } else {
            reflect(&proper.rotation)
        };
        let g = RigidMotion::new(rotation, random_translation(&mut rng))?;
        debug_assert!(g.det_sign() < 0.0);
        worst = nan_max(worst, equivariance_deviation(model, &sys, &g, audit.omit_rotation)?);
    }
    Ok(CheckRow::new("reflection", audit.trials, worst, audit.tol))
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let n = t.shape()[0];
    let row = t.len() / n;
    let data = perm.iter().flat_map(|&p| t.data()[p * row..(p + 1) * row].iter().copied()).collect();
    Tensor::new(t.shape(), data).expect("same shape")
}

/// `f(π·sys) = π·f(sys)` for both streams and predicted positions.
pub fn check_permutation(model: &Model, audit: &AuditConfig) -> Result<CheckRow> {
    let mut rng = seeded(derive_seed(audit.seed, 4));
    let mut worst: f64 = 0.0;
    for _ in 0..audit.trials {
        let sys = trial_system(model, audit, &mut rng);
        let mut perm: Vec<usize> = (0..sys.len()).collect();
        perm.shuffle(&mut rng);
        let base = model.forward(&sys)?;
        let psys = sys.permuted(&perm);
        let after = model.forward(&psys)?;
        worst = nan_max(worst, rel_dev(&after.z_inv, &permute_rows(&base.z_inv, &perm), &base.z_inv));
        worst = nan_max(worst, rel_dev(&after.z_equ, &permute_rows(&base.z_equ, &perm), &base.z_equ));
        let pred = model.predict_positions(&sys)?;
        let ppred = model.predict_positions(&psys)?;
        worst = nan_max(worst, rel_dev(&ppred, &permute_rows(&pred, &perm), &pred));
    }
    Ok(CheckRow::new("permutation", audit.trials, worst, audit.permutation_tol))
}

/// Per-parameter relative error of tape gradients against central
/// differences on the position MSE. The error of a tensor is
/// `‖g − f‖∞ / max(‖f‖∞, ‖g‖∞, 1e-7)`.
pub fn check_gradients(model: &Model, audit: &AuditConfig) -> Result<Vec<CheckRow>> {
    check_gradients_with(model, audit, Faults::default())
}

/// As [`check_gradients`], with the tape gradients computed under `faults`.
pub fn check_gradients_with(model: &Model, audit: &AuditConfig, faults: Faults) -> Result<Vec<CheckRow>> {
    let cfg = model.config();
    if cfg.layers > 2 || cfg.width > 8 {
        return Err(Error::Config(format!(
            "gradient audit needs ≤ 2 blocks and width ≤ 8 (got {} and {})",
            cfg.layers, cfg.width
        )));
    }
    let (sys, target) = gradient_problem(model, audit);
    let denom = (sys.len() * 3) as f64;
    let (_, grads) = model.loss_and_grad_with(Tape::with_faults(faults), &sys, &target, denom, None)?;
    let mut rows = Vec::with_capacity(grads.len());
    let mut probe = model.clone();
    for id in model.params().ids() {
        let original = model.params().get(id).clone();
        let fd = finite_diff_gradient(
            |x| {
                *probe.params_mut().get_mut(id) = x.clone();
                let pred = probe.predict_positions(&sys).expect("forward succeeded once");
                let tgt = positions_tensor(&target).expect("n×3");
                crate::train::mse_loss(&pred, &tgt).expect("same shape")
            },
            &original,
            FD_STEP,
        );
        *probe.params_mut().get_mut(id) = original;
        let g = &grads[id.index()];
        let err = g.data().iter().zip(fd.data()).map(|(a, b)| (a - b).abs()).fold(0.0, nan_max);
        let scale = fd.max_abs().max(g.max_abs()).max(1e-7);
        rows.push(CheckRow::new(
            format!("gradient.{}", model.params().name(id)),
            1,
            err / scale,
            audit.gradient_tol,
        ));
    }
    Ok(rows)
}

/// Names of parameters whose tape gradient differs between a clean tape
/// and one with `faults`.
pub fn fault_affected_params(model: &Model, audit: &AuditConfig, faults: Faults) -> Result<Vec<String>> {
    let (sys, target) = gradient_problem(model, audit);
    let denom = (sys.len() * 3) as f64;
    let (_, clean) = model.loss_and_grad(&sys, &target, denom, None)?;
    let (_, bad) = model.loss_and_grad_with(Tape::with_faults(faults), &sys, &target, denom, None)?;
    Ok(model
        .params()
        .ids()
        .filter(|id| clean[id.index()] != bad[id.index()])
        .map(|id| model.params().name(id).into())
        .collect())
}

fn gradient_problem(model: &Model, audit: &AuditConfig) -> (MolecularSystem, Vec<Vec3>) {
    let mut rng = seeded(derive_seed(audit.seed, 5));
    let sys = random_system(
        &mut rng,
        audit.gradient_atoms,
        model.config().vocab,
        model.config().use_velocities,
    );
    let target = sys
        .positions
        .iter()
        .map(|p| [p[0] + 0.3 * normal(&mut rng), p[1] + 0.3 * normal(&mut rng), p[2] + 0.3 * normal(&mut rng)])
        .collect();
    (sys, target)
}

/// Symmetry rows (rotation, translation, permutation, and reflection in
/// E(3) mode) plus, when `gradients` is set, the gradient audit.
pub fn run_audit(model: &Model, audit: &AuditConfig, gradients: bool) -> Result<SymmetryReport> {
    let mut rows = Vec::new();
    rows.push(check_rotation_equivariance(model, audit)?);
    rows.extend(check_translation(model, audit)?);
    rows.push(check_permutation(model, audit)?);
    if model.config().symmetry == SymmetryMode::E3 {
        rows.push(check_reflection(model, audit)?);
    }
    if gradients {
        rows.extend(check_gradients(model, audit)?);
    }
    Ok(SymmetryReport {
        seed: audit.seed,
        config_hash: config_hash(model),
        rows,
    })
}

fn nan_max(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Mutation};

    fn audit(trials: usize) -> AuditConfig {
        AuditConfig {
            trials,
            ..AuditConfig::default()
        }
    }

    fn tiny(seed: u64) -> Model {
        Model::random(ModelConfig::tiny(), seed).unwrap()
    }

    fn row<'a>(rows: &'a [CheckRow], name: &str) -> &'a CheckRow {
        rows.iter().find(|r| r.name == name).unwrap()
    }

    #[test]
    fn identity_motions_give_zero_deviation() {
        let m = tiny(1);
        let sys = random_system(&mut seeded(2), 4, 2, true);
        assert_eq!(equivariance_deviation(&m, &sys, &RigidMotion::identity(), false).unwrap(), 0.0);
        let zero_shift = RigidMotion::translation([0.0; 3]);
        assert_eq!(equivariance_deviation(&m, &sys, &zero_shift, false).unwrap(), 0.0);
        let perm: Vec<usize> = (0..4).collect();
        assert_eq!(m.forward(&sys.permuted(&perm)).unwrap(), m.forward(&sys).unwrap());
    }

    #[test]
    fn correct_models_pass_every_symmetry_check() {
        for seed in 0..3 {
            let se3 = tiny(seed);
            let report = run_audit(&se3, &audit(100), false).unwrap();
            assert!(report.passed(), "{report:?}");
            assert_eq!(report.rows.len(), 5);
            let e3 = tiny(seed).e3_mode_transforms();
            let report = run_audit(&e3, &audit(100), false).unwrap();
            assert!(report.passed(), "{report:?}");
            assert!(report.rows.iter().any(|r| r.name == "reflection"));
        }
    }

    #[test]
    fn reflection_check_needs_e3_mode() {
        assert!(matches!(check_reflection(&tiny(3), &audit(5)), Err(Error::Mode(_))));
    }

    #[test]
    fn every_mutation_is_caught() {
        let caught = |m: &Model, a: &AuditConfig| !run_audit(m, a, false).unwrap().passed();
        for mutation in [
            Mutation::GeluOnEqu,
            Mutation::UncenteredPositions,
            Mutation::SpatialHeadSplit,
            Mutation::BiasFromRawCoordinates,
        ] {
            let cfg = ModelConfig {
                mutation: Some(mutation),
                ..ModelConfig::tiny()
            };
            let m = Model::random(cfg, 4).unwrap();
            assert!(caught(&m, &audit(20)), "{mutation:?}");
        }
        let harness = AuditConfig {
            omit_rotation: true,
            ..audit(20)
        };
        assert!(caught(&tiny(4), &harness));
    }

    #[test]
    fn gelu_on_equ_breaks_rotation_by_a_wide_margin() {
        let cfg = ModelConfig {
            mutation: Some(Mutation::GeluOnEqu),
            ..ModelConfig::tiny()
        };
        let row = check_rotation_equivariance(&Model::random(cfg, 5).unwrap(), &audit(20)).unwrap();
        assert!(row.max_deviation > 1e-3 && !row.passed);
    }

    #[test]
    fn uncentered_positions_break_translation() {
        let cfg = ModelConfig {
            mutation: Some(Mutation::UncenteredPositions),
            ..ModelConfig::tiny()
        };
        let rows = check_translation(&Model::random(cfg, 6).unwrap(), &audit(20)).unwrap();
        assert!(!row(&rows, "translation.z_equ").passed);
    }

    #[test]
    fn tiny_model_gradients_match_central_differences() {
        let m = tiny(7);
        let rows = check_gradients(&m, &audit(1)).unwrap();
        assert_eq!(rows.len(), m.params().len());
        assert!(rows.iter().all(|r| r.passed), "{rows:?}");
    }

    #[test]
    fn zeroed_output_projection_still_gets_gradients() {
        let mut m = tiny(8);
        let id = m.param_id("block0.inv_self.w_o").unwrap();
        *m.params_mut().get_mut(id) = Tensor::zeros(&[8, 8]);
        let rows = check_gradients(&m, &audit(1)).unwrap();
        assert!(row(&rows, "gradient.block0.inv_self.w_o").passed);
        assert!(rows.iter().all(|r| r.passed));
    }

    #[test]
    fn corrupted_scalar_product_rule_fails_exactly_the_affected_params() {
        let m = tiny(9);
        let faults = Faults {
            corrupt_scalar_product_grad: true,
        };
        let rows = check_gradients_with(&m, &audit(1), faults).unwrap();
        let affected = fault_affected_params(&m, &audit(1), faults).unwrap();
        let failed: Vec<String> = rows
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.name.trim_start_matches("gradient.").into())
            .collect();
        assert!(!failed.is_empty());
        assert_eq!(failed, affected);
        assert!(failed.iter().any(|n| n.ends_with("equ_ffn.w_gate")));
        assert!(!failed.iter().any(|n| n == "head.w"));
    }

    #[test]
    fn gradient_audit_rejects_large_models() {
        let m = Model::random(ModelConfig::default(), 10).unwrap();
        assert!(matches!(check_gradients(&m, &audit(1)), Err(Error::Config(_))));
    }

    #[test]
    fn reports_are_seed_deterministic() {
        let m = tiny(11);
        let a = run_audit(&m, &audit(10), false).unwrap();
        let b = run_audit(&m, &audit(10), false).unwrap();
        assert_eq!(a, b);
        let other = AuditConfig {
            seed: 1,
            ..audit(10)
        };
        assert_ne!(a.rows, run_audit(&m, &other, false).unwrap().rows);
        assert_eq!(a.config_hash, config_hash(&m));
    }
}
