//! Molecular systems, rigid motions and distance featurization.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var, MIN_BASIS_SCALE};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat3, Vec3};
use crate::rng;
use crate::tensor::Tensor;

/// Tolerance on `RᵀR = I` and `det R = ±1`.
pub const ORTHOGONALITY_TOL: f64 = 1e-10;

/// Particles with integer types, positions and (optionally) velocities.
#[derive(Clone, Debug, PartialEq)]
pub struct MolecularSystem {
    pub types: Vec<usize>,
    pub positions: Vec<Vec3>,
    pub velocities: Option<Vec<Vec3>>,
}

impl MolecularSystem {
    pub fn new(types: Vec<usize>, positions: Vec<Vec3>, velocities: Option<Vec<Vec3>>) -> Result<Self> {
        let sys = MolecularSystem {
            types,
            positions,
            velocities,
        };
        sys.validate()?;
        Ok(sys)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if n == 0 {
            return Err(Error::Input("system has no particles".into()));
        }
        if self.types.len() != n {
            return Err(Error::Input(format!("{} types for {n} positions", self.types.len())));
        }
        if self.positions.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Input("non-finite position".into()));
        }
        if let Some(v) = &self.velocities {
            if v.len() != n {
                return Err(Error::Input(format!("{} velocities for {n} positions", v.len())));
            }
            if v.iter().flatten().any(|x| !x.is_finite()) {
                return Err(Error::Input("non-finite velocity".into()));
            }
        }
        Ok(())
    }

    pub fn check_vocabulary(&self, vocab: usize) -> Result<()> {
        match self.types.iter().find(|&&t| t >= vocab) {
            Some(t) => Err(Error::Input(format!("type id {t} outside vocabulary of {vocab}"))),
            None => Ok(()),
        }
    }

    /// Reorders particles so that new particle `i` is old particle `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> MolecularSystem {
        MolecularSystem {
            types: perm.iter().map(|&p| self.types[p]).collect(),
            positions: perm.iter().map(|&p| self.positions[p]).collect(),
            velocities: self
                .velocities
                .as_ref()
                .map(|v| perm.iter().map(|&p| v[p]).collect()),
        }
    }
}

/// Group element `x ↦ R·x + t` with `R` orthogonal.
#[derive(Clone, Debug, PartialEq)]
pub struct RigidMotion {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidMotion {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let g = RigidMotion {
            rotation,
            translation,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn identity() -> Self {
        RigidMotion {
            rotation: linalg::IDENTITY,
            translation: [0.0; 3],
        }
    }

    pub fn translation(t: Vec3) -> Self {
        RigidMotion {
            rotation: linalg::IDENTITY,
            translation: t,
        }
    }

    pub fn rotation_only(&self) -> Self {
        RigidMotion {
            rotation: self.rotation,
            translation: [0.0; 3],
        }
    }

    /// `x ↦ −x`, the point inversion (det −1).
    pub fn inversion() -> Self {
        RigidMotion {
            rotation: [[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn det_sign(&self) -> f64 {
        linalg::det(&self.rotation).signum()
    }

    pub fn validate(&self) -> Result<()> {
        let defect = linalg::orthogonality_defect(&self.rotation);
        let det = linalg::det(&self.rotation);
        if defect > ORTHOGONALITY_TOL || (det.abs() - 1.0).abs() > ORTHOGONALITY_TOL {
            return Err(Error::Validation(format!(
                "rotation is not orthogonal (|RᵀR − I| = {defect:e}, det = {det})"
            )));
        }
        if self.translation.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation("non-finite translation".into()));
        }
        Ok(())
    }

    pub fn apply_point(&self, x: &Vec3) -> Vec3 {
        let r = linalg::mat_vec(&self.rotation, x);
        [r[0] + self.translation[0], r[1] + self.translation[1], r[2] + self.translation[2]]
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        linalg::mat_vec(&self.rotation, v)
    }

    /// Rotates every 3-vector slab of an `[n, 3, c]` (or `[n, 3]`) tensor.
    pub fn rotate_slabs(&self, t: &Tensor) -> Tensor {
        let shape = t.shape();
        let c = if shape.len() == 2 { 1 } else { shape[2] };
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        let atoms = src.len() / (3 * c);
        let r = &self.rotation;
        for i in 0..atoms {
            for s in 0..3 {
                for k in 0..c {
                    out[(i * 3 + s) * c + k] = (0..3).map(|u| r[s][u] * src[(i * 3 + u) * c + k]).sum();
                }
            }
        }
        Tensor::from_parts(shape.to_vec(), out)
    }
}

/// Positions move as points, velocities as vectors (no translation).
pub fn apply_rigid_motion(sys: &MolecularSystem, g: &RigidMotion) -> Result<MolecularSystem> {
    g.validate()?;
    Ok(MolecularSystem {
        types: sys.types.clone(),
        positions: sys.positions.iter().map(|p| g.apply_point(p)).collect(),
        velocities: sys
            .velocities
            .as_ref()
            .map(|v| v.iter().map(|x| g.apply_vector(x)).collect()),
    })
}

/// Haar-uniform rotation from a normalized Gaussian quaternion, with
/// `t ~ N(0, I₃)`. With `allow_reflection`, one axis is flipped with
/// probability ½.
pub fn random_rotation(seed: u64, allow_reflection: bool) -> RigidMotion {
    let mut r = rng::seeded(seed);
    random_rotation_with(&mut r, allow_reflection)
}

pub fn random_rotation_with(r: &mut impl Rng, allow_reflection: bool) -> RigidMotion {
    let q = [rng::normal(r), rng::normal(r), rng::normal(r), rng::normal(r)];
    let mut rotation = linalg::quaternion_to_matrix(q);
    let translation = [rng::normal(r), rng::normal(r), rng::normal(r)];
    if allow_reflection && r.random::<bool>() {
        for row in rotation.iter_mut() {
            row[2] = -row[2];
        }
    }
    RigidMotion {
        rotation,
        translation,
    }
}

pub fn centroid(positions: &[Vec3]) -> Vec3 {
    let n = positions.len() as f64;
    let mut c = [0.0; 3];
    for p in positions {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    c.map(|x| x / n)
}

pub fn mean_center(positions: &[Vec3]) -> Vec<Vec3> {
    let c = centroid(positions);
    positions.iter().map(|p| linalg::sub(p, &c)).collect()
}

/// `n×n` Euclidean distance matrix.
pub fn pairwise_distances(positions: &[Vec3]) -> Tensor {
    let n = positions.len();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = linalg::norm(&linalg::sub(&positions[i], &positions[j]));
            out[i * n + j] = d;
            out[j * n + i] = d;
        }
    }
    Tensor::from_parts(vec![n, n], out)
}

/// Flattened `t_i·vocab + t_j` indices for a per-pair parameter table.
pub fn type_pair_ids(types: &[usize], vocab: usize) -> Vec<usize> {
    let mut ids = Vec::with_capacity(types.len() * types.len());
    for &a in types {
        for &b in types {
            ids.push(a * vocab + b);
        }
    }
    ids
}

/// Kernel centers and scales plus the affine `(γ, β)` tables indexed by
/// atom type (input layer) or by type pair (structural encoding).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBasisParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl GaussianBasisParams {
    pub fn kernels(&self) -> usize {
        self.mu.len()
    }
}

/// `ψᵏ = −exp(−½((γx + β − μᵏ)/|σᵏ|)²) / (√(2π)|σᵏ|)` for each kernel.
pub fn gaussian_basis(x: f64, index: usize, params: &GaussianBasisParams) -> Vec<f64> {
    let arg = params.gamma[index] * x + params.beta[index];
    params
        .mu
        .iter()
        .zip(&params.sigma)
        .map(|(&mu, &sigma)| {
            let s = sigma.abs().max(MIN_BASIS_SCALE);
            let u = (arg - mu) / s;
            -libm::exp(-0.5 * u * u) / (libm::sqrt(2.0 * core::f64::consts::PI) * s)
        })
        .collect()
}

/// Tape handles for one Gaussian basis parameter set.
#[derive(Clone, Copy, Debug)]
pub struct BasisVars {
    pub mu: Var,
    pub sigma: Var,
    /// `[table_rows, 1]`
    pub gamma: Var,
    /// `[table_rows, 1]`
    pub beta: Var,
}

/// Kernel responses `[m, K]` for scalars `x: [m]` with table rows `ids`.
pub fn basis_on_tape(tape: &mut Tape, x: Var, ids: &[usize], basis: &BasisVars) -> Result<Var> {
    let m = ids.len();
    let g = tape.gather(basis.gamma, ids)?;
    let g = tape.reshape(g, &[m])?;
    let b = tape.gather(basis.beta, ids)?;
    let b = tape.reshape(b, &[m])?;
    tape.gaussian_basis(x, g, b, basis.mu, basis.sigma)
}

/// `B_ij = GELU(b_(i,j)·W¹)·W²`: one invariant scalar per atom pair.
/// `distances` is `[n, n]`; `pair_ids` holds `n²` table rows.
pub fn structural_bias_on_tape(
    tape: &mut Tape,
    distances: &Tensor,
    pair_ids: &[usize],
    basis: &BasisVars,
    w_d1: Var,
    w_d2: Var,
) -> Result<Var> {
    let n = distances.shape()[0];
    if distances.shape() != [n, n] || pair_ids.len() != n * n {
        return Err(Error::Shape(format!(
            "structural bias needs [n, n] distances and n² pair ids, got {:?} and {}",
            distances.shape(),
            pair_ids.len()
        )));
    }
    let flat = tape.constant(distances.reshape(&[n * n])?);
    let psi = basis_on_tape(tape, flat, pair_ids, basis)?;
    let hidden = tape.matmul(psi, w_d1)?;
    let hidden = tape.gelu(hidden);
    let out = tape.matmul(hidden, w_d2)?;
    tape.reshape(out, &[n, n])
}

/// Evaluates the structural bias outside of training.
pub fn structural_bias(
    distances: &Tensor,
    types: &[usize],
    vocab: usize,
    params: &GaussianBasisParams,
    w_d1: &Tensor,
    w_d2: &Tensor,
) -> Result<Tensor> {
    let k = params.kernels();
    if w_d1.shape() != [k, k] || w_d2.shape() != [k, 1] {
        return Err(Error::Shape(format!(
            "W_D1 must be [{k}, {k}] and W_D2 [{k}, 1], got {:?} and {:?}",
            w_d1.shape(),
            w_d2.shape()
        )));
    }
    let rows = params.gamma.len();
    let mut tape = Tape::new();
    let basis = BasisVars {
        mu: tape.constant(Tensor::new(&[k], params.mu.clone())?),
        sigma: tape.constant(Tensor::new(&[k], params.sigma.clone())?),
        gamma: tape.constant(Tensor::new(&[rows, 1], params.gamma.clone())?),
        beta: tape.constant(Tensor::new(&[rows, 1], params.beta.clone())?),
    };
    let w1 = tape.constant(w_d1.clone());
    let w2 = tape.constant(w_d2.clone());
    let ids = type_pair_ids(types, vocab);
    let out = structural_bias_on_tape(&mut tape, distances, &ids, &basis, w1, w2)?;
    Ok(tape.value(out).clone())
}
