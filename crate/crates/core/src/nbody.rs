//! Charged point particles under a softened inverse-square law, integrated
//! with velocity Verlet at unit mass.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{sub, Vec3};
use crate::rng::{derive_seed, normal, seeded};

/// Integrator and sampler constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimConfig {
    pub particles: usize,
    pub dt: f64,
    pub steps: usize,
    pub eps_soft: f64,
    pub velocity_scale: f64,
    /// Any coordinate beyond this magnitude triggers a resample.
    pub blowup: f64,
    /// Largest accepted relative energy drift of a trajectory; anything
    /// above it (close encounters the step size cannot resolve) is
    /// resampled like a blow-up.
    pub energy_tol: f64,
    /// Resampling attempts before giving up.
    pub max_resamples: u32,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            particles: 5,
            dt: 1e-3,
            steps: 1000,
            eps_soft: 0.01,
            velocity_scale: 0.5,
            blowup: 1e3,
            energy_tol: 0.01,
            max_resamples: 64,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::Config("particle count must be positive".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(alloc::format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.eps_soft >= 0.0) || !(self.blowup > 0.0) {
            return Err(Error::Config("softening must be ≥ 0 and the blow-up bound positive".into()));
        }
        Ok(())
    }

    /// Time horizon `steps·dt`.
    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParticleState {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub charges: Vec<f64>,
}

impl ParticleState {
    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if self.velocities.len() != n || self.charges.len() != n {
            return Err(Error::Validation(alloc::format!(
                "{} positions, {} velocities, {} charges",
                n,
                self.velocities.len(),
                self.charges.len()
            )));
        }
        let finite = self
            .positions
            .iter()
            .chain(&self.velocities)
            .flatten()
            .chain(&self.charges)
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::Validation("non-finite particle state".into()));
        }
        Ok(())
    }

    pub fn momentum(&self) -> Vec3 {
        let mut p = [0.0; 3];
        for v in &self.velocities {
            for s in 0..3 {
                p[s] += v[s];
            }
        }
        p
    }
}

/// `Fᵢ = Σⱼ cᵢcⱼ (rᵢ − rⱼ) / (‖rᵢ − rⱼ‖² + ε²)^{3/2}`.
pub fn coulomb_forces(state: &ParticleState, eps_soft: f64) -> Vec<Vec3> {
    let n = state.positions.len();
    let mut f = alloc::vec![[0.0; 3]; n];
    let e2 = eps_soft * eps_soft;
    for i in 0..n {
        for j in i + 1..n {
            let r = sub(&state.positions[i], &state.positions[j]);
            let d2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2] + e2;
            let s = state.charges[i] * state.charges[j] / (d2 * libm::sqrt(d2));
            for k in 0..3 {
                f[i][k] += s * r[k];
                f[j][k] -= s * r[k];
            }
        }
    }
    f
}

/// One velocity-Verlet step.
pub fn leapfrog_step(state: &ParticleState, dt: f64, eps_soft: f64) -> ParticleState {
    let f0 = coulomb_forces(state, eps_soft);
    let mut next = state.clone();
    for i in 0..next.positions.len() {
        for k in 0..3 {
            next.velocities[i][k] += 0.5 * dt * f0[i][k];
            next.positions[i][k] += dt * next.velocities[i][k];
        }
    }
    let f1 = coulomb_forces(&next, eps_soft);
    for (v, f) in next.velocities.iter_mut().zip(&f1) {
        for k in 0..3 {
            v[k] += 0.5 * dt * f[k];
        }
    }
    next
}

/// `|E(end) − E(start)| / (K(start) + |U(start)|)`.
pub fn energy_drift(start: &ParticleState, end: &ParticleState, eps_soft: f64) -> f64 {
    let scale = kinetic_energy(start) + potential_energy(start, eps_soft).abs();
    (total_energy(end, eps_soft) - total_energy(start, eps_soft)).abs() / scale
}

/// Kinetic plus softened pair potential energy.
pub fn total_energy(state: &ParticleState, eps_soft: f64) -> f64 {
    kinetic_energy(state) + potential_energy(state, eps_soft)
}

pub fn kinetic_energy(state: &ParticleState) -> f64 {
    0.5 * state.velocities.iter().flatten().map(|v| v * v).sum::<f64>()
}

pub fn potential_energy(state: &ParticleState, eps_soft: f64) -> f64 {
    let n = state.positions.len();
    let e2 = eps_soft * eps_soft;
    let mut u = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let r = sub(&state.positions[i], &state.positions[j]);
            u += state.charges[i] * state.charges[j] / libm::sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2] + e2);
        }
    }
    u
}

/// Positions `N(0, 1)`, velocities `scale·N(0, 1)`, charges ±1 with equal odds.
pub fn sample_initial(seed: u64, cfg: &SimConfig) -> ParticleState {
    let mut rng = seeded(seed);
    let n = cfg.particles;
    let mut draw = |scale: f64| -> Vec<Vec3> {
        (0..n)
            .map(|_| [scale * normal(&mut rng), scale * normal(&mut rng), scale * normal(&mut rng)])
            .collect()
    };
    let positions = draw(1.0);
    let velocities = draw(cfg.velocity_scale);
    let charges = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    ParticleState {
        positions,
        velocities,
        charges,
    }
}

/// Integrates `steps` steps. `None` if any coordinate leaves the blow-up
/// bound or turns non-finite.
pub fn integrate(initial: &ParticleState, cfg: &SimConfig) -> Option<ParticleState> {
    let mut s = initial.clone();
    for _ in 0..cfg.steps {
        s = leapfrog_step(&s, cfg.dt, cfg.eps_soft);
        if s.positions.iter().flatten().any(|x| !(x.abs() <= cfg.blowup)) {
            return None;
        }
    }
    Some(s)
}

/// One supervised pair. `seed` is the requested seed; `sample_seed` the
/// seed actually simulated (different only after a resample).
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub seed: u64,
    pub sample_seed: u64,
    pub resamples: u32,
    pub charges: Vec<f64>,
    pub p0: Vec<Vec3>,
    pub v0: Vec<Vec3>,
    pub p_t: Vec<Vec3>,
}

impl TrajectoryRecord {
    pub fn initial_state(&self) -> ParticleState {
        ParticleState {
            positions: self.p0.clone(),
            velocities: self.v0.clone(),
            charges: self.charges.clone(),
        }
    }

    /// Charges mapped to type ids: −1 → 0, +1 → 1.
    pub fn type_ids(&self) -> Vec<usize> {
        self.charges.iter().map(|&c| usize::from(c > 0.0)).collect()
    }
}

/// Samples and integrates the trajectory for `seed`. On blow-up, or when
/// the energy drift exceeds `energy_tol`, the sample is redrawn from
/// derived seeds and the substitution recorded.
pub fn simulate_record(seed: u64, cfg: &SimConfig) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    for attempt in 0..=cfg.max_resamples {
        let sample_seed = if attempt == 0 { seed } else { derive_seed(seed, attempt as u64) };
        let init = sample_initial(sample_seed, cfg);
        let Some(end) = integrate(&init, cfg) else { continue };
        if energy_drift(&init, &end, cfg.eps_soft) <= cfg.energy_tol {
            return Ok(TrajectoryRecord {
                seed,
                sample_seed,
                resamples: attempt,
                charges: init.charges,
                p0: init.positions,
                v0: init.velocities,
                p_t: end.positions,
            });
        }
    }
    Err(Error::Numeric(alloc::format!(
        "seed {seed}: no accepted trajectory after {} attempts",
        cfg.max_resamples + 1
    )))
}

/// Linear extrapolation `p0 + v0·T`.
pub fn linear_extrapolation(p0: &[Vec3], v0: &[Vec3], horizon: f64) -> Vec<Vec3> {
    p0.iter()
        .zip(v0)
        .map(|(p, v)| [p[0] + v[0] * horizon, p[1] + v[1] * horizon, p[2] + v[2] * horizon])
        .collect()
}
