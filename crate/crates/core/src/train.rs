//! Loss and optimizer.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

/// Mean of squared differences over all coordinates.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::dim("mse_loss", pred.shape(), target.shape()));
    }
    let sum: f64 = pred.data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(Tensor::zeros_like).collect();
        AdamState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Bias-corrected Adam update. Gradients are checked for finiteness before
/// anything is modified; the error names the offending parameter.
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (id, g) in params.ids().zip(grads) {
        if g.shape() != params.get(id).shape() {
            return Err(Error::dim("adam_step", params.get(id).shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(params.name(id).into()));
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - libm::pow(beta1, t as f64);
    let c2 = 1.0 - libm::pow(beta2, t as f64);
    for (i, g) in grads.iter().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.tensors_mut()[i].data_mut();
        for j in 0..g.len() {
            let gj = g.data()[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            p[j] -= lr * mh / (libm::sqrt(vh) + eps);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    libm::sqrt(grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum())
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let n = global_norm(grads);
    if n > max_norm && n > 0.0 {
        let s = max_norm / n;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    n
}

/// `acc += g`, tensor by tensor.
pub fn accumulate(acc: &mut [Tensor], grads: &[Tensor]) {
    for (a, g) in acc.iter_mut().zip(grads) {
        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
            *x += y;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        for (i, &x) in values.iter().enumerate() {
            s.push(format!("p{i}"), Tensor::scalar(x));
        }
        s
    }

    #[test]
    fn mse_examples() {
        let a = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(mse_loss(&a.map(|x| x + 2.0), &a).unwrap(), 4.0);
        let b = Tensor::new(&[3, 2], vec![0.0; 6]).unwrap();
        assert!(matches!(mse_loss(&a, &b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = store(&[1.5]);
        let mut st = AdamState::new(AdamConfig::default(), &p);
        adam_step(&mut p, &[Tensor::scalar(0.0)], &mut st).unwrap();
        assert_eq!(p.tensors()[0].item(), 1.5);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = store(&[0.0, 0.0]);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(cfg, &p);
        adam_step(&mut p, &[Tensor::scalar(1.0), Tensor::scalar(1.0)], &mut st).unwrap();
        // m̂ = 1, v̂ = 1, Δ = −0.1/(1 + 1e-8)
        let want = -0.1 / (1.0 + 1e-8);
        assert!((p.tensors()[0].item() - want).abs() < 1e-15);
        assert_eq!(p.tensors()[0].item(), p.tensors()[1].item());
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = store(&[0.0, 0.0]);
        let mut st = AdamState::new(AdamConfig::default(), &p);
        let err = adam_step(&mut p, &[Tensor::scalar(1.0), Tensor::scalar(f64::NAN)], &mut st).unwrap_err();
        assert_eq!(err, Error::NonFiniteGradient("p1".into()));
        assert_eq!(st.step, 0);
        assert_eq!(p.tensors()[0].item(), 0.0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Tensor::scalar(3.0), Tensor::scalar(4.0)];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
    }
}
