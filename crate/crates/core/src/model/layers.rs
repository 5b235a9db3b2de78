//! Norms, feed-forward layers and readout heads, each as a tape function
//! plus a plain tensor wrapper.

use crate::attention::{center_channels, Dropout};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard layer norm over channels followed by `γ`, `β` (both `[d]`).
pub fn inv_ln_on_tape(tape: &mut Tape, z: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let x = tape.layer_norm(z, eps)?;
    let x = tape.mul(x, gamma)?;
    tape.add(x, beta)
}

/// Whitening norm on `[n, 3, d]` followed by a per-channel `γ` (`[d]`).
pub fn equ_ln_on_tape(tape: &mut Tape, z: Var, gamma: Var, eps: f64) -> Result<Var> {
    let x = tape.equ_layer_norm(z, eps)?;
    tape.mul(x, gamma)
}

/// `GELU(z W₁) W₂`, with optional dropout on the activation.
pub fn inv_ffn_on_tape(tape: &mut Tape, z: Var, w1: Var, w2: Var, dropout: Option<Dropout>) -> Result<Var> {
    let h = tape.linear(z, w1)?;
    let mut h = tape.gelu(h);
    if let Some(mut d) = dropout {
        let m = tape.constant(d.mask(tape.shape(h)));
        h = tape.mul(h, m)?;
    }
    tape.linear(h, w2)
}

/// `(Zᴱ W_up ⊙ GELU(Zᴵ W_gate)) W_down`. With `center` the channel mean
/// of `Zᴱ` is removed first.
pub fn equ_ffn_on_tape(
    tape: &mut Tape,
    z_equ: Var,
    z_inv: Var,
    w_up: Var,
    w_gate: Var,
    w_down: Var,
    center: bool,
    dropout: Option<Dropout>,
) -> Result<Var> {
    let n = tape.shape(z_equ)[0];
    if tape.shape(z_inv)[0] != n {
        return Err(Error::dim("equ_ffn", tape.shape(z_equ), tape.shape(z_inv)));
    }
    let ze = if center { center_channels(tape, z_equ)? } else { z_equ };
    let up = tape.linear(ze, w_up)?;
    let gate = tape.linear(z_inv, w_gate)?;
    let mut gate = tape.gelu(gate);
    if let Some(mut d) = dropout {
        let m = tape.constant(d.mask(tape.shape(gate)));
        gate = tape.mul(gate, m)?;
    }
    let h = tape.scalar_product(up, gate)?;
    tape.linear(h, w_down)
}

/// `Δᵢ = zᴱᵢ·w`, prediction `p0 + Δ` (`[n, 3]`).
pub fn equivariant_head_on_tape(tape: &mut Tape, z_equ: Var, p0: Var, w: Var) -> Result<Var> {
    let n = tape.shape(z_equ)[0];
    let delta = tape.linear(z_equ, w)?;
    let delta = tape.reshape(delta, &[n, 3])?;
    tape.add(p0, delta)
}

/// Parameter handles of the pooled scalar readout.
#[derive(Clone, Copy, Debug)]
pub struct InvHeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Mean over atoms, then `GELU(h W₁ + b₁) W₂ + b₂`, returned as a 0-d value.
pub fn invariant_head_on_tape(tape: &mut Tape, z_inv: Var, p: &InvHeadVars) -> Result<Var> {
    let d = tape.shape(z_inv)[1];
    let pooled = tape.mean(z_inv, 0)?;
    let pooled = tape.reshape(pooled, &[1, d])?;
    let h = tape.linear(pooled, p.w1)?;
    let h = tape.add(h, p.b1)?;
    let h = tape.gelu(h);
    let out = tape.linear(h, p.w2)?;
    let out = tape.add(out, p.b2)?;
    tape.reshape(out, &[])
}

fn run<const N: usize>(inputs: [&Tensor; N], f: impl FnOnce(&mut Tape, [Var; N]) -> Result<Var>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = inputs.map(|t| tape.constant(t.clone()));
    let out = f(&mut tape, vars)?;
    Ok(tape.value(out).clone())
}

pub fn inv_ln(z: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    run([z, gamma, beta], |t, [z, g, b]| inv_ln_on_tape(t, z, g, b, eps))
}

pub fn equ_ln(z: &Tensor, gamma: &Tensor, eps: f64) -> Result<Tensor> {
    run([z, gamma], |t, [z, g]| equ_ln_on_tape(t, z, g, eps))
}

pub fn inv_ffn(z: &Tensor, w1: &Tensor, w2: &Tensor) -> Result<Tensor> {
    run([z, w1, w2], |t, [z, a, b]| inv_ffn_on_tape(t, z, a, b, None))
}

pub fn equ_ffn(z_equ: &Tensor, z_inv: &Tensor, w_up: &Tensor, w_gate: &Tensor, w_down: &Tensor) -> Result<Tensor> {
    run([z_equ, z_inv, w_up, w_gate, w_down], |t, [ze, zi, u, g, d]| {
        equ_ffn_on_tape(t, ze, zi, u, g, d, false, None)
    })
}

pub fn equivariant_head(z_equ: &Tensor, p0: &Tensor, w: &Tensor) -> Result<Tensor> {
    run([z_equ, p0, w], |t, [z, p, w]| equivariant_head_on_tape(t, z, p, w))
}

pub fn invariant_head(z_inv: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Result<f64> {
    let out = run([z_inv, w1, b1, w2, b2], |t, [z, w1, b1, w2, b2]| {
        invariant_head_on_tape(t, z, &InvHeadVars { w1, b1, w2, b2 })
    })?;
    Ok(out.item())
}
