//! The four attention kernels of the two-stream block.
//!
//! * `Inv-Self`: standard multi-head attention over `Zᴵ`.
//! * `Equ-Self`: queries/keys/values are linear maps of `Zᴱ`; the score of a
//!   pair sums the 3-vector dot products over the head's channels.
//! * `Inv-Cross`: invariant queries; keys/values are `⟨Zᴱ W₁, Zᴱ W₂⟩`.
//! * `Equ-Cross`: equivariant queries; keys/values are `Zᴱ W₁ ⊙ Zᴵ W₂`.
//!
//! Projection matrices are stored fused, `d × (H·d_H)`, with head `h`
//! owning columns `h·d_H .. (h+1)·d_H`. Heads are only ever split on the
//! channel axis, never on the spatial axis.

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Channelwise inner product `Z[i,k] = X[i,:,k]ᵀ Y[i,:,k]` (rotation invariant).
pub fn dot_product_pairwise(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    tape.dot_pairwise(x, y)
}

/// Channelwise scaling `Z[i,s,k] = X[i,s,k]·Y[i,k]` (rotation equivariant).
pub fn scalar_product(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    tape.scalar_product(x, y)
}

/// How equivariant attention logits are scaled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "kebab-case"))]
pub enum EquScoreScale {
    /// Divide by `√(3·d_H)`, matching the variance of invariant logits.
    #[default]
    ThreeHeadDim,
    /// Raw `Σₖ Q·K` sums.
    Unscaled,
}

/// Parameter handles of a self-attention module.
#[derive(Clone, Copy, Debug)]
pub struct SelfAttnVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

/// Parameter handles of a cross-attention module. `w_k1`/`w_v1` act on the
/// equivariant stream in both directions; `w_k2`/`w_v2` act on the
/// equivariant stream for `Inv-Cross` and on the invariant stream for
/// `Equ-Cross`.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttnVars {
    pub w_q: Var,
    pub w_k1: Var,
    pub w_k2: Var,
    pub w_v1: Var,
    pub w_v2: Var,
    pub w_o: Var,
}

/// Inverted dropout driven by an explicit generator.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut SeededRng,
}

impl Dropout<'_> {
    /// Bernoulli keep-mask of `shape`, scaled by `1/(1−rate)`.
    pub fn mask(&mut self, shape: &[usize]) -> Tensor {
        use rand::Rng;
        let keep = 1.0 - self.rate;
        let mut m = Tensor::zeros(shape);
        for x in m.data_mut() {
            if self.rng.random::<f64>() < keep {
                *x = 1.0 / keep;
            }
        }
        m
    }
}

/// Runtime switches shared by the four kernels.
pub struct AttnOptions<'r> {
    pub heads: usize,
    /// `[n, n]` additive logit bias, shared across heads.
    pub bias: Option<Var>,
    pub equ_scale: EquScoreScale,
    /// Subtract the per-atom channel mean of `Zᴱ` before every equivariant
    /// projection (E(3) mode).
    pub center_equ: bool,
    /// Mutation: split heads over the flattened `3·d` axis.
    pub spatial_head_split: bool,
    pub dropout: Option<Dropout<'r>>,
}

impl AttnOptions<'_> {
    pub fn new(heads: usize) -> Self {
        AttnOptions {
            heads,
            bias: None,
            equ_scale: EquScoreScale::default(),
            center_equ: false,
            spatial_head_split: false,
            dropout: None,
        }
    }
}

/// Output of an attention kernel plus per-head logits and weights.
#[derive(Clone, Debug)]
pub struct Attended {
    pub output: Var,
    pub scores: Vec<Var>,
    pub weights: Vec<Var>,
}

/// `Zᴱ − μ1ᵀ` with `μ` the per-atom channel-mean 3-vector.
pub fn center_channels(tape: &mut Tape, z: Var) -> Result<Var> {
    let shape = tape.shape(z).to_vec();
    let r = shape.len();
    if r < 2 || shape[r - 2] != 3 {
        return Err(Error::Shape(alloc::format!("expected [.., 3, d], got {shape:?}")));
    }
    let mu = tape.mean(z, r - 1)?;
    let mut mshape = shape;
    mshape[r - 1] = 1;
    let mu = tape.reshape(mu, &mshape)?;
    tape.sub(z, mu)
}

fn equ_input(tape: &mut Tape, z: Var, opts: &AttnOptions) -> Result<Var> {
    if opts.center_equ {
        center_channels(tape, z)
    } else {
        Ok(z)
    }
}

fn check_width(tape: &Tape, z: Var, heads: usize) -> Result<(usize, usize)> {
    let shape = tape.shape(z);
    let d = *shape.last().unwrap_or(&0);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(alloc::format!("width {d} not divisible by {heads} heads")));
    }
    Ok((shape[0], d / heads))
}

/// Splits `[n, d]` (invariant) or `[n, 3, d]` (equivariant) into per-head
/// `[n, w]` matrices, `w = d_H` or `3·d_H`.
fn split_heads(tape: &mut Tape, x: Var, heads: usize, spatial_split: bool) -> Result<Vec<Var>> {
    let shape = tape.shape(x).to_vec();
    let n = shape[0];
    let d = *shape.last().unwrap();
    let dh = d / heads;
    let mut out = Vec::with_capacity(heads);
    match shape.len() {
        2 => {
            for h in 0..heads {
                out.push(tape.slice(x, 1, h * dh, dh)?);
            }
        }
        3 if spatial_split => {
            let flat = tape.reshape(x, &[n, 3 * d])?;
            for h in 0..heads {
                out.push(tape.slice(flat, 1, h * 3 * dh, 3 * dh)?);
            }
        }
        3 => {
            for h in 0..heads {
                let s = tape.slice(x, 2, h * dh, dh)?;
                out.push(tape.reshape(s, &[n, 3 * dh])?);
            }
        }
        _ => return Err(Error::Shape(alloc::format!("cannot split heads of {shape:?}"))),
    }
    Ok(out)
}

fn merge_heads(tape: &mut Tape, parts: &[Var], equivariant: bool, spatial_split: bool) -> Result<Var> {
    if !equivariant {
        return tape.concat(parts, 1);
    }
    let n = tape.shape(parts[0])[0];
    let w = tape.shape(parts[0])[1];
    if spatial_split {
        let flat = tape.concat(parts, 1)?;
        let d = w * parts.len() / 3;
        return tape.reshape(flat, &[n, 3, d]);
    }
    let mut slabs = Vec::with_capacity(parts.len());
    for &p in parts {
        slabs.push(tape.reshape(p, &[n, 3, w / 3])?);
    }
    tape.concat(&slabs, 2)
}

/// Per-head `softmax(q·kᵀ·scale + B)·v` on flattened `[n, w]` heads.
fn attend(
    tape: &mut Tape,
    q: &[Var],
    k: &[Var],
    v: &[Var],
    scale: f64,
    opts: &mut AttnOptions,
) -> Result<(Vec<Var>, Vec<Var>, Vec<Var>)> {
    let mut outs = Vec::with_capacity(q.len());
    let mut scores = Vec::with_capacity(q.len());
    let mut weights = Vec::with_capacity(q.len());
    for h in 0..q.len() {
        let kt = tape.transpose(k[h])?;
        let logits = tape.matmul(q[h], kt)?;
        let mut logits = tape.scale(logits, scale);
        if let Some(b) = opts.bias {
            logits = tape.add(logits, b)?;
        }
        let probs = tape.softmax(logits, 1)?;
        let used = match opts.dropout.as_mut() {
            Some(dp) if dp.rate > 0.0 => {
                let mask = dp.mask(tape.shape(probs));
                let m = tape.constant(mask);
                tape.mul(probs, m)?
            }
            _ => probs,
        };
        outs.push(tape.matmul(used, v[h])?);
        scores.push(logits);
        weights.push(probs);
    }
    Ok((outs, scores, weights))
}

fn equ_scale(opts: &AttnOptions, dh: usize) -> f64 {
    match opts.equ_scale {
        EquScoreScale::ThreeHeadDim => 1.0 / libm::sqrt(3.0 * dh as f64),
        EquScoreScale::Unscaled => 1.0,
    }
}

/// `Inv-Self-Attn`: `[n, d] → [n, d]`, invariant.
pub fn inv_self_attn(tape: &mut Tape, z_inv: Var, p: &SelfAttnVars, opts: &mut AttnOptions) -> Result<Attended> {
    let (_, dh) = check_width(tape, z_inv, opts.heads)?;
    let q = tape.linear(z_inv, p.w_q)?;
    let k = tape.linear(z_inv, p.w_k)?;
    let v = tape.linear(z_inv, p.w_v)?;
    let qh = split_heads(tape, q, opts.heads, false)?;
    let kh = split_heads(tape, k, opts.heads, false)?;
    let vh = split_heads(tape, v, opts.heads, false)?;
    let (outs, scores, weights) = attend(tape, &qh, &kh, &vh, 1.0 / libm::sqrt(dh as f64), opts)?;
    let merged = merge_heads(tape, &outs, false, false)?;
    let output = tape.linear(merged, p.w_o)?;
    Ok(Attended {
        output,
        scores,
        weights,
    })
}

/// `Equ-Self-Attn`: `[n, 3, d] → [n, 3, d]`, rotation equivariant.
pub fn equ_self_attn(tape: &mut Tape, z_equ: Var, p: &SelfAttnVars, opts: &mut AttnOptions) -> Result<Attended> {
    let (_, dh) = check_width(tape, z_equ, opts.heads)?;
    let z = equ_input(tape, z_equ, opts)?;
    let q = tape.linear(z, p.w_q)?;
    let k = tape.linear(z, p.w_k)?;
    let v = tape.linear(z, p.w_v)?;
    let split = opts.spatial_head_split;
    let qh = split_heads(tape, q, opts.heads, split)?;
    let kh = split_heads(tape, k, opts.heads, split)?;
    let vh = split_heads(tape, v, opts.heads, split)?;
    let scale = equ_scale(opts, dh);
    let (outs, scores, weights) = attend(tape, &qh, &kh, &vh, scale, opts)?;
    let merged = merge_heads(tape, &outs, true, split)?;
    let output = tape.linear(merged, p.w_o)?;
    Ok(Attended {
        output,
        scores,
        weights,
    })
}

/// `Inv-Cross-Attn`: invariant queries attend to keys/values built from
/// pairwise dot products of two equivariant projections.
pub fn inv_cross_attn(
    tape: &mut Tape,
    z_inv: Var,
    z_equ: Var,
    p: &CrossAttnVars,
    opts: &mut AttnOptions,
) -> Result<Attended> {
    let (n, dh) = check_width(tape, z_inv, opts.heads)?;
    if tape.shape(z_equ)[0] != n {
        return Err(Error::dim("inv_cross_attn", tape.shape(z_inv), tape.shape(z_equ)));
    }
    let ze = equ_input(tape, z_equ, opts)?;
    let q = tape.linear(z_inv, p.w_q)?;
    let k1 = tape.linear(ze, p.w_k1)?;
    let k2 = tape.linear(ze, p.w_k2)?;
    let k = tape.dot_pairwise(k1, k2)?;
    let v1 = tape.linear(ze, p.w_v1)?;
    let v2 = tape.linear(ze, p.w_v2)?;
    let v = tape.dot_pairwise(v1, v2)?;
    let qh = split_heads(tape, q, opts.heads, false)?;
    let kh = split_heads(tape, k, opts.heads, false)?;
    let vh = split_heads(tape, v, opts.heads, false)?;
    let (outs, scores, weights) = attend(tape, &qh, &kh, &vh, 1.0 / libm::sqrt(dh as f64), opts)?;
    let merged = merge_heads(tape, &outs, false, false)?;
    let output = tape.linear(merged, p.w_o)?;
    Ok(Attended {
        output,
        scores,
        weights,
    })
}

/// `Equ-Cross-Attn`: equivariant queries attend to keys/values gated by
/// the invariant stream through `⊙`.
pub fn equ_cross_attn(
    tape: &mut Tape,
    z_equ: Var,
    z_inv: Var,
    p: &CrossAttnVars,
    opts: &mut AttnOptions,
) -> Result<Attended> {
    let (n, dh) = check_width(tape, z_equ, opts.heads)?;
    if tape.shape(z_inv)[0] != n {
        return Err(Error::dim("equ_cross_attn", tape.shape(z_equ), tape.shape(z_inv)));
    }
    let ze = equ_input(tape, z_equ, opts)?;
    let q = tape.linear(ze, p.w_q)?;
    let k1 = tape.linear(ze, p.w_k1)?;
    let k2 = tape.linear(z_inv, p.w_k2)?;
    let k = tape.scalar_product(k1, k2)?;
    let v1 = tape.linear(ze, p.w_v1)?;
    let v2 = tape.linear(z_inv, p.w_v2)?;
    let v = tape.scalar_product(v1, v2)?;
    let split = opts.spatial_head_split;
    let qh = split_heads(tape, q, opts.heads, split)?;
    let kh = split_heads(tape, k, opts.heads, split)?;
    let vh = split_heads(tape, v, opts.heads, split)?;
    let scale = equ_scale(opts, dh);
    let (outs, scores, weights) = attend(tape, &qh, &kh, &vh, scale, opts)?;
    let merged = merge_heads(tape, &outs, true, split)?;
    let output = tape.linear(merged, p.w_o)?;
    Ok(Attended {
        output,
        scores,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::random_rotation;
    use crate::rng::{seeded, uniform};
    use alloc::vec;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut r = seeded(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| uniform(&mut r, -1.0, 1.0)).collect()).unwrap()
    }

    fn self_params(tape: &mut Tape, d: usize, seed: u64) -> SelfAttnVars {
        SelfAttnVars {
            w_q: tape.constant(rand_t(&[d, d], seed)),
            w_k: tape.constant(rand_t(&[d, d], seed + 1)),
            w_v: tape.constant(rand_t(&[d, d], seed + 2)),
            w_o: tape.constant(rand_t(&[d, d], seed + 3)),
        }
    }

    fn cross_params(tape: &mut Tape, d: usize, seed: u64) -> CrossAttnVars {
        CrossAttnVars {
            w_q: tape.constant(rand_t(&[d, d], seed)),
            w_k1: tape.constant(rand_t(&[d, d], seed + 1)),
            w_k2: tape.constant(rand_t(&[d, d], seed + 2)),
            w_v1: tape.constant(rand_t(&[d, d], seed + 3)),
            w_v2: tape.constant(rand_t(&[d, d], seed + 4)),
            w_o: tape.constant(rand_t(&[d, d], seed + 5)),
        }
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        assert_eq!(a.shape(), b.shape());
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn dot_product_hand_example() {
        let mut t = Tape::new();
        // [1, 3, 2]: column k holds the k-th 3-vector.
        let x = t.constant(Tensor::new(&[1, 3, 2], vec![1.0, 0.0, 0.0, 2.0, 0.0, 0.0]).unwrap());
        let y = t.constant(Tensor::new(&[1, 3, 2], vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0]).unwrap());
        let z = dot_product_pairwise(&mut t, x, y).unwrap();
        assert_eq!(t.value(z).to_vec(), vec![1.0, 2.0]);
        let bad = t.constant(Tensor::zeros(&[1, 3, 3]));
        assert!(matches!(dot_product_pairwise(&mut t, x, bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn dot_product_is_rotation_invariant_and_nonnegative_on_squares() {
        let (x, y) = (rand_t(&[4, 3, 5], 1), rand_t(&[4, 3, 5], 2));
        let g = random_rotation(3, false);
        let mut t = Tape::new();
        let vars = [x.clone(), y.clone(), g.rotate_slabs(&x), g.rotate_slabs(&y)].map(|v| t.constant(v));
        let a = dot_product_pairwise(&mut t, vars[0], vars[1]).unwrap();
        let b = dot_product_pairwise(&mut t, vars[2], vars[3]).unwrap();
        assert!(max_diff(t.value(a), t.value(b)) < 1e-10);
        let sq = dot_product_pairwise(&mut t, vars[0], vars[0]).unwrap();
        assert!(t.value(sq).data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn scalar_product_hand_example() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[1, 3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap());
        let y = t.constant(Tensor::new(&[1, 2], vec![2.0, 3.0]).unwrap());
        let z = scalar_product(&mut t, x, y).unwrap();
        assert_eq!(t.value(z).to_vec(), vec![2.0, 0.0, 0.0, 3.0, 0.0, 0.0]);
        let ones = t.constant(Tensor::ones(&[1, 2]));
        let same = scalar_product(&mut t, x, ones).unwrap();
        assert_eq!(t.value(same), t.value(x));
        let bad = t.constant(Tensor::ones(&[1, 3]));
        assert!(scalar_product(&mut t, x, bad).is_err());
    }

    #[test]
    fn single_atom_attention_is_the_value_path() {
        let d = 4;
        let mut t = Tape::new();
        let zi = t.constant(rand_t(&[1, d], 10));
        let ze = t.constant(rand_t(&[1, 3, d], 11));
        let p = self_params(&mut t, d, 12);
        let out = inv_self_attn(&mut t, zi, &p, &mut AttnOptions::new(2)).unwrap();
        let v = t.linear(zi, p.w_v).unwrap();
        let want = t.linear(v, p.w_o).unwrap();
        assert!(max_diff(t.value(out.output), t.value(want)) < 1e-14);
        for w in &out.weights {
            assert_eq!(t.value(*w).to_vec(), vec![1.0]);
        }
        let out = equ_self_attn(&mut t, ze, &p, &mut AttnOptions::new(2)).unwrap();
        let v = t.linear(ze, p.w_v).unwrap();
        let want = t.linear(v, p.w_o).unwrap();
        assert!(max_diff(t.value(out.output), t.value(want)) < 1e-14);
        let c = cross_params(&mut t, d, 13);
        let out = inv_cross_attn(&mut t, zi, ze, &c, &mut AttnOptions::new(2)).unwrap();
        let v1 = t.linear(ze, c.w_v1).unwrap();
        let v2 = t.linear(ze, c.w_v2).unwrap();
        let v = t.dot_pairwise(v1, v2).unwrap();
        let want = t.linear(v, c.w_o).unwrap();
        assert!(max_diff(t.value(out.output), t.value(want)) < 1e-14);
    }

    #[test]
    fn masking_bias_leaves_self_value_path() {
        let (n, d) = (4, 4);
        let mut t = Tape::new();
        let zi = t.constant(rand_t(&[n, d], 20));
        let p = self_params(&mut t, d, 21);
        let mut b = Tensor::full(&[n, n], -1e9);
        for i in 0..n {
            b.data_mut()[i * n + i] = 0.0;
        }
        let mut opts = AttnOptions::new(2);
        opts.bias = Some(t.constant(b));
        let out = inv_self_attn(&mut t, zi, &p, &mut opts).unwrap();
        let v = t.linear(zi, p.w_v).unwrap();
        let want = t.linear(v, p.w_o).unwrap();
        assert!(max_diff(t.value(out.output), t.value(want)) < 1e-12);
    }

    #[test]
    fn zero_value_weights_give_zero_output() {
        let (n, d) = (3, 4);
        let mut t = Tape::new();
        let zi = t.constant(rand_t(&[n, d], 30));
        let ze = t.constant(rand_t(&[n, 3, d], 31));
        let mut p = self_params(&mut t, d, 32);
        p.w_v = t.constant(Tensor::zeros(&[d, d]));
        let a = inv_self_attn(&mut t, zi, &p, &mut AttnOptions::new(2)).unwrap();
        assert_eq!(t.value(a.output).max_abs(), 0.0);
        let a = equ_self_attn(&mut t, ze, &p, &mut AttnOptions::new(2)).unwrap();
        assert_eq!(t.value(a.output).max_abs(), 0.0);
        let mut c = cross_params(&mut t, d, 33);
        c.w_v1 = t.constant(Tensor::zeros(&[d, d]));
        let a = equ_cross_attn(&mut t, ze, zi, &c, &mut AttnOptions::new(2)).unwrap();
        assert_eq!(t.value(a.output).max_abs(), 0.0);
        let zero_equ = t.constant(Tensor::zeros(&[n, 3, d]));
        let c = cross_params(&mut t, d, 34);
        let a = inv_cross_attn(&mut t, zi, zero_equ, &c, &mut AttnOptions::new(2)).unwrap();
        assert_eq!(t.value(a.output).max_abs(), 0.0);
    }

    /// Runs all four kernels on `(zi, ze)` and returns the outputs.
    fn all_four(zi: &Tensor, ze: &Tensor, bias: &Tensor, seed: u64) -> [Tensor; 4] {
        let d = zi.shape()[1];
        let mut t = Tape::new();
        let (zi, ze) = (t.constant(zi.clone()), t.constant(ze.clone()));
        let b = t.constant(bias.clone());
        let sp = self_params(&mut t, d, seed);
        let cp = cross_params(&mut t, d, seed + 10);
        let opts = || {
            let mut o = AttnOptions::new(2);
            o.bias = Some(b);
            o
        };
        let outs = [
            inv_self_attn(&mut t, zi, &sp, &mut opts()).unwrap(),
            equ_self_attn(&mut t, ze, &sp, &mut opts()).unwrap(),
            inv_cross_attn(&mut t, zi, ze, &cp, &mut opts()).unwrap(),
            equ_cross_attn(&mut t, ze, zi, &cp, &mut opts()).unwrap(),
        ];
        for o in &outs {
            for w in &o.weights {
                let wt = t.value(*w);
                let n = wt.shape()[0];
                for i in 0..n {
                    let s: f64 = wt.data()[i * n..(i + 1) * n].iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
        outs.map(|o| t.value(o.output).clone())
    }

    #[test]
    fn kernels_respect_rotations() {
        for trial in 0..100 {
            let n = 2 + trial % 4;
            let zi = rand_t(&[n, 4], 100 + trial as u64);
            let ze = rand_t(&[n, 3, 4], 200 + trial as u64);
            let bias = rand_t(&[n, n], 300 + trial as u64);
            let g = random_rotation(400 + trial as u64, trial % 2 == 0);
            let base = all_four(&zi, &ze, &bias, 7);
            let rot = all_four(&zi, &g.rotate_slabs(&ze), &bias, 7);
            assert!(max_diff(&rot[0], &base[0]) < 1e-8);
            assert!(max_diff(&rot[1], &g.rotate_slabs(&base[1])) < 1e-8);
            assert!(max_diff(&rot[2], &base[2]) < 1e-8);
            assert!(max_diff(&rot[3], &g.rotate_slabs(&base[3])) < 1e-8);
        }
    }

    fn permute(t: &Tensor, perm: &[usize]) -> Tensor {
        let n = t.shape()[0];
        let row = t.len() / n;
        let data = perm.iter().flat_map(|&p| t.data()[p * row..(p + 1) * row].to_vec()).collect();
        Tensor::new(t.shape(), data).unwrap()
    }

    #[test]
    fn kernels_commute_with_permutations() {
        let n = 5;
        let perm = [3, 0, 4, 1, 2];
        let zi = rand_t(&[n, 4], 50);
        let ze = rand_t(&[n, 3, 4], 51);
        let bias = rand_t(&[n, n], 52);
        let mut pb = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                pb.data_mut()[i * n + j] = bias.at(&[perm[i], perm[j]]);
            }
        }
        let base = all_four(&zi, &ze, &bias, 9);
        let moved = all_four(&permute(&zi, &perm), &permute(&ze, &perm), &pb, 9);
        for k in 0..4 {
            assert!(max_diff(&moved[k], &permute(&base[k], &perm)) < 1e-12);
        }
    }

    #[test]
    fn equ_scores_match_brute_force_and_are_invariant() {
        let (n, d) = (3, 6);
        let ze = rand_t(&[n, 3, d], 60);
        let g = random_rotation(61, false);
        let scores = |z: &Tensor| {
            let mut t = Tape::new();
            let zv = t.constant(z.clone());
            let p = self_params(&mut t, d, 62);
            let out = equ_self_attn(&mut t, zv, &p, &mut AttnOptions::new(1)).unwrap();
            let q = t.linear(zv, p.w_q).unwrap();
            let k = t.linear(zv, p.w_k).unwrap();
            (t.value(out.scores[0]).clone(), t.value(q).clone(), t.value(k).clone())
        };
        let (s, q, k) = scores(&ze);
        let scale = 1.0 / libm::sqrt(3.0 * d as f64);
        for i in 0..n {
            for j in 0..n {
                let mut a = 0.0;
                for c in 0..d {
                    for x in 0..3 {
                        a += q.at(&[i, x, c]) * k.at(&[j, x, c]);
                    }
                }
                assert!((s.at(&[i, j]) - a * scale).abs() < 1e-10);
            }
        }
        let (sr, _, _) = scores(&g.rotate_slabs(&ze));
        assert!(max_diff(&sr, &s) < 1e-10);
    }

    #[test]
    fn equ_cross_with_unit_gate_reduces_to_equ_self() {
        let (n, d) = (4, 4);
        let mut t = Tape::new();
        let ze = t.constant(rand_t(&[n, 3, d], 70));
        // GELU(1·W) with W = I and z_inv chosen so the gate is exactly 1 is
        // awkward; instead feed the ⊙ operand directly: ones through I.
        let ones = t.constant(Tensor::ones(&[n, d]));
        let p = self_params(&mut t, d, 71);
        let eye = t.constant(Tensor::eye(d));
        let c = CrossAttnVars {
            w_q: p.w_q,
            w_k1: p.w_k,
            w_k2: eye,
            w_v1: p.w_v,
            w_v2: eye,
            w_o: p.w_o,
        };
        let a = equ_self_attn(&mut t, ze, &p, &mut AttnOptions::new(2)).unwrap();
        let b = equ_cross_attn(&mut t, ze, ones, &c, &mut AttnOptions::new(2)).unwrap();
        assert!(max_diff(t.value(a.output), t.value(b.output)) < 1e-14);
    }

    #[test]
    fn centered_inputs_have_zero_channel_mean() {
        let mut t = Tape::new();
        let z = t.constant(rand_t(&[2, 3, 5], 80));
        let c = center_channels(&mut t, z).unwrap();
        let m = t.mean(c, 2).unwrap();
        assert!(t.value(m).max_abs() < 1e-12);
    }

    #[test]
    fn head_count_must_divide_width() {
        let mut t = Tape::new();
        let zi = t.constant(rand_t(&[2, 4], 90));
        let p = self_params(&mut t, 4, 91);
        assert!(matches!(
            inv_self_attn(&mut t, zi, &p, &mut AttnOptions::new(3)),
            Err(Error::Config(_))
        ));
    }
}
