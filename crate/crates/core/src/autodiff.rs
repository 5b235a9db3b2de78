//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its output value and enough
//! context to run its vector-Jacobian product. [`Tape::backward`] consumes
//! the tape and walks it in reverse. A tape is single use and confined to
//! one thread; parallelism belongs to callers (one tape per sample).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat3};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, split_axis, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

/// Deliberate backward-rule defects, used to show that the gradient audit
/// notices a wrong vector-Jacobian product.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Faults {
    /// Drops the third spatial component from the gradient that the scalar
    /// product sends to its invariant (gate) operand.
    pub corrupt_scalar_product_grad: bool,
}

#[derive(Debug)]
struct WhitenSaved {
    evals: [f64; 3],
    evecs: Mat3,
    u: Mat3,
    centered: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(BinaryKind, Var, Var, Option<Vec<usize>>),
    Scale(Var, f64),
    AddScalar(Var),
    Reduce(ReduceKind, Var, usize),
    Softmax(Var, usize),
    Gelu(Var),
    Reshape(Var),
    Slice { a: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Gather { table: Var, ids: Vec<usize> },
    LayerNorm { a: Var, rstd: Vec<f64> },
    EquLayerNorm { a: Var, saved: Vec<WhitenSaved> },
    GaussianBasis { x: Var, gamma: Var, beta: Var, mu: Var, sigma: Var },
    DotPairwise(Var, Var),
    ScalarProduct(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    faults: Faults,
}

/// Lower bound applied to `|σ|` inside [`Tape::gaussian_basis`].
pub const MIN_BASIS_SCALE: f64 = 1e-6;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    cdf + x * INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn with_faults(faults: Faults) -> Self {
        Tape {
            nodes: Vec::new(),
            faults,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// 2-d matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), needs))
    }

    /// Applies a matrix on the right to the last axis of `a`:
    /// `[.., k] · [k, n] → [.., n]`.
    pub fn linear(&mut self, a: Var, w: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let k = *sa.last().ok_or_else(|| Error::dim("linear", &sa, self.shape(w)))?;
        let rows = sa.len().checked_sub(1).map(|r| sa[..r].iter().product()).unwrap_or(1);
        let flat = self.reshape(a, &[rows, k])?;
        let out = self.matmul(flat, w)?;
        let mut shape = sa;
        *shape.last_mut().unwrap() = self.shape(w)[1];
        self.reshape(out, &shape)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose needs rank 2, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a), needs))
    }

    /// Pointwise binary op. `b` may have lower rank or extent-1 axes; it is
    /// aligned to the trailing axes of `a` and stretched.
    pub fn elementwise(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let map = broadcast_map(&sa, &sb).ok_or_else(|| Error::dim("elementwise", &sa, &sb))?;
        let (da, db) = (self.data(a), self.data(b));
        let bidx = |i: usize| map.as_ref().map_or(i, |m| m[i]);
        if kind == BinaryKind::Div && db.iter().any(|&x| x == 0.0) {
            return Err(Error::Numeric("division by zero".into()));
        }
        let out: Vec<f64> = da
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = db[bidx(i)];
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                }
            })
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(sa, out), Op::Binary(kind, a, b, map), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryKind::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, factor), needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let needs = self.needs(a);
        self.push(value, Op::AddScalar(a), needs)
    }

    /// Collapses `axis` by sum or mean.
    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "reduce",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let src = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..ext {
                let base = (o * ext + j) * inner;
                for (dst, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(&src[base..base + inner]) {
                    *dst += x;
                }
            }
        }
        if kind == ReduceKind::Mean {
            let inv = 1.0 / ext as f64;
            out.iter_mut().for_each(|x| *x *= inv);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Reduce(kind, a, axis), needs))
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceKind::Sum, a, axis)
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceKind::Mean, a, axis)
    }

    /// Mean over every element, as a 0-d tensor.
    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let flat = self.reshape(a, &[n])?;
        self.mean(flat, 0)
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * ext + j) * inner + i;
                let max = (0..ext).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..ext {
                    let e = libm::exp(src[at(j)] - max);
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..ext {
                    out[at(j)] /= total;
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(a, axis), needs))
    }

    /// Exact-erf GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu_scalar);
        let needs = self.needs(a);
        self.push(value, Op::Gelu(a), needs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), needs))
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "slice",
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "slice {start}..{} out of range for extent {}",
                start + len,
                shape[axis]
            )));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Slice { a, axis, start }, needs))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let base_shape = self.shape(*first).to_vec();
        if axis >= base_shape.len() {
            return Err(Error::Axis {
                op: "concat",
                axis,
                rank: base_shape.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base_shape.len()
                && s.iter().zip(&base_shape).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim("concat", &base_shape, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let ext = self.shape(p)[axis];
                let src = self.data(p);
                out.extend_from_slice(&src[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut out_shape = base_shape;
        out_shape[axis] = total;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// Row lookup: `table[V, ..]` indexed by `ids` gives `[ids.len(), ..]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.is_empty() {
            return Err(Error::Shape("gather from a scalar".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= shape[0]) {
            return Err(Error::Input(format!("row id {bad} out of range for table of {} rows", shape[0])));
        }
        if ids.is_empty() {
            return Err(Error::Shape("gather with no ids".into()));
        }
        let row: usize = shape[1..].iter().product();
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * row);
        for &i in ids {
            out.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = ids.len();
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Standardizes the last axis: `(x − mean) / sqrt(var + eps)`.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::Shape("layer_norm on a scalar".into()))?;
        let src = self.data(a);
        let rows = src.len() / d;
        let mut out = vec![0.0; src.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &src[r * d..(r + 1) * d];
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / libm::sqrt(var + eps);
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(x) {
                *o = (v - mean) * s;
            }
            rstd.push(s);
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::LayerNorm { a, rstd }, needs))
    }

    /// Per-atom whitening of `[.., 3, d]` slabs: subtract the channel-mean
    /// 3-vector, then multiply by `(C + eps·I)^(-1/2)` where
    /// `C = (z − μ1ᵀ)(z − μ1ᵀ)ᵀ / d`.
    pub fn equ_layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 2] != 3 {
            return Err(Error::Shape(format!("equ_layer_norm needs [.., 3, d], got {shape:?}")));
        }
        let d = shape[r - 1];
        let src = self.data(a);
        let atoms = src.len() / (3 * d);
        let mut out = vec![0.0; src.len()];
        let mut saved = Vec::with_capacity(atoms);
        for i in 0..atoms {
            let x = &src[i * 3 * d..(i + 1) * 3 * d];
            let mut centered = x.to_vec();
            for s in 0..3 {
                let row = &mut centered[s * d..(s + 1) * d];
                let mu = row.iter().sum::<f64>() / d as f64;
                row.iter_mut().for_each(|v| *v -= mu);
            }
            let mut cov = [[0.0; 3]; 3];
            for s in 0..3 {
                for t in s..3 {
                    let c = centered[s * d..(s + 1) * d]
                        .iter()
                        .zip(&centered[t * d..(t + 1) * d])
                        .map(|(p, q)| p * q)
                        .sum::<f64>()
                        / d as f64;
                    cov[s][t] = c;
                    cov[t][s] = c;
                }
                cov[s][s] += eps;
            }
            let (evals, evecs) = linalg::symmetric_eigen(&cov);
            let evals = evals.map(|l| l.max(eps));
            let inv_sqrt = evals.map(|l| 1.0 / libm::sqrt(l));
            let mut u = [[0.0; 3]; 3];
            for s in 0..3 {
                for t in 0..3 {
                    u[s][t] = (0..3).map(|k| evecs[s][k] * inv_sqrt[k] * evecs[t][k]).sum();
                }
            }
            let dst = &mut out[i * 3 * d..(i + 1) * 3 * d];
            for s in 0..3 {
                for t in 0..3 {
                    let w = u[s][t];
                    for c in 0..d {
                        dst[s * d + c] += w * centered[t * d + c];
                    }
                }
            }
            saved.push(WhitenSaved {
                evals,
                evecs,
                u,
                centered,
            });
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::EquLayerNorm { a, saved }, needs))
    }

    /// Gaussian basis responses `ψ[i,k] = −exp(−½u²)/(√(2π)|σₖ|)` with
    /// `u = (γᵢxᵢ + βᵢ − μₖ)/|σₖ|`. Shapes: `x, gamma, beta: [m]`,
    /// `mu, sigma: [K]`, output `[m, K]`. `|σ|` is clamped below at
    /// [`MIN_BASIS_SCALE`].
    pub fn gaussian_basis(&mut self, x: Var, gamma: Var, beta: Var, mu: Var, sigma: Var) -> Result<Var> {
        let m = self.value(x).len();
        for v in [gamma, beta] {
            if self.value(v).len() != m {
                return Err(Error::dim("gaussian_basis", self.shape(x), self.shape(v)));
            }
        }
        let k = self.value(mu).len();
        if self.value(sigma).len() != k {
            return Err(Error::dim("gaussian_basis", self.shape(mu), self.shape(sigma)));
        }
        let (xs, gs, bs, ms, ss) = (
            self.data(x),
            self.data(gamma),
            self.data(beta),
            self.data(mu),
            self.data(sigma),
        );
        let mut out = vec![0.0; m * k];
        for i in 0..m {
            let arg = gs[i] * xs[i] + bs[i];
            for j in 0..k {
                out[i * k + j] = basis_response(arg, ms[j], ss[j]);
            }
        }
        let needs = [x, gamma, beta, mu, sigma].iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::from_parts(vec![m, k], out),
            Op::GaussianBasis {
                x,
                gamma,
                beta,
                mu,
                sigma,
            },
            needs,
        ))
    }

    /// Channelwise inner product of 3-vectors: `[.., 3, c] × [.., 3, c] → [.., c]`.
    pub fn dot_pairwise(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        let r = sa.len();
        if sa != sb || r < 2 || sa[r - 2] != 3 {
            return Err(Error::dim("dot_pairwise", &sa, sb));
        }
        let c = sa[r - 1];
        let (xa, xb) = (self.data(a), self.data(b));
        let atoms = xa.len() / (3 * c);
        let mut out = vec![0.0; atoms * c];
        for i in 0..atoms {
            for s in 0..3 {
                let base = (i * 3 + s) * c;
                for k in 0..c {
                    out[i * c + k] += xa[base + k] * xb[base + k];
                }
            }
        }
        let mut shape = sa;
        shape.remove(r - 2);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::DotPairwise(a, b), needs))
    }

    /// Scales each 3-vector channel by an invariant scalar:
    /// `[.., 3, c] ⊙ [.., c] → [.., 3, c]`.
    pub fn scalar_product(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        let r = sa.len();
        let ok = r >= 2
            && sa[r - 2] == 3
            && sb.len() == r - 1
            && sb[..r - 2] == sa[..r - 2]
            && sb[r - 2] == sa[r - 1];
        if !ok {
            return Err(Error::dim("scalar_product", &sa, sb));
        }
        let c = sa[r - 1];
        let (xa, xb) = (self.data(a), self.data(b));
        let atoms = xa.len() / (3 * c);
        let mut out = vec![0.0; xa.len()];
        for i in 0..atoms {
            for s in 0..3 {
                let base = (i * 3 + s) * c;
                for k in 0..c {
                    out[base + k] = xa[base + k] * xb[i * c + k];
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(sa, out), Op::ScalarProduct(a, b), needs))
    }

    /// Runs the reverse sweep from a 0-d `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.shape(loss);
        if !loss_shape.is_empty() {
            return Err(Error::Shape(format!("loss must be 0-d, got shape {loss_shape:?}")));
        }
        let Tape { nodes, faults } = self;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            backprop_node(&nodes, idx, &g, &mut grads, faults);
            grads[idx] = Some(g);
        }

        let out = grads
            .into_iter()
            .zip(&nodes)
            .map(|(g, node)| g.map(|g| Tensor::from_parts(node.value.shape().to_vec(), g)))
            .collect();
        let shapes = nodes.into_iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads: out, shapes })
    }
}

fn basis_response(arg: f64, mu: f64, sigma: f64) -> f64 {
    let s = sigma.abs().max(MIN_BASIS_SCALE);
    let u = (arg - mu) / s;
    -INV_SQRT_2PI / s * libm::exp(-0.5 * u * u)
}

/// For every element of `out_shape`, the flat index into a tensor of shape
/// `b` broadcast to it. `Some(None)` means the shapes are identical.
#[allow(clippy::option_option)]
fn broadcast_map(out_shape: &[usize], b: &[usize]) -> Option<Option<Vec<usize>>> {
    if out_shape == b {
        return Some(None);
    }
    if b.len() > out_shape.len() {
        return None;
    }
    let offset = out_shape.len() - b.len();
    for (i, &e) in b.iter().enumerate() {
        if e != 1 && e != out_shape[offset + i] {
            return None;
        }
    }
    // Strides of b, zeroed on stretched axes, aligned to out_shape.
    let mut strides = vec![0usize; out_shape.len()];
    let mut acc = 1;
    for i in (0..b.len()).rev() {
        if b[i] != 1 {
            strides[offset + i] = acc;
        }
        acc *= b[i];
    }
    let numel: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut counter = vec![0usize; out_shape.len()];
    let mut cur = 0usize;
    for _ in 0..numel {
        map.push(cur);
        for ax in (0..out_shape.len()).rev() {
            counter[ax] += 1;
            cur += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            cur -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    Some(Some(map))
}

fn accumulate<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop_node(nodes: &[Node], idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>], faults: Faults) {
    let node = &nodes[idx];
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if let Some(ga) = accumulate(grads, nodes, *a) {
                gemm_nt(g, val(*b), ga, m, k, n);
            }
            if let Some(gb) = accumulate(grads, nodes, *b) {
                gemm_tn(val(*a), g, gb, m, k, n);
            }
        }
        Op::Transpose(a) => {
            let s = nodes[a.0].value.shape();
            let (m, n) = (s[0], s[1]);
            if let Some(ga) = accumulate(grads, nodes, *a) {
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }
        }
        Op::Binary(kind, a, b, map) => {
            let bidx = |i: usize| map.as_ref().map_or(i, |m| m[i]);
            let (xa, xb) = (val(*a), val(*b));
            if let Some(ga) = accumulate(grads, nodes, *a) {
                for (i, gi) in ga.iter_mut().enumerate() {
                    *gi += match kind {
                        BinaryKind::Add | BinaryKind::Sub => g[i],
                        BinaryKind::Mul => g[i] * xb[bidx(i)],
                        BinaryKind::Div => g[i] / xb[bidx(i)],
                    };
                }
            }
            if let Some(gb) = accumulate(grads, nodes, *b) {
                for (i, &gi) in g.iter().enumerate() {
                    let j = bidx(i);
                    gb[j] += match kind {
                        BinaryKind::Add => gi,
                        BinaryKind::Sub => -gi,
                        BinaryKind::Mul => gi * xa[i],
                        BinaryKind::Div => -gi * xa[i] / (xb[j] * xb[j]),
                    };
                }
            }
        }
        Op::Scale(a, factor) => {
            if let Some(ga) = accumulate(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += factor * y);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(ga) = accumulate(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
        }
        Op::Reduce(kind, a, axis) => {
            let (outer, ext, inner) = split_axis(nodes[a.0].value.shape(), *axis);
            let factor = match kind {
                ReduceKind::Sum => 1.0,
                ReduceKind::Mean => 1.0 / ext as f64,
            };
            if let Some(ga) = accumulate(grads, nodes, *a) {
                for o in 0..outer {
                    for j in 0..ext {
                        let base = (o * ext + j) * inner;
                        for i in 0..inner {
                            ga[base + i] += factor * g[o * inner + i];
                        }
                    }
                }
            }
        }
        Op::Softmax(a, axis) => {
            let (outer, ext, inner) = split_axis(node.value.shape(), *axis);
            let y = node.value.data();
            if let Some(ga) = accumulate(grads, nodes, *a) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * ext + j) * inner + i;
                        let dot: f64 = (0..ext).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..ext {
                            ga[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::Gelu(a) => {
            let x = val(*a);
            if let Some(ga) = accumulate(grads, nodes, *a) {
                for ((gi, &xi), &gy) in ga.iter_mut().zip(x).zip(g) {
                    *gi += gy * gelu_grad_scalar(xi);
                }
            }
        }
        Op::Slice { a, axis, start } => {
            let (outer, ext, inner) = split_axis(nodes[a.0].value.shape(), *axis);
            let len = node.value.shape()[*axis];
            if let Some(ga) = accumulate(grads, nodes, *a) {
                for o in 0..outer {
                    let dst = (o * ext + start) * inner;
                    let src = o * len * inner;
                    for t in 0..len * inner {
                        ga[dst + t] += g[src + t];
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_axis(node.value.shape(), *axis);
            let mut offset = 0;
            for p in parts {
                let ext = nodes[p.0].value.shape()[*axis];
                if let Some(gp) = accumulate(grads, nodes, *p) {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * ext * inner;
                        for t in 0..ext * inner {
                            gp[dst + t] += g[src + t];
                        }
                    }
                }
                offset += ext;
            }
        }
        Op::Gather { table, ids } => {
            let row = node.value.len() / ids.len();
            if let Some(gt) = accumulate(grads, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for t in 0..row {
                        gt[id * row + t] += g[r * row + t];
                    }
                }
            }
        }
        Op::LayerNorm { a, rstd } => {
            let y = node.value.data();
            let d = *node.value.shape().last().unwrap();
            if let Some(ga) = accumulate(grads, nodes, *a) {
                for (r, &s) in rstd.iter().enumerate() {
                    let gy = &g[r * d..(r + 1) * d];
                    let yh = &y[r * d..(r + 1) * d];
                    let mean_g = gy.iter().sum::<f64>() / d as f64;
                    let mean_gy = gy.iter().zip(yh).map(|(p, q)| p * q).sum::<f64>() / d as f64;
                    for c in 0..d {
                        ga[r * d + c] += s * (gy[c] - mean_g - yh[c] * mean_gy);
                    }
                }
            }
        }
        Op::EquLayerNorm { a, saved } => {
            let d = *node.value.shape().last().unwrap();
            if let Some(ga) = accumulate(grads, nodes, *a) {
                for (i, sv) in saved.iter().enumerate() {
                    let gy = &g[i * 3 * d..(i + 1) * 3 * d];
                    whiten_backward(sv, gy, d, &mut ga[i * 3 * d..(i + 1) * 3 * d]);
                }
            }
        }
        Op::GaussianBasis {
            x,
            gamma,
            beta,
            mu,
            sigma,
        } => {
            let k = nodes[mu.0].value.len();
            let m = nodes[x.0].value.len();
            let (xs, gs, bs, ms, ss) = (val(*x), val(*gamma), val(*beta), val(*mu), val(*sigma));
            let out = node.value.data();
            // dψ/du and dψ/ds per entry, then chain through u = (γx+β−μ)/s.
            let mut d_arg = vec![0.0; m];
            let mut d_mu = vec![0.0; k];
            let mut d_sigma = vec![0.0; k];
            for i in 0..m {
                let arg = gs[i] * xs[i] + bs[i];
                for j in 0..k {
                    let raw = ss[j];
                    let s = raw.abs().max(MIN_BASIS_SCALE);
                    let u = (arg - ms[j]) / s;
                    let psi = out[i * k + j];
                    let gi = g[i * k + j];
                    let dpsi_du = -psi * u;
                    d_arg[i] += gi * dpsi_du / s;
                    d_mu[j] -= gi * dpsi_du / s;
                    if raw.abs() > MIN_BASIS_SCALE {
                        let dpsi_ds = -(psi / s) * (1.0 - u * u);
                        d_sigma[j] += gi * dpsi_ds * raw.signum();
                    }
                }
            }
            if let Some(gx) = accumulate(grads, nodes, *x) {
                for i in 0..m {
                    gx[i] += d_arg[i] * gs[i];
                }
            }
            if let Some(gg) = accumulate(grads, nodes, *gamma) {
                for i in 0..m {
                    gg[i] += d_arg[i] * xs[i];
                }
            }
            if let Some(gb) = accumulate(grads, nodes, *beta) {
                for i in 0..m {
                    gb[i] += d_arg[i];
                }
            }
            if let Some(gm) = accumulate(grads, nodes, *mu) {
                gm.iter_mut().zip(&d_mu).for_each(|(p, q)| *p += q);
            }
            if let Some(gsig) = accumulate(grads, nodes, *sigma) {
                gsig.iter_mut().zip(&d_sigma).for_each(|(p, q)| *p += q);
            }
        }
        Op::DotPairwise(a, b) => {
            let c = *node.value.shape().last().unwrap();
            let (xa, xb) = (val(*a), val(*b));
            let atoms = node.value.len() / c;
            for (target, other) in [(*a, xb), (*b, xa)] {
                if let Some(gt) = accumulate(grads, nodes, target) {
                    for i in 0..atoms {
                        for s in 0..3 {
                            let base = (i * 3 + s) * c;
                            for k in 0..c {
                                gt[base + k] += g[i * c + k] * other[base + k];
                            }
                        }
                    }
                }
            }
        }
        Op::ScalarProduct(a, b) => {
            let c = *node.value.shape().last().unwrap();
            let (xa, xb) = (val(*a), val(*b));
            let atoms = node.value.len() / (3 * c);
            if let Some(ga) = accumulate(grads, nodes, *a) {
                for i in 0..atoms {
                    for s in 0..3 {
                        let base = (i * 3 + s) * c;
                        for k in 0..c {
                            ga[base + k] += g[base + k] * xb[i * c + k];
                        }
                    }
                }
            }
            if let Some(gb) = accumulate(grads, nodes, *b) {
                let spatial = if faults.corrupt_scalar_product_grad { 2 } else { 3 };
                for i in 0..atoms {
                    for s in 0..spatial {
                        let base = (i * 3 + s) * c;
                        for k in 0..c {
                            gb[i * c + k] += g[base + k] * xa[base + k];
                        }
                    }
                }
            }
        }
    }
}

/// Vector-Jacobian product of one whitened 3×d slab.
///
/// With `y = U·xc`, `U = f(C)`, `f(λ) = λ^(-1/2)`:
/// `∂L/∂U = G·xcᵀ`, `∂L/∂xc = U·G + (Ḡ_C + Ḡ_Cᵀ)·xc/d`, where `Ḡ_C` comes
/// from the Daleckii-Krein divided differences of `f` in the eigenbasis.
fn whiten_backward(sv: &WhitenSaved, gy: &[f64], d: usize, out: &mut [f64]) {
    let xc = &sv.centered;
    let mut g_u = [[0.0; 3]; 3];
    for s in 0..3 {
        for t in 0..3 {
            g_u[s][t] = (0..d).map(|c| gy[s * d + c] * xc[t * d + c]).sum();
        }
    }
    let q = &sv.evecs;
    let qt = linalg::transpose(q);
    let m = linalg::mat_mul(&linalg::mat_mul(&qt, &g_u), q);
    let roots = sv.evals.map(libm::sqrt);
    let mut mf = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            // (λi^-½ − λj^-½)/(λi − λj), written without cancellation.
            let divided = -1.0 / (roots[i] * roots[j] * (roots[i] + roots[j]));
            mf[i][j] = m[i][j] * divided;
        }
    }
    let g_c = linalg::mat_mul(&linalg::mat_mul(q, &mf), &qt);
    let mut sym = [[0.0; 3]; 3];
    for s in 0..3 {
        for t in 0..3 {
            sym[s][t] = (g_c[s][t] + g_c[t][s]) / d as f64;
        }
    }
    let mut dxc = vec![0.0; 3 * d];
    for s in 0..3 {
        for t in 0..3 {
            let w_u = sv.u[t][s];
            let w_c = sym[s][t];
            for c in 0..d {
                dxc[s * d + c] += w_u * gy[t * d + c] + w_c * xc[t * d + c];
            }
        }
    }
    for s in 0..3 {
        let row = &dxc[s * d..(s + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        for c in 0..d {
            out[s * d + c] += row[c] - mean;
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Whether any gradient flowed into `v`.
    pub fn touched(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

/// Central differences `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` per coordinate.
pub fn finite_diff_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut out = vec![0.0; x.len()];
    for (i, slot) in out.iter_mut().enumerate() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        *slot = (plus - minus) / (2.0 * h);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}
