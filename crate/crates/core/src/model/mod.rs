//! The stacked two-stream model: input layer, blocks, heads.

mod config;
pub mod layers;
mod params;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

pub use config::{Ablation, DropoutRates, ModelConfig, Mutation, SymmetryMode};
pub use params::{ParamId, ParamStore};

use crate::attention::{
    equ_cross_attn, equ_self_attn, inv_cross_attn, inv_self_attn, AttnOptions, CrossAttnVars, Dropout,
    SelfAttnVars,
};
use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{
    basis_on_tape, mean_center, pairwise_distances, structural_bias_on_tape, type_pair_ids, BasisVars,
    MolecularSystem,
};
use crate::linalg::{norm, Vec3};
use crate::rng::{normal, seeded, uniform, SeededRng};
use crate::tensor::Tensor;
use layers::InvHeadVars;

/// Output of the encoder: `z_inv: [n, d]`, `z_equ: [n, 3, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamPair {
    pub z_inv: Tensor,
    pub z_equ: Tensor,
}

/// Tape handles of the two streams.
#[derive(Clone, Copy, Debug)]
pub struct StreamVars {
    pub z_inv: Var,
    pub z_equ: Var,
}

#[derive(Clone, Copy, Debug)]
struct BasisIds {
    mu: ParamId,
    sigma: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct SelfIds {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_o: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct CrossIds {
    w_q: ParamId,
    w_k1: ParamId,
    w_k2: ParamId,
    w_v1: ParamId,
    w_v2: ParamId,
    w_o: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct BlockIds {
    inv_ln: [(ParamId, ParamId); 3],
    equ_ln: [ParamId; 3],
    inv_self: SelfIds,
    equ_self: SelfIds,
    inv_cross: CrossIds,
    equ_cross: CrossIds,
    inv_ffn: (ParamId, ParamId),
    equ_ffn: (ParamId, ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct Layout {
    embed: ParamId,
    pos: (BasisIds, ParamId),
    vel: Option<(BasisIds, ParamId)>,
    bias: (BasisIds, ParamId, ParamId),
    blocks: Vec<BlockIds>,
    head: ParamId,
    inv_head: Option<[ParamId; 4]>,
}

/// How a fresh tensor is filled.
#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Uniform(f64, f64),
    Const(f64),
    /// Zero for training; random for audits.
    Zero,
}

struct Builder<'a> {
    store: ParamStore,
    rng: SeededRng,
    randomize: bool,
    _cfg: &'a ModelConfig,
}

impl Builder<'_> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        let n: usize = shape.iter().product();
        let fan = shape.first().copied().unwrap_or(1).max(1) as f64;
        let rng = &mut self.rng;
        let data: Vec<f64> = match init {
            Init::Normal(std) => (0..n).map(|_| std * normal(rng)).collect(),
            Init::Uniform(lo, hi) => (0..n).map(|_| uniform(rng, lo, hi)).collect(),
            Init::Const(c) if self.randomize => (0..n).map(|_| c + 0.2 * normal(rng)).collect(),
            Init::Const(c) => vec![c; n],
            Init::Zero if self.randomize => (0..n).map(|_| normal(rng) / libm::sqrt(fan)).collect(),
            Init::Zero => vec![0.0; n],
        };
        self.store.push(name, Tensor::new(shape, data).expect("positive extents"))
    }

    fn basis(&mut self, prefix: &str, k: usize, rows: usize) -> BasisIds {
        BasisIds {
            mu: self.add(format!("{prefix}.mu"), &[k], Init::Uniform(0.0, 3.0)),
            sigma: self.add(format!("{prefix}.sigma"), &[k], Init::Uniform(0.5, 3.0)),
            gamma: self.add(format!("{prefix}.gamma"), &[rows, 1], Init::Const(1.0)),
            beta: self.add(format!("{prefix}.beta"), &[rows, 1], Init::Const(0.0)),
        }
    }

    fn proj(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        self.add(name, &[rows, cols], Init::Normal(1.0 / libm::sqrt(rows as f64)))
    }

    fn self_attn(&mut self, prefix: &str, d: usize) -> SelfIds {
        SelfIds {
            w_q: self.proj(format!("{prefix}.w_q"), d, d),
            w_k: self.proj(format!("{prefix}.w_k"), d, d),
            w_v: self.proj(format!("{prefix}.w_v"), d, d),
            w_o: self.add(format!("{prefix}.w_o"), &[d, d], Init::Zero),
        }
    }

    fn cross_attn(&mut self, prefix: &str, d: usize) -> CrossIds {
        CrossIds {
            w_q: self.proj(format!("{prefix}.w_q"), d, d),
            w_k1: self.proj(format!("{prefix}.w_k1"), d, d),
            w_k2: self.proj(format!("{prefix}.w_k2"), d, d),
            w_v1: self.proj(format!("{prefix}.w_v1"), d, d),
            w_v2: self.proj(format!("{prefix}.w_v2"), d, d),
            w_o: self.add(format!("{prefix}.w_o"), &[d, d], Init::Zero),
        }
    }
}

fn build(cfg: &ModelConfig, seed: u64, randomize: bool) -> (ParamStore, Layout) {
    let (d, r, k, v) = (cfg.width, cfg.ffn_width, cfg.kernels, cfg.vocab);
    let mut b = Builder {
        store: ParamStore::new(),
        rng: seeded(seed),
        randomize,
        _cfg: cfg,
    };
    let embed = b.add("embed.types".into(), &[v, d], Init::Normal(1.0));
    let half = if cfg.use_velocities { d / 2 } else { d };
    let pos_basis = b.basis("input.pos", k, v);
    let pos_w = b.proj("input.pos.w".into(), k, half);
    let vel = cfg.use_velocities.then(|| {
        let basis = b.basis("input.vel", k, v);
        (basis, b.proj("input.vel.w".into(), k, half))
    });
    let bias_basis = b.basis("bias", k, v * v);
    let w_d1 = b.proj("bias.w_d1".into(), k, k);
    let w_d2 = b.proj("bias.w_d2".into(), k, 1);
    let mut blocks = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = format!("block{l}");
        let mut inv_ln = [(ParamId(0), ParamId(0)); 3];
        let mut equ_ln = [ParamId(0); 3];
        for j in 0..3 {
            inv_ln[j] = (
                b.add(format!("{p}.inv_ln{}.gamma", j + 1), &[d], Init::Const(1.0)),
                b.add(format!("{p}.inv_ln{}.beta", j + 1), &[d], Init::Const(0.0)),
            );
            equ_ln[j] = b.add(format!("{p}.equ_ln{}.gamma", j + 1), &[d], Init::Const(1.0));
        }
        let inv_self = b.self_attn(&format!("{p}.inv_self"), d);
        let equ_self = b.self_attn(&format!("{p}.equ_self"), d);
        let inv_cross = b.cross_attn(&format!("{p}.inv_cross"), d);
        let equ_cross = b.cross_attn(&format!("{p}.equ_cross"), d);
        let inv_ffn = (
            b.proj(format!("{p}.inv_ffn.w1"), d, r),
            b.proj(format!("{p}.inv_ffn.w2"), r, d),
        );
        let equ_ffn = (
            b.proj(format!("{p}.equ_ffn.w_up"), d, r),
            b.proj(format!("{p}.equ_ffn.w_gate"), d, r),
            b.proj(format!("{p}.equ_ffn.w_down"), r, d),
        );
        blocks.push(BlockIds {
            inv_ln,
            equ_ln,
            inv_self,
            equ_self,
            inv_cross,
            equ_cross,
            inv_ffn,
            equ_ffn,
        });
    }
    let head = b.add("head.w".into(), &[d, 1], Init::Zero);
    let inv_head = cfg.invariant_head.then(|| {
        [
            b.proj("inv_head.w1".into(), d, d),
            b.add("inv_head.b1".into(), &[d], Init::Const(0.0)),
            b.add("inv_head.w2".into(), &[d, 1], Init::Zero),
            b.add("inv_head.b2".into(), &[1], Init::Const(0.0)),
        ]
    });
    let layout = Layout {
        embed,
        pos: (pos_basis, pos_w),
        vel,
        bias: (bias_basis, w_d1, w_d2),
        blocks,
        head,
        inv_head,
    };
    (b.store, layout)
}

/// Mutable per-pass randomness: `None` disables dropout and drop-path.
type PassRng<'r> = Option<&'r mut SeededRng>;

fn dropout<'a>(rng: &'a mut PassRng<'_>, rate: f64) -> Option<Dropout<'a>> {
    match rng {
        Some(r) if rate > 0.0 => Some(Dropout { rate, rng: r }),
        _ => None,
    }
}

fn apply_mask(tape: &mut Tape, x: Var, rng: &mut PassRng<'_>, rate: f64, shape: &[usize]) -> Result<Var> {
    match dropout(rng, rate) {
        Some(mut d) => {
            let m = tape.constant(d.mask(shape));
            tape.mul(x, m)
        }
        None => Ok(x),
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl Model {
    /// Fresh model for training: residual output projections and the
    /// position head start at zero.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (params, layout) = build(&config, config.seed, false);
        Ok(Model { config, params, layout })
    }

    /// Every tensor drawn at random (no zero or unit initializers), so that
    /// symmetry audits exercise every path.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (params, layout) = build(&config, seed, true);
        Ok(Model { config, params, layout })
    }

    /// Rebuilds a model from a configuration and saved `(name, tensor)`
    /// pairs in layout order.
    pub fn from_params(config: ModelConfig, values: Vec<(String, Tensor)>) -> Result<Self> {
        let mut m = Model::new(config)?;
        m.params.load(values)?;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Mutable access for knobs that do not change the parameter layout
    /// (dropout, ablation, mutation, symmetry mode).
    pub fn config_mut(&mut self) -> &mut ModelConfig {
        &mut self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Switches to E(3) mode (centered equivariant projections).
    pub fn e3_mode_transforms(mut self) -> Self {
        self.config.symmetry = SymmetryMode::E3;
        self
    }

    /// Id of the named parameter.
    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.find(name)
    }

    fn check_system(&self, sys: &MolecularSystem) -> Result<()> {
        sys.validate()?;
        sys.check_vocabulary(self.config.vocab)?;
        if self.config.use_velocities && sys.velocities.is_none() {
            return Err(Error::Input("model reads velocities but the system has none".into()));
        }
        Ok(())
    }

    /// `r̂ ⊗ g(‖r‖)` for a list of vectors: `[n, 3, c]`.
    fn directional(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        (basis, w): (BasisIds, ParamId),
        vectors: &[Vec3],
        types: &[usize],
    ) -> Result<Var> {
        let n = vectors.len();
        let norms: Vec<f64> = vectors.iter().map(norm).collect();
        let bv = BasisVars {
            mu: vars[basis.mu.0],
            sigma: vars[basis.sigma.0],
            gamma: vars[basis.gamma.0],
            beta: vars[basis.beta.0],
        };
        let x = tape.constant(Tensor::new(&[n], norms.clone())?);
        let psi = basis_on_tape(tape, x, types, &bv)?;
        let g = tape.matmul(psi, vars[w.0])?;
        let c = tape.shape(g)[1];
        let g = tape.reshape(g, &[n, 1, c])?;
        let mut dirs = vec![0.0; n * 3 * c];
        for (i, (v, &len)) in vectors.iter().zip(&norms).enumerate() {
            if len == 0.0 {
                continue;
            }
            for s in 0..3 {
                let u = v[s] / len;
                dirs[(i * 3 + s) * c..(i * 3 + s + 1) * c].fill(u);
            }
        }
        let dirs = tape.constant(Tensor::new(&[n, 3, c], dirs)?);
        tape.mul(dirs, g)
    }

    fn input_layer_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        sys: &MolecularSystem,
        rng: &mut PassRng<'_>,
    ) -> Result<StreamVars> {
        let cfg = &self.config;
        let (n, d) = (sys.len(), cfg.width);
        let z_inv = tape.gather(vars[self.layout.embed.0], &sys.types)?;
        let z_inv = apply_mask(tape, z_inv, rng, cfg.dropout.embedding, &[n, d])?;
        let positions = if cfg.mutation == Some(Mutation::UncenteredPositions) {
            sys.positions.clone()
        } else {
            mean_center(&sys.positions)
        };
        let mut z_equ = self.directional(tape, vars, self.layout.pos, &positions, &sys.types)?;
        if let Some(vel) = self.layout.vel {
            let velocities = sys
                .velocities
                .as_ref()
                .ok_or_else(|| Error::Input("model reads velocities but the system has none".into()))?;
            let zv = self.directional(tape, vars, vel, velocities, &sys.types)?;
            z_equ = tape.concat(&[z_equ, zv], 2)?;
        }
        let mut z_equ = apply_mask(tape, z_equ, rng, cfg.dropout.embedding, &[n, 1, d])?;
        if cfg.mutation == Some(Mutation::GeluOnEqu) {
            z_equ = tape.gelu(z_equ);
        }
        Ok(StreamVars { z_inv, z_equ })
    }

    fn bias_on_tape(&self, tape: &mut Tape, vars: &[Var], sys: &MolecularSystem) -> Result<Option<Var>> {
        if !self.config.ablation.structural_bias {
            return Ok(None);
        }
        let n = sys.len();
        let distances = if self.config.mutation == Some(Mutation::BiasFromRawCoordinates) {
            let mut m = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    m[i * n + j] = sys.positions[i][0] - sys.positions[j][0];
                }
            }
            Tensor::new(&[n, n], m)?
        } else {
            pairwise_distances(&sys.positions)
        };
        let (basis, w1, w2) = self.layout.bias;
        let bv = BasisVars {
            mu: vars[basis.mu.0],
            sigma: vars[basis.sigma.0],
            gamma: vars[basis.gamma.0],
            beta: vars[basis.beta.0],
        };
        let pairs = type_pair_ids(&sys.types, self.config.vocab);
        structural_bias_on_tape(tape, &distances, &pairs, &bv, vars[w1.0], vars[w2.0]).map(Some)
    }

    /// Adds a residual branch, applying hidden dropout and drop-path.
    fn residual(
        &self,
        tape: &mut Tape,
        base: Var,
        branch: Var,
        equivariant: bool,
        rng: &mut PassRng<'_>,
    ) -> Result<Var> {
        let shape = tape.shape(branch).to_vec();
        let mask_shape = if equivariant {
            vec![shape[0], 1, shape[2]]
        } else {
            shape
        };
        let mut branch = apply_mask(tape, branch, rng, self.config.dropout.hidden, &mask_shape)?;
        let p = self.config.drop_path;
        if let Some(r) = rng.as_deref_mut() {
            if p > 0.0 {
                if r.random::<f64>() < p {
                    return Ok(base);
                }
                branch = tape.scale(branch, 1.0 / (1.0 - p));
            }
        }
        tape.add(base, branch)
    }

    fn block_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        ids: &BlockIds,
        s: StreamVars,
        bias: Option<Var>,
        rng: &mut PassRng<'_>,
    ) -> Result<StreamVars> {
        let cfg = &self.config;
        let ab = cfg.ablation;
        let eps = cfg.ln_eps;
        let equ_eps = cfg.equ_ln_eps;
        let inv_norm = |tape: &mut Tape, z: Var, j: usize| -> Result<Var> {
            if !ab.inv_ln {
                return Ok(z);
            }
            let (g, b) = ids.inv_ln[j];
            layers::inv_ln_on_tape(tape, z, vars[g.0], vars[b.0], eps)
        };
        let equ_norm = |tape: &mut Tape, z: Var, j: usize| -> Result<Var> {
            if !ab.equ_ln {
                return Ok(z);
            }
            layers::equ_ln_on_tape(tape, z, vars[ids.equ_ln[j].0], equ_eps)
        };
        let center = cfg.symmetry == SymmetryMode::E3;
        let split = cfg.mutation == Some(Mutation::SpatialHeadSplit);
        let attn_rate = cfg.dropout.attention;
        let self_vars = |p: &SelfIds| SelfAttnVars {
            w_q: vars[p.w_q.0],
            w_k: vars[p.w_k.0],
            w_v: vars[p.w_v.0],
            w_o: vars[p.w_o.0],
        };
        let cross_vars = |p: &CrossIds| CrossAttnVars {
            w_q: vars[p.w_q.0],
            w_k1: vars[p.w_k1.0],
            w_k2: vars[p.w_k2.0],
            w_v1: vars[p.w_v1.0],
            w_v2: vars[p.w_v2.0],
            w_o: vars[p.w_o.0],
        };
        let bias_if = |on: bool| if ab.structural_bias && on { bias } else { None };

        let StreamVars { mut z_inv, mut z_equ } = s;

        // Self-attention.
        let zi_n = inv_norm(tape, z_inv, 0)?;
        let ze_n = equ_norm(tape, z_equ, 0)?;
        if ab.inv_self_attn {
            let mut o = AttnOptions::new(cfg.heads);
            o.bias = bias_if(ab.bias_inv_self);
            o.dropout = dropout(rng, attn_rate);
            let out = inv_self_attn(tape, zi_n, &self_vars(&ids.inv_self), &mut o)?.output;
            z_inv = self.residual(tape, z_inv, out, false, rng)?;
        }
        if ab.equ_self_attn {
            let mut o = AttnOptions::new(cfg.heads);
            o.bias = bias_if(ab.bias_equ_self);
            o.equ_scale = cfg.equ_score_scale;
            o.center_equ = center;
            o.spatial_head_split = split;
            o.dropout = dropout(rng, attn_rate);
            let out = equ_self_attn(tape, ze_n, &self_vars(&ids.equ_self), &mut o)?.output;
            z_equ = self.residual(tape, z_equ, out, true, rng)?;
        }

        // Cross-attention; each direction reads the other stream's
        // normalized tensor.
        let zi_n = inv_norm(tape, z_inv, 1)?;
        let ze_n = equ_norm(tape, z_equ, 1)?;
        let (mut next_inv, mut next_equ) = (z_inv, z_equ);
        if ab.inv_cross_attn {
            let mut o = AttnOptions::new(cfg.heads);
            o.bias = bias_if(ab.bias_inv_cross);
            o.center_equ = center;
            o.dropout = dropout(rng, attn_rate);
            let out = inv_cross_attn(tape, zi_n, ze_n, &cross_vars(&ids.inv_cross), &mut o)?.output;
            next_inv = self.residual(tape, z_inv, out, false, rng)?;
        }
        if ab.equ_cross_attn {
            let mut o = AttnOptions::new(cfg.heads);
            o.bias = bias_if(ab.bias_equ_cross);
            o.equ_scale = cfg.equ_score_scale;
            o.center_equ = center;
            o.spatial_head_split = split;
            o.dropout = dropout(rng, attn_rate);
            let out = equ_cross_attn(tape, ze_n, zi_n, &cross_vars(&ids.equ_cross), &mut o)?.output;
            next_equ = self.residual(tape, z_equ, out, true, rng)?;
        }
        z_inv = next_inv;
        z_equ = next_equ;

        // Feed-forward.
        let zi_n = inv_norm(tape, z_inv, 2)?;
        let ze_n = equ_norm(tape, z_equ, 2)?;
        let act = cfg.dropout.activation;
        let (mut next_inv, mut next_equ) = (z_inv, z_equ);
        if ab.inv_ffn {
            let (w1, w2) = ids.inv_ffn;
            let out = layers::inv_ffn_on_tape(tape, zi_n, vars[w1.0], vars[w2.0], dropout(rng, act))?;
            next_inv = self.residual(tape, z_inv, out, false, rng)?;
        }
        if ab.equ_ffn {
            let (up, gate, down) = ids.equ_ffn;
            let out = layers::equ_ffn_on_tape(
                tape,
                ze_n,
                zi_n,
                vars[up.0],
                vars[gate.0],
                vars[down.0],
                center,
                dropout(rng, act),
            )?;
            next_equ = self.residual(tape, z_equ, out, true, rng)?;
        }
        Ok(StreamVars {
            z_inv: next_inv,
            z_equ: next_equ,
        })
    }

    /// Encoder on an existing tape. `vars` must come from [`ParamStore::bind`]
    /// on this model's parameters. A generator enables dropout.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        sys: &MolecularSystem,
        mut rng: Option<&mut SeededRng>,
    ) -> Result<StreamVars> {
        self.check_system(sys)?;
        let mut s = self.input_layer_on_tape(tape, vars, sys, &mut rng)?;
        let bias = if self.layout.blocks.is_empty() {
            None
        } else {
            self.bias_on_tape(tape, vars, sys)?
        };
        for ids in &self.layout.blocks {
            s = self.block_on_tape(tape, vars, ids, s, bias, &mut rng)?;
        }
        Ok(s)
    }

    /// Predicted positions `[n, 3]` on a tape.
    pub fn predict_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        sys: &MolecularSystem,
        rng: Option<&mut SeededRng>,
    ) -> Result<Var> {
        let s = self.forward_on_tape(tape, vars, sys, rng)?;
        let p0 = tape.constant(positions_tensor(&sys.positions)?);
        layers::equivariant_head_on_tape(tape, s.z_equ, p0, vars[self.layout.head.0])
    }

    /// Pooled scalar on a tape; config error when the head is disabled.
    pub fn predict_scalar_on_tape(&self, tape: &mut Tape, vars: &[Var], z_inv: Var) -> Result<Var> {
        let ids = self
            .layout
            .inv_head
            .ok_or_else(|| Error::Config("model was built without an invariant head".into()))?;
        let p = InvHeadVars {
            w1: vars[ids[0].0],
            b1: vars[ids[1].0],
            w2: vars[ids[2].0],
            b2: vars[ids[3].0],
        };
        layers::invariant_head_on_tape(tape, z_inv, &p)
    }

    /// Both output streams, dropout off.
    pub fn forward(&self, sys: &MolecularSystem) -> Result<StreamPair> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let s = self.forward_on_tape(&mut tape, &vars, sys, None)?;
        Ok(StreamPair {
            z_inv: tape.value(s.z_inv).clone(),
            z_equ: tape.value(s.z_equ).clone(),
        })
    }

    /// Input layer only, dropout off.
    pub fn input_layer(&self, sys: &MolecularSystem) -> Result<StreamPair> {
        self.check_system(sys)?;
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let s = self.input_layer_on_tape(&mut tape, &vars, sys, &mut None)?;
        Ok(StreamPair {
            z_inv: tape.value(s.z_inv).clone(),
            z_equ: tape.value(s.z_equ).clone(),
        })
    }

    /// Predicted positions `p0 + Zᴱ·w`, dropout off.
    pub fn predict_positions(&self, sys: &MolecularSystem) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let out = self.predict_on_tape(&mut tape, &vars, sys, None)?;
        Ok(tape.value(out).clone())
    }

    /// Pooled invariant scalar, dropout off.
    pub fn predict_scalar(&self, sys: &MolecularSystem) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let s = self.forward_on_tape(&mut tape, &vars, sys, None)?;
        let out = self.predict_scalar_on_tape(&mut tape, &vars, s.z_inv)?;
        Ok(tape.value(out).item())
    }

    /// Sum of squared position errors divided by `denom`, and its gradient
    /// with respect to every parameter (layout order).
    pub fn loss_and_grad(
        &self,
        sys: &MolecularSystem,
        target: &[Vec3],
        denom: f64,
        rng: Option<&mut SeededRng>,
    ) -> Result<(f64, Vec<Tensor>)> {
        self.loss_and_grad_with(Tape::new(), sys, target, denom, rng)
    }

    /// As [`Model::loss_and_grad`] on a caller-provided (possibly faulty) tape.
    pub fn loss_and_grad_with(
        &self,
        mut tape: Tape,
        sys: &MolecularSystem,
        target: &[Vec3],
        denom: f64,
        rng: Option<&mut SeededRng>,
    ) -> Result<(f64, Vec<Tensor>)> {
        if target.len() != sys.len() {
            return Err(Error::dim("loss", &[sys.len(), 3], &[target.len(), 3]));
        }
        let vars = self.params.bind(&mut tape, true);
        let pred = self.predict_on_tape(&mut tape, &vars, sys, rng)?;
        let tgt = tape.constant(positions_tensor(target)?);
        let err = tape.sub(pred, tgt)?;
        let sq = tape.mul(err, err)?;
        let total = tape.sum(sq, 1)?;
        let total = tape.sum(total, 0)?;
        let loss = tape.scale(total, 1.0 / denom);
        let value = tape.value(loss).item();
        let grads: Gradients = tape.backward(loss)?;
        Ok((value, vars.iter().map(|&v| grads.get(v)).collect()))
    }
}

/// `[n, 3]` tensor of a list of 3-vectors.
pub fn positions_tensor(points: &[Vec3]) -> Result<Tensor> {
    Tensor::new(&[points.len(), 3], points.iter().flatten().copied().collect())
}
