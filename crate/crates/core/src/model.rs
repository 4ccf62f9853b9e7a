//! The spatial balance attention forecaster.
//!
//! Data flow for a batch `x: [B, N, T, C]`:
//!
//! ```text
//! embed:   flatten(T, C) · W_embed + PE · W_pe                     -> [B, N, D]
//! block ℓ: gather by plan ℓ             -> [B·P, M, D]
//!          intra sublayer (masked)      -> Y        [B·P, M, D]
//!          masked mean pool             -> S        [B, P, D]
//!          inter sublayer               -> S'       [B, P, D]
//!          (Y ‖ broadcast S') · W_fuse  -> X'       [B·P, M, D]
//!          scatter to node order, add block input   -> [B, N, D]
//! head:    · W_head, reshape            -> [B, N, F, C]
//! ```
//!
//! Each sublayer is pre-norm with residuals: `u = x + Attn(LN(x))`,
//! `y = u + FFN(LN(u))`. Padded slots are re-zeroed after every sublayer.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::partition::{PartitionPlan, ScaleSeries};
use crate::tensor::{FlopCounter, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Node count.
    pub n: usize,
    /// Look-back steps.
    pub t: usize,
    /// Channels per node and step.
    pub c: usize,
    /// Forecast horizon.
    pub f: usize,
    pub d_model: usize,
    /// Number of stacked blocks.
    pub l: usize,
    pub heads: usize,
    /// Subgraph count of the first block.
    pub p0: usize,
    /// Laplacian eigenvectors per node.
    pub k_pe: usize,
    pub ffn_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { n: 64, t: 96, c: 1, f: 12, d_model: 512, l: 3, heads: 4, p0: 8, k_pe: 8, ffn_mult: 4 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads));
        }
        for (name, v) in [("n", self.n), ("t", self.t), ("c", self.c), ("f", self.f), ("l", self.l)] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        for (name, v) in [("p0", self.p0), ("k_pe", self.k_pe), ("ffn_mult", self.ffn_mult)] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        if self.p0 > self.n {
            return fail(format!("p0 = {} exceeds the node count {}", self.p0, self.n));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    /// Closed-form number of learnable scalars.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let r = self.ffn_mult;
        let sublayer = 3 * d * d + 4 * d + 2 * r * d * d + r * d + d;
        let block = 2 * sublayer + 2 * d * d;
        self.t * self.c * d + self.k_pe * d + self.l * block + d * self.f * self.c
    }
}

/// Parameters of one pre-norm attention + FFN sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct Sublayer<T> {
    pub ln_attn_gamma: T,
    pub ln_attn_beta: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub ln_ffn_gamma: T,
    pub ln_ffn_beta: T,
    pub ffn_w1: T,
    pub ffn_b1: T,
    pub ffn_w2: T,
    pub ffn_b2: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SbaBlock<T> {
    pub intra: Sublayer<T>,
    pub inter: Sublayer<T>,
    /// `2D×D` fusion map.
    pub fuse: T,
}

/// All weights of the model, generic over storage (`Tensor`) or tape handles (`Var`).
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    /// `(T·C)×D`.
    pub embed: T,
    /// `k_pe×D`.
    pub pe_proj: T,
    pub blocks: Vec<SbaBlock<T>>,
    /// `D×(F·C)`.
    pub head: T,
}

pub type ModelParams = Weights<Tensor>;
pub type BoundParams = Weights<Var>;

const SUBLAYER_FIELDS: [&str; 11] = [
    "ln_attn.gamma",
    "ln_attn.beta",
    "wq",
    "wk",
    "wv",
    "ln_ffn.gamma",
    "ln_ffn.beta",
    "ffn.w1",
    "ffn.b1",
    "ffn.w2",
    "ffn.b2",
];

impl<T> Sublayer<T> {
    fn fields(&self) -> [&T; 11] {
        [
            &self.ln_attn_gamma,
            &self.ln_attn_beta,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.ln_ffn_gamma,
            &self.ln_ffn_beta,
            &self.ffn_w1,
            &self.ffn_b1,
            &self.ffn_w2,
            &self.ffn_b2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut T; 11] {
        [
            &mut self.ln_attn_gamma,
            &mut self.ln_attn_beta,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.ln_ffn_gamma,
            &mut self.ln_ffn_beta,
            &mut self.ffn_w1,
            &mut self.ffn_b1,
            &mut self.ffn_w2,
            &mut self.ffn_b2,
        ]
    }

    fn from_fields(mut next: impl FnMut() -> T) -> Self {
        Self {
            ln_attn_gamma: next(),
            ln_attn_beta: next(),
            wq: next(),
            wk: next(),
            wv: next(),
            ln_ffn_gamma: next(),
            ln_ffn_beta: next(),
            ffn_w1: next(),
            ffn_b1: next(),
            ffn_w2: next(),
            ffn_b2: next(),
        }
    }
}

impl<T> Weights<T> {
    /// Every tensor with its dotted name, in manifest order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![(String::from("embed"), &self.embed), (String::from("pe_proj"), &self.pe_proj)];
        for (i, block) in self.blocks.iter().enumerate() {
            for (part, sub) in [("intra", &block.intra), ("inter", &block.inter)] {
                for (field, t) in SUBLAYER_FIELDS.iter().zip(sub.fields()) {
                    out.push((format!("blocks.{i}.{part}.{field}"), t));
                }
            }
            out.push((format!("blocks.{i}.fuse"), &block.fuse));
        }
        out.push((String::from("head"), &self.head));
        out
    }

    /// Mutable references in manifest order.
    pub fn iter_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.embed, &mut self.pe_proj];
        for block in &mut self.blocks {
            out.extend(block.intra.fields_mut());
            out.extend(block.inter.fields_mut());
            out.push(&mut block.fuse);
        }
        out.push(&mut self.head);
        out
    }

    pub fn iter(&self) -> Vec<&T> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    /// Applies `f` to every entry in manifest order.
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Weights<U> {
        let mut items = self.iter().into_iter().map(&mut f).collect::<Vec<_>>().into_iter();
        Weights::from_sequence(self.blocks.len(), &mut || items.next().expect("same layout"))
    }

    fn from_sequence(blocks: usize, next: &mut dyn FnMut() -> T) -> Self {
        let embed = next();
        let pe_proj = next();
        let blocks = (0..blocks)
            .map(|_| SbaBlock {
                intra: Sublayer::from_fields(&mut *next),
                inter: Sublayer::from_fields(&mut *next),
                fuse: next(),
            })
            .collect();
        let head = next();
        Self { embed, pe_proj, blocks, head }
    }
}

/// Parameter names and shapes in manifest order.
pub fn manifest(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let h = cfg.ffn_mult * d;
    let sub = [
        vec![d],
        vec![d],
        vec![d, d],
        vec![d, d],
        vec![d, d],
        vec![d],
        vec![d],
        vec![d, h],
        vec![h],
        vec![h, d],
        vec![d],
    ];
    let mut shapes = vec![vec![cfg.t * cfg.c, d], vec![cfg.k_pe, d]];
    for _ in 0..cfg.l {
        shapes.extend(sub.iter().cloned());
        shapes.extend(sub.iter().cloned());
        shapes.push(vec![2 * d, d]);
    }
    shapes.push(vec![d, cfg.f * cfg.c]);
    let mut iter = shapes.into_iter();
    let layout = Weights::from_sequence(cfg.l, &mut || iter.next().expect("manifest shapes"));
    layout.named().into_iter().map(|(name, s)| (name, s.clone())).collect()
}

impl ModelParams {
    /// Fresh parameters: linear maps uniform in `±1/√fan_in`, biases zero,
    /// layer-norm gains one.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = manifest(cfg).into_iter().map(|(name, shape)| {
            if name.ends_with("gamma") {
                Tensor::ones(&shape)
            } else if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                let bound = 1.0 / libm::sqrt(shape[0] as f64);
                let numel = shape.iter().product();
                let data = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::new(&shape, data).expect("manifest shape")
            }
        });
        Ok(Weights::from_sequence(cfg.l, &mut || tensors.next().expect("manifest entry")))
    }

    /// Rebuilds parameters from tensors listed in manifest order, checking shapes.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let expected = manifest(cfg);
        if expected.len() != tensors.len() {
            return Err(Error::Contract(format!("expected {} tensors, got {}", expected.len(), tensors.len())));
        }
        for ((name, shape), t) in expected.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(shape_err("from_tensors", format!("{name}: expected {:?}, got {:?}", shape, t.shape())));
            }
        }
        let mut iter = tensors.into_iter();
        Ok(Weights::from_sequence(cfg.l, &mut || iter.next().expect("checked length")))
    }

    pub fn count(&self) -> usize {
        self.iter().iter().map(|t| t.numel()).sum()
    }

    /// Records every tensor on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        self.map(|t| tape.param(t.clone()))
    }

    /// Records every tensor on the tape as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundParams {
        self.map(|t| tape.constant(t.clone()))
    }
}

/// Optional perturbations used by invariance checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Fill padded slots with seeded noise instead of zeros right after each gather.
    pub pad_noise_seed: Option<u64>,
}

/// Tape handles recorded for one block.
#[derive(Debug, Clone, Copy)]
pub struct BlockTrace {
    /// Intra sublayer output `Y`, `[B·P, M, D]`.
    pub intra_output: Var,
    /// Inter sublayer output `S'`, `[B, P, D]`.
    pub inter_output: Var,
    /// Attention node of the intra sublayer (probabilities `[B·P, heads, M, M]`).
    pub intra_attention: Var,
    /// Attention node of the inter sublayer (probabilities `[B, heads, P, P]`).
    pub inter_attention: Var,
    pub intra_flops: FlopCounter,
    pub inter_flops: FlopCounter,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B, N, F, C]`.
    pub prediction: Var,
    pub blocks: Vec<BlockTrace>,
}

fn counter_delta(before: FlopCounter, after: FlopCounter) -> FlopCounter {
    FlopCounter { mults: after.mults - before.mults, adds: after.adds - before.adds, enabled: after.enabled }
}

/// Input embedding `flatten(x) · W_embed + pe · W_pe` for `x: [B, N, T, C]` (or `[N, T, C]`).
pub fn embed(tape: &mut Tape, x: Var, pe: Var, w: &BoundParams) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (b, n, t, c) = match shape[..] {
        [n, t, c] => (1, n, t, c),
        [b, n, t, c] => (b, n, t, c),
        _ => return Err(shape_err("embed", format!("expected [B, N, T, C], got {:?}", shape))),
    };
    let flat = tape.reshape(x, &[b, n, t * c])?;
    let e = tape.matmul(flat, w.embed)?;
    let pe_shape = tape.shape(pe);
    if pe_shape.len() != 2 || pe_shape[0] != n {
        return Err(shape_err("embed", format!("positional encoding {:?} for {n} nodes", pe_shape)));
    }
    let p = tape.matmul(pe, w.pe_proj)?;
    tape.add(e, p)
}

/// One pre-norm sublayer over `x: [G, M, D]`; returns `(output, attention node)`.
///
/// `rezero` views the output as `[B, rows, D]` and zeroes rows whose entry is `None`.
pub fn sublayer(
    tape: &mut Tape,
    x: Var,
    mask: &[bool],
    rezero: Option<&Arc<[Option<usize>]>>,
    w: &Sublayer<Var>,
    heads: usize,
) -> Result<(Var, Var)> {
    let shape = tape.shape(x).to_vec();
    let clear = |tape: &mut Tape, v: Var| -> Result<Var> {
        match rezero {
            Some(index) => {
                let masked = tape.gather_rows(v, index.len(), index.clone())?;
                tape.reshape(masked, &shape)
            }
            None => Ok(v),
        }
    };
    let h = tape.layer_norm(x, w.ln_attn_gamma, w.ln_attn_beta, LAYER_NORM_EPS)?;
    let q = tape.matmul(h, w.wq)?;
    let k = tape.matmul(h, w.wk)?;
    let v = tape.matmul(h, w.wv)?;
    let attn = tape.attention(q, k, v, mask, heads)?;
    let u = tape.add(x, attn)?;
    let u = clear(tape, u)?;
    let h2 = tape.layer_norm(u, w.ln_ffn_gamma, w.ln_ffn_beta, LAYER_NORM_EPS)?;
    let hidden = tape.matmul(h2, w.ffn_w1)?;
    let hidden = tape.add(hidden, w.ffn_b1)?;
    let hidden = tape.gelu(hidden)?;
    let ff = tape.matmul(hidden, w.ffn_w2)?;
    let ff = tape.add(ff, w.ffn_b2)?;
    let y = tape.add(u, ff)?;
    Ok((clear(tape, y)?, attn))
}

fn batch_of(tape: &Tape, v: Var, rows: usize) -> usize {
    let t = tape.value(v);
    t.numel() / (rows * t.last_dim()).max(1)
}

fn repeat_mask(mask: &[bool], times: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(mask.len() * times);
    for _ in 0..times {
        out.extend_from_slice(mask);
    }
    out
}

/// Intra-subgraph sublayer over the padded layout `xp: [B·P, M, D]` (or `[P, M, D]`).
pub fn intra_attention(
    tape: &mut Tape,
    xp: Var,
    plan: &PartitionPlan,
    w: &Sublayer<Var>,
    heads: usize,
) -> Result<(Var, Var)> {
    let d = tape.value(xp).last_dim();
    let b = batch_of(tape, xp, plan.p * plan.m);
    let xp = tape.reshape(xp, &[b * plan.p, plan.m, d])?;
    let mask = repeat_mask(&plan.mask(), b);
    sublayer(tape, xp, &mask, Some(plan.valid_slots()), w, heads)
}

/// Masked mean of each subgraph: `[B·P, M, D] -> [B, P, D]`.
pub fn pool_subgraphs(tape: &mut Tape, y: Var, plan: &PartitionPlan) -> Result<Var> {
    let d = tape.value(y).last_dim();
    let b = batch_of(tape, y, plan.p * plan.m);
    let y = tape.reshape(y, &[b * plan.p, plan.m, d])?;
    let mask = repeat_mask(&plan.mask(), b);
    let s = tape.masked_mean(y, &mask)?;
    tape.reshape(s, &[b, plan.p, d])
}

/// Full attention among subgraph summaries `s: [B, P, D]`.
pub fn inter_attention(tape: &mut Tape, s: Var, w: &Sublayer<Var>, heads: usize) -> Result<(Var, Var)> {
    let shape = tape.shape(s).to_vec();
    let (b, p) = match shape[..] {
        [p, _] => (1, p),
        [b, p, _] => (b, p),
        _ => return Err(shape_err("inter_attention", format!("expected [B, P, D], got {:?}", shape))),
    };
    let d = shape[shape.len() - 1];
    let s = tape.reshape(s, &[b, p, d])?;
    let mask = vec![true; b * p];
    sublayer(tape, s, &mask, None, w, heads)
}

/// `(Y ‖ S' broadcast over M) · W_fuse`, padded rows zeroed; returns `[B, P·M, D]`.
pub fn fuse(tape: &mut Tape, y: Var, s_prime: Var, w_fuse: Var, plan: &PartitionPlan) -> Result<Var> {
    let d = tape.value(y).last_dim();
    let b = batch_of(tape, y, plan.p * plan.m);
    if tape.value(s_prime).numel() != b * plan.p * d {
        return Err(shape_err("fuse", format!("summaries {:?} do not match {b}x{}x{d}", tape.shape(s_prime), plan.p)));
    }
    let y = tape.reshape(y, &[b, plan.p * plan.m, d])?;
    let owner: Arc<[Option<usize>]> = (0..plan.p * plan.m).map(|slot| Some(slot / plan.m)).collect();
    let broadcast = tape.gather_rows(s_prime, plan.p, owner)?;
    let joined = tape.concat(y, broadcast)?;
    let mixed = tape.matmul(joined, w_fuse)?;
    tape.gather_rows(mixed, plan.p * plan.m, plan.valid_slots().clone())
}

/// One spatial balance attention block with its residual, `x: [B, N, D] -> [B, N, D]`.
pub fn sba_block(
    tape: &mut Tape,
    x: Var,
    plan: &PartitionPlan,
    w: &SbaBlock<Var>,
    heads: usize,
    options: &ForwardOptions,
) -> Result<(Var, BlockTrace)> {
    let shape = tape.shape(x).to_vec();
    let (b, n, d) = match shape[..] {
        [n, d] => (1, n, d),
        [b, n, d] => (b, n, d),
        _ => return Err(shape_err("sba_block", format!("expected [B, N, D], got {:?}", shape))),
    };
    if n != plan.n {
        return Err(shape_err("sba_block", format!("input has {n} nodes, plan covers {}", plan.n)));
    }
    let mut xp = tape.gather_rows(x, n, plan.gather().clone())?;
    if let Some(seed) = options.pad_noise_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut noise = Tensor::zeros(&[b, plan.p * plan.m, d]);
        for bi in 0..b {
            for (slot, node) in plan.gather().iter().enumerate() {
                if node.is_none() {
                    for j in 0..d {
                        noise.set(&[bi, slot, j], rng.random_range(-10.0..10.0));
                    }
                }
            }
        }
        let noise = tape.constant(noise);
        xp = tape.add(xp, noise)?;
    }

    let before = tape.flops().attention;
    let (y, intra_attention) = intra_attention(tape, xp, plan, &w.intra, heads)?;
    let mid = tape.flops().attention;
    let s = pool_subgraphs(tape, y, plan)?;
    let (s_prime, inter_attention) = inter_attention(tape, s, &w.inter, heads)?;
    let after = tape.flops().attention;
    let fused = fuse(tape, y, s_prime, w.fuse, plan)?;

    let back: Arc<[Option<usize>]> = plan.slot_of().into_iter().map(Some).collect();
    let reverted = tape.gather_rows(fused, plan.p * plan.m, back)?;
    let reverted = tape.reshape(reverted, &shape)?;
    let out = tape.add(reverted, x)?;
    let trace = BlockTrace {
        intra_output: y,
        inter_output: s_prime,
        intra_attention,
        inter_attention,
        intra_flops: counter_delta(before, mid),
        inter_flops: counter_delta(mid, after),
    };
    Ok((out, trace))
}

/// Full forward pass: embed, `L` blocks over `series.plans`, linear head.
pub fn forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    x: Var,
    pe: Var,
    series: &ScaleSeries,
    w: &BoundParams,
    options: &ForwardOptions,
) -> Result<ForwardOutput> {
    if series.plans.len() < cfg.l || w.blocks.len() != cfg.l {
        return Err(Error::Contract(format!(
            "config needs {} blocks; series has {} plans, parameters have {} blocks",
            cfg.l,
            series.plans.len(),
            w.blocks.len()
        )));
    }
    let shape = tape.shape(x).to_vec();
    let b = match shape[..] {
        [n, t, c] if n == cfg.n && t == cfg.t && c == cfg.c => 1,
        [b, n, t, c] if n == cfg.n && t == cfg.t && c == cfg.c => b,
        _ => {
            return Err(shape_err(
                "forward",
                format!("input {:?} does not match [B, {}, {}, {}]", shape, cfg.n, cfg.t, cfg.c),
            ))
        }
    };
    let mut h = embed(tape, x, pe, w)?;
    let mut blocks = Vec::with_capacity(cfg.l);
    for (plan, block) in series.plans.iter().zip(&w.blocks) {
        let (next, trace) = sba_block(tape, h, plan, block, cfg.heads, options)?;
        h = next;
        blocks.push(trace);
    }
    let out = tape.matmul(h, w.head)?;
    let mut out_shape = vec![cfg.n, cfg.f, cfg.c];
    if shape.len() == 4 {
        out_shape.insert(0, b);
    }
    let prediction = tape.reshape(out, &out_shape)?;
    Ok(ForwardOutput { prediction, blocks })
}

/// Inference without gradient tracking; returns the `[.., N, F, C]` forecast.
pub fn predict(
    cfg: &ModelConfig,
    params: &ModelParams,
    x: &Tensor,
    pe: &Tensor,
    series: &ScaleSeries,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let w = params.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let pv = tape.constant(pe.clone());
    let out = forward(&mut tape, cfg, xv, pv, series, &w, &ForwardOptions::default())?;
    Ok(tape.value(out.prediction).clone())
}

/// Mean absolute error over every entry (`1/(N·F·C)` per sample).
pub fn mae_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(shape_err("mae_loss", format!("{:?} vs {:?}", tape.shape(pred), tape.shape(target))));
    }
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff)?;
    tape.mean(abs)
}

/// Closed-form attention cost of one grouped attention call over the padded layout.
pub fn attention_flops(groups: usize, tokens: usize, d_model: usize, heads: usize) -> FlopCounter {
    let (g, m, d, h) = (groups as u64, tokens as u64, d_model as u64, heads as u64);
    let dh = d / h;
    FlopCounter {
        mults: g * h * 2 * m * m * dh,
        adds: g * h * (m * m * (dh - 1) + m * dh * m.saturating_sub(1)),
        enabled: true,
    }
}

/// Per-block attention cost: closed form next to the instrumented count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockFlops {
    pub p: usize,
    pub m: usize,
    pub intra_closed_form: u64,
    pub inter_closed_form: u64,
    pub intra_measured: u64,
    pub inter_measured: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub blocks: Vec<BlockFlops>,
    /// Single full attention over all `N` nodes, for comparison.
    pub dense_closed_form: u64,
    /// Every instrumented FLOP of the forward pass (attention and dense products).
    pub forward_measured: u64,
}

impl FlopsReport {
    pub fn attention_closed_form(&self) -> u64 {
        self.blocks.iter().map(|b| b.intra_closed_form + b.inter_closed_form).sum()
    }

    pub fn attention_measured(&self) -> u64 {
        self.blocks.iter().map(|b| b.intra_measured + b.inter_measured).sum()
    }

    /// Relative gap between measured and closed-form attention totals.
    pub fn relative_gap(&self) -> f64 {
        let closed = self.attention_closed_form() as f64;
        (self.attention_measured() as f64 - closed).abs() / closed.max(1.0)
    }
}

/// Attention FLOPs of one forward pass (batch 1): closed form and counted.
pub fn flops_estimate(cfg: &ModelConfig, series: &ScaleSeries) -> Result<FlopsReport> {
    let params = ModelParams::init(cfg, 0)?;
    let mut tape = Tape::instrumented();
    let w = params.bind_frozen(&mut tape);
    let x = tape.constant(Tensor::zeros(&[cfg.n, cfg.t, cfg.c]));
    let pe = tape.constant(Tensor::zeros(&[cfg.n, cfg.k_pe]));
    let out = forward(&mut tape, cfg, x, pe, series, &w, &ForwardOptions::default())?;
    let blocks = series
        .plans
        .iter()
        .zip(&out.blocks)
        .map(|(plan, trace)| BlockFlops {
            p: plan.p,
            m: plan.m,
            intra_closed_form: attention_flops(plan.p, plan.m, cfg.d_model, cfg.heads).total(),
            inter_closed_form: attention_flops(1, plan.p, cfg.d_model, cfg.heads).total(),
            intra_measured: trace.intra_flops.total(),
            inter_measured: trace.inter_flops.total(),
        })
        .collect();
    Ok(FlopsReport {
        blocks,
        dense_closed_form: attention_flops(1, cfg.n, cfg.d_model, cfg.heads).total(),
        forward_measured: tape.flops().total(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig { n: 6, t: 3, c: 2, f: 2, d_model: 8, l: 2, heads: 2, p0: 2, k_pe: 2, ffn_mult: 2 }
    }

    #[test]
    fn manifest_matches_closed_form_count() {
        for cfg in [small_cfg(), ModelConfig::default()] {
            let total: usize = manifest(&cfg).iter().map(|(_, s)| s.iter().product::<usize>()).sum();
            assert_eq!(total, cfg.param_count());
        }
        let params = ModelParams::init(&small_cfg(), 1).unwrap();
        assert_eq!(params.count(), small_cfg().param_count());
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "embed");
        assert_eq!(names[2], "blocks.0.intra.ln_attn.gamma");
        assert_eq!(names.last().unwrap(), "head");
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_cfg();
        cfg.heads = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = small_cfg();
        cfg.f = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn from_tensors_round_trip() {
        let cfg = small_cfg();
        let params = ModelParams::init(&cfg, 3).unwrap();
        let tensors: Vec<Tensor> = params.iter().into_iter().cloned().collect();
        assert_eq!(ModelParams::from_tensors(&cfg, tensors.clone()).unwrap(), params);
        let mut bad = tensors;
        bad.pop();
        assert!(ModelParams::from_tensors(&cfg, bad).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelParams::init(&small_cfg(), 9).unwrap();
        let b = ModelParams::init(&small_cfg(), 9).unwrap();
        let c = ModelParams::init(&small_cfg(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn mae_loss_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2, 3, 1], 2.0));
        let b = tape.constant(Tensor::full(&[2, 3, 1], 1.0));
        let l = mae_loss(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let l = mae_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
        let c = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(mae_loss(&mut tape, a, c).is_err());
    }

    #[test]
    fn attention_flops_scale_quadratically_in_tokens() {
        let a = attention_flops(4, 16, 32, 4);
        let b = attention_flops(4, 32, 32, 4);
        assert_eq!(b.mults, 4 * a.mults);
    }
}
