//! Attention cost benchmark: one SBA block against one dense attention sublayer.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use sbat_core::model::{attention_flops, sba_block, sublayer, ForwardOptions, ModelConfig, ModelParams};
use sbat_core::partition::partition_kway;
use sbat_core::pipeline::{synthetic_graph, GraphSpec};
use sbat_core::{Tape, Tensor};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    Sba,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: BenchMode,
    pub n: usize,
    pub p: usize,
    pub m: usize,
    pub d: usize,
    /// Attention FLOPs (multiplications plus additions) from the counter.
    pub flops_measured: u64,
    pub flops_closed_form: u64,
    pub wall_ms: f64,
    pub peak_bytes_estimate: u64,
}

impl BenchRow {
    pub const HEADER: &'static str = "mode,n,p,m,d,flops_measured,flops_closed_form,wall_ms,peak_bytes_estimate";

    pub fn csv(&self) -> String {
        let mode = match self.mode {
            BenchMode::Sba => "sba",
            BenchMode::Dense => "dense",
        };
        format!(
            "{mode},{},{},{},{},{},{},{:.3},{}",
            self.n,
            self.p,
            self.m,
            self.d,
            self.flops_measured,
            self.flops_closed_form,
            self.wall_ms,
            self.peak_bytes_estimate
        )
    }

    /// `|measured − closed| / closed`.
    pub fn relative_gap(&self) -> f64 {
        (self.flops_measured as f64 - self.flops_closed_form as f64).abs() / (self.flops_closed_form as f64).max(1.0)
    }
}

/// Analytic peak memory of one block: attention maps plus the stored
/// activations (about `10 + 2·ffn_mult` tensors of the padded `tokens×d` shape).
pub fn peak_bytes_estimate(groups: usize, tokens: usize, d: usize, heads: usize, ffn_mult: usize, inter: usize) -> u64 {
    let maps = heads * (groups * tokens * tokens + inter * inter);
    let acts = (10 + 2 * ffn_mult) * groups * tokens * d;
    8 * (maps + acts) as u64
}

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub n_list: Vec<usize>,
    pub m: usize,
    pub d: usize,
    pub heads: usize,
    pub modes: Vec<BenchMode>,
    pub balance_factor: f64,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            n_list: vec![256, 512, 1024],
            m: 32,
            d: 64,
            heads: 4,
            modes: vec![BenchMode::Sba, BenchMode::Dense],
            balance_factor: 1.0,
            seed: 0,
        }
    }
}

fn random_input(n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(&[1, n, d], data).expect("shape")
}

pub fn run_bench(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    if spec.m == 0 || spec.d == 0 || spec.heads == 0 || !spec.d.is_multiple_of(spec.heads) {
        return Err(CliError::input(format!(
            "need m >= 1 and d divisible by heads, got m={}, d={}, heads={}",
            spec.m, spec.d, spec.heads
        )));
    }
    let mut rows = Vec::new();
    for &n in &spec.n_list {
        if n < 2 {
            return Err(CliError::input(format!("n = {n} is too small")));
        }
        let cfg =
            ModelConfig { n, t: 1, c: 1, f: 1, d_model: spec.d, l: 1, heads: spec.heads, p0: 1, k_pe: 1, ffn_mult: 4 };
        let params = ModelParams::init(&cfg, spec.seed)?;
        let x = random_input(n, spec.d, spec.seed);
        for &mode in &spec.modes {
            let mut tape = Tape::instrumented();
            let w = params.bind_frozen(&mut tape);
            let xv = tape.constant(x.clone());
            let row = match mode {
                BenchMode::Sba => {
                    let g = synthetic_graph(&GraphSpec::JitteredGrid { jitter: 0.2 }, n, spec.seed)?;
                    let plan = partition_kway(&g, n.div_ceil(spec.m).min(n), spec.balance_factor, spec.seed)?;
                    let start = Instant::now();
                    let (_, trace) =
                        sba_block(&mut tape, xv, &plan, &w.blocks[0], spec.heads, &ForwardOptions::default())?;
                    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
                    let closed = attention_flops(plan.p, plan.m, spec.d, spec.heads).total()
                        + attention_flops(1, plan.p, spec.d, spec.heads).total();
                    BenchRow {
                        mode,
                        n,
                        p: plan.p,
                        m: plan.m,
                        d: spec.d,
                        flops_measured: trace.intra_flops.total() + trace.inter_flops.total(),
                        flops_closed_form: closed,
                        wall_ms,
                        peak_bytes_estimate: peak_bytes_estimate(plan.p, plan.m, spec.d, spec.heads, 4, plan.p),
                    }
                }
                BenchMode::Dense => {
                    let mask = vec![true; n];
                    let start = Instant::now();
                    sublayer(&mut tape, xv, &mask, None, &w.blocks[0].intra, spec.heads)?;
                    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
                    BenchRow {
                        mode,
                        n,
                        p: 1,
                        m: n,
                        d: spec.d,
                        flops_measured: tape.flops().attention.total(),
                        flops_closed_form: attention_flops(1, n, spec.d, spec.heads).total(),
                        wall_ms,
                        peak_bytes_estimate: peak_bytes_estimate(1, n, spec.d, spec.heads, 4, 0),
                    }
                }
            };
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(BenchRow::HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}
