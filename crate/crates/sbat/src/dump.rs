//! Attention map export: per-subgraph intra maps and the inter-subgraph map per block.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sbat_core::model::{forward, ForwardOptions, ModelParams};
use sbat_core::pipeline::{materialize, Split};
use sbat_core::Tape;

use crate::error::{CliError, Result};
use crate::io::{f64_to_le, sidecar, write_bytes, write_json};
use crate::run::Prepared;

/// Sidecar of one dumped attention file (`[heads, size, size]` row-major f64).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionHeader {
    pub block: usize,
    /// `"intra"` or `"inter"`.
    pub kind: String,
    /// Subgraph index for intra maps.
    pub subgraph: Option<usize>,
    pub heads: usize,
    pub size: usize,
    /// Node ids of rows and columns (intra) or subgraph ids (inter).
    pub members: Vec<usize>,
    pub split: Split,
    pub window: usize,
}

/// Row-stochastic check on a `[heads, size, size]` buffer.
pub fn check_rows(values: &[f64], size: usize, what: &str) -> Result<()> {
    for (r, row) in values.chunks(size.max(1)).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CliError::contract(format!("{what}: row {r} sums to {sum}")));
        }
    }
    Ok(())
}

/// Runs window `window` of `split` and writes every map under `out_dir`; returns the written paths.
pub fn dump_attention(
    prep: &Prepared,
    params: &ModelParams,
    split: Split,
    window: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let windows = prep.windows(split);
    let Some(&w) = windows.get(window) else {
        return Err(CliError::input(format!(
            "window {window} out of range: split {split:?} has {} windows",
            windows.len()
        )));
    };
    let (x, _) = materialize(&prep.normalized, &[w])?;
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let xv = tape.constant(x);
    let pe = tape.constant(prep.pe.clone());
    let out = forward(&mut tape, &prep.model, xv, pe, &prep.plans, &bound, &ForwardOptions::default())?;
    let heads = prep.model.heads;
    let mut written = Vec::new();
    for (b, (trace, plan)) in out.blocks.iter().zip(&prep.plans.plans).enumerate() {
        let probs =
            tape.attention_probs(trace.intra_attention).ok_or_else(|| CliError::contract("missing intra attention"))?;
        let m = plan.m;
        for (s, members) in plan.members().iter().enumerate() {
            let size = members.len();
            let mut values = Vec::with_capacity(heads * size * size);
            for h in 0..heads {
                for i in 0..size {
                    let row = &probs[((s * heads + h) * m + i) * m..][..m];
                    values.extend_from_slice(&row[..size]);
                }
            }
            let what = format!("block {b} subgraph {s}");
            check_rows(&values, size, &what)?;
            let path = out_dir.join(format!("block{b}_intra_s{s}.bin"));
            write_bytes(&path, &f64_to_le(&values))?;
            let header = AttentionHeader {
                block: b,
                kind: "intra".into(),
                subgraph: Some(s),
                heads,
                size,
                members: members.clone(),
                split,
                window,
            };
            write_json(&sidecar(&path), &header)?;
            written.push(path);
        }
        let probs =
            tape.attention_probs(trace.inter_attention).ok_or_else(|| CliError::contract("missing inter attention"))?;
        check_rows(probs, plan.p, &format!("block {b} inter"))?;
        let path = out_dir.join(format!("block{b}_inter.bin"));
        write_bytes(&path, &f64_to_le(probs))?;
        let header = AttentionHeader {
            block: b,
            kind: "inter".into(),
            subgraph: None,
            heads,
            size: plan.p,
            members: (0..plan.p).collect(),
            split,
            window,
        };
        write_json(&sidecar(&path), &header)?;
        written.push(path);
    }
    Ok(written)
}
