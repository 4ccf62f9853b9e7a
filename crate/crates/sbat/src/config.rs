//! Strict JSON run configuration.
//!
//! Every section is optional and falls back to the defaults below; unknown
//! keys anywhere are rejected with their key path.
//!
//! | key | default |
//! |-----|---------|
//! | `model.d_model` | 512 |
//! | `model.l` | 3 |
//! | `model.t` | 96 (144 for PV-US) |
//! | `model.f` | 12 |
//! | `partition.p0` | 8, see [`DATASET_P0`] |
//! | `partition.balance_factor` | 1.3 |
//! | `pe.k` | 8 |
//! | `train.lr` / `batch_size` / `patience` | 1e-3 / 16 / 10 |
//!
//! Initial subgraph counts used for the LargeST subsets:
//!
//! | dataset | `partition.p0` |
//! |---------|----------------|
//! | CA | 128 |
//! | ALL | 64 |
//! | EAST | 8 |
//! | GLA | 64 |
//! | GBA | 8 |
//! | WEST | 16 |
//! | SD | 8 |

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sbat_core::model::ModelConfig;
use sbat_core::partition::DEFAULT_BALANCE;
use sbat_core::pipeline::{SynthConfig, DEFAULT_NULL_THRESHOLD, DEFAULT_RATIOS};
use sbat_core::trainer::TrainConfig;

use crate::error::{CliError, Result};
use crate::io::{parse_json, read_text, SeriesFormat};

/// Initial subgraph count per dataset.
pub const DATASET_P0: [(&str, usize); 7] =
    [("CA", 128), ("ALL", 64), ("EAST", 8), ("GLA", 64), ("GBA", 8), ("WEST", 16), ("SD", 8)];

/// Look-back window per benchmark family.
pub const DATASET_T: [(&str, usize); 2] = [("LargeST", 96), ("PV-US", 144)];

pub fn dataset_p0(name: &str) -> Option<usize> {
    DATASET_P0.iter().find(|(n, _)| n.eq_ignore_ascii_case(name)).map(|&(_, p)| p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    /// Generator settings for `source = "synthetic"`.
    pub synthetic: SynthConfig,
    /// Series file for `source = "files"`.
    pub series: Option<PathBuf>,
    pub series_format: SeriesFormat,
    pub ratios: [f64; 3],
    pub stride: usize,
    pub null_threshold: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            synthetic: SynthConfig::default(),
            series: None,
            series_format: SeriesFormat::Bin,
            ratios: DEFAULT_RATIOS,
            stride: 1,
            null_threshold: DEFAULT_NULL_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct GraphSection {
    /// `src,dst,weight` edge list for `source = "files"`.
    pub edges: Option<PathBuf>,
    /// Optional `node_id,x,y` coordinates.
    pub coords: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSection {
    pub p0: usize,
    pub balance_factor: f64,
    pub seed: u64,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self { p0: 8, balance_factor: DEFAULT_BALANCE, seed: 0 }
    }
}

/// Architecture fields; `n`, `p0` and `k_pe` come from the data, partition and pe sections.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub t: usize,
    pub c: usize,
    pub f: usize,
    pub d_model: usize,
    pub l: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self { t: m.t, c: m.c, f: m.f, d_model: m.d_model, l: m.l, heads: m.heads, ffn_mult: m.ffn_mult }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeSection {
    pub k: usize,
    /// Largest graph solved as one eigenproblem; bigger graphs are split.
    pub block_limit: usize,
}

impl Default for PeSection {
    fn default() -> Self {
        Self { k: 8, block_limit: 512 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub out_dir: PathBuf,
    /// Positional-encoding cache file; defaults to `<out_dir>/pe.bin`.
    pub pe_cache: Option<PathBuf>,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("runs/default"), pe_cache: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub graph: GraphSection,
    pub partition: PartitionSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub pe: PeSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = parse_json(text, "config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = parse_json(&read_text(path)?, &path.display().to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.data.source == DataSource::Files && (self.data.series.is_none() || self.graph.edges.is_none()) {
            return Err(CliError::input("data.source = \"files\" needs data.series and graph.edges"));
        }
        if self.partition.p0 == 0 || self.partition.balance_factor < 1.0 {
            return Err(CliError::input("partition.p0 must be >= 1 and partition.balance_factor >= 1"));
        }
        Ok(())
    }

    /// Full model configuration once the node count is known.
    pub fn model_config(&self, n: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            n,
            t: m.t,
            c: m.c,
            f: m.f,
            d_model: m.d_model,
            l: m.l,
            heads: m.heads,
            p0: self.partition.p0,
            k_pe: self.pe.k,
            ffn_mult: m.ffn_mult,
        }
    }

    pub fn pe_cache_path(&self) -> PathBuf {
        self.paths.pe_cache.clone().unwrap_or_else(|| self.paths.out_dir.join("pe.bin"))
    }
}

/// Human-readable schema notes printed by `sbat config --schema`.
pub fn schema_doc() -> String {
    let mut s = String::from(
        "Run configuration (JSON, unknown keys rejected)\n\
         sections: data, graph, partition, model, train, pe, paths\n\
         model defaults: d_model=512, l=3, t=96, f=12, heads=4, ffn_mult=4\n\
         look-back t per benchmark:",
    );
    for (name, t) in DATASET_T {
        s.push_str(&format!(" {name}={t}"));
    }
    s.push_str("\ninitial subgraph count partition.p0 per dataset:");
    for (name, p) in DATASET_P0 {
        s.push_str(&format!(" {name}={p}"));
    }
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn unknown_key_reports_path() {
        let err = RunConfig::from_json(r#"{"model": {"d_modle": 8}}"#).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("model.d_modle"), "{err}");
    }

    #[test]
    fn p0_lookup() {
        assert_eq!(dataset_p0("ca"), Some(128));
        assert_eq!(dataset_p0("WEST"), Some(16));
        assert_eq!(dataset_p0("PEMS"), None);
    }
}
