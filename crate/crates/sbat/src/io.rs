//! On-disk formats: graphs, series, positional encodings, plans, checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sbat_core::graph::{laplacian_pe, SpatialGraph};
use sbat_core::model::{manifest, ModelConfig, ModelParams};
use sbat_core::partition::{PartitionPlan, ScaleSeries};
use sbat_core::pipeline::{Dataset, Normalizer};
use sbat_core::Tensor;

use crate::error::{CliError, Result};

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::contract(e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

/// Parses JSON, reporting the key path of the first offending field.
pub fn parse_json<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::input(format!("{origin}: at `{path}`: {}", e.into_inner()))
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    parse_json(&read_text(path)?, &path.display().to_string())
}

pub fn f64_to_le(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn le_to_f64(bytes: &[u8], origin: &Path) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(CliError::input(format!(
            "{}: {} bytes is not a whole number of f64 values",
            origin.display(),
            bytes.len()
        )));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

fn read_f64_file(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    le_to_f64(&bytes, path)
}

/// `path` with `.json` appended (sidecar naming).
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::input(format!("{}: {e}", path.display()))
}

#[derive(Debug, Deserialize)]
struct EdgeRow {
    src: usize,
    dst: usize,
    weight: f64,
}

#[derive(Debug, Deserialize)]
struct CoordRow {
    node_id: usize,
    x: f64,
    y: f64,
}

/// Reads `node_id,x,y` rows; every id in `0..n` must appear exactly once.
pub fn read_coords(path: &Path) -> Result<Vec<[f64; 2]>> {
    let mut rows: Vec<CoordRow> = Vec::new();
    for row in csv_reader(path)?.deserialize() {
        rows.push(row.map_err(|e| csv_err(path, e))?);
    }
    let n = rows.len();
    let mut coords = vec![None; n];
    for r in rows {
        if r.node_id >= n || coords[r.node_id].is_some() {
            return Err(CliError::input(format!(
                "{}: node ids must be 0..{n}, each once (bad id {})",
                path.display(),
                r.node_id
            )));
        }
        coords[r.node_id] = Some([r.x, r.y]);
    }
    Ok(coords.into_iter().map(|c| c.expect("all ids present")).collect())
}

/// Reads a `src,dst,weight` edge list.
///
/// The node count comes from the coordinates when given, else from `n_hint`,
/// else from the largest id. An edge may be listed in both directions if the
/// weights agree.
pub fn read_graph(edges: &Path, coords: Option<&Path>, n_hint: Option<usize>) -> Result<SpatialGraph> {
    let mut list: Vec<(usize, usize, f64)> = Vec::new();
    for row in csv_reader(edges)?.deserialize() {
        let r: EdgeRow = row.map_err(|e| csv_err(edges, e))?;
        list.push((r.src.min(r.dst), r.src.max(r.dst), r.weight));
    }
    list.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)).then(a.2.total_cmp(&b.2)));
    let mut unique: Vec<(usize, usize, f64)> = Vec::with_capacity(list.len());
    for e in list {
        match unique.last() {
            Some(last) if (last.0, last.1) == (e.0, e.1) => {
                if last.2 != e.2 {
                    return Err(CliError::input(format!(
                        "{}: edge ({}, {}) listed with weights {} and {}",
                        edges.display(),
                        e.0,
                        e.1,
                        last.2,
                        e.2
                    )));
                }
            }
            _ => unique.push(e),
        }
    }
    let coords = coords.map(read_coords).transpose()?;
    let max_id = unique.iter().map(|e| e.1 + 1).max().unwrap_or(0);
    let n = coords.as_ref().map(Vec::len).or(n_hint).unwrap_or(max_id);
    if max_id > n {
        return Err(CliError::input(format!(
            "{}: edge references node {} but the graph has {n} nodes",
            edges.display(),
            max_id - 1
        )));
    }
    let g = SpatialGraph::from_edges(n, &unique)?;
    Ok(match coords {
        Some(c) => g.with_coords(c)?,
        None => g,
    })
}

/// Writes each undirected edge once, `a < b`.
pub fn write_graph(g: &SpatialGraph, edges: &Path, coords: Option<&Path>) -> Result<()> {
    let mut out = String::from("src,dst,weight\n");
    for (a, b, w) in g.edges() {
        out.push_str(&format!("{a},{b},{w:?}\n"));
    }
    write_bytes(edges, out.as_bytes())?;
    if let (Some(path), Some(c)) = (coords, g.coords()) {
        let mut out = String::from("node_id,x,y\n");
        for (i, p) in c.iter().enumerate() {
            out.push_str(&format!("{i},{:?},{:?}\n", p[0], p[1]));
        }
        write_bytes(path, out.as_bytes())?;
    }
    Ok(())
}

/// JSON sidecar of a binary series file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesHeader {
    pub n: usize,
    pub t: usize,
    pub c: usize,
    pub freq_minutes: f64,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SeriesFormat {
    Csv,
    #[default]
    Bin,
}

/// Raw little-endian `N×T×C` f64 plus `<path>.json`.
pub fn write_series_bin(path: &Path, series: &Tensor, freq_minutes: f64, name: &str) -> Result<()> {
    let [n, t, c] = *series.shape() else {
        return Err(CliError::contract(format!("series must be N×T×C, got {:?}", series.shape())));
    };
    write_bytes(path, &f64_to_le(series.data()))?;
    write_json(&sidecar(path), &SeriesHeader { n, t, c, freq_minutes, name: name.to_string() })
}

pub fn read_series_bin(path: &Path) -> Result<(Tensor, SeriesHeader)> {
    let header: SeriesHeader = read_json(&sidecar(path))?;
    let data = read_f64_file(path)?;
    let expected = header.n * header.t * header.c;
    if data.len() != expected {
        return Err(CliError::input(format!(
            "{}: header declares {}x{}x{} = {expected} values, payload holds {}",
            path.display(),
            header.n,
            header.t,
            header.c,
            data.len()
        )));
    }
    if let Some(i) = data.iter().position(|v| v.is_nan()) {
        return Err(CliError::input(format!("{}: NaN at flat index {i}", path.display())));
    }
    Ok((Tensor::new(&[header.n, header.t, header.c], data)?, header))
}

/// `node,step,c0[,c1…]` rows.
pub fn write_series_csv(path: &Path, series: &Tensor) -> Result<()> {
    let [n, t, c] = *series.shape() else {
        return Err(CliError::contract(format!("series must be N×T×C, got {:?}", series.shape())));
    };
    let mut out = String::from("node,step");
    for ch in 0..c {
        out.push_str(&format!(",c{ch}"));
    }
    out.push('\n');
    for node in 0..n {
        for step in 0..t {
            out.push_str(&format!("{node},{step}"));
            for ch in 0..c {
                out.push_str(&format!(",{:?}", series.get(&[node, step, ch])));
            }
            out.push('\n');
        }
    }
    write_bytes(path, out.as_bytes())
}

/// Reads a CSV series; every `(node, step)` pair of the dense grid must appear once.
pub fn read_series_csv(path: &Path) -> Result<Tensor> {
    let mut reader = csv_reader(path)?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.len() < 3 || &headers[0] != "node" || &headers[1] != "step" {
        return Err(CliError::input(format!("{}: expected header node,step,c0[,c1...]", path.display())));
    }
    let c = headers.len() - 2;
    let mut rows: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let field = |i: usize| record.get(i).unwrap_or("");
        let parse_idx = |i: usize| {
            field(i)
                .parse::<usize>()
                .map_err(|_| CliError::input(format!("{}: row {}: bad index {:?}", path.display(), line + 2, field(i))))
        };
        let (node, step) = (parse_idx(0)?, parse_idx(1)?);
        let values = (2..2 + c)
            .map(|i| {
                let v: f64 = field(i).parse().map_err(|_| {
                    CliError::input(format!("{}: row {}: bad value {:?}", path.display(), line + 2, field(i)))
                })?;
                if v.is_nan() {
                    return Err(CliError::input(format!("{}: row {}: NaN value", path.display(), line + 2)));
                }
                Ok(v)
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((node, step, values));
    }
    let n = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let t = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
    if rows.len() != n * t || n == 0 {
        return Err(CliError::input(format!(
            "{}: {} rows do not form a dense {n}x{t} grid",
            path.display(),
            rows.len()
        )));
    }
    let mut data = vec![0.0; n * t * c];
    let mut seen = vec![false; n * t];
    for (node, step, values) in rows {
        let idx = node * t + step;
        if seen[idx] {
            return Err(CliError::input(format!("{}: duplicate row for node {node}, step {step}", path.display())));
        }
        seen[idx] = true;
        data[idx * c..(idx + 1) * c].copy_from_slice(&values);
    }
    Ok(Tensor::new(&[n, t, c], data)?)
}

/// Loads series and graph and cross-checks them.
pub fn load_dataset(series: &Path, format: SeriesFormat, edges: &Path, coords: Option<&Path>) -> Result<Dataset> {
    let (tensor, freq, name) = match format {
        SeriesFormat::Bin => {
            let (t, h) = read_series_bin(series)?;
            (t, h.freq_minutes, h.name)
        }
        SeriesFormat::Csv => {
            let name = series.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            (read_series_csv(series)?, 5.0, name)
        }
    };
    let graph = read_graph(edges, coords, Some(tensor.shape()[0]))?;
    if graph.n() != tensor.shape()[0] {
        return Err(CliError::input(format!(
            "series has {} nodes but graph {} has {}",
            tensor.shape()[0],
            edges.display(),
            graph.n()
        )));
    }
    Ok(Dataset::new(tensor, graph, freq, name)?)
}

/// SHA-256 of the edge list and coordinates, hex encoded.
pub fn graph_hash(g: &SpatialGraph) -> String {
    let mut h = Sha256::new();
    h.update((g.n() as u64).to_le_bytes());
    for (a, b, w) in g.edges() {
        h.update((a as u64).to_le_bytes());
        h.update((b as u64).to_le_bytes());
        h.update(w.to_le_bytes());
    }
    if let Some(c) = g.coords() {
        for p in c {
            h.update(p[0].to_le_bytes());
            h.update(p[1].to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeHeader {
    pub n: usize,
    pub k: usize,
    pub block_limit: usize,
    pub graph_hash: String,
}

/// Writes an `n×k` encoding to `path` (+ `.json`).
pub fn write_pe(path: &Path, pe: &Tensor, header: &PeHeader) -> Result<()> {
    write_bytes(path, &f64_to_le(pe.data()))?;
    write_json(&sidecar(path), header)
}

/// Returns the cached encoding when its header matches, otherwise computes and stores it.
pub fn cached_pe(path: Option<&Path>, g: &SpatialGraph, k: usize, block_limit: usize) -> Result<Tensor> {
    let header = PeHeader { n: g.n(), k, block_limit, graph_hash: graph_hash(g) };
    if let Some(path) = path {
        if let Ok(found) = read_json::<PeHeader>(&sidecar(path)) {
            if found == header {
                let data = read_f64_file(path)?;
                if data.len() == g.n() * k {
                    return Ok(Tensor::new(&[g.n(), k], data)?);
                }
            }
        }
    }
    let pe = laplacian_pe(g, k, block_limit)?;
    for w in &pe.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(path) = path {
        write_pe(path, &pe.vectors, &header)?;
    }
    Ok(pe.vectors)
}

/// Serialized partition plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    pub n: usize,
    pub p: usize,
    pub m: usize,
    pub balance_factor: f64,
    pub seed: u64,
    pub edge_cut: f64,
    pub achieved_balance: f64,
    pub over_balance: bool,
    pub assign: Vec<usize>,
}

impl From<&PartitionPlan> for PlanFile {
    fn from(p: &PartitionPlan) -> Self {
        Self {
            n: p.n,
            p: p.p,
            m: p.m,
            balance_factor: p.balance_factor,
            seed: p.seed,
            edge_cut: p.edge_cut,
            achieved_balance: p.achieved_balance,
            over_balance: p.over_balance,
            assign: p.assign.clone(),
        }
    }
}

impl PlanFile {
    pub fn to_plan(&self) -> Result<PartitionPlan> {
        let plan =
            PartitionPlan::from_assignment(self.assign.clone(), self.p, self.balance_factor, self.seed, self.edge_cut)
                .map_err(|e| CliError::input(format!("plan file: {e}")))?;
        if plan.m != self.m || plan.n != self.n {
            return Err(CliError::input(format!(
                "plan file declares n={}, m={} but the assignment gives n={}, m={}",
                self.n, self.m, plan.n, plan.m
            )));
        }
        plan.validate().map_err(|e| CliError::input(format!("plan file: {e}")))?;
        Ok(plan)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleSeriesFile {
    pub levels: Vec<PlanFile>,
    pub merges: Vec<Vec<usize>>,
}

impl From<&ScaleSeries> for ScaleSeriesFile {
    fn from(s: &ScaleSeries) -> Self {
        Self { levels: s.plans.iter().map(PlanFile::from).collect(), merges: s.merges.clone() }
    }
}

impl ScaleSeriesFile {
    pub fn to_series(&self) -> Result<ScaleSeries> {
        let plans = self.levels.iter().map(PlanFile::to_plan).collect::<Result<Vec<_>>>()?;
        let series = ScaleSeries { plans, merges: self.merges.clone() };
        series.validate().map_err(|e| CliError::input(format!("scale series file: {e}")))?;
        Ok(series)
    }
}

pub fn write_scale_series(path: &Path, s: &ScaleSeries) -> Result<()> {
    write_json(path, &ScaleSeriesFile::from(s))
}

pub fn read_scale_series(path: &Path) -> Result<ScaleSeries> {
    read_json::<ScaleSeriesFile>(path)?.to_series()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in f64 elements.
    pub offset: usize,
}

/// `manifest.json` of a checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
    pub normalizer: Option<Normalizer>,
}

pub const CHECKPOINT_BLOB: &str = "params.bin";
pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

/// Writes `params.bin` (little-endian f64 in manifest order) and `manifest.json` into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    cfg: &ModelConfig,
    params: &ModelParams,
    seed: u64,
    normalizer: Option<&Normalizer>,
) -> Result<()> {
    let mut blob = Vec::with_capacity(params.count() * 8);
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, t) in params.named() {
        blob.extend(f64_to_le(t.data()));
        tensors.push(TensorEntry { name, shape: t.shape().to_vec(), offset });
        offset += t.numel();
    }
    write_bytes(&dir.join(CHECKPOINT_BLOB), &blob)?;
    let manifest = CheckpointManifest { config: cfg.clone(), seed, tensors, normalizer: normalizer.cloned() };
    write_json(&dir.join(CHECKPOINT_MANIFEST), &manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, ModelParams)> {
    let m: CheckpointManifest = read_json(&dir.join(CHECKPOINT_MANIFEST))?;
    m.config.validate()?;
    let expected = manifest(&m.config);
    if expected.len() != m.tensors.len() {
        return Err(CliError::input(format!(
            "checkpoint lists {} tensors, config needs {}",
            m.tensors.len(),
            expected.len()
        )));
    }
    let blob = read_f64_file(&dir.join(CHECKPOINT_BLOB))?;
    let mut tensors = Vec::with_capacity(expected.len());
    for ((name, shape), entry) in expected.iter().zip(&m.tensors) {
        if &entry.name != name || &entry.shape != shape {
            return Err(CliError::input(format!(
                "checkpoint entry {} {:?} does not match {name} {:?}",
                entry.name, entry.shape, shape
            )));
        }
        let len: usize = shape.iter().product();
        let slice = blob
            .get(entry.offset..entry.offset + len)
            .ok_or_else(|| CliError::input(format!("checkpoint blob too short for {name}")))?;
        tensors.push(Tensor::new(shape, slice.to_vec())?);
    }
    let params = ModelParams::from_tensors(&m.config, tensors)?;
    Ok((m, params))
}
