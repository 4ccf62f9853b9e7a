//! Datasets, normalization, splitting, windowing, synthetic data and metrics.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{build_gaussian_graph, SpatialGraph};
use crate::tensor::Tensor;

/// Node series plus the sensor graph they live on.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N×T_total×C`.
    pub series: Tensor,
    pub graph: SpatialGraph,
    pub freq_minutes: f64,
    pub name: String,
}

impl Dataset {
    pub fn new(series: Tensor, graph: SpatialGraph, freq_minutes: f64, name: String) -> Result<Self> {
        let ds = Self { series, graph, freq_minutes, name };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.series.rank() != 3 {
            return Err(shape_err("dataset", format!("series must be N×T×C, got {:?}", self.series.shape())));
        }
        if self.series.shape()[0] != self.graph.n() {
            return Err(Error::Input(format!(
                "series has {} nodes but the graph has {}",
                self.series.shape()[0],
                self.graph.n()
            )));
        }
        if let Some(i) = self.series.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("series contains a non-finite value at flat index {i}")));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.series.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.series.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.series.shape()[2]
    }
}

/// Per-channel Z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Fits on steps `range` of an `N×T×C` series.
    pub fn fit(series: &Tensor, range: Range<usize>) -> Result<Self> {
        let [n, t, c] = *series.shape() else {
            return Err(shape_err("normalizer", format!("expected N×T×C, got {:?}", series.shape())));
        };
        if range.is_empty() || range.end > t {
            return Err(Error::Contract(format!("fit range {range:?} outside 0..{t}")));
        }
        let count = (n * range.len()) as f64;
        let mut mean = alloc::vec![0.0; c];
        let mut var = alloc::vec![0.0; c];
        let data = series.data();
        for node in 0..n {
            for step in range.clone() {
                for ch in 0..c {
                    mean[ch] += data[(node * t + step) * c + ch];
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for node in 0..n {
            for step in range.clone() {
                for ch in 0..c {
                    let d = data[(node * t + step) * c + ch] - mean[ch];
                    var[ch] += d * d;
                }
            }
        }
        let std: Vec<f64> = var.iter().map(|v| libm::sqrt(v / count)).collect();
        if let Some(ch) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::Input(format!("channel {ch} is constant over the training range")));
        }
        Ok(Self { mean, std })
    }

    fn channels_of(&self, x: &Tensor) -> Result<usize> {
        let c = x.last_dim();
        if c != self.mean.len() {
            return Err(shape_err("normalizer", format!("{c} channels, fitted on {}", self.mean.len())));
        }
        Ok(c)
    }

    /// `(x − μ_c)/σ_c` along the last axis.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.channels_of(x)?;
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - self.mean[i % c]) / self.std[i % c];
        }
        Ok(out)
    }

    pub fn invert(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.channels_of(x)?;
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * self.std[i % c] + self.mean[i % c];
        }
        Ok(out)
    }
}

/// Train/validation/test step ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    pub fn get(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }
}

pub const DEFAULT_RATIOS: [f64; 3] = [0.6, 0.2, 0.2];

/// Chronological split: floor for train and val, remainder to test.
/// Every range must hold at least `min_len` steps (use `T + F`).
pub fn chrono_split(total_steps: usize, ratios: [f64; 3], min_len: usize) -> Result<Splits> {
    if ratios.iter().any(|&r| !(r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be positive and sum to 1")));
    }
    let train = libm::floor(total_steps as f64 * ratios[0]) as usize;
    let val = libm::floor(total_steps as f64 * ratios[1]) as usize;
    let splits = Splits { train: 0..train, val: train..train + val, test: train + val..total_steps };
    for (name, r) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        if r.len() < min_len {
            return Err(Error::Config(format!(
                "{name} split has {} steps, fewer than the {min_len} needed for one window",
                r.len()
            )));
        }
    }
    Ok(splits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Input steps `start..start+t`, targets `start+t..start+t+f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub t: usize,
    pub f: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSet {
    pub windows: Vec<Window>,
    pub split: Split,
    /// Set when the range was too short for a single window.
    pub too_short: bool,
}

/// All windows lying entirely in `range`, ordered by start.
pub fn make_windows(range: Range<usize>, t: usize, f: usize, stride: usize, split: Split) -> WindowSet {
    let span = t + f;
    let stride = stride.max(1);
    if range.len() < span || span == 0 {
        return WindowSet { windows: Vec::new(), split, too_short: true };
    }
    let windows = (range.start..=range.end - span).step_by(stride).map(|start| Window { start, t, f }).collect();
    WindowSet { windows, split, too_short: false }
}

/// Stacks windows of an `N×T×C` series into `x: [B, N, t, C]` and `y: [B, N, f, C]`.
pub fn materialize(series: &Tensor, windows: &[Window]) -> Result<(Tensor, Tensor)> {
    let [n, total, c] = *series.shape() else {
        return Err(shape_err("materialize", format!("expected N×T×C, got {:?}", series.shape())));
    };
    let Some(first) = windows.first() else {
        return Err(Error::Contract("no windows to materialize".into()));
    };
    let (t, f) = (first.t, first.f);
    let b = windows.len();
    let mut x = Vec::with_capacity(b * n * t * c);
    let mut y = Vec::with_capacity(b * n * f * c);
    let data = series.data();
    for w in windows {
        if w.t != t || w.f != f || w.start + t + f > total {
            return Err(Error::Contract(format!("window {w:?} does not fit a series of {total} steps")));
        }
        for node in 0..n {
            let row = &data[node * total * c..(node + 1) * total * c];
            x.extend_from_slice(&row[w.start * c..(w.start + t) * c]);
            y.extend_from_slice(&row[(w.start + t) * c..(w.start + t + f) * c]);
        }
    }
    Ok((Tensor::new(&[b, n, t, c], x)?, Tensor::new(&[b, n, f, c], y)?))
}

/// Node layout for synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphSpec {
    /// Unit grid with uniform jitter; Gaussian kernel (σ = 1, threshold 0.1).
    JitteredGrid { jitter: f64 },
    /// Uniform points in the unit square, Gaussian kernel with the given σ.
    RandomGeometric { sigma: f64, threshold: f64 },
}

impl Default for GraphSpec {
    fn default() -> Self {
        GraphSpec::JitteredGrid { jitter: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n: usize,
    pub steps: usize,
    pub graph: GraphSpec,
    /// Diffusion rate `γ` in `(0, 1)`; `0` freezes the dynamics.
    pub gamma: f64,
    /// Seasonal period `τ` in steps.
    pub period: f64,
    pub season_amp: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 64,
            steps: 2048,
            graph: GraphSpec::default(),
            gamma: 0.3,
            period: 64.0,
            season_amp: 0.1,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

/// Builds the node layout of `spec` with `n` nodes; fails if it is not connected.
pub fn synthetic_graph(spec: &GraphSpec, n: usize, seed: u64) -> Result<SpatialGraph> {
    let cfg = SynthConfig { n, graph: spec.clone(), seed, ..SynthConfig::default() };
    synth_graph(&cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn synth_graph(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<SpatialGraph> {
    let coords: Vec<[f64; 2]> = match cfg.graph {
        GraphSpec::JitteredGrid { jitter } => {
            let side = libm::ceil(libm::sqrt(cfg.n as f64)) as usize;
            (0..cfg.n)
                .map(|i| {
                    let mut jit = || if jitter > 0.0 { rng.random_range(-jitter..jitter) } else { 0.0 };
                    [(i % side) as f64 + jit(), (i / side) as f64 + jit()]
                })
                .collect()
        }
        GraphSpec::RandomGeometric { .. } => (0..cfg.n).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect(),
    };
    let g = match cfg.graph {
        GraphSpec::JitteredGrid { .. } => build_gaussian_graph(&coords, 1.0, 0.1)?,
        GraphSpec::RandomGeometric { sigma, threshold } => build_gaussian_graph(&coords, sigma, threshold)?,
    };
    if !g.is_connected() {
        return Err(Error::Config(format!("synthetic graph {:?} with {} nodes is not connected", cfg.graph, cfg.n)));
    }
    Ok(g)
}

/// Seasonal diffusion on a spatial graph:
/// `x_{t+1} = (1−γ)x_t + γ·Â x_t + a·sin(2πt/τ + φ_node) + σ·η_t`,
/// `Â = D⁻¹A`, `φ` a linear function of the coordinates, `x_0 ~ N(0, 1)`.
pub fn synth_diffusion(cfg: &SynthConfig) -> Result<Dataset> {
    if !(0.0..1.0).contains(&cfg.gamma) {
        return Err(Error::Config(format!("gamma = {} must lie in [0, 1)", cfg.gamma)));
    }
    if cfg.n < 2 || cfg.steps < 1 || !(cfg.period > 0.0) || cfg.noise_std < 0.0 {
        return Err(Error::Config(format!("invalid synthetic configuration {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let graph = synth_graph(cfg, &mut rng)?;
    graph_diffusion(graph, cfg, &mut rng)
}

/// Runs the diffusion recurrence on a caller-supplied connected graph.
pub fn synth_on_graph(graph: SpatialGraph, cfg: &SynthConfig) -> Result<Dataset> {
    if !graph.is_connected() {
        return Err(Error::Config("synthetic graph is not connected".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    graph_diffusion(graph, cfg, &mut rng)
}

fn graph_diffusion(graph: SpatialGraph, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let n = graph.n();
    let phase: Vec<f64> = match graph.coords() {
        Some(coords) => {
            let span = |axis: usize| {
                let (lo, hi) =
                    coords.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p[axis]), hi.max(p[axis])));
                (lo, hi - lo)
            };
            let ((x0, wx), (y0, wy)) = (span(0), span(1));
            let extent = (wx + wy).max(1e-9);
            coords.iter().map(|p| PI * ((p[0] - x0) + (p[1] - y0)) / extent).collect()
        }
        None => alloc::vec![0.0; n],
    };
    let mut x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let mut series = alloc::vec![0.0; n * cfg.steps];
    let mut next = alloc::vec![0.0; n];
    for step in 0..cfg.steps {
        for (node, &v) in x.iter().enumerate() {
            series[node * cfg.steps + step] = v;
        }
        let season = 2.0 * PI * step as f64 / cfg.period;
        for node in 0..n {
            let deg = graph.degree(node);
            let avg = if deg > 0.0 {
                graph.neighbors(node).iter().map(|&(m, w)| w * x[m]).sum::<f64>() / deg
            } else {
                x[node]
            };
            let noise: f64 = if cfg.noise_std > 0.0 { StandardNormal.sample(rng) } else { 0.0 };
            next[node] = (1.0 - cfg.gamma) * x[node]
                + cfg.gamma * avg
                + cfg.season_amp * libm::sin(season + phase[node])
                + cfg.noise_std * noise;
        }
        core::mem::swap(&mut x, &mut next);
    }
    let series = Tensor::new(&[n, cfg.steps, 1], series)?;
    Dataset::new(series, graph, 5.0, format!("synthetic-diffusion-n{}-seed{}", n, cfg.seed))
}

/// Error summary of one forecast set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    /// Percent; absent when every target falls below the null threshold.
    pub mape_pct: Option<f64>,
    /// Entries left out of MAPE.
    pub excluded: usize,
    pub count: usize,
}

pub const DEFAULT_NULL_THRESHOLD: f64 = 1e-4;

/// MAE and RMSE over all entries; MAPE over `|target| ≥ null_threshold`.
pub fn metrics(pred: &[f64], target: &[f64], null_threshold: f64) -> Result<MetricReport> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(shape_err("metrics", format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    let (mut abs, mut sq, mut pct, mut used) = (0.0, 0.0, 0.0, 0usize);
    for (&p, &t) in pred.iter().zip(target) {
        let e = p - t;
        abs += e.abs();
        sq += e * e;
        if t.abs() >= null_threshold {
            pct += (e / t).abs();
            used += 1;
        }
    }
    let count = pred.len();
    Ok(MetricReport {
        mae: abs / count as f64,
        rmse: libm::sqrt(sq / count as f64),
        mape_pct: (used > 0).then(|| 100.0 * pct / used as f64),
        excluded: count - used,
        count,
    })
}

/// One report per horizon step for `[B, N, F, C]` tensors, followed by the average over all steps.
pub fn horizon_metrics(
    pred: &Tensor,
    target: &Tensor,
    null_threshold: f64,
) -> Result<(Vec<MetricReport>, MetricReport)> {
    if pred.shape() != target.shape() || pred.rank() != 4 {
        return Err(shape_err("horizon_metrics", format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    let [b, n, f, c] = *pred.shape() else { unreachable!() };
    let mut per = Vec::with_capacity(f);
    for h in 0..f {
        let mut p = Vec::with_capacity(b * n * c);
        let mut t = Vec::with_capacity(b * n * c);
        for bi in 0..b {
            for node in 0..n {
                let off = ((bi * n + node) * f + h) * c;
                p.extend_from_slice(&pred.data()[off..off + c]);
                t.extend_from_slice(&target.data()[off..off + c]);
            }
        }
        per.push(metrics(&p, &t, null_threshold)?);
    }
    Ok((per, metrics(pred.data(), target.data(), null_threshold)?))
}

/// Persistence forecast: the last input step repeated over the horizon.
pub fn persistence(x: &Tensor, f: usize) -> Result<Tensor> {
    let [b, n, t, c] = *x.shape() else {
        return Err(shape_err("persistence", format!("expected [B, N, T, C], got {:?}", x.shape())));
    };
    let mut out = Vec::with_capacity(b * n * f * c);
    for row in 0..b * n {
        let last = &x.data()[(row * t + t - 1) * c..(row * t + t) * c];
        for _ in 0..f {
            out.extend_from_slice(last);
        }
    }
    Tensor::new(&[b, n, f, c], out)
}
