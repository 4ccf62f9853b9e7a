//! Training and evaluation runs driven by a [`RunConfig`].

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use sbat_core::model::{predict, ModelConfig, ModelParams};
use sbat_core::partition::{build_scale_series, ScaleSeries};
use sbat_core::pipeline::{
    chrono_split, horizon_metrics, make_windows, materialize, persistence, synth_diffusion, Dataset, MetricReport,
    Normalizer, Split, Splits, Window,
};
use sbat_core::trainer::{train, EpochRecord, TrainData};
use sbat_core::Tensor;

use crate::config::{DataSource, RunConfig};
use crate::error::{CliError, Result};
use crate::io::{self, cached_pe, load_checkpoint, save_checkpoint, write_bytes, write_json, write_scale_series};

/// Dataset, statistics, plans and windows shared by training and evaluation.
pub struct Prepared {
    pub dataset: Dataset,
    pub model: ModelConfig,
    pub normalizer: Normalizer,
    pub splits: Splits,
    /// Z-scored copy of the series.
    pub normalized: Tensor,
    pub pe: Tensor,
    pub plans: ScaleSeries,
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub test: Vec<Window>,
}

impl Prepared {
    pub fn windows(&self, split: Split) -> &[Window] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn train_data(&self) -> TrainData<'_> {
        TrainData {
            model: &self.model,
            series: &self.normalized,
            pe: &self.pe,
            plans: &self.plans,
            train: &self.train,
            val: &self.val,
        }
    }
}

pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.data.source {
        DataSource::Synthetic => Ok(synth_diffusion(&cfg.data.synthetic)?),
        DataSource::Files => {
            let series = cfg.data.series.as_deref().ok_or_else(|| CliError::input("data.series is not set"))?;
            let edges = cfg.graph.edges.as_deref().ok_or_else(|| CliError::input("graph.edges is not set"))?;
            io::load_dataset(series, cfg.data.series_format, edges, cfg.graph.coords.as_deref())
        }
    }
}

/// Loads data, fits the normalizer on the training range, builds plans, PE and windows.
pub fn prepare(cfg: &RunConfig, pe_cache: Option<&Path>) -> Result<Prepared> {
    let dataset = load_data(cfg)?;
    let model = cfg.model_config(dataset.n());
    model.validate()?;
    if dataset.channels() != model.c {
        return Err(CliError::input(format!("series has {} channels, model.c = {}", dataset.channels(), model.c)));
    }
    let splits = chrono_split(dataset.steps(), cfg.data.ratios, model.t + model.f)?;
    let normalizer = Normalizer::fit(&dataset.series, splits.train.clone())?;
    let normalized = normalizer.apply(&dataset.series)?;
    let plans =
        build_scale_series(&dataset.graph, model.p0, model.l, cfg.partition.balance_factor, cfg.partition.seed)?;
    let pe = cached_pe(pe_cache, &dataset.graph, model.k_pe, cfg.pe.block_limit)?;
    let win = |split: Split| make_windows(splits.get(split), model.t, model.f, cfg.data.stride, split).windows;
    let (train, val, test) = (win(Split::Train), win(Split::Val), win(Split::Test));
    Ok(Prepared { dataset, model, normalizer, splits, normalized, pe, plans, train, val, test })
}

/// One history line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryLine {
    #[serde(flatten)]
    pub record: EpochRecord,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
}

pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub history: Vec<EpochRecord>,
    pub best_val_mae: f64,
    pub diverged: Option<String>,
    pub params: ModelParams,
}

pub const HISTORY_FILE: &str = "history.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const PLANS_FILE: &str = "plans.json";
pub const CONFIG_ECHO: &str = "effective_config.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Trains per `cfg` and writes config echo, plans, checkpoint, history and timings to `paths.out_dir`.
pub fn run_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let out = cfg.paths.out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    write_bytes(&out.join(CONFIG_ECHO), cfg.to_json().as_bytes())?;
    let prep = prepare(cfg, Some(&cfg.pe_cache_path()))?;
    write_scale_series(&out.join(PLANS_FILE), &prep.plans)?;

    let init = ModelParams::init(&prep.model, cfg.train.seed)?;
    let ckpt = out.join(CHECKPOINT_DIR);
    save_checkpoint(&ckpt, &prep.model, &init, cfg.train.seed, Some(&prep.normalizer))?;

    let mut history_text = String::new();
    let mut timing_text = String::new();
    let mut write_err = None;
    let mut clock = Instant::now();
    let outcome = train(&prep.train_data(), init, &cfg.train, |record, best| {
        let line = HistoryLine {
            record: record.clone(),
            lr: cfg.train.lr,
            betas: cfg.train.betas,
            eps: cfg.train.eps,
            batch_size: cfg.train.batch_size,
            patience: cfg.train.patience,
            seed: cfg.train.seed,
        };
        history_text.push_str(&serde_json::to_string(&line).expect("history serializes"));
        history_text.push('\n');
        let ms = clock.elapsed().as_secs_f64() * 1e3;
        clock = Instant::now();
        timing_text.push_str(&format!("{{\"epoch\":{},\"wall_ms\":{ms:.3}}}\n", record.epoch));
        let result = write_bytes(&out.join(HISTORY_FILE), history_text.as_bytes())
            .and_then(|_| write_bytes(&out.join(TIMING_FILE), timing_text.as_bytes()))
            .and_then(|_| {
                if record.improved {
                    save_checkpoint(&ckpt, &prep.model, best, cfg.train.seed, Some(&prep.normalizer))
                } else {
                    Ok(())
                }
            });
        if let Err(e) = result {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    write_bytes(&out.join(HISTORY_FILE), history_text.as_bytes())?;
    Ok(TrainSummary {
        out_dir: out,
        history: outcome.history,
        best_val_mae: outcome.state.best_val_mae,
        diverged: outcome.diverged,
        params: outcome.best,
    })
}

/// Metrics with the per-horizon breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub mae: f64,
    pub rmse: f64,
    pub mape_pct: Option<f64>,
    pub excluded: usize,
    pub horizon_breakdown: Vec<MetricReport>,
}

impl HorizonReport {
    fn new(per: Vec<MetricReport>, avg: MetricReport) -> Self {
        Self { mae: avg.mae, rmse: avg.rmse, mape_pct: avg.mape_pct, excluded: avg.excluded, horizon_breakdown: per }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub windows: usize,
    pub model: HorizonReport,
    pub persistence: HorizonReport,
}

/// Forecasts for `windows` in raw units, with raw targets and raw inputs.
pub fn forecast(
    prep: &Prepared,
    params: &ModelParams,
    windows: &[Window],
    batch: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let mut preds = Vec::new();
    for chunk in windows.chunks(batch.max(1)) {
        let (x, _) = materialize(&prep.normalized, chunk)?;
        let pred = predict(&prep.model, params, &x, &prep.pe, &prep.plans)?;
        preds.extend_from_slice(prep.normalizer.invert(&pred)?.data());
    }
    let (x_raw, y_raw) = materialize(&prep.dataset.series, windows)?;
    let pred = Tensor::new(y_raw.shape(), preds)?;
    Ok((pred, y_raw, x_raw))
}

/// De-normalized metrics of the model and of the persistence baseline on one split.
pub fn evaluate(prep: &Prepared, params: &ModelParams, split: Split, null_threshold: f64) -> Result<EvalReport> {
    let windows = prep.windows(split);
    if windows.is_empty() {
        return Err(CliError::input(format!("split {split:?} has no windows")));
    }
    let (pred, target, x) = forecast(prep, params, windows, 64)?;
    let (per, avg) = horizon_metrics(&pred, &target, null_threshold)?;
    let base = persistence(&x, prep.model.f)?;
    let (bper, bavg) = horizon_metrics(&base, &target, null_threshold)?;
    let report = EvalReport {
        split,
        windows: windows.len(),
        model: HorizonReport::new(per, avg),
        persistence: HorizonReport::new(bper, bavg),
    };
    for r in report.model.horizon_breakdown.iter().chain(&report.persistence.horizon_breakdown) {
        if r.rmse + 1e-12 < r.mae {
            return Err(CliError::contract(format!("RMSE {} below MAE {}", r.rmse, r.mae)));
        }
    }
    Ok(report)
}

/// Loads a checkpoint and checks it against the prepared data.
pub fn load_for_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<(Prepared, ModelParams)> {
    let (manifest, params) = load_checkpoint(checkpoint)?;
    let prep = prepare(cfg, Some(&cfg.pe_cache_path()))?;
    if manifest.config != prep.model {
        return Err(CliError::contract(format!(
            "checkpoint config {:?} does not match the run config {:?}",
            manifest.config, prep.model
        )));
    }
    Ok((prep, params))
}

fn fmt_mape(m: Option<f64>) -> String {
    m.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}%"))
}

/// Table with Horizon 3/6/12 rows (when within `F`) and the average.
pub fn format_table(report: &EvalReport) -> String {
    let mut s = format!("{:<12} {:<12} {:>10} {:>10} {:>10}\n", "method", "horizon", "MAE", "RMSE", "MAPE");
    for (name, r) in [("model", &report.model), ("persistence", &report.persistence)] {
        let f = r.horizon_breakdown.len();
        for h in [3, 6, 12].into_iter().filter(|&h| h <= f) {
            let m = &r.horizon_breakdown[h - 1];
            s.push_str(&format!(
                "{name:<12} {:<12} {:>10.4} {:>10.4} {:>10}\n",
                format!("Horizon {h}"),
                m.mae,
                m.rmse,
                fmt_mape(m.mape_pct)
            ));
        }
        s.push_str(&format!(
            "{name:<12} {:<12} {:>10.4} {:>10.4} {:>10}\n",
            "Average",
            r.mae,
            r.rmse,
            fmt_mape(r.mape_pct)
        ));
    }
    s
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    write_json(path, report)
}
