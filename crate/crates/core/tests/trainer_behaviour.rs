use sbat_core::graph::laplacian_pe;
use sbat_core::model::{ModelConfig, ModelParams};
use sbat_core::partition::{build_scale_series, ScaleSeries, DEFAULT_BALANCE};
use sbat_core::pipeline::{make_windows, synth_diffusion, Normalizer, Split, SynthConfig, Window};
use sbat_core::trainer::{mean_abs_error, train, TrainConfig, TrainData};
use sbat_core::Tensor;

struct Fixture {
    model: ModelConfig,
    series: Tensor,
    pe: Tensor,
    plans: ScaleSeries,
    windows: Vec<Window>,
}

impl Fixture {
    fn new(model: ModelConfig, count: usize) -> Self {
        let steps = count + model.t + model.f - 1;
        let ds = synth_diffusion(&SynthConfig { n: model.n, steps, seed: 4, ..SynthConfig::default() }).unwrap();
        let norm = Normalizer::fit(&ds.series, 0..steps).unwrap();
        let series = norm.apply(&ds.series).unwrap();
        let pe = laplacian_pe(&ds.graph, model.k_pe, 512).unwrap().vectors;
        let plans = build_scale_series(&ds.graph, model.p0, model.l, DEFAULT_BALANCE, 0).unwrap();
        let windows = make_windows(0..steps, model.t, model.f, 1, Split::Train).windows;
        assert_eq!(windows.len(), count);
        Self { model, series, pe, plans, windows }
    }

    fn data(&self) -> TrainData<'_> {
        TrainData {
            model: &self.model,
            series: &self.series,
            pe: &self.pe,
            plans: &self.plans,
            train: &self.windows,
            val: &self.windows,
        }
    }
}

fn small() -> ModelConfig {
    ModelConfig { n: 8, t: 4, c: 1, f: 2, d_model: 8, l: 2, heads: 2, p0: 2, k_pe: 3, ffn_mult: 2 }
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let fx = Fixture::new(small(), 10);
    let init = ModelParams::init(&fx.model, 1).unwrap();
    let cfg = TrainConfig { lr: 0.0, batch_size: 4, max_epochs: 3, patience: 10, ..TrainConfig::default() };
    let out = train(&fx.data(), init.clone(), &cfg, |_, _| {}).unwrap();
    assert_eq!(out.best, init);
    assert_eq!(out.history.len(), 3);
    assert!(out.history.iter().all(|r| r.val_mae == out.history[0].val_mae));
}

#[test]
fn identical_seeds_give_identical_histories() {
    let fx = Fixture::new(small(), 12);
    let cfg = TrainConfig { batch_size: 5, max_epochs: 4, seed: 9, ..TrainConfig::default() };
    let run = || train(&fx.data(), ModelParams::init(&fx.model, 2).unwrap(), &cfg, |_, _| {}).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.best, b.best);
}

#[test]
fn full_batch_loss_matches_offline_mae() {
    let fx = Fixture::new(small(), 6);
    let init = ModelParams::init(&fx.model, 3).unwrap();
    let offline = mean_abs_error(&fx.data(), &init, &fx.windows, 100).unwrap();
    let cfg = TrainConfig { batch_size: 6, max_epochs: 1, ..TrainConfig::default() };
    let out = train(&fx.data(), init, &cfg, |_, _| {}).unwrap();
    assert!((out.history[0].train_loss - offline).abs() < 1e-12);
}

#[test]
fn best_checkpoint_is_never_worse_than_history() {
    let fx = Fixture::new(small(), 12);
    let cfg = TrainConfig { lr: 3e-2, batch_size: 4, max_epochs: 8, patience: 3, ..TrainConfig::default() };
    let out = train(&fx.data(), ModelParams::init(&fx.model, 5).unwrap(), &cfg, |_, _| {}).unwrap();
    let best = out.history.iter().map(|r| r.val_mae).fold(f64::INFINITY, f64::min);
    let replay = mean_abs_error(&fx.data(), &out.best, &fx.windows, cfg.batch_size).unwrap();
    assert_eq!(replay, best);
    assert_eq!(out.state.best_val_mae, best);
}

#[test]
fn memorizes_a_tiny_training_set() {
    let model = ModelConfig { n: 8, t: 4, c: 1, f: 2, d_model: 32, l: 2, heads: 2, p0: 2, k_pe: 4, ffn_mult: 4 };
    let fx = Fixture::new(model, 32);
    let cfg = TrainConfig { lr: 3e-3, batch_size: 8, max_epochs: 200, patience: 200, ..TrainConfig::default() };
    let mut reached = None;
    let out = train(&fx.data(), ModelParams::init(&fx.model, 0).unwrap(), &cfg, |r, _| {
        if reached.is_none() && r.val_mae < 0.05 {
            reached = Some(r.epoch);
        }
    })
    .unwrap();
    let final_mae = mean_abs_error(&fx.data(), &out.best, &fx.windows, 32).unwrap();
    assert!(final_mae < 0.05, "train MAE {final_mae} after {} epochs", out.history.len());
    assert!(reached.is_some());
}
