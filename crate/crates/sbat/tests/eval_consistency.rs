use std::path::Path;

use sbat::config::RunConfig;
use sbat::run::{evaluate, load_for_eval, prepare, run_train, CHECKPOINT_DIR};
use sbat::CliError;
use sbat_core::model::ModelParams;
use sbat_core::pipeline::{Split, SynthConfig};
use sbat_core::trainer::mean_abs_error;
use tempfile::tempdir;

fn small_config(out: &Path, lr: f64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.synthetic = SynthConfig { n: 16, steps: 160, ..SynthConfig::default() };
    cfg.data.stride = 3;
    cfg.model.t = 8;
    cfg.model.f = 4;
    cfg.model.d_model = 8;
    cfg.model.l = 2;
    cfg.model.heads = 2;
    cfg.partition.p0 = 4;
    cfg.pe.k = 4;
    cfg.train.lr = lr;
    cfg.train.max_epochs = 2;
    cfg.train.batch_size = 8;
    cfg.paths.out_dir = out.to_path_buf();
    cfg
}

#[test]
fn zero_lr_training_evaluates_like_the_initial_model() {
    let dir = tempdir().unwrap();
    let cfg = small_config(dir.path(), 0.0);
    let summary = run_train(&cfg).unwrap();
    let (prep, params) = load_for_eval(&cfg, &dir.path().join(CHECKPOINT_DIR)).unwrap();
    let init = ModelParams::init(&prep.model, cfg.train.seed).unwrap();
    assert_eq!(params, init);
    assert_eq!(summary.params, init);
    assert_eq!(
        evaluate(&prep, &params, Split::Test, 1e-4).unwrap(),
        evaluate(&prep, &init, Split::Test, 1e-4).unwrap()
    );
}

#[test]
fn denormalized_metrics_scale_with_channel_std() {
    let dir = tempdir().unwrap();
    let cfg = small_config(dir.path(), 1e-3);
    let summary = run_train(&cfg).unwrap();
    let (prep, params) = load_for_eval(&cfg, &dir.path().join(CHECKPOINT_DIR)).unwrap();
    let std = prep.normalizer.std[0];
    let report = evaluate(&prep, &params, Split::Val, 1e-4).unwrap();
    // Val MAE tracked during training is on the normalized scale.
    assert!((report.model.mae - std * summary.best_val_mae).abs() <= 1e-9);
    let norm_test = mean_abs_error(&prep.train_data(), &params, prep.windows(Split::Test), 64).unwrap();
    let test = evaluate(&prep, &params, Split::Test, 1e-4).unwrap();
    assert!((test.model.mae - std * norm_test).abs() <= 1e-9);

    // Persistence from raw inputs, by hand.
    let series = &prep.dataset.series;
    let (mut total, mut count) = (0.0, 0);
    for w in prep.windows(Split::Test) {
        for node in 0..prep.model.n {
            let last = series.get(&[node, w.start + w.t - 1, 0]);
            for h in 0..w.f {
                total += (last - series.get(&[node, w.start + w.t + h, 0])).abs();
                count += 1;
            }
        }
    }
    assert!((test.persistence.mae - total / f64::from(count)).abs() <= 1e-9);
    assert_eq!(test.model.horizon_breakdown.len(), 4);
    assert!(test.model.rmse >= test.model.mae);
}

#[test]
fn mismatched_checkpoint_is_a_contract_error() {
    let dir = tempdir().unwrap();
    let cfg = small_config(dir.path(), 1e-3);
    let mut short = cfg.clone();
    short.train.max_epochs = 1;
    run_train(&short).unwrap();
    let mut wider = cfg.clone();
    wider.model.d_model = 12;
    let err = load_for_eval(&wider, &dir.path().join(CHECKPOINT_DIR)).err().expect("mismatch must fail");
    assert!(matches!(err, CliError::Contract(_)), "{err}");
    // Unchanged config still loads.
    assert!(prepare(&cfg, None).is_ok());
    assert!(load_for_eval(&cfg, &dir.path().join(CHECKPOINT_DIR)).is_ok());
}
