//! Adam optimizer and the epoch loop with validation-based early stopping.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{forward, mae_loss, predict, ForwardOptions, ModelConfig, ModelParams};
use crate::partition::ScaleSeries;
use crate::pipeline::{materialize, Window};
use crate::tensor::Tensor;

/// Optimizer and loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Global gradient-norm cap.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            batch_size: 16,
            max_epochs: 100,
            patience: 10,
            grad_clip: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(self.lr >= 0.0) || !(0.0 < b1 && b1 < 1.0) || !(0.0 < b2 && b2 < 1.0) || !(self.eps > 0.0) {
            return Err(Error::Config(format!(
                "need lr >= 0, 0 < betas < 1 and eps > 0; got lr={}, betas={:?}, eps={}",
                self.lr, self.betas, self.eps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { step: 0, v: m.clone(), m }
    }
}

/// One Adam update with bias correction, after optional global-norm clipping.
///
/// `grads` pairs each gradient with its parameter name for error reporting.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[(&str, &Tensor)],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam_step: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let mut sq = 0.0;
    for ((name, g), p) in grads.iter().zip(params.iter()) {
        if g.shape() != p.shape() {
            return Err(Error::Contract(format!(
                "gradient of {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Input(format!("non-finite gradient in {name}")));
        }
        sq += g.data().iter().map(|v| v * v).sum::<f64>();
    }
    let norm = libm::sqrt(sq);
    let clip = match cfg.grad_clip {
        Some(max) if norm > max => max / norm,
        _ => 1.0,
    };
    state.step += 1;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - libm::pow(b1, state.step as f64);
    let c2 = 1.0 - libm::pow(b2, state.step as f64);
    for (i, ((_, g), p)) in grads.iter().zip(params.iter_mut()).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gj = gj * clip;
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            *w -= cfg.lr * (m[j] / c1) / (libm::sqrt(v[j] / c2) + cfg.eps);
        }
    }
    Ok(())
}

/// Loop progress carried between epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub best_val_mae: f64,
    pub epochs_since_improve: usize,
    pub adam: AdamState,
}

/// Per-epoch summary. Wall time is measured by the caller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean absolute error over every training entry of the epoch (normalized scale).
    pub train_loss: f64,
    pub val_mae: f64,
    pub improved: bool,
    /// Instrumented forward FLOPs summed over the epoch's training batches.
    pub forward_flops: u64,
}

/// Everything the loop reads: normalized series and windows.
pub struct TrainData<'a> {
    pub model: &'a ModelConfig,
    /// Normalized `N×T×C` series.
    pub series: &'a Tensor,
    /// `N×k_pe` positional encoding.
    pub pe: &'a Tensor,
    pub plans: &'a ScaleSeries,
    pub train: &'a [Window],
    pub val: &'a [Window],
}

pub struct TrainOutcome {
    pub best: ModelParams,
    pub history: Vec<EpochRecord>,
    pub state: TrainState,
    /// Set when training stopped on a non-finite loss or gradient; `best` is the last good checkpoint.
    pub diverged: Option<String>,
}

/// Loss and gradients (manifest order) for one batch.
pub fn batch_gradients(
    data: &TrainData<'_>,
    params: &ModelParams,
    windows: &[Window],
) -> Result<(f64, Vec<Tensor>, u64)> {
    let (x, y) = materialize(data.series, windows)?;
    let mut tape = Tape::instrumented();
    let w = params.bind(&mut tape);
    let xv = tape.constant(x);
    let yv = tape.constant(y);
    let pe = tape.constant(data.pe.clone());
    let out = forward(&mut tape, data.model, xv, pe, data.plans, &w, &ForwardOptions::default())?;
    let flops = tape.flops().total();
    let loss = mae_loss(&mut tape, out.prediction, yv)?;
    tape.backward(loss)?;
    let grads =
        w.iter().into_iter().map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v)))).collect();
    Ok((tape.value(loss).item(), grads, flops))
}

/// Mean absolute error over `windows`, evaluated in chunks of `batch_size`.
pub fn mean_abs_error(
    data: &TrainData<'_>,
    params: &ModelParams,
    windows: &[Window],
    batch_size: usize,
) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in windows.chunks(batch_size.max(1)) {
        let (x, y) = materialize(data.series, chunk)?;
        let pred = predict(data.model, params, &x, data.pe, data.plans)?;
        total += pred.data().iter().zip(y.data()).map(|(p, t)| (p - t).abs()).sum::<f64>();
        count += y.numel();
    }
    if count == 0 {
        return Err(Error::Contract("no windows to evaluate".into()));
    }
    Ok(total / count as f64)
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::Input(_))
}

/// Seeded-shuffle minibatch training with early stopping on validation MAE.
///
/// `on_epoch` sees each record and the current best parameters after every
/// epoch (for checkpointing and logging).
pub fn train(
    data: &TrainData<'_>,
    init: ModelParams,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &ModelParams),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config("training and validation splits need at least one window each".into()));
    }
    let mut params = init;
    let mut best = params.clone();
    let mut state = TrainState {
        epoch: 0,
        best_val_mae: f64::INFINITY,
        epochs_since_improve: 0,
        adam: AdamState::new(params.iter()),
    };
    let mut history = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut diverged = None;

    'epochs: for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen, mut flops) = (0.0, 0usize, 0u64);
        for chunk in order.chunks(cfg.batch_size) {
            let windows: Vec<Window> = chunk.iter().map(|&i| data.train[i]).collect();
            let (loss, grads, f) = match batch_gradients(data, &params, &windows) {
                Ok(r) => r,
                Err(e) if is_divergence(&e) => {
                    diverged = Some(format!("epoch {epoch}: {e}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                diverged = Some(format!("epoch {epoch}: training loss is {loss}"));
                break 'epochs;
            }
            let entries = windows.len();
            loss_sum += loss * entries as f64;
            seen += entries;
            flops += f;
            let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
            let named: Vec<(&str, &Tensor)> = names.iter().map(String::as_str).zip(grads.iter()).collect();
            let mut slots = params.iter_mut();
            if let Err(e) = adam_step(&mut slots, &named, &mut state.adam, cfg) {
                if is_divergence(&e) {
                    diverged = Some(format!("epoch {epoch}: {e}"));
                    break 'epochs;
                }
                return Err(e);
            }
        }
        let val_mae = match mean_abs_error(data, &params, data.val, cfg.batch_size) {
            Ok(v) if v.is_finite() => v,
            Ok(v) => {
                diverged = Some(format!("epoch {epoch}: validation MAE is {v}"));
                break;
            }
            Err(e) if is_divergence(&e) => {
                diverged = Some(format!("epoch {epoch}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let improved = val_mae < state.best_val_mae;
        if improved {
            state.best_val_mae = val_mae;
            state.epochs_since_improve = 0;
            best = params.clone();
        } else {
            state.epochs_since_improve += 1;
        }
        state.epoch = epoch + 1;
        let record = EpochRecord { epoch, train_loss: loss_sum / seen as f64, val_mae, improved, forward_flops: flops };
        on_epoch(&record, &best);
        history.push(record);
        if state.epochs_since_improve >= cfg.patience.max(1) {
            break;
        }
    }
    Ok(TrainOutcome { best, history, state, diverged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn scalar_step(g: f64, cfg: &TrainConfig, state: &mut AdamState, p: &mut Tensor) {
        let grad = Tensor::scalar(g);
        adam_step(&mut [p], &[("w", &grad)], state, cfg).unwrap();
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let cfg = TrainConfig::default();
        let mut p = Tensor::scalar(0.7);
        let mut state = AdamState::new([&p]);
        state.m[0] = Tensor::scalar(0.5);
        state.v[0] = Tensor::scalar(0.25);
        scalar_step(0.0, &cfg, &mut state, &mut p);
        assert!(state.m[0].item() < 0.5 && state.v[0].item() < 0.25);
        let mut p2 = Tensor::scalar(0.7);
        let mut fresh = AdamState::new([&p2]);
        scalar_step(0.0, &cfg, &mut fresh, &mut p2);
        assert_eq!(p2.item(), 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = TrainConfig { lr: 0.01, ..TrainConfig::default() };
        for g in [3.0, -0.2] {
            let mut p = Tensor::scalar(1.0);
            let mut state = AdamState::new([&p]);
            scalar_step(g, &cfg, &mut state, &mut p);
            let expect = 1.0 - cfg.lr * g / (g.abs() + cfg.eps);
            assert!((p.item() - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn clipping_rescales() {
        let cfg = TrainConfig { grad_clip: Some(1.0), ..TrainConfig::default() };
        let mut p = Tensor::new(&[2], vec![0.0, 0.0]).unwrap();
        let mut state = AdamState::new([&p]);
        let g = Tensor::new(&[2], vec![3.0, 4.0]).unwrap();
        adam_step(&mut [&mut p], &[("w", &g)], &mut state, &cfg).unwrap();
        assert!((state.m[0].data()[0] - 0.1 * 0.6).abs() < 1e-15);
        assert!((state.m[0].data()[1] - 0.1 * 0.8).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_tensor() {
        let cfg = TrainConfig::default();
        let mut p = Tensor::scalar(0.0);
        let mut state = AdamState::new([&p]);
        let g = Tensor::scalar(f64::NAN);
        let err = adam_step(&mut [&mut p], &[("blocks.0.fuse", &g)], &mut state, &cfg).unwrap_err();
        assert!(format!("{err}").contains("blocks.0.fuse"));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { betas: (1.0, 0.5), ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
