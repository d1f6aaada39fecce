//! AdamW, cosine annealing, early stopping and the mini-batch training loop.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{gaussian_nll, loss_and_gradients, LossKind};
use crate::network::{MlpModel, TensorSlot};
use crate::numerics::Rng;

/// Loss magnitude treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    slots: Vec<TensorSlot>,
    decay: Vec<bool>,
}

impl OptimizerState {
    /// `decay[i]` selects which flat parameters receive weight decay.
    pub fn new(config: AdamWConfig, slots: Vec<TensorSlot>, decay: Vec<bool>) -> Result<Self> {
        let n: usize = slots.iter().map(|s| s.len).sum();
        if decay.len() != n {
            return Err(Error::shape("OptimizerState decay mask", n, decay.len()));
        }
        Ok(OptimizerState {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            slots,
            decay,
        })
    }

    /// Every parameter decays.
    pub fn for_model(config: AdamWConfig, model: &MlpModel) -> Self {
        let n = model.num_params();
        OptimizerState::new(config, model.param_layout(), vec![true; n]).expect("mask sized from model")
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn slot_of(&self, index: usize) -> String {
        let mut off = 0;
        for s in &self.slots {
            if index < off + s.len {
                return s.name.clone();
            }
            off += s.len;
        }
        "?".into()
    }
}

/// `p ← p·(1 − lr·λ) − lr·m̂/(√v̂ + ε)` with bias-corrected moments.
pub fn adamw_step(state: &mut OptimizerState, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(Error::shape(
            "adamw_step",
            state.m.len(),
            format!("{} params / {} grads", params.len(), grads.len()),
        ));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            tensor: state.slot_of(i),
            index: i,
        });
    }
    state.step += 1;
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        if state.decay[i] && weight_decay != 0.0 {
            params[i] *= 1.0 - lr * weight_decay;
        }
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// `lr0 · ½(1 + cos(π·step/total))`, clamped at `step = total`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let s = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * s).cos())
}

/// Tracks the minimum of a monitored metric and the state that produced it.
#[derive(Debug, Clone)]
pub struct EarlyStopper<T> {
    patience: Option<usize>,
    history: Vec<f64>,
    best_value: f64,
    best_step: usize,
    best_snapshot: Option<T>,
    since_best: usize,
}

impl<T> EarlyStopper<T> {
    /// `patience = None` never stops early but still keeps the best snapshot.
    pub fn new(patience: Option<usize>) -> Self {
        EarlyStopper {
            patience,
            history: Vec::new(),
            best_value: f64::INFINITY,
            best_step: 0,
            best_snapshot: None,
            since_best: 0,
        }
    }

    /// Records `value` at `step`; returns `false` once patience is exhausted.
    pub fn observe(&mut self, step: usize, value: f64, snapshot: impl FnOnce() -> T) -> bool {
        self.history.push(value);
        if value < self.best_value {
            self.best_value = value;
            self.best_step = step;
            self.best_snapshot = Some(snapshot());
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            self.patience.is_none_or(|p| self.since_best <= p)
        }
    }

    pub fn best_value(&self) -> f64 {
        self.best_value
    }

    pub fn best_step(&self) -> usize {
        self.best_step
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    pub fn into_best(self) -> Option<(usize, T)> {
        let step = self.best_step;
        self.best_snapshot.map(|s| (step, s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStopMetric {
    HoldoutMae,
    HoldoutNll,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub early_stop: EarlyStopMetric,
    /// Stop after this many epochs without improvement; `None` runs every
    /// epoch and returns the best snapshot.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 100,
            lr: 1e-3,
            weight_decay: 0.01,
            seed: 0,
            early_stop: EarlyStopMetric::HoldoutMae,
            patience: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub holdout_metric: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch of the returned parameters.
    pub best_epoch: usize,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,holdout_metric,lr\n");
    for r in history {
        let metric = r.holdout_metric.map_or_else(String::new, |m| format!("{m:?}"));
        out.push_str(&format!("{},{:?},{},{:?}\n", r.epoch, r.train_loss, metric, r.lr));
    }
    out
}

fn holdout_metric(model: &MlpModel, data: &Dataset, metric: EarlyStopMetric) -> Result<f64> {
    let (mu, var) = model.predict(&data.x)?;
    match metric {
        EarlyStopMetric::HoldoutMae => {
            Ok(mu.iter().zip(&data.y).map(|(m, y)| (y - m).abs()).sum::<f64>() / mu.len() as f64)
        }
        EarlyStopMetric::HoldoutNll => {
            let var = var.ok_or_else(|| Error::invalid("hold-out NLL needs a variance head"))?;
            Ok(gaussian_nll(&mu, &var, &data.y)?.loss)
        }
        EarlyStopMetric::None => Ok(f64::NAN),
    }
}

/// Mini-batch AdamW with a per-step cosine schedule. Batches are reshuffled
/// every epoch from the run RNG.
pub fn train(
    mut model: MlpModel,
    loss: LossKind,
    train_data: &Dataset,
    holdout: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if !loss.supports(model.head_kind()) {
        return Err(Error::invalid(format!(
            "loss {} cannot train a {:?} head",
            loss.name(),
            model.head_kind()
        )));
    }
    if train_data.is_empty() || config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::invalid("train needs data, a positive batch size and epochs"));
    }
    let monitor = match (config.early_stop, holdout) {
        (EarlyStopMetric::None, _) => None,
        (m, Some(h)) => Some((m, h)),
        (_, None) => return Err(Error::invalid("early stopping needs a hold-out set")),
    };
    let mut rng = Rng::new(config.seed);
    let n = train_data.len();
    let batches = n.div_ceil(config.batch_size);
    let total_steps = config.epochs * batches;
    let mut opt = OptimizerState::for_model(
        AdamWConfig {
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        },
        &model,
    );
    let mut params = model.params();
    let mut stopper: EarlyStopper<Vec<f64>> = EarlyStopper::new(config.patience);
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let order = rng.permutation(n);
        let lr_epoch = cosine_lr(step, total_steps, config.lr);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let x = train_data.x.select_rows(chunk);
            let y: Vec<f64> = chunk.iter().map(|&i| train_data.y[i]).collect();
            let (out, grads) = loss_and_gradients(&model, loss, &x, &y)?;
            if !out.loss.is_finite() || out.loss.abs() > DIVERGENCE_LIMIT {
                return Err(Error::Diverged {
                    epoch,
                    loss: out.loss,
                    history,
                });
            }
            loss_sum += out.loss * chunk.len() as f64;
            let lr = cosine_lr(step, total_steps, config.lr);
            let flat = grads.flatten(model.head_kind());
            if let Err(e) = adamw_step(&mut opt, &mut params, &flat, lr) {
                return Err(match e {
                    Error::NonFiniteGradient { .. } => Error::Diverged {
                        epoch,
                        loss: f64::NAN,
                        history,
                    },
                    other => other,
                });
            }
            model.set_params(&params)?;
            step += 1;
        }
        let metric = match monitor {
            Some((m, h)) => Some(holdout_metric(&model, h, m)?),
            None => None,
        };
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            holdout_metric: metric,
            lr: lr_epoch,
        });
        if let Some(value) = metric {
            let value = if value.is_finite() { value } else { f64::INFINITY };
            if !stopper.observe(epoch, value, || params.clone()) {
                break;
            }
        }
    }
    let best_epoch = match (monitor, stopper.into_best()) {
        (Some(_), Some((epoch, best))) => {
            model.set_params(&best)?;
            epoch
        }
        _ => history.len(),
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

/// One call into an epoch-based fitting procedure.
#[derive(Debug, Clone, PartialEq)]
pub struct RefitStage {
    pub fit_rows: Vec<usize>,
    /// Present in the search stage; the fit must early-stop on these rows.
    pub monitor_rows: Option<Vec<usize>>,
    pub epochs: usize,
    /// Length of the learning-rate schedule, shared by both stages.
    pub horizon: usize,
    pub patience: usize,
}

#[derive(Debug, Clone)]
pub struct StageResult<T> {
    pub fitted: T,
    /// Epoch count at the best monitored value (0 = initial state).
    pub best_epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefitConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub fit_fraction: f64,
}

impl Default for RefitConfig {
    fn default() -> Self {
        RefitConfig {
            max_epochs: 5_000,
            patience: 50,
            fit_fraction: 0.8,
        }
    }
}

pub const MIN_REFIT_ROWS: usize = 5;

/// Two-stage fit: search the epoch count on a seeded 80/20 split of the
/// hold-out rows, then refit on all rows for exactly that many epochs.
pub fn early_stop_refit<T>(
    n_rows: usize,
    rng: &mut Rng,
    config: &RefitConfig,
    mut fit: impl FnMut(&RefitStage) -> Result<StageResult<T>>,
) -> Result<(T, usize)> {
    if n_rows < MIN_REFIT_ROWS {
        return Err(Error::invalid(format!(
            "hold-out of {n_rows} rows is too small to split (need {MIN_REFIT_ROWS})"
        )));
    }
    let perm = rng.permutation(n_rows);
    let n_fit = ((config.fit_fraction * n_rows as f64).round() as usize).clamp(1, n_rows - 1);
    let search = RefitStage {
        fit_rows: perm[..n_fit].to_vec(),
        monitor_rows: Some(perm[n_fit..].to_vec()),
        epochs: config.max_epochs,
        horizon: config.max_epochs,
        patience: config.patience,
    };
    let found = fit(&search)?;
    let refit = RefitStage {
        fit_rows: (0..n_rows).collect(),
        monitor_rows: None,
        epochs: found.best_epoch,
        horizon: config.max_epochs,
        patience: config.patience,
    };
    let result = fit(&refit)?;
    Ok((result.fitted, found.best_epoch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Activation, HeadKind};
    use crate::numerics::Matrix;

    fn scalar_state(wd: f64) -> OptimizerState {
        OptimizerState::new(
            AdamWConfig {
                weight_decay: wd,
                ..AdamWConfig::default()
            },
            vec![TensorSlot {
                name: "p".into(),
                len: 1,
            }],
            vec![true],
        )
        .unwrap()
    }

    #[test]
    fn adamw_examples() {
        let mut s = scalar_state(0.0);
        let mut p = [1.0];
        adamw_step(&mut s, &mut p, &[0.0], 0.1).unwrap();
        assert_eq!(p, [1.0]);

        let mut s = scalar_state(0.0);
        let mut p = [1.0];
        adamw_step(&mut s, &mut p, &[1.0], 0.1).unwrap();
        // m̂ = v̂ = 1 at t = 1, so the step is 0.1/(1 + ε).
        assert!((p[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p[0] - 0.9).abs() < 1e-6);

        let mut s = scalar_state(0.01);
        let mut p = [2.0];
        adamw_step(&mut s, &mut p, &[0.0], 0.1).unwrap();
        assert_eq!(p[0], 2.0 * (1.0 - 0.001));
    }

    #[test]
    fn adamw_rejects_non_finite() {
        let mut s = OptimizerState::new(
            AdamWConfig::default(),
            vec![
                TensorSlot { name: "w".into(), len: 2 },
                TensorSlot { name: "b".into(), len: 1 },
            ],
            vec![true; 3],
        )
        .unwrap();
        let mut p = [0.0; 3];
        match adamw_step(&mut s, &mut p, &[0.0, 0.0, f64::NAN], 0.1) {
            Err(Error::NonFiniteGradient { tensor, index }) => {
                assert_eq!(tensor, "b");
                assert_eq!(index, 2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn adamw_converges_on_quadratic() {
        let a = 3.7;
        let mut s = scalar_state(0.0);
        let mut p = [0.0];
        for _ in 0..5_000 {
            let g = p[0] - a;
            adamw_step(&mut s, &mut p, &[g], 1e-2).unwrap();
        }
        assert!((p[0] - a).abs() < 1e-6, "{}", p[0]);
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0, 100, 0.5), 0.5);
        assert!(cosine_lr(100, 100, 0.5).abs() < 1e-17);
        assert!((cosine_lr(50, 100, 0.5) - 0.25).abs() < 1e-15);
        assert_eq!(cosine_lr(150, 100, 0.5), cosine_lr(100, 100, 0.5));
    }

    #[test]
    fn early_stopper_patience_zero() {
        let metric = [5.0, 4.0, 3.0, 3.5, 2.0];
        let mut es = EarlyStopper::new(Some(0));
        let mut stopped_at = None;
        for (i, &m) in metric.iter().enumerate() {
            if !es.observe(i + 1, m, || i + 1) {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(4));
        assert_eq!(es.best_value(), 3.0);
        assert_eq!(es.into_best(), Some((3, 3)));
    }

    fn linear_data(n: usize) -> Dataset {
        let x: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
        let y = x.iter().map(|v| 2.0 * v).collect();
        Dataset::new("lin", Matrix::from_vec(n, 1, x).unwrap(), y).unwrap()
    }

    #[test]
    fn train_recovers_linear_slope() {
        let data = linear_data(64);
        let model = MlpModel::new(1, &[], Activation::Identity, HeadKind::MeanOnly, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 400,
            batch_size: 16,
            lr: 2e-2,
            weight_decay: 0.0,
            seed: 3,
            early_stop: EarlyStopMetric::None,
            patience: None,
        };
        let out = train(model, LossKind::Mse, &data, None, &cfg).unwrap();
        let slope = out.model.layers()[0].weight.get(0, 0);
        assert!((slope - 2.0).abs() < 1e-3, "slope {slope}");
        assert_eq!(out.history.len(), 400);
    }

    #[test]
    fn train_is_deterministic() {
        let data = linear_data(40);
        let hold = linear_data(10);
        let mk = || MlpModel::new(1, &[8], Activation::Tanh, HeadKind::MeanVariance, 5).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 8,
            seed: 11,
            ..TrainConfig::default()
        };
        let a = train(mk(), LossKind::GaussianNll, &data, Some(&hold), &cfg).unwrap();
        let b = train(mk(), LossKind::GaussianNll, &data, Some(&hold), &cfg).unwrap();
        let bits = |m: &MlpModel| m.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.model), bits(&b.model));
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn train_returns_best_snapshot() {
        let data = linear_data(40);
        let hold = linear_data(10);
        let model = MlpModel::new(1, &[4], Activation::Tanh, HeadKind::MeanOnly, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 0.05,
            seed: 1,
            patience: Some(3),
            ..TrainConfig::default()
        };
        let out = train(model, LossKind::Mse, &data, Some(&hold), &cfg).unwrap();
        let best = out
            .history
            .iter()
            .map(|r| r.holdout_metric.unwrap())
            .fold(f64::INFINITY, f64::min);
        let mae = holdout_metric(&out.model, &hold, EarlyStopMetric::HoldoutMae).unwrap();
        assert_eq!(mae, best);
        assert_eq!(out.history[out.best_epoch - 1].holdout_metric, Some(best));
    }

    #[test]
    fn train_reports_divergence() {
        let data = linear_data(20);
        let mut model = MlpModel::new(1, &[], Activation::Identity, HeadKind::MeanOnly, 2).unwrap();
        model.set_params(&[1e200, 0.0]).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            early_stop: EarlyStopMetric::None,
            ..TrainConfig::default()
        };
        match train(model, LossKind::Mse, &data, None, &cfg) {
            Err(Error::Diverged { epoch, history, .. }) => {
                assert_eq!(epoch, 1);
                assert!(history.is_empty());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn history_csv_columns() {
        let csv = history_csv(&[EpochRecord {
            epoch: 1,
            train_loss: 0.5,
            holdout_metric: Some(0.25),
            lr: 1e-3,
        }]);
        assert_eq!(csv, "epoch,train_loss,holdout_metric,lr\n1,0.5,0.25,0.001\n");
    }

    #[test]
    fn refit_monotone_picks_max_and_reproduces() {
        let cfg = RefitConfig {
            max_epochs: 40,
            patience: 5,
            fit_fraction: 0.8,
        };
        let fit = |stage: &RefitStage| -> Result<StageResult<(usize, usize)>> {
            // Monitored value strictly decreasing in the epoch count.
            let best = if stage.monitor_rows.is_some() { stage.epochs } else { stage.epochs };
            Ok(StageResult {
                fitted: (stage.fit_rows.len(), stage.epochs),
                best_epoch: best,
            })
        };
        let (a, steps) = early_stop_refit(20, &mut Rng::new(1), &cfg, fit).unwrap();
        assert_eq!(steps, 40);
        assert_eq!(a, (20, 40));
        let (b, _) = early_stop_refit(20, &mut Rng::new(1), &cfg, fit).unwrap();
        assert_eq!(a, b);
        assert!(early_stop_refit(4, &mut Rng::new(1), &cfg, fit).is_err());
    }

    #[test]
    fn refit_splits_eighty_twenty() {
        let mut seen = Vec::new();
        early_stop_refit(50, &mut Rng::new(2), &RefitConfig::default(), |s| {
            seen.push(s.clone());
            Ok(StageResult { fitted: (), best_epoch: 7 })
        })
        .unwrap();
        let search = &seen[0];
        assert_eq!(search.fit_rows.len(), 40);
        assert_eq!(search.monitor_rows.as_ref().unwrap().len(), 10);
        assert!(search.fit_rows.iter().all(|r| !search.monitor_rows.as_ref().unwrap().contains(r)));
        assert_eq!(seen[1].epochs, 7);
        assert_eq!(seen[1].fit_rows.len(), 50);
        assert_eq!(seen[1].horizon, 5_000);
    }
}
