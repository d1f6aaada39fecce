//! Post-hoc variance estimation over a frozen mean network: linear softplus
//! heads on hidden representations, temperature scaling, and the
//! equal-mean Gaussian mixture ensemble.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ForwardTrace, MlpModel, VAR_FLOOR};
use crate::numerics::{dot, inv_softplus, log_sum_exp, sigmoid, softplus, Matrix, Rng, LN_2PI};
use crate::optim::{
    adamw_step, cosine_lr, early_stop_refit, AdamWConfig, EarlyStopper, EpochRecord, OptimizerState,
    RefitConfig, RefitStage, StageResult, DIVERGENCE_LIMIT,
};
use crate::network::TensorSlot;

/// Ordered, duplicate-free hidden-layer indices feeding a head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSet(Vec<usize>);

impl LayerSet {
    pub fn new(indices: Vec<usize>, depth: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("layer set is empty"));
        }
        for (i, &l) in indices.iter().enumerate() {
            if l >= depth {
                return Err(Error::invalid(format!(
                    "layer {l} out of range for a model with {depth} hidden layers"
                )));
            }
            if indices[..i].contains(&l) {
                return Err(Error::invalid(format!("layer {l} listed twice")));
            }
        }
        Ok(LayerSet(indices))
    }

    pub fn single(layer: usize, depth: usize) -> Result<Self> {
        LayerSet::new(vec![layer], depth)
    }

    pub fn all(depth: usize) -> Result<Self> {
        LayerSet::new((0..depth).collect(), depth)
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Selected representations of a batch plus the frozen mean.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivations {
    pub layers: Vec<usize>,
    pub blocks: Vec<Matrix>,
    pub mu: Vec<f64>,
}

impl LayerActivations {
    pub fn from_trace(trace: &ForwardTrace, layers: &LayerSet) -> Result<Self> {
        let reps = trace.representations();
        let mut blocks = Vec::with_capacity(layers.len());
        for &l in layers.indices() {
            let z = reps.get(l).ok_or_else(|| {
                Error::invalid(format!("layer {l} out of range for a trace with {} layers", reps.len()))
            })?;
            blocks.push(z.clone());
        }
        Ok(LayerActivations {
            layers: layers.indices().to_vec(),
            blocks,
            mu: trace.mean(),
        })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    fn widths(&self) -> Vec<usize> {
        self.blocks.iter().map(Matrix::cols).collect()
    }

    /// Blocks side by side as one `n × Σ dim(zˡ)` matrix.
    fn design(&self) -> Matrix {
        let n = self.len();
        let d: usize = self.widths().iter().sum();
        let mut out = Matrix::zeros(n, d);
        for i in 0..n {
            let row = out.row_mut(i);
            let mut off = 0;
            for b in &self.blocks {
                row[off..off + b.cols()].copy_from_slice(b.row(i));
                off += b.cols();
            }
        }
        out
    }
}

pub fn extract_activations(model: &MlpModel, x: &Matrix, layers: &LayerSet) -> Result<LayerActivations> {
    LayerSet::new(layers.indices().to_vec(), model.depth())?;
    LayerActivations::from_trace(&model.forward(x)?, layers)
}

/// `σ²(x) = γ · (softplus(Σ_l W_lᵀ zˡ + bias) + floor)`, with `γ = 1` unless fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceHead {
    pub layers: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub bias: f64,
    pub var_floor: f64,
    pub gamma: Option<f64>,
}

impl VarianceHead {
    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>() + 1
    }

    fn check(&self, acts: &LayerActivations) -> Result<()> {
        if acts.layers != self.layers {
            return Err(Error::invalid(format!(
                "head on layers {:?} given activations of {:?}",
                self.layers, acts.layers
            )));
        }
        for (w, b) in self.weights.iter().zip(&acts.blocks) {
            if w.len() != b.cols() {
                return Err(Error::shape("VarianceHead", w.len(), b.cols()));
            }
        }
        Ok(())
    }

    pub fn predict_activations(&self, acts: &LayerActivations) -> Result<Vec<f64>> {
        self.check(acts)?;
        let scale = self.gamma.unwrap_or(1.0);
        Ok((0..acts.len())
            .map(|i| {
                let s = self.bias
                    + self
                        .weights
                        .iter()
                        .zip(&acts.blocks)
                        .map(|(w, b)| dot(w, b.row(i)))
                        .sum::<f64>();
                scale * (softplus(s) + self.var_floor)
            })
            .collect())
    }

    pub fn predict_trace(&self, trace: &ForwardTrace) -> Result<Vec<f64>> {
        let set = LayerSet::new(self.layers.clone(), trace.representations().len())?;
        self.predict_activations(&LayerActivations::from_trace(trace, &set)?)
    }

    pub fn predict(&self, model: &MlpModel, x: &Matrix) -> Result<Vec<f64>> {
        self.predict_trace(&model.forward(x)?)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let doc = HeadCheckpoint {
            format: HEAD_FORMAT.into(),
            version: HEAD_VERSION,
            heads: vec![self.clone()],
        };
        save_heads(&doc, path)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let mut heads = load_heads_json(path)?;
        if heads.len() != 1 {
            return Err(Error::Input {
                path: path.into(),
                message: format!("expected one head, found {}", heads.len()),
            });
        }
        Ok(heads.remove(0))
    }
}

const HEAD_FORMAT: &str = "hetvar-variance-heads";
const HEAD_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct HeadCheckpoint {
    format: String,
    version: u32,
    heads: Vec<VarianceHead>,
}

fn save_heads(doc: &HeadCheckpoint, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(doc)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes a list of heads (e.g. an ensemble) as one checkpoint.
pub fn save_heads_json(heads: &[VarianceHead], path: &Path) -> Result<()> {
    save_heads(
        &HeadCheckpoint {
            format: HEAD_FORMAT.into(),
            version: HEAD_VERSION,
            heads: heads.to_vec(),
        },
        path,
    )
}

pub fn load_heads_json(path: &Path) -> Result<Vec<VarianceHead>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: HeadCheckpoint = serde_json::from_str(&text)?;
    if doc.format != HEAD_FORMAT || doc.version != HEAD_VERSION {
        return Err(Error::Input {
            path: path.into(),
            message: format!("unsupported head checkpoint {} v{}", doc.format, doc.version),
        });
    }
    Ok(doc.heads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadFitConfig {
    /// Applied to the weights only, never to the bias.
    pub weight_decay: f64,
    pub lr: f64,
    pub epochs: usize,
    /// `None` fits full-batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub var_floor: f64,
}

impl Default for HeadFitConfig {
    fn default() -> Self {
        HeadFitConfig {
            weight_decay: 0.01,
            lr: 5e-4,
            epochs: 500,
            batch_size: Some(32),
            seed: 0,
            var_floor: VAR_FLOOR,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadFit {
    pub head: VarianceHead,
    pub history: Vec<EpochRecord>,
    /// Epoch of the returned parameters (0 = initialisation).
    pub best_epoch: usize,
}

/// Mean hold-out NLL of the head `softplus(Z w + b) + floor` on rows `rows`.
fn head_nll(z: &Matrix, r2: &[f64], rows: &[usize], params: &[f64], floor: f64) -> f64 {
    let d = z.cols();
    let (w, b) = (&params[..d], params[d]);
    let total: f64 = rows
        .iter()
        .map(|&i| {
            let var = softplus(dot(w, z.row(i)) + b) + floor;
            0.5 * (LN_2PI + var.ln() + r2[i] / var)
        })
        .sum();
    total / rows.len() as f64
}

/// Loss and gradient over a batch of row indices.
fn head_grad(z: &Matrix, r2: &[f64], rows: &[usize], params: &[f64], floor: f64, grad: &mut [f64]) -> f64 {
    let d = z.cols();
    let (w, b) = (&params[..d], params[d]);
    grad.iter_mut().for_each(|g| *g = 0.0);
    let n = rows.len() as f64;
    let mut loss = 0.0;
    for &i in rows {
        let row = z.row(i);
        let s = dot(w, row) + b;
        let var = softplus(s) + floor;
        loss += 0.5 * (LN_2PI + var.ln() + r2[i] / var);
        let g = 0.5 * (1.0 / var - r2[i] / (var * var)) * sigmoid(s) / n;
        for (gj, xj) in grad[..d].iter_mut().zip(row) {
            *gj += g * xj;
        }
        grad[d] += g;
    }
    loss / n
}

struct CoreRun {
    params: Vec<f64>,
    history: Vec<EpochRecord>,
    best_epoch: usize,
}

/// Shared AdamW loop; with `monitor` it keeps the best-NLL snapshot and
/// stops after `patience` epochs without improvement.
#[allow(clippy::too_many_arguments)]
fn fit_core(
    z: &Matrix,
    r2: &[f64],
    fit_rows: &[usize],
    monitor: Option<(&[usize], usize)>,
    epochs: usize,
    horizon: usize,
    cfg: &HeadFitConfig,
) -> Result<CoreRun> {
    let d = z.cols();
    let mean_r2 = fit_rows.iter().map(|&i| r2[i]).sum::<f64>() / fit_rows.len() as f64;
    let mut params = vec![0.0; d + 1];
    params[d] = inv_softplus((mean_r2 - cfg.var_floor).max(cfg.var_floor));
    let mut mask = vec![true; d + 1];
    mask[d] = false;
    let slots = vec![
        TensorSlot { name: "head.weight".into(), len: d },
        TensorSlot { name: "head.bias".into(), len: 1 },
    ];
    let mut opt = OptimizerState::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        slots,
        mask,
    )?;
    let batch = cfg.batch_size.unwrap_or(fit_rows.len()).clamp(1, fit_rows.len());
    let batches = fit_rows.len().div_ceil(batch);
    let total_steps = horizon * batches;
    let mut rng = Rng::new(cfg.seed);
    let mut grad = vec![0.0; d + 1];
    let mut order = fit_rows.to_vec();
    let mut history = Vec::with_capacity(epochs);
    let mut stopper = EarlyStopper::new(monitor.map(|(_, p)| p));
    if let Some((rows, _)) = monitor {
        stopper.observe(0, head_nll(z, r2, rows, &params, cfg.var_floor), || params.clone());
    }
    let mut step = 0;
    for epoch in 1..=epochs {
        if batch < fit_rows.len() {
            rng.shuffle(&mut order);
        }
        let lr_epoch = cosine_lr(step, total_steps, cfg.lr);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch) {
            let loss = head_grad(z, r2, chunk, &params, cfg.var_floor, &mut grad);
            if !loss.is_finite() || loss.abs() > DIVERGENCE_LIMIT {
                return Err(Error::Diverged { epoch, loss, history });
            }
            loss_sum += loss * chunk.len() as f64;
            let lr = cosine_lr(step, total_steps, cfg.lr);
            if adamw_step(&mut opt, &mut params, &grad, lr).is_err() {
                return Err(Error::Diverged {
                    epoch,
                    loss: f64::NAN,
                    history,
                });
            }
            step += 1;
        }
        let metric = monitor.map(|(rows, _)| head_nll(z, r2, rows, &params, cfg.var_floor));
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / fit_rows.len() as f64,
            holdout_metric: metric,
            lr: lr_epoch,
        });
        if let Some(m) = metric {
            let m = if m.is_finite() { m } else { f64::INFINITY };
            if !stopper.observe(epoch, m, || params.clone()) {
                break;
            }
        }
    }
    let (best_epoch, params) = match (monitor, stopper.into_best()) {
        (Some(_), Some(best)) => best,
        _ => (history.len(), params),
    };
    Ok(CoreRun {
        params,
        history,
        best_epoch,
    })
}

fn residuals_squared(acts: &LayerActivations, y: &[f64]) -> Result<Vec<f64>> {
    if y.len() != acts.len() {
        return Err(Error::shape("fit_variance_head", acts.len(), y.len()));
    }
    if y.is_empty() {
        return Err(Error::invalid("cannot fit a variance head on zero points"));
    }
    Ok(acts.mu.iter().zip(y).map(|(m, t)| (t - m) * (t - m)).collect())
}

fn head_from_params(acts: &LayerActivations, params: &[f64], floor: f64) -> VarianceHead {
    let mut weights = Vec::with_capacity(acts.blocks.len());
    let mut off = 0;
    for w in acts.widths() {
        weights.push(params[off..off + w].to_vec());
        off += w;
    }
    VarianceHead {
        layers: acts.layers.clone(),
        weights,
        bias: params[off],
        var_floor: floor,
        gamma: None,
    }
}

/// Fits a head by minimising hold-out Gaussian NLL with the mean fixed.
/// Weights start at zero and the bias at the homoskedastic residual variance.
pub fn fit_variance_head(acts: &LayerActivations, y: &[f64], cfg: &HeadFitConfig) -> Result<HeadFit> {
    let r2 = residuals_squared(acts, y)?;
    let z = acts.design();
    let rows: Vec<usize> = (0..acts.len()).collect();
    let run = fit_core(&z, &r2, &rows, None, cfg.epochs, cfg.epochs, cfg)?;
    Ok(HeadFit {
        head: head_from_params(acts, &run.params, cfg.var_floor),
        history: run.history,
        best_epoch: run.best_epoch,
    })
}

/// Two-stage fit: choose the epoch count by NLL on an internal 80/20 split,
/// then refit on all rows for that many epochs.
pub fn fit_variance_head_early_stop(
    acts: &LayerActivations,
    y: &[f64],
    cfg: &HeadFitConfig,
    refit: &RefitConfig,
) -> Result<HeadFit> {
    let r2 = residuals_squared(acts, y)?;
    let z = acts.design();
    let mut split_rng = Rng::derived(cfg.seed, "refit-split");
    let mut search_history = Vec::new();
    let (params, best_epoch) = early_stop_refit(acts.len(), &mut split_rng, refit, |stage: &RefitStage| {
        let monitor = stage.monitor_rows.as_deref().map(|m| (m, stage.patience));
        let run = fit_core(&z, &r2, &stage.fit_rows, monitor, stage.epochs, stage.horizon, cfg)?;
        if monitor.is_some() {
            search_history = run.history.clone();
        }
        Ok(StageResult {
            fitted: run.params,
            best_epoch: run.best_epoch,
        })
    })?;
    Ok(HeadFit {
        head: head_from_params(acts, &params, cfg.var_floor),
        history: search_history,
        best_epoch,
    })
}

/// Constant variance scale `γ > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureScale {
    pub gamma: f64,
}

/// Smallest γ returned when every residual is zero.
pub const MIN_GAMMA: f64 = 1e-12;

/// Closed-form minimiser of `mean NLL(N(μ, γσ²))`: `γ* = mean((y−μ)²/σ²)`.
pub fn fit_gamma(mu: &[f64], var: &[f64], y: &[f64]) -> Result<TemperatureScale> {
    if mu.is_empty() {
        return Err(Error::invalid("fit_gamma needs at least one point"));
    }
    if mu.len() != var.len() || mu.len() != y.len() {
        return Err(Error::shape("fit_gamma", mu.len(), format!("{} / {}", var.len(), y.len())));
    }
    if let Some(v) = var.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::invalid(format!("fit_gamma: variance {v} is not positive")));
    }
    let g = mu
        .iter()
        .zip(var)
        .zip(y)
        .map(|((m, v), t)| (t - m) * (t - m) / v)
        .sum::<f64>()
        / mu.len() as f64;
    if !g.is_finite() {
        return Err(Error::invalid("fit_gamma: non-finite standardized residuals"));
    }
    Ok(TemperatureScale { gamma: g.max(MIN_GAMMA) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictiveKind {
    Gaussian,
    EqualMeanMixture,
}

/// Per-point Gaussian or uniform equal-mean mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictive {
    pub mu: Vec<f64>,
    /// `points × components`.
    pub variances: Matrix,
    pub kind: PredictiveKind,
}

impl Predictive {
    pub fn gaussian(mu: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mu.len() != var.len() {
            return Err(Error::shape("Predictive::gaussian", mu.len(), var.len()));
        }
        Self::validate(&var)?;
        let n = mu.len();
        Ok(Predictive {
            mu,
            variances: Matrix::from_vec(n, 1, var)?,
            kind: PredictiveKind::Gaussian,
        })
    }

    /// One variance vector per component.
    pub fn mixture(mu: Vec<f64>, components: &[Vec<f64>]) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        let n = mu.len();
        let k = components.len();
        let mut variances = Matrix::zeros(n, k);
        for (c, col) in components.iter().enumerate() {
            if col.len() != n {
                return Err(Error::shape("Predictive::mixture", n, col.len()));
            }
            Self::validate(col)?;
            for (i, v) in col.iter().enumerate() {
                variances.set(i, c, *v);
            }
        }
        Ok(Predictive {
            mu,
            variances,
            kind: PredictiveKind::EqualMeanMixture,
        })
    }

    fn validate(var: &[f64]) -> Result<()> {
        match var.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            Some(v) => Err(Error::invalid(format!("predictive variance {v} is not positive"))),
            None => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn n_components(&self) -> usize {
        self.variances.cols()
    }

    pub fn component_variances(&self, i: usize) -> &[f64] {
        self.variances.row(i)
    }

    /// All variances multiplied by `gamma`.
    pub fn scaled(&self, gamma: f64) -> Predictive {
        Predictive {
            mu: self.mu.clone(),
            variances: self.variances.map(|v| gamma * v),
            kind: self.kind,
        }
    }

    /// Mean of component variances; this is the mixture variance because all
    /// components share the mean.
    pub fn mixture_variance(&self) -> Vec<f64> {
        let k = self.n_components() as f64;
        (0..self.len())
            .map(|i| self.variances.row(i).iter().sum::<f64>() / k)
            .collect()
    }

    /// Mixture CDF at `t` for point `i`.
    pub fn cdf(&self, i: usize, t: f64) -> f64 {
        let row = self.variances.row(i);
        row.iter()
            .map(|v| crate::numerics::normal_cdf((t - self.mu[i]) / v.sqrt()))
            .sum::<f64>()
            / row.len() as f64
    }
}

/// Equal-mean mixture of singleton-layer heads over one forward pass.
pub fn ensemble_predict(heads: &[VarianceHead], model: &MlpModel, x: &Matrix) -> Result<Predictive> {
    if heads.is_empty() {
        return Err(Error::invalid("ensemble needs at least one head"));
    }
    let trace = model.forward(x)?;
    let comps = heads
        .iter()
        .map(|h| h.predict_trace(&trace))
        .collect::<Result<Vec<_>>>()?;
    Predictive::mixture(trace.mean(), &comps)
}

/// Per-point `−log[(1/K) Σ_k N(y | μ, σ²_k)]`.
pub fn predictive_nll_per_point(p: &Predictive, y: &[f64]) -> Result<Vec<f64>> {
    if y.len() != p.len() {
        return Err(Error::shape("predictive_nll", p.len(), y.len()));
    }
    let log_k = (p.n_components() as f64).ln();
    let mut terms = vec![0.0; p.n_components()];
    (0..p.len())
        .map(|i| {
            let r2 = (y[i] - p.mu[i]).powi(2);
            for (t, v) in terms.iter_mut().zip(p.variances.row(i)) {
                *t = -0.5 * (LN_2PI + v.ln() + r2 / v);
            }
            Ok(log_k - log_sum_exp(&terms)?)
        })
        .collect()
}

pub fn predictive_nll(p: &Predictive, y: &[f64]) -> Result<f64> {
    let per = predictive_nll_per_point(p, y)?;
    if per.is_empty() {
        return Err(Error::invalid("predictive_nll on zero points"));
    }
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::gaussian_nll;
    use crate::network::{Activation, HeadKind, Layer};

    fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        while b - a > 1e-12 * (1.0 + a.abs()) {
            let c = b - phi * (b - a);
            let d = a + phi * (b - a);
            if f(c) < f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn gamma_examples() {
        assert_eq!(fit_gamma(&[0.0; 3], &[1.0, 4.0, 9.0], &[1.0, -2.0, 3.0]).unwrap().gamma, 1.0);
        let g = fit_gamma(&[0.0, 0.0], &[1.0, 1.0], &[0.5, 2.0]).unwrap().gamma;
        assert_eq!(g, 2.125);
        let nll = |gamma: f64| {
            [0.25f64, 4.0]
                .iter()
                .map(|z2| 0.5 * (LN_2PI + gamma.ln() + z2 / gamma))
                .sum::<f64>()
                / 2.0
        };
        assert!((golden_section(nll, 1e-6, 100.0) - 2.125).abs() < 1e-8);
        assert!(fit_gamma(&[], &[], &[]).is_err());
        assert!(fit_gamma(&[0.0], &[0.0], &[1.0]).is_err());
        assert_eq!(fit_gamma(&[1.0], &[1.0], &[1.0]).unwrap().gamma, MIN_GAMMA);
    }

    #[test]
    fn layer_set_validation() {
        assert!(LayerSet::new(vec![], 3).is_err());
        assert!(LayerSet::new(vec![3], 3).is_err());
        assert!(LayerSet::new(vec![1, 1], 3).is_err());
        assert_eq!(LayerSet::all(3).unwrap().indices(), &[0, 1, 2]);
    }

    fn identity_net() -> MlpModel {
        let l0 = Layer {
            weight: Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap(),
            bias: vec![0.5, -1.0],
            activation: Activation::Identity,
        };
        let l1 = Layer {
            weight: Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap(),
            bias: vec![0.0],
            activation: Activation::Identity,
        };
        MlpModel::from_layers(vec![l0, l1], HeadKind::Homoskedastic, 0.0).unwrap()
    }

    #[test]
    fn activations_match_hand_computation() {
        let model = identity_net();
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let set = LayerSet::all(1).unwrap();
        let a = extract_activations(&model, &x, &set).unwrap();
        // z = [1·1 + 2·(−1) + 0.5, 1·2 + 2·0.5 − 1] = [−0.5, 2]
        assert_eq!(a.blocks[0].row(0), &[-0.5, 2.0]);
        assert_eq!(a.mu, vec![1.5]);
        assert_eq!(a, extract_activations(&model, &x, &set).unwrap());
        assert!(extract_activations(&model, &x, &LayerSet(vec![4])).is_err());
    }

    fn constant_acts(n: usize) -> LayerActivations {
        LayerActivations {
            layers: vec![0],
            blocks: vec![Matrix::from_vec(n, 1, vec![1.0; n]).unwrap()],
            mu: vec![0.0; n],
        }
    }

    #[test]
    fn constant_input_recovers_residual_variance() {
        let n = 5_000;
        let v: f64 = 2.5;
        let mut rng = Rng::new(17);
        let y: Vec<f64> = (0..n).map(|_| v.sqrt() * rng.standard_normal()).collect();
        let mle = y.iter().map(|t| t * t).sum::<f64>() / n as f64;
        let fit = fit_variance_head(&constant_acts(n), &y, &HeadFitConfig::default()).unwrap();
        let pred = fit.head.predict_activations(&constant_acts(1)).unwrap()[0];
        assert!((pred - v).abs() / v < 0.10, "{pred}");
        assert!((pred - mle).abs() / mle < 0.01, "{pred} vs {mle}");
    }

    #[test]
    fn strong_decay_shrinks_weights() {
        let n = 400;
        let mut rng = Rng::new(3);
        let x: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.0, 2.0)).collect();
        let y: Vec<f64> = x.iter().map(|xi| (0.1 + xi) * rng.standard_normal()).collect();
        let acts = LayerActivations {
            layers: vec![0],
            blocks: vec![Matrix::from_vec(n, 1, x).unwrap()],
            mu: vec![0.0; n],
        };
        let fit = |wd| {
            let cfg = HeadFitConfig {
                weight_decay: wd,
                lr: 1e-2,
                epochs: 300,
                ..HeadFitConfig::default()
            };
            fit_variance_head(&acts, &y, &cfg).unwrap().head
        };
        let free = fit(0.0);
        let decayed = fit(10.0);
        assert!(free.weights[0][0] > 0.5, "{}", free.weights[0][0]);
        assert!(decayed.weights[0][0].abs() < 0.05 * free.weights[0][0]);
        let v = decayed.predict_activations(&acts).unwrap();
        let spread = v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 0.1 * v[0]);
    }

    #[test]
    fn early_stop_fit_matches_direct_fit() {
        let mut rng = Rng::new(9);
        let make = |rng: &mut Rng, n: usize| {
            let x: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.0, 2.0)).collect();
            let y: Vec<f64> = x.iter().map(|xi| (0.2 + xi) * rng.standard_normal()).collect();
            let acts = LayerActivations {
                layers: vec![0],
                blocks: vec![Matrix::from_vec(n, 1, x).unwrap()],
                mu: vec![0.0; n],
            };
            (acts, y)
        };
        let (acts, y) = make(&mut rng, 1_000);
        let (test_acts, test_y) = make(&mut rng, 5_000);
        let cfg = HeadFitConfig {
            weight_decay: 0.0,
            lr: 1e-2,
            epochs: 300,
            ..HeadFitConfig::default()
        };
        let nll = |h: &VarianceHead| {
            let p = Predictive::gaussian(test_acts.mu.clone(), h.predict_activations(&test_acts).unwrap()).unwrap();
            predictive_nll(&p, &test_y).unwrap()
        };
        let direct = fit_variance_head(&acts, &y, &cfg).unwrap();
        let refit = RefitConfig {
            max_epochs: 300,
            ..RefitConfig::default()
        };
        let staged = fit_variance_head_early_stop(&acts, &y, &cfg, &refit).unwrap();
        assert!(staged.best_epoch > 0);
        assert!((nll(&direct.head) - nll(&staged.head)).abs() < 0.02);
        let again = fit_variance_head_early_stop(&acts, &y, &cfg, &refit).unwrap();
        assert_eq!(staged.head, again.head);
    }

    #[test]
    fn fitting_leaves_model_untouched() {
        let model = MlpModel::new(2, &[8, 8], Activation::Tanh, HeadKind::Homoskedastic, 4).unwrap();
        let before: Vec<u64> = model.params().iter().map(|v| v.to_bits()).collect();
        let mut rng = Rng::new(1);
        let x = Matrix::from_vec(50, 2, (0..100).map(|_| rng.standard_normal()).collect()).unwrap();
        let y: Vec<f64> = (0..50).map(|_| rng.standard_normal()).collect();
        let acts = extract_activations(&model, &x, &LayerSet::all(2).unwrap()).unwrap();
        fit_variance_head(&acts, &y, &HeadFitConfig { epochs: 5, ..Default::default() }).unwrap();
        let after: Vec<u64> = model.params().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn parameter_count_identity() {
        let model = MlpModel::new(2, &[16, 8, 4], Activation::Tanh, HeadKind::Homoskedastic, 1).unwrap();
        let mut rng = Rng::new(2);
        let x = Matrix::from_vec(20, 2, (0..40).map(|_| rng.standard_normal()).collect()).unwrap();
        let y = vec![0.3; 20];
        let cfg = HeadFitConfig { epochs: 1, ..Default::default() };
        let all = LayerSet::all(3).unwrap();
        let joint = fit_variance_head(&extract_activations(&model, &x, &all).unwrap(), &y, &cfg).unwrap();
        let singles: usize = (0..3)
            .map(|l| {
                let s = LayerSet::single(l, 3).unwrap();
                fit_variance_head(&extract_activations(&model, &x, &s).unwrap(), &y, &cfg)
                    .unwrap()
                    .head
                    .num_params()
            })
            .sum();
        assert_eq!(joint.head.num_params(), 16 + 8 + 4 + 1);
        assert_eq!(singles, joint.head.num_params() + (3 - 1));
    }

    #[test]
    fn mixture_examples() {
        let one = Predictive::gaussian(vec![0.0], vec![1.0]).unwrap();
        assert!((predictive_nll(&one, &[0.0]).unwrap() - 0.918_938_533_2).abs() < 1e-10);

        let two = Predictive::mixture(vec![0.0], &[vec![1.0], vec![4.0]]).unwrap();
        let pdf = |v: f64| (-0.5 * (LN_2PI + v.ln())).exp();
        let oracle = -(0.5 * (pdf(1.0) + pdf(4.0))).ln();
        let got = predictive_nll(&two, &[0.0]).unwrap();
        assert!((got - oracle).abs() < 1e-12);
        assert!((got - 1.2066).abs() < 1e-3);
        assert_eq!(two.mixture_variance(), vec![2.5]);

        let mut rng = Rng::new(5);
        let n = 30;
        let mu: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        let y: Vec<f64> = (0..n).map(|_| 2.0 * rng.standard_normal()).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.1, 3.0)).collect();
        let single = Predictive::gaussian(mu.clone(), v.clone()).unwrap();
        let twin = Predictive::mixture(mu.clone(), &[v.clone(), v.clone()]).unwrap();
        let a = predictive_nll(&single, &y).unwrap();
        assert!((a - predictive_nll(&twin, &y).unwrap()).abs() < 1e-12);
        assert!((a - gaussian_nll(&mu, &v, &y).unwrap().loss).abs() < 1e-12);
    }

    #[test]
    fn ensemble_of_one_is_that_head() {
        let model = MlpModel::new(2, &[4, 4], Activation::Tanh, HeadKind::Homoskedastic, 8).unwrap();
        let x = Matrix::from_rows(&[vec![0.1, 0.2], vec![-1.0, 0.4]]).unwrap();
        let head = VarianceHead {
            layers: vec![1],
            weights: vec![vec![0.3, -0.2, 0.1, 0.5]],
            bias: 0.2,
            var_floor: VAR_FLOOR,
            gamma: None,
        };
        let p = ensemble_predict(std::slice::from_ref(&head), &model, &x).unwrap();
        assert_eq!(p.variances.column(0), head.predict(&model, &x).unwrap());
        assert_eq!(p.mu, model.predict(&x).unwrap().0);
        assert!(ensemble_predict(&[], &model, &x).is_err());
    }

    #[test]
    fn head_checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let head = VarianceHead {
            layers: vec![0, 2],
            weights: vec![vec![0.1 + 0.2, -1e-300], vec![std::f64::consts::PI]],
            bias: -0.7,
            var_floor: VAR_FLOOR,
            gamma: Some(1.0 / 3.0),
        };
        let path = dir.path().join("head.json");
        head.save_json(&path).unwrap();
        assert_eq!(VarianceHead::load_json(&path).unwrap(), head);
        save_heads_json(&[head.clone(), head.clone()], &path).unwrap();
        assert_eq!(load_heads_json(&path).unwrap().len(), 2);
    }
}
