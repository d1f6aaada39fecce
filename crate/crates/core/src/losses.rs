//! Training objectives. Every loss is a batch mean and returns its gradient
//! with respect to the head outputs, ready for [`crate::network::backward`].
//!
//! The Gaussian NLL is the standard `½[log 2π + log σ² + (y−μ)²/σ²]`. β-NLL
//! drops the `½ log 2π` constant; the other NLLs keep it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{backward, detach_backbone_for_variance, ForwardTrace, Gradients, HeadKind, MlpModel};
use crate::numerics::{Matrix, LN_2PI};

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// Gradient of `loss` w.r.t. each head output.
    pub d_head: Matrix,
    pub per_point: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    GaussianNll,
    BetaNll { beta: f64 },
    NaturalNll,
    Faithful,
}

impl LossKind {
    pub fn name(&self) -> String {
        match self {
            LossKind::Mse => "mse".into(),
            LossKind::GaussianNll => "gaussian_nll".into(),
            LossKind::BetaNll { beta } => format!("beta_nll({beta})"),
            LossKind::NaturalNll => "natural_nll".into(),
            LossKind::Faithful => "faithful".into(),
        }
    }

    pub fn supports(&self, head: HeadKind) -> bool {
        use HeadKind::*;
        match self {
            LossKind::Mse => matches!(head, MeanOnly | MeanVariance | Homoskedastic),
            LossKind::GaussianNll | LossKind::BetaNll { .. } => {
                matches!(head, MeanVariance | Homoskedastic)
            }
            LossKind::NaturalNll => head == Natural,
            LossKind::Faithful => head == MeanVariance,
        }
    }
}

fn check_lengths(op: &'static str, a: usize, others: &[usize]) -> Result<()> {
    if a == 0 {
        return Err(Error::invalid(format!("{op}: empty batch")));
    }
    for &b in others {
        if b != a {
            return Err(Error::shape(op, a, b));
        }
    }
    Ok(())
}

fn check_variance(op: &'static str, var: &[f64]) -> Result<()> {
    if let Some((i, v)) = var.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::invalid(format!("{op}: nonpositive variance {v} at point {i}")));
    }
    Ok(())
}

pub fn gaussian_nll(mu: &[f64], var: &[f64], y: &[f64]) -> Result<LossOutput> {
    check_lengths("gaussian_nll", mu.len(), &[var.len(), y.len()])?;
    check_variance("gaussian_nll", var)?;
    let n = mu.len() as f64;
    let mut d = Matrix::zeros(mu.len(), 2);
    let mut per_point = Vec::with_capacity(mu.len());
    for i in 0..mu.len() {
        let r = y[i] - mu[i];
        let v = var[i];
        per_point.push(0.5 * (LN_2PI + v.ln() + r * r / v));
        d.set(i, 0, -r / v / n);
        d.set(i, 1, 0.5 * (1.0 / v - r * r / (v * v)) / n);
    }
    Ok(LossOutput {
        loss: per_point.iter().sum::<f64>() / n,
        d_head: d,
        per_point: Some(per_point),
    })
}

pub fn mse(mu: &[f64], y: &[f64]) -> Result<LossOutput> {
    check_lengths("mse", mu.len(), &[y.len()])?;
    let n = mu.len() as f64;
    let mut d = Matrix::zeros(mu.len(), 1);
    let mut per_point = Vec::with_capacity(mu.len());
    for i in 0..mu.len() {
        let r = mu[i] - y[i];
        per_point.push(r * r);
        d.set(i, 0, 2.0 * r / n);
    }
    Ok(LossOutput {
        loss: per_point.iter().sum::<f64>() / n,
        d_head: d,
        per_point: Some(per_point),
    })
}

/// `sg(σ^{2β}) · ½[log σ² + (y−μ)²/σ²]`; the weight carries no gradient.
pub fn beta_nll(mu: &[f64], var: &[f64], y: &[f64], beta: f64) -> Result<LossOutput> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("beta_nll: beta {beta} outside [0, 1]")));
    }
    check_lengths("beta_nll", mu.len(), &[var.len(), y.len()])?;
    check_variance("beta_nll", var)?;
    let n = mu.len() as f64;
    let mut d = Matrix::zeros(mu.len(), 2);
    let mut per_point = Vec::with_capacity(mu.len());
    for i in 0..mu.len() {
        let r = y[i] - mu[i];
        let v = var[i];
        let w = if beta == 0.0 { 1.0 } else { v.powf(beta) };
        per_point.push(w * 0.5 * (v.ln() + r * r / v));
        d.set(i, 0, w * (-r / v) / n);
        d.set(i, 1, w * 0.5 * (1.0 / v - r * r / (v * v)) / n);
    }
    Ok(LossOutput {
        loss: per_point.iter().sum::<f64>() / n,
        d_head: d,
        per_point: Some(per_point),
    })
}

/// Gaussian NLL in natural parameters `η₁ = μ/σ²`, `η₂ = −1/(2σ²)`.
pub fn natural_nll(eta1: &[f64], eta2: &[f64], y: &[f64]) -> Result<LossOutput> {
    check_lengths("natural_nll", eta1.len(), &[eta2.len(), y.len()])?;
    if let Some((i, e)) = eta2.iter().enumerate().find(|(_, e)| !(**e < 0.0)) {
        return Err(Error::invalid(format!("natural_nll: eta2 = {e} >= 0 at point {i}")));
    }
    let n = eta1.len() as f64;
    let mut d = Matrix::zeros(eta1.len(), 2);
    let mut per_point = Vec::with_capacity(eta1.len());
    for i in 0..eta1.len() {
        let (a, b, t) = (eta1[i], eta2[i], y[i]);
        let log_density = a * t + b * t * t + a * a / (4.0 * b) + 0.5 * (-2.0 * b).ln() - 0.5 * LN_2PI;
        per_point.push(-log_density);
        d.set(i, 0, -(t + a / (2.0 * b)) / n);
        d.set(i, 1, -(t * t - a * a / (4.0 * b * b) + 1.0 / (2.0 * b)) / n);
    }
    Ok(LossOutput {
        loss: per_point.iter().sum::<f64>() / n,
        d_head: d,
        per_point: Some(per_point),
    })
}

/// Reported value `MSE(μ, y) + NLL(sg(μ), σ², y)`. The mean column carries
/// plain MSE gradients and the variance column the NLL variance gradient with
/// the mean held fixed. Backpropagate through a trace from
/// [`detach_backbone_for_variance`] so the variance path stops at its head.
pub fn faithful_loss(trace: &ForwardTrace, y: &[f64]) -> Result<LossOutput> {
    if trace.head_kind != HeadKind::MeanVariance {
        return Err(Error::invalid(format!(
            "faithful_loss needs a mean_variance head, got {:?}",
            trace.head_kind
        )));
    }
    let mu = trace.outputs.column(0);
    let var = trace.outputs.column(1);
    let m = mse(&mu, y)?;
    let nll = gaussian_nll(&mu, &var, y)?;
    let mut d = Matrix::zeros(mu.len(), 2);
    for i in 0..mu.len() {
        d.set(i, 0, m.d_head.get(i, 0));
        d.set(i, 1, nll.d_head.get(i, 1));
    }
    let per_point = m
        .per_point
        .unwrap_or_default()
        .iter()
        .zip(nll.per_point.unwrap_or_default())
        .map(|(a, b)| a + b)
        .collect();
    Ok(LossOutput {
        loss: m.loss + nll.loss,
        d_head: d,
        per_point: Some(per_point),
    })
}

/// Evaluates `kind` on a trace; `d_head` is shaped like `trace.outputs`.
pub fn loss_for_trace(kind: LossKind, trace: &ForwardTrace, y: &[f64]) -> Result<LossOutput> {
    if !kind.supports(trace.head_kind) {
        return Err(Error::invalid(format!(
            "loss {} does not apply to a {:?} head",
            kind.name(),
            trace.head_kind
        )));
    }
    let width = trace.outputs.cols();
    let out = match kind {
        LossKind::Mse => mse(&trace.outputs.column(0), y)?,
        LossKind::GaussianNll => gaussian_nll(&trace.outputs.column(0), &trace.outputs.column(1), y)?,
        LossKind::BetaNll { beta } => {
            beta_nll(&trace.outputs.column(0), &trace.outputs.column(1), y, beta)?
        }
        LossKind::NaturalNll => natural_nll(&trace.outputs.column(0), &trace.outputs.column(1), y)?,
        LossKind::Faithful => faithful_loss(trace, y)?,
    };
    if out.d_head.cols() == width {
        return Ok(out);
    }
    let mut padded = Matrix::zeros(out.d_head.rows(), width);
    for i in 0..out.d_head.rows() {
        for c in 0..out.d_head.cols() {
            padded.set(i, c, out.d_head.get(i, c));
        }
    }
    Ok(LossOutput {
        d_head: padded,
        ..out
    })
}

/// Forward, loss, and backward in one call, detaching the variance path for
/// the faithful objective.
pub fn loss_and_gradients(
    model: &MlpModel,
    kind: LossKind,
    x: &Matrix,
    y: &[f64],
) -> Result<(LossOutput, Gradients)> {
    let mut trace = model.forward(x)?;
    if kind == LossKind::Faithful {
        trace = detach_backbone_for_variance(trace)?;
    }
    let out = loss_for_trace(kind, &trace, y)?;
    let grads = backward(model, &trace, &out.d_head)?;
    Ok((out, grads))
}
