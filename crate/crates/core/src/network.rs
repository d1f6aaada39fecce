//! Dense MLP with activation capture and exact reverse-mode gradients.
//!
//! Hidden layers apply their activation; the final layer is affine and feeds
//! one of four heads:
//!
//! | head            | final width | outputs                                  |
//! |-----------------|-------------|------------------------------------------|
//! | `MeanOnly`      | 1           | `[μ]`                                    |
//! | `MeanVariance`  | 2           | `[μ, softplus(s) + σ²_min]`              |
//! | `Natural`       | 2           | `[η₁, −softplus(s) − ε_η]`               |
//! | `Homoskedastic` | 1           | `[μ, exp(log_variance)]` (global scalar) |
//!
//! For the natural head the Gaussian is recovered from
//! `η₁ = μ/σ²`, `η₂ = −1/(2σ²)`, i.e. `σ² = −1/(2η₂)` and `μ = η₁σ²`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, softplus, Matrix, Rng};

/// Floor added to every softplus variance.
pub const VAR_FLOOR: f64 = 1e-6;
/// Offset keeping the natural head's `η₂` strictly negative.
pub const NATURAL_EPS: f64 = 1e-6;

const CHECKPOINT_FORMAT: &str = "hetvar-mlp";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the post-activation value.
    fn derivative_from_output(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - z * z,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    MeanOnly,
    MeanVariance,
    Natural,
    Homoskedastic,
}

impl HeadKind {
    pub fn final_width(self) -> usize {
        match self {
            HeadKind::MeanOnly | HeadKind::Homoskedastic => 1,
            HeadKind::MeanVariance | HeadKind::Natural => 2,
        }
    }

    pub fn output_width(self) -> usize {
        match self {
            HeadKind::MeanOnly => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `in × out`, so a batch maps as `z · W + b`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    fn apply(&self, input: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut pre = input.matmul(&self.weight)?;
        pre.add_row_broadcast(&self.bias)?;
        let post = pre.map(|v| self.activation.apply(v));
        Ok((pre, post))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layers: Vec<Layer>,
    head_kind: HeadKind,
    /// Only trained for `Homoskedastic`; ignored otherwise.
    log_variance: f64,
    init_seed: u64,
}

/// Cached forward pass for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Matrix,
    /// Post-activation output of every hidden layer, `z⁰ … z^L`.
    pub hidden: Vec<Matrix>,
    /// Final affine output before the head map.
    pub raw: Matrix,
    pub outputs: Matrix,
    pub head_kind: HeadKind,
    /// When set, output-column 1 gradients stop at the final affine layer.
    pub detached_variance: bool,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }

    pub fn representations(&self) -> &[Matrix] {
        &self.hidden
    }

    /// Predictive mean per point.
    pub fn mean(&self) -> Vec<f64> {
        match self.head_kind {
            HeadKind::Natural => (0..self.outputs.rows())
                .map(|i| {
                    let (e1, e2) = (self.outputs.get(i, 0), self.outputs.get(i, 1));
                    -e1 / (2.0 * e2)
                })
                .collect(),
            _ => self.outputs.column(0),
        }
    }

    /// Predictive variance per point; `None` for a mean-only head.
    pub fn variance(&self) -> Option<Vec<f64>> {
        match self.head_kind {
            HeadKind::MeanOnly => None,
            HeadKind::Natural => Some(
                (0..self.outputs.rows())
                    .map(|i| -1.0 / (2.0 * self.outputs.get(i, 1)))
                    .collect(),
            ),
            HeadKind::MeanVariance | HeadKind::Homoskedastic => Some(self.outputs.column(1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Matrix, Vec<f64>)>,
    pub log_variance: f64,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| {
                    (
                        Matrix::zeros(l.input_dim(), l.output_dim()),
                        vec![0.0; l.output_dim()],
                    )
                })
                .collect(),
            log_variance: 0.0,
        }
    }

    /// Same ordering as [`MlpModel::params`].
    pub fn flatten(&self, head_kind: HeadKind) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        if head_kind == HeadKind::Homoskedastic {
            out.push(self.log_variance);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.log_variance.is_finite()
            && self
                .layers
                .iter()
                .all(|(w, b)| w.is_finite() && b.iter().all(|v| v.is_finite()))
    }
}

/// Named slice of the flattened parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSlot {
    pub name: String,
    pub len: usize,
}

impl MlpModel {
    /// Fan-in scaled uniform initialization, `U(−1/√fan_in, 1/√fan_in)` for
    /// weights and biases.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        activation: Activation,
        head_kind: HeadKind,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || hidden.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        let mut rng = Rng::new(seed);
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(head_kind.final_width());
        let n_layers = dims.len() - 1;
        let layers = (0..n_layers)
            .map(|i| {
                let (fan_in, fan_out) = (dims[i], dims[i + 1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = Matrix::from_vec(
                    fan_in,
                    fan_out,
                    (0..fan_in * fan_out)
                        .map(|_| rng.uniform_range(-bound, bound))
                        .collect(),
                )
                .expect("sized by construction");
                let bias = (0..fan_out)
                    .map(|_| rng.uniform_range(-bound, bound))
                    .collect();
                Layer {
                    weight,
                    bias,
                    activation: if i + 1 == n_layers {
                        Activation::Identity
                    } else {
                        activation
                    },
                }
            })
            .collect();
        Ok(MlpModel {
            layers,
            head_kind,
            log_variance: 0.0,
            init_seed: seed,
        })
    }

    pub fn from_layers(layers: Vec<Layer>, head_kind: HeadKind, log_variance: f64) -> Result<Self> {
        let model = MlpModel {
            layers,
            head_kind,
            log_variance,
            init_seed: 0,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        let Some(last) = self.layers.last() else {
            return Err(Error::invalid("model needs at least one layer"));
        };
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::shape(
                    "MlpModel layers",
                    format!("layer {} input {}", i + 1, pair[0].output_dim()),
                    pair[1].input_dim(),
                ));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(Error::shape("MlpModel bias", l.output_dim(), format!("{} in layer {i}", l.bias.len())));
            }
        }
        if last.output_dim() != self.head_kind.final_width() {
            return Err(Error::shape(
                "MlpModel head",
                self.head_kind.final_width(),
                last.output_dim(),
            ));
        }
        if last.activation != Activation::Identity {
            return Err(Error::invalid("final layer must use the identity activation"));
        }
        if !self.log_variance.is_finite() {
            return Err(Error::invalid("log_variance must be finite"));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn head_kind(&self) -> HeadKind {
        self.head_kind
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    /// Number of hidden layers, i.e. captured representations.
    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.depth()]
            .iter()
            .map(Layer::output_dim)
            .collect()
    }

    pub fn log_variance(&self) -> f64 {
        self.log_variance
    }

    pub fn set_log_variance(&mut self, v: f64) {
        self.log_variance = v;
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn param_layout(&self) -> Vec<TensorSlot> {
        let mut slots = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            slots.push(TensorSlot {
                name: format!("layers.{i}.weight"),
                len: l.input_dim() * l.output_dim(),
            });
            slots.push(TensorSlot {
                name: format!("layers.{i}.bias"),
                len: l.output_dim(),
            });
        }
        if self.head_kind == HeadKind::Homoskedastic {
            slots.push(TensorSlot {
                name: "log_variance".into(),
                len: 1,
            });
        }
        slots
    }

    pub fn num_params(&self) -> usize {
        self.param_layout().iter().map(|s| s.len).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        if self.head_kind == HeadKind::Homoskedastic {
            out.push(self.log_variance);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape("set_params", self.num_params(), flat.len()));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weight.data().len();
            l.weight.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
            let m = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + m]);
            off += m;
        }
        if self.head_kind == HeadKind::Homoskedastic {
            self.log_variance = flat[off];
        }
        Ok(())
    }

    /// Flat indices of the variance head's own parameters: column 1 of the
    /// final weight and final bias entry 1. Empty for single-output heads.
    pub fn variance_head_indices(&self) -> Vec<usize> {
        if self.head_kind.final_width() != 2 {
            return Vec::new();
        }
        let before: usize = self.layers[..self.depth()]
            .iter()
            .map(|l| l.input_dim() * l.output_dim() + l.output_dim())
            .sum();
        let last = self.layers.last().expect("validated");
        let mut idx: Vec<usize> = (0..last.input_dim()).map(|r| before + r * 2 + 1).collect();
        idx.push(before + last.input_dim() * 2 + 1);
        idx
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardTrace> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("forward", self.input_dim(), x.cols()));
        }
        let mut hidden = Vec::with_capacity(self.depth());
        let mut current = x.clone();
        for layer in &self.layers[..self.depth()] {
            let (_, post) = layer.apply(&current)?;
            hidden.push(post.clone());
            current = post;
        }
        let (raw, _) = self.layers[self.depth()].apply(&current)?;
        let outputs = self.head_outputs(&raw);
        Ok(ForwardTrace {
            input: x.clone(),
            hidden,
            raw,
            outputs,
            head_kind: self.head_kind,
            detached_variance: false,
        })
    }

    fn head_outputs(&self, raw: &Matrix) -> Matrix {
        let n = raw.rows();
        let mut out = Matrix::zeros(n, self.head_kind.output_width());
        for i in 0..n {
            match self.head_kind {
                HeadKind::MeanOnly => out.set(i, 0, raw.get(i, 0)),
                HeadKind::MeanVariance => {
                    out.set(i, 0, raw.get(i, 0));
                    out.set(i, 1, softplus(raw.get(i, 1)) + VAR_FLOOR);
                }
                HeadKind::Natural => {
                    out.set(i, 0, raw.get(i, 0));
                    out.set(i, 1, -softplus(raw.get(i, 1)) - NATURAL_EPS);
                }
                HeadKind::Homoskedastic => {
                    out.set(i, 0, raw.get(i, 0));
                    out.set(i, 1, self.log_variance.exp());
                }
            }
        }
        out
    }

    /// Predictive `(μ, σ²)`; the variance is `None` for `MeanOnly`.
    pub fn predict(&self, x: &Matrix) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let t = self.forward(x)?;
        Ok((t.mean(), t.variance()))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let doc = CheckpointRef {
            format: CHECKPOINT_FORMAT,
            version: CHECKPOINT_VERSION,
            model: self,
        };
        let text = serde_json::to_string_pretty(&doc)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: CheckpointOwned = serde_json::from_str(&text)?;
        if doc.format != CHECKPOINT_FORMAT || doc.version != CHECKPOINT_VERSION {
            return Err(Error::Input {
                path: path.into(),
                message: format!("unsupported checkpoint {} v{}", doc.format, doc.version),
            });
        }
        doc.model.validate()?;
        Ok(doc.model)
    }
}

#[derive(Serialize)]
struct CheckpointRef<'a> {
    format: &'static str,
    version: u32,
    model: &'a MlpModel,
}

#[derive(Deserialize)]
struct CheckpointOwned {
    format: String,
    version: u32,
    model: MlpModel,
}

/// Reverse pass for the scalar loss whose output gradients are `d_outputs`.
pub fn backward(model: &MlpModel, trace: &ForwardTrace, d_outputs: &Matrix) -> Result<Gradients> {
    let n = trace.batch_size();
    if trace.head_kind != model.head_kind || trace.hidden.len() != model.depth() {
        return Err(Error::invalid("trace was not produced by this model"));
    }
    if d_outputs.shape() != trace.outputs.shape() {
        return Err(Error::shape(
            "backward d_outputs",
            format!("{:?}", trace.outputs.shape()),
            format!("{:?}", d_outputs.shape()),
        ));
    }
    let mut grads = Gradients::zeros_like(model);

    // Head map back to the final affine output.
    let width = model.head_kind.final_width();
    let mut d_raw = Matrix::zeros(n, width);
    for i in 0..n {
        match model.head_kind {
            HeadKind::MeanOnly => d_raw.set(i, 0, d_outputs.get(i, 0)),
            HeadKind::MeanVariance => {
                d_raw.set(i, 0, d_outputs.get(i, 0));
                d_raw.set(i, 1, d_outputs.get(i, 1) * sigmoid(trace.raw.get(i, 1)));
            }
            HeadKind::Natural => {
                d_raw.set(i, 0, d_outputs.get(i, 0));
                d_raw.set(i, 1, -d_outputs.get(i, 1) * sigmoid(trace.raw.get(i, 1)));
            }
            HeadKind::Homoskedastic => {
                d_raw.set(i, 0, d_outputs.get(i, 0));
                grads.log_variance += d_outputs.get(i, 1) * trace.outputs.get(i, 1);
            }
        }
    }

    let depth = model.depth();
    let mut delta = d_raw;
    for li in (0..=depth).rev() {
        let layer = &model.layers[li];
        let input = if li == 0 { &trace.input } else { &trace.hidden[li - 1] };
        if li < depth {
            let post = &trace.hidden[li];
            for (d, &z) in delta.data_mut().iter_mut().zip(post.data()) {
                *d *= layer.activation.derivative_from_output(z);
            }
        }
        grads.layers[li].0 = input.t_matmul(&delta)?;
        grads.layers[li].1 = delta.column_sums();
        if li == 0 {
            break;
        }
        if li == depth && trace.detached_variance {
            for i in 0..n {
                delta.set(i, 1, 0.0);
            }
        }
        delta = delta.matmul_t(&layer.weight)?;
    }
    Ok(grads)
}

/// Marks a mean-variance trace so the variance output only trains its own
/// final affine parameters.
pub fn detach_backbone_for_variance(trace: ForwardTrace) -> Result<ForwardTrace> {
    if trace.head_kind != HeadKind::MeanVariance {
        return Err(Error::invalid(format!(
            "variance detaching needs a mean_variance head, got {:?}",
            trace.head_kind
        )));
    }
    Ok(ForwardTrace {
        detached_variance: true,
        ..trace
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_batch(rng: &mut Rng, n: usize, d: usize) -> Matrix {
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.uniform_range(-1.5, 1.5)).collect()).unwrap()
    }

    /// Row-at-a-time evaluation with no shared state.
    fn straight_line_forward(model: &MlpModel, x: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut hidden = Vec::new();
        let mut cur = x.to_vec();
        for layer in model.layers() {
            let mut next = Vec::with_capacity(layer.output_dim());
            for j in 0..layer.output_dim() {
                let mut s = layer.bias[j];
                for (i, v) in cur.iter().enumerate() {
                    s += v * layer.weight.get(i, j);
                }
                next.push(match layer.activation {
                    Activation::Tanh => s.tanh(),
                    Activation::Relu => s.max(0.0),
                    Activation::Identity => s,
                });
            }
            hidden.push(next.clone());
            cur = next;
        }
        let raw = hidden.pop().unwrap();
        let out = match model.head_kind() {
            HeadKind::MeanOnly => vec![raw[0]],
            HeadKind::MeanVariance => vec![raw[0], (1.0 + raw[1].exp()).ln() + VAR_FLOOR],
            HeadKind::Natural => vec![raw[0], -(1.0 + raw[1].exp()).ln() - NATURAL_EPS],
            HeadKind::Homoskedastic => vec![raw[0], model.log_variance().exp()],
        };
        (hidden, out)
    }

    #[test]
    fn zero_model_outputs_zero() {
        let mut m =
            MlpModel::new(3, &[4, 5], Activation::Tanh, HeadKind::MeanOnly, 1).unwrap();
        let zeros = vec![0.0; m.num_params()];
        m.set_params(&zeros).unwrap();
        let t = m.forward(&random_batch(&mut Rng::new(2), 6, 3)).unwrap();
        assert!(t.hidden.iter().all(|h| h.data().iter().all(|&v| v == 0.0)));
        assert!(t.mean().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_set_identity_chain() {
        let l0 = Layer {
            weight: Matrix::from_rows(&[vec![1.0, 0.5], vec![-1.0, 2.0]]).unwrap(),
            bias: vec![0.1, -0.2],
            activation: Activation::Identity,
        };
        let l1 = Layer {
            weight: Matrix::from_rows(&[vec![2.0], vec![1.0]]).unwrap(),
            bias: vec![0.5],
            activation: Activation::Identity,
        };
        let m = MlpModel::from_layers(vec![l0, l1], HeadKind::MeanOnly, 0.0).unwrap();
        let t = m.forward(&Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap()).unwrap();
        // z⁰ = [1 - 2 + 0.1, 0.5 + 4 - 0.2] = [-0.9, 4.3]; μ = -1.8 + 4.3 + 0.5
        assert_eq!(t.hidden[0].data(), &[-0.9, 4.3]);
        assert!((t.mean()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn forward_matches_straight_line() {
        let mut rng = Rng::new(5);
        for head in [
            HeadKind::MeanOnly,
            HeadKind::MeanVariance,
            HeadKind::Natural,
            HeadKind::Homoskedastic,
        ] {
            for act in [Activation::Tanh, Activation::Relu] {
                let mut m = MlpModel::new(4, &[6, 5, 3], act, head, rng.next_u64()).unwrap();
                m.set_log_variance(0.37);
                let x = random_batch(&mut rng, 7, 4);
                let t = m.forward(&x).unwrap();
                assert_eq!(t.hidden.len(), 3);
                for i in 0..7 {
                    let (hidden, out) = straight_line_forward(&m, x.row(i));
                    for (l, h) in hidden.iter().enumerate() {
                        for (a, b) in h.iter().zip(t.hidden[l].row(i)) {
                            assert!((a - b).abs() < 1e-12);
                        }
                    }
                    for (a, b) in out.iter().zip(t.outputs.row(i)) {
                        assert!((a - b).abs() < 1e-12, "{head:?}: {a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn forward_shape_error() {
        let m = MlpModel::new(3, &[4], Activation::Tanh, HeadKind::MeanOnly, 1).unwrap();
        assert!(matches!(m.forward(&Matrix::zeros(2, 2)), Err(Error::Shape { .. })));
    }

    #[test]
    fn from_layers_rejects_bad_chain() {
        let l0 = Layer {
            weight: Matrix::zeros(2, 3),
            bias: vec![0.0; 3],
            activation: Activation::Tanh,
        };
        let l1 = Layer {
            weight: Matrix::zeros(2, 1),
            bias: vec![0.0],
            activation: Activation::Identity,
        };
        assert!(MlpModel::from_layers(vec![l0.clone(), l1], HeadKind::MeanOnly, 0.0).is_err());
        let l1 = Layer {
            weight: Matrix::zeros(3, 1),
            bias: vec![0.0],
            activation: Activation::Identity,
        };
        assert!(MlpModel::from_layers(vec![l0, l1], HeadKind::MeanVariance, 0.0).is_err());
    }

    #[test]
    fn zero_seed_gradients_are_zero() {
        let m = MlpModel::new(3, &[4, 4], Activation::Tanh, HeadKind::MeanVariance, 9).unwrap();
        let t = m.forward(&random_batch(&mut Rng::new(1), 5, 3)).unwrap();
        let g = backward(&m, &t, &Matrix::zeros(5, 2)).unwrap();
        assert!(g.flatten(m.head_kind()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_matches_least_squares_gradient() {
        // No hidden layers: μ = Xw + b. MSE seed 2(μ-y)/n gives 2Xᵀ(Xw+b-y)/n.
        let mut rng = Rng::new(4);
        let m = MlpModel::new(3, &[], Activation::Tanh, HeadKind::MeanOnly, 3).unwrap();
        let x = random_batch(&mut rng, 10, 3);
        let y: Vec<f64> = (0..10).map(|_| rng.standard_normal()).collect();
        let t = m.forward(&x).unwrap();
        let mu = t.mean();
        let n = 10.0;
        let d = Matrix::column_vector(
            &mu.iter().zip(&y).map(|(m, y)| 2.0 * (m - y) / n).collect::<Vec<_>>(),
        );
        let g = backward(&m, &t, &d).unwrap();
        let w = &m.layers()[0].weight;
        for j in 0..3 {
            let mut expect = 0.0;
            for i in 0..10 {
                let pred = (0..3).map(|k| x.get(i, k) * w.get(k, 0)).sum::<f64>() + m.layers()[0].bias[0];
                expect += x.get(i, j) * (pred - y[i]);
            }
            expect *= 2.0 / n;
            assert!((g.layers[0].0.get(j, 0) - expect).abs() < 1e-12);
        }
    }

    /// Central differences of `Σ c ⊙ outputs` against the analytic pass.
    fn check_linear_functional(head: HeadKind, act: Activation, seed: u64) {
        let mut rng = Rng::new(seed);
        let mut m = MlpModel::new(3, &[5, 4, 6], act, head, rng.next_u64()).unwrap();
        m.set_log_variance(0.2);
        let x = random_batch(&mut rng, 8, 3);
        let t = m.forward(&x).unwrap();
        let c = Matrix::from_vec(
            8,
            head.output_width(),
            (0..8 * head.output_width()).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
        )
        .unwrap();
        let g = backward(&m, &t, &c).unwrap().flatten(head);
        let objective = |p: &[f64]| {
            let mut mm = m.clone();
            mm.set_params(p).unwrap();
            let o = mm.forward(&x).unwrap().outputs;
            o.data().iter().zip(c.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let p0 = m.params();
        let h = 1e-5;
        for k in 0..p0.len() {
            let mut plus = p0.clone();
            let mut minus = p0.clone();
            plus[k] += h;
            minus[k] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let err = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-8);
            assert!(err <= 1e-6 || (fd - g[k]).abs() < 1e-9, "{head:?} param {k}: fd {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (i, head) in [
            HeadKind::MeanOnly,
            HeadKind::MeanVariance,
            HeadKind::Natural,
            HeadKind::Homoskedastic,
        ]
        .into_iter()
        .enumerate()
        {
            check_linear_functional(head, Activation::Tanh, 100 + i as u64);
        }
    }

    #[test]
    fn detached_variance_leaves_backbone_untouched() {
        let mut rng = Rng::new(8);
        let m = MlpModel::new(3, &[5, 4], Activation::Tanh, HeadKind::MeanVariance, 2).unwrap();
        let x = random_batch(&mut rng, 6, 3);
        let t = detach_backbone_for_variance(m.forward(&x).unwrap()).unwrap();
        let mut d = Matrix::zeros(6, 2);
        for i in 0..6 {
            d.set(i, 1, rng.uniform_range(-1.0, 1.0));
        }
        let g = backward(&m, &t, &d).unwrap().flatten(HeadKind::MeanVariance);
        let var_idx = m.variance_head_indices();
        for (k, v) in g.iter().enumerate() {
            if var_idx.contains(&k) {
                continue;
            }
            assert_eq!(*v, 0.0, "backbone slot {k}");
        }
        assert!(var_idx.iter().any(|&k| g[k] != 0.0));
    }

    #[test]
    fn detach_rejects_other_heads() {
        let m = MlpModel::new(2, &[3], Activation::Tanh, HeadKind::Natural, 2).unwrap();
        let t = m.forward(&Matrix::zeros(1, 2)).unwrap();
        assert!(detach_backbone_for_variance(t).is_err());
    }

    #[test]
    fn variance_outputs_positive_and_natural_negative() {
        let mut rng = Rng::new(3);
        let mut m = MlpModel::new(2, &[3], Activation::Tanh, HeadKind::MeanVariance, 2).unwrap();
        let mut p = m.params();
        for v in &mut p {
            *v *= 300.0;
        }
        m.set_params(&p).unwrap();
        let x = random_batch(&mut rng, 50, 2);
        assert!(m.predict(&x).unwrap().1.unwrap().iter().all(|&v| v >= VAR_FLOOR));
        let mut nat = MlpModel::new(2, &[3], Activation::Tanh, HeadKind::Natural, 5).unwrap();
        nat.set_params(&p).unwrap();
        let t = nat.forward(&x).unwrap();
        assert!(t.outputs.column(1).iter().all(|&e| e < 0.0));
        assert!(t.variance().unwrap().iter().all(|v| v.is_finite() && *v > 0.0));
    }

    #[test]
    fn trace_is_a_value() {
        let m = MlpModel::new(2, &[3], Activation::Tanh, HeadKind::MeanOnly, 2).unwrap();
        let before = m.params();
        let mut t = m.forward(&Matrix::zeros(2, 2)).unwrap();
        t.hidden[0].data_mut().fill(9.0);
        assert_eq!(m.params(), before);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut rng = Rng::new(12);
        let mut m = MlpModel::new(3, &[7, 5], Activation::Relu, HeadKind::Homoskedastic, 77).unwrap();
        let p: Vec<f64> = (0..m.num_params()).map(|_| rng.standard_normal() * 1e-3).collect();
        m.set_params(&p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save_json(&path).unwrap();
        let back = MlpModel::load_json(&path).unwrap();
        let a: Vec<u64> = m.params().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.params().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(back.init_seed(), 77);
        assert_eq!(back.head_kind(), HeadKind::Homoskedastic);
    }
}
