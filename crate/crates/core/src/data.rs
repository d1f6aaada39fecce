//! Synthetic generators, CSV ingestion, seeded splits and train-statistics
//! standardization.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Full,
    Train,
    Holdout,
    Test,
    Ood,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SplitTag::Full => "full",
            SplitTag::Train => "train",
            SplitTag::Holdout => "holdout",
            SplitTag::Test => "test",
            SplitTag::Ood => "ood",
        };
        f.write_str(s)
    }
}

/// Conditional law `y | x` of a synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorLaw {
    /// `y = a·x₁ + b·x₂²·ε`.
    OrthogonalMeanVar { a: f64, b: f64 },
    /// `y = sin(x) + 0.1·(1 + |x|)·ε`.
    Heteroskedastic1d,
    /// `y = slope·x + noise_std·ε`.
    Linear { slope: f64, noise_std: f64 },
}

impl GeneratorLaw {
    pub fn mean(&self, x: &[f64]) -> f64 {
        match *self {
            GeneratorLaw::OrthogonalMeanVar { a, .. } => a * x[0],
            GeneratorLaw::Heteroskedastic1d => x[0].sin(),
            GeneratorLaw::Linear { slope, .. } => slope * x[0],
        }
    }

    pub fn std(&self, x: &[f64]) -> f64 {
        match *self {
            GeneratorLaw::OrthogonalMeanVar { b, .. } => b.abs() * x[1] * x[1],
            GeneratorLaw::Heteroskedastic1d => 0.1 * (1.0 + x[0].abs()),
            GeneratorLaw::Linear { noise_std, .. } => noise_std,
        }
    }

    /// Draws targets for fixed inputs, returning `(y, σ_true)`.
    pub fn sample_targets(&self, x: &Matrix, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
        (0..x.rows())
            .map(|i| {
                let row = x.row(i);
                let s = self.std(row);
                (self.mean(row) + s * rng.standard_normal(), s)
            })
            .unzip()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub x: Matrix,
    pub y: Vec<f64>,
    /// Ground-truth conditional standard deviation, when known.
    pub sigma_true: Option<Vec<f64>>,
    /// Row index in the dataset this one was carved from.
    pub row_ids: Vec<usize>,
    pub split: SplitTag,
    pub law: Option<GeneratorLaw>,
    pub feature_names: Vec<String>,
    pub target_name: String,
    pub flags: Vec<String>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, x: Matrix, y: Vec<f64>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::shape("Dataset", x.rows(), y.len()));
        }
        let d = x.cols();
        Ok(Dataset {
            name: name.into(),
            row_ids: (0..y.len()).collect(),
            x,
            y,
            sigma_true: None,
            split: SplitTag::Full,
            law: None,
            feature_names: (0..d).map(|j| format!("x{}", j + 1)).collect(),
            target_name: "y".into(),
            flags: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    /// Rows `idx` (positions in this dataset), keeping provenance ids.
    pub fn subset(&self, idx: &[usize], split: SplitTag) -> Dataset {
        Dataset {
            name: self.name.clone(),
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            sigma_true: self
                .sigma_true
                .as_ref()
                .map(|s| idx.iter().map(|&i| s[i]).collect()),
            row_ids: idx.iter().map(|&i| self.row_ids[i]).collect(),
            split,
            law: self.law,
            feature_names: self.feature_names.clone(),
            target_name: self.target_name.clone(),
            flags: self.flags.clone(),
        }
    }

    /// Fails unless this dataset carries `tag`.
    pub fn require_split(&self, tag: SplitTag, stage: &str) -> Result<()> {
        if self.split != tag {
            return Err(Error::SplitViolation {
                stage: stage.to_string(),
                got: self.split.to_string(),
            });
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        header.push(&self.target_name);
        out.push_str(&header.join(","));
        out.push('\n');
        for i in 0..self.len() {
            let mut cells: Vec<String> = self.x.row(i).iter().map(|v| format!("{v:?}")).collect();
            cells.push(format!("{:?}", self.y[i]));
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        write_file(path, out.as_bytes())
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Inputs `x₁ ~ U(−4, 4)`, `x₂ ~ U(0, 4]`, target `a·x₁ + b·x₂²·ε`.
/// `b = 0` has no noise at all and is rejected.
pub fn gen_orthogonal_meanvar(n: usize, a: f64, b: f64, rng: &mut Rng) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("gen_orthogonal_meanvar: n must be positive"));
    }
    if b == 0.0 {
        return Err(Error::invalid(
            "gen_orthogonal_meanvar: b = 0 makes σ_true identically zero",
        ));
    }
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        data.push(rng.uniform_range(-4.0, 4.0));
        data.push(4.0 * rng.uniform_open0());
    }
    let x = Matrix::from_vec(n, 2, data)?;
    let law = GeneratorLaw::OrthogonalMeanVar { a, b };
    let (y, sigma) = law.sample_targets(&x, rng);
    let mut ds = Dataset::new("orthogonal_meanvar", x, y)?;
    ds.sigma_true = Some(sigma);
    ds.law = Some(law);
    Ok(ds)
}

/// `x ~ U(−4, 4)`, `y = sin(x) + 0.1(1 + |x|)ε`.
pub fn gen_heteroskedastic_1d(n: usize, rng: &mut Rng) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("gen_heteroskedastic_1d: n must be positive"));
    }
    let x = Matrix::from_vec(n, 1, (0..n).map(|_| rng.uniform_range(-4.0, 4.0)).collect())?;
    let law = GeneratorLaw::Heteroskedastic1d;
    let (y, sigma) = law.sample_targets(&x, rng);
    let mut ds = Dataset::new("heteroskedastic_1d", x, y)?;
    ds.sigma_true = Some(sigma);
    ds.law = Some(law);
    Ok(ds)
}

/// `x ~ U(−2, 2)`, `y = slope·x + noise_std·ε`.
pub fn gen_linear(n: usize, slope: f64, noise_std: f64, rng: &mut Rng) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("gen_linear: n must be positive"));
    }
    if !(noise_std > 0.0) {
        return Err(Error::invalid("gen_linear: noise_std must be positive"));
    }
    let x = Matrix::from_vec(n, 1, (0..n).map(|_| rng.uniform_range(-2.0, 2.0)).collect())?;
    let law = GeneratorLaw::Linear { slope, noise_std };
    let (y, sigma) = law.sample_targets(&x, rng);
    let mut ds = Dataset::new("linear", x, y)?;
    ds.sigma_true = Some(sigma);
    ds.law = Some(law);
    Ok(ds)
}

/// Translates inputs by `shift`. Targets are redrawn from the generator law
/// when there is one; otherwise they are carried over and the dataset is
/// flagged `targets_carried_over`.
pub fn gen_ood_shift(base: &Dataset, shift: &[f64], rng: &mut Rng) -> Result<Dataset> {
    if shift.len() != base.n_features() {
        return Err(Error::shape("gen_ood_shift", base.n_features(), shift.len()));
    }
    let mut x = base.x.clone();
    for i in 0..x.rows() {
        for (v, s) in x.row_mut(i).iter_mut().zip(shift) {
            *v += s;
        }
    }
    let mut out = base.clone();
    out.split = SplitTag::Ood;
    match base.law {
        Some(law) => {
            let (y, sigma) = law.sample_targets(&x, rng);
            out.y = y;
            out.sigma_true = Some(sigma);
        }
        None => out.flags.push("targets_carried_over".into()),
    }
    out.x = x;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SplitSizes {
    Fractions { train: f64, holdout: f64, test: f64 },
    Counts { train: usize, holdout: usize, test: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub sizes: SplitSizes,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub holdout: Dataset,
    pub test: Dataset,
    /// Positions not assigned to any split.
    pub unused: Vec<usize>,
}

impl SplitSpec {
    fn counts(&self, n: usize) -> Result<(usize, usize, usize)> {
        match self.sizes {
            SplitSizes::Fractions { train, holdout, test } => {
                for f in [train, holdout, test] {
                    if !(0.0..=1.0).contains(&f) {
                        return Err(Error::invalid(format!("split fraction {f} outside [0, 1]")));
                    }
                }
                let total = train + holdout + test;
                if total > 1.0 + 1e-9 {
                    return Err(Error::invalid(format!("split fractions sum to {total} > 1")));
                }
                let h = (holdout * n as f64).round() as usize;
                let t = (test * n as f64).round() as usize;
                let tr = if (total - 1.0).abs() <= 1e-9 {
                    n.saturating_sub(h + t)
                } else {
                    ((train * n as f64).round() as usize).min(n.saturating_sub(h + t))
                };
                Ok((tr, h, t))
            }
            SplitSizes::Counts { train, holdout, test } => {
                if train + holdout + test > n {
                    return Err(Error::invalid(format!(
                        "split counts {train}+{holdout}+{test} exceed {n} rows"
                    )));
                }
                Ok((train, holdout, test))
            }
        }
    }
}

/// Seeded shuffle, then consecutive train / hold-out / test blocks.
pub fn split(data: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    let n = data.len();
    let (tr, h, t) = spec.counts(n)?;
    for (name, c) in [("train", tr), ("holdout", h), ("test", t)] {
        if c == 0 {
            return Err(Error::invalid(format!("split `{name}` would be empty")));
        }
    }
    let perm = Rng::new(spec.seed).permutation(n);
    Ok(Splits {
        train: data.subset(&perm[..tr], SplitTag::Train),
        holdout: data.subset(&perm[tr..tr + h], SplitTag::Holdout),
        test: data.subset(&perm[tr + h..tr + h + t], SplitTag::Test),
        unused: perm[tr + h + t..].to_vec(),
    })
}

/// Affine z-scoring fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub y_mean: f64,
    pub y_scale: f64,
    pub warnings: Vec<String>,
}

fn mean_and_scale(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let m = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl Standardization {
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::invalid("standardize: empty training split"));
        }
        let mut warnings = Vec::new();
        let mut x_mean = Vec::new();
        let mut x_scale = Vec::new();
        for j in 0..train.n_features() {
            let (m, s) = mean_and_scale((0..train.len()).map(|i| train.x.get(i, j)));
            x_mean.push(m);
            if s > 0.0 && s.is_finite() {
                x_scale.push(s);
            } else {
                warnings.push(format!(
                    "feature `{}` has zero variance; scale clamped to 1",
                    train.feature_names.get(j).map_or("?", String::as_str)
                ));
                x_scale.push(1.0);
            }
        }
        let (y_mean, mut y_scale) = mean_and_scale(train.y.iter().copied());
        if !(y_scale > 0.0 && y_scale.is_finite()) {
            warnings.push("target has zero variance; scale clamped to 1".into());
            y_scale = 1.0;
        }
        Ok(Standardization {
            x_mean,
            x_scale,
            y_mean,
            y_scale,
            warnings,
        })
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        if data.n_features() != self.x_mean.len() {
            return Err(Error::shape("Standardization::apply", self.x_mean.len(), data.n_features()));
        }
        let mut out = data.clone();
        for i in 0..out.x.rows() {
            for (j, v) in out.x.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.x_mean[j]) / self.x_scale[j];
            }
        }
        out.y = data.y.iter().map(|v| (v - self.y_mean) / self.y_scale).collect();
        out.sigma_true = data
            .sigma_true
            .as_ref()
            .map(|s| s.iter().map(|v| v / self.y_scale).collect());
        out.law = None;
        Ok(out)
    }

    pub fn y_to_raw(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| v * self.y_scale + self.y_mean).collect()
    }

    pub fn variance_to_raw(&self, var: &[f64]) -> Vec<f64> {
        let s2 = self.y_scale * self.y_scale;
        var.iter().map(|v| v * s2).collect()
    }
}

/// Fits statistics on `train` and applies them to `train` and every other set.
pub fn standardize(train: &Dataset, others: &[&Dataset]) -> Result<(Dataset, Vec<Dataset>, Standardization)> {
    let stats = Standardization::fit(train)?;
    let t = stats.apply(train)?;
    let rest = others.iter().map(|d| stats.apply(d)).collect::<Result<Vec<_>>>()?;
    Ok((t, rest, stats))
}

/// Reads a rectangular numeric CSV with a header row. Every column other than
/// `target_column` becomes a feature. Data rows are numbered from 1.
pub fn load_csv(path: &Path, target_column: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Input {
            path: path.into(),
            message: e.to_string(),
        })?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let target_idx = headers.iter().position(|h| h == target_column).ok_or_else(|| Error::Input {
        path: path.into(),
        message: format!("target column `{target_column}` not found in header {headers:?}"),
    })?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::CsvRow {
                path: path.into(),
                row,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::CsvRow {
                path: path.into(),
                row,
                message: format!("non-numeric value `{cell}` in column `{}`", headers[j]),
            })?;
            if !v.is_finite() {
                return Err(Error::CsvRow {
                    path: path.into(),
                    row,
                    message: format!("non-finite value in column `{}`", headers[j]),
                });
            }
            if j == target_idx {
                ys.push(v);
            } else {
                xs.push(v);
            }
        }
    }
    if ys.is_empty() {
        return Err(Error::Input {
            path: path.into(),
            message: "no data rows".into(),
        });
    }
    let d = headers.len() - 1;
    let x = Matrix::from_vec(ys.len(), d, xs)?;
    let name = path
        .file_stem()
        .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    let mut ds = Dataset::new(name, x, ys)?;
    ds.feature_names = headers
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != target_idx)
        .map(|(_, h)| h.clone())
        .collect();
    ds.target_name = target_column.to_string();
    Ok(ds)
}

/// Written next to every emitted dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator: String,
    pub parameters: serde_json::Value,
    pub seed: u64,
    pub split_sizes: BTreeMap<String, usize>,
}

impl DatasetManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}
