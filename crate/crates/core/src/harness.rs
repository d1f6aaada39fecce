//! Experiment orchestration: data preparation, baseline training and
//! recalibration, post-hoc heads, evaluation, sweeps and report output.
//!
//! Every residual-dependent fit (`fit_gamma`, `fit_variance_head`) goes
//! through [`HoldoutGuard`], which checks the split tag and records the row
//! ids it saw.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    gen_heteroskedastic_1d, gen_linear, gen_ood_shift, gen_orthogonal_meanvar, load_csv, split,
    standardize, write_file, Dataset, DatasetManifest, SplitSizes, SplitSpec, SplitTag, Standardization,
};
use crate::error::{Error, Result};
use crate::losses::{gaussian_nll, LossKind};
use crate::metrics::{
    aggregate_ranks, auroc, calibration_curve, curves_csv, ece, fpr95, mae, metrics_csv, oracle_curve,
    ranks_csv, CalibrationCurve, Metric, MetricRecord, RankRow, DEFAULT_ECE_LEVELS,
};
use crate::network::{Activation, HeadKind, MlpModel};
use crate::numerics::{derive_seed, Matrix, Rng};
use crate::optim::{history_csv, train, EpochRecord, RefitConfig, TrainConfig};
use crate::posthoc::{
    extract_activations, fit_gamma, fit_variance_head, fit_variance_head_early_stop, predictive_nll,
    load_heads_json, save_heads_json, HeadFitConfig, LayerSet, Predictive, VarianceHead,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Homoskedastic,
    NaiveNll,
    NaturalNll,
    BetaNll,
    Faithful,
    PosthocSingle(usize),
    PosthocAll,
    PosthocEnsemble,
}

impl Method {
    pub fn is_posthoc(self) -> bool {
        matches!(self, Method::PosthocSingle(_) | Method::PosthocAll | Method::PosthocEnsemble)
    }

    /// End-to-end network and the loss it is trained with.
    fn network(self, beta: f64) -> Option<(HeadKind, LossKind)> {
        match self {
            Method::Homoskedastic => Some((HeadKind::Homoskedastic, LossKind::Mse)),
            Method::NaiveNll => Some((HeadKind::MeanVariance, LossKind::GaussianNll)),
            Method::NaturalNll => Some((HeadKind::Natural, LossKind::NaturalNll)),
            Method::BetaNll => Some((HeadKind::MeanVariance, LossKind::BetaNll { beta })),
            Method::Faithful => Some((HeadKind::MeanVariance, LossKind::Faithful)),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Homoskedastic => f.write_str("homoskedastic"),
            Method::NaiveNll => f.write_str("naive_nll"),
            Method::NaturalNll => f.write_str("natural_nll"),
            Method::BetaNll => f.write_str("beta_nll"),
            Method::Faithful => f.write_str("faithful"),
            Method::PosthocSingle(l) => write!(f, "posthoc_single:{l}"),
            Method::PosthocAll => f.write_str("posthoc_all"),
            Method::PosthocEnsemble => f.write_str("posthoc_ensemble"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "homoskedastic" => Method::Homoskedastic,
            "naive_nll" => Method::NaiveNll,
            "natural_nll" => Method::NaturalNll,
            "beta_nll" => Method::BetaNll,
            "faithful" => Method::Faithful,
            "posthoc_all" => Method::PosthocAll,
            "posthoc_ensemble" => Method::PosthocEnsemble,
            other => match other.strip_prefix("posthoc_single:").map(str::parse::<usize>) {
                Some(Ok(l)) => Method::PosthocSingle(l),
                _ => return Err(Error::invalid(format!("unknown method `{other}`"))),
            },
        })
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

fn default_half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSpec {
    OrthogonalMeanvar {
        #[serde(default = "default_half")]
        a: f64,
        #[serde(default = "default_half")]
        b: f64,
    },
    Heteroskedastic1d,
    Linear {
        slope: f64,
        noise_std: f64,
    },
    Csv {
        path: PathBuf,
        target: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodConfig {
    /// Added to the raw inputs of a copy of the test split.
    pub shift: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub generator: GeneratorSpec,
    pub split: SplitSizes,
    /// Rows to generate; defaults to the sum of split counts.
    pub n: Option<usize>,
    /// Seed for generation and splitting, shared by all run seeds.
    pub seed: u64,
    pub ood: Option<OodConfig>,
    pub standardize: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            generator: GeneratorSpec::OrthogonalMeanvar { a: 0.5, b: 0.5 },
            split: SplitSizes::Counts {
                train: 2_000,
                holdout: 500,
                test: 2_000,
            },
            n: None,
            seed: 0,
            ood: Some(OodConfig { shift: vec![0.0, 2.0] }),
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![64, 64, 64],
            activation: Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub beta_grid: Vec<f64>,
    pub weight_decay_grid: Vec<f64>,
    pub holdout_sizes: Vec<usize>,
    pub refit: RefitConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            beta_grid: vec![0.25, 0.5, 0.75, 1.0],
            weight_decay_grid: vec![1e-4, 1e-3, 1e-2, 1e-1, 1e0, 1e1],
            holdout_sizes: vec![200, 500, 1_000, 5_000],
            refit: RefitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    /// Shared by the backbone and every end-to-end baseline; `seed` is
    /// replaced per run.
    pub train: TrainConfig,
    pub head: HeadFitConfig,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub sweep: SweepConfig,
    pub ece_levels: usize,
    /// Run seeds on the rayon pool; output is identical either way.
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "fig1".into(),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                epochs: 200,
                batch_size: 100,
                lr: 2e-3,
                weight_decay: 0.01,
                ..TrainConfig::default()
            },
            head: HeadFitConfig::default(),
            methods: vec![
                Method::Homoskedastic,
                Method::NaiveNll,
                Method::NaturalNll,
                Method::BetaNll,
                Method::Faithful,
                Method::PosthocSingle(0),
                Method::PosthocSingle(1),
                Method::PosthocSingle(2),
                Method::PosthocAll,
                Method::PosthocEnsemble,
            ],
            seeds: vec![0, 1, 2],
            sweep: SweepConfig::default(),
            ece_levels: DEFAULT_ECE_LEVELS,
            parallel: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Input {
                path: path.into(),
                message: j.to_string(),
            },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let depth = self.model.hidden.len();
        if self.methods.is_empty() {
            return Err(Error::invalid("config lists no methods"));
        }
        let mut seen = BTreeSet::new();
        for m in &self.methods {
            if !seen.insert(*m) {
                return Err(Error::invalid(format!("method `{m}` listed twice")));
            }
            if let Method::PosthocSingle(l) = m {
                if *l >= depth {
                    return Err(Error::invalid(format!("{m}: model has {depth} hidden layers")));
                }
            }
        }
        if self.methods.iter().any(|m| m.is_posthoc()) && depth == 0 {
            return Err(Error::invalid("post-hoc heads need at least one hidden layer"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("config lists no seeds"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::invalid("seeds must be distinct"));
        }
        if self.methods.contains(&Method::BetaNll) {
            check_grid("sweep.beta_grid", &self.sweep.beta_grid)?;
            if self.sweep.beta_grid.iter().any(|b| !(0.0..=1.0).contains(b)) {
                return Err(Error::invalid("sweep.beta_grid values must lie in [0, 1]"));
            }
        }
        if self.ece_levels < 2 {
            return Err(Error::invalid("ece_levels must be at least 2"));
        }
        if let Some(ood) = &self.dataset.ood {
            if ood.shift.is_empty() {
                return Err(Error::invalid("dataset.ood.shift is empty"));
            }
        }
        Ok(())
    }

    /// sha256 of the canonical (sorted-key, compact) JSON form.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        hash_value(&value)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = vec![seed];
        self
    }
}

fn check_grid(name: &str, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid(format!("{name} is empty")));
    }
    Ok(())
}

/// serde_json's default map is ordered by key, so this string is canonical.
pub fn hash_value(value: &serde_json::Value) -> String {
    let canonical = serde_json::to_string(value).expect("value serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Standardized splits plus the raw-unit copies used for evaluation.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub holdout: Dataset,
    pub test: Dataset,
    pub ood: Option<Dataset>,
    pub raw_train: Dataset,
    pub raw_holdout: Dataset,
    pub raw_test: Dataset,
    pub raw_ood: Option<Dataset>,
    pub standardization: Standardization,
    pub manifest: DatasetManifest,
}

fn identity_standardization(d: usize) -> Standardization {
    Standardization {
        x_mean: vec![0.0; d],
        x_scale: vec![1.0; d],
        y_mean: 0.0,
        y_scale: 1.0,
        warnings: Vec::new(),
    }
}

pub fn prepare_data(cfg: &DatasetConfig) -> Result<PreparedData> {
    let n = match (cfg.n, cfg.split) {
        (Some(n), _) => n,
        (None, SplitSizes::Counts { train, holdout, test }) => train + holdout + test,
        (None, SplitSizes::Fractions { .. }) => match cfg.generator {
            GeneratorSpec::Csv { .. } => 0,
            _ => return Err(Error::invalid("dataset.n is required with fractional splits")),
        },
    };
    let mut rng = Rng::derived(cfg.seed, "data");
    let (full, generator, params) = match &cfg.generator {
        GeneratorSpec::OrthogonalMeanvar { a, b } => (
            gen_orthogonal_meanvar(n, *a, *b, &mut rng)?,
            "orthogonal_meanvar",
            serde_json::json!({ "a": a, "b": b }),
        ),
        GeneratorSpec::Heteroskedastic1d => {
            (gen_heteroskedastic_1d(n, &mut rng)?, "heteroskedastic_1d", serde_json::json!({}))
        }
        GeneratorSpec::Linear { slope, noise_std } => (
            gen_linear(n, *slope, *noise_std, &mut rng)?,
            "linear",
            serde_json::json!({ "slope": slope, "noise_std": noise_std }),
        ),
        GeneratorSpec::Csv { path, target } => (
            load_csv(path, target)?,
            "csv",
            serde_json::json!({ "path": path, "target": target }),
        ),
    };
    let spec = SplitSpec {
        sizes: cfg.split,
        seed: derive_seed(cfg.seed, "split"),
    };
    let splits = split(&full, &spec)?;
    let raw_ood = match &cfg.ood {
        Some(o) => Some(gen_ood_shift(&splits.test, &o.shift, &mut Rng::derived(cfg.seed, "ood"))?),
        None => None,
    };
    let stats = if cfg.standardize {
        standardize(&splits.train, &[])?.2
    } else {
        identity_standardization(full.n_features())
    };
    let apply = |d: &Dataset| stats.apply(d);
    let mut sizes = BTreeMap::new();
    sizes.insert("train".to_string(), splits.train.len());
    sizes.insert("holdout".to_string(), splits.holdout.len());
    sizes.insert("test".to_string(), splits.test.len());
    if let Some(o) = &raw_ood {
        sizes.insert("ood".to_string(), o.len());
    }
    Ok(PreparedData {
        train: apply(&splits.train)?,
        holdout: apply(&splits.holdout)?,
        test: apply(&splits.test)?,
        ood: raw_ood.as_ref().map(apply).transpose()?,
        raw_train: splits.train,
        raw_holdout: splits.holdout,
        raw_test: splits.test,
        raw_ood,
        standardization: stats,
        manifest: DatasetManifest {
            generator: generator.into(),
            parameters: params,
            seed: cfg.seed,
            split_sizes: sizes,
        },
    })
}

/// Writes raw-unit CSVs for every split and the dataset manifest.
pub fn write_datasets(data: &PreparedData, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut parts = vec![
        ("train", &data.raw_train),
        ("holdout", &data.raw_holdout),
        ("test", &data.raw_test),
    ];
    if let Some(o) = &data.raw_ood {
        parts.push(("ood", o));
    }
    for (name, d) in parts {
        let p = dir.join(format!("{name}.csv"));
        d.write_csv(&p)?;
        written.push(p);
    }
    let p = dir.join("dataset_manifest.json");
    data.manifest.write(&p)?;
    written.push(p);
    Ok(written)
}

/// One residual-dependent fit and the rows it consumed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seed: u64,
    pub stage: String,
    pub split: SplitTag,
    pub row_ids: Vec<usize>,
}

/// Gatekeeper for hold-out-only fitting.
#[derive(Debug, Default)]
pub struct HoldoutGuard {
    pub entries: Vec<AuditEntry>,
}

impl HoldoutGuard {
    pub fn admit(&mut self, seed: u64, stage: &str, data: &Dataset) -> Result<()> {
        data.require_split(SplitTag::Holdout, stage)?;
        self.entries.push(AuditEntry {
            seed,
            stage: stage.to_string(),
            split: data.split,
            row_ids: data.row_ids.clone(),
        });
        Ok(())
    }

    pub fn fit_gamma(&mut self, seed: u64, stage: &str, model: &MlpModel, holdout: &Dataset) -> Result<f64> {
        self.admit(seed, stage, holdout)?;
        let (mu, var) = model.predict(&holdout.x)?;
        let var = var.ok_or_else(|| Error::invalid("recalibration needs a variance head"))?;
        Ok(fit_gamma(&mu, &var, &holdout.y)?.gamma)
    }

    pub fn fit_head(
        &mut self,
        seed: u64,
        model: &MlpModel,
        holdout: &Dataset,
        layers: &LayerSet,
        cfg: &HeadFitConfig,
        early_stop: Option<&RefitConfig>,
    ) -> Result<(VarianceHead, usize)> {
        self.admit(seed, &format!("fit_variance_head[{}]", layer_label(layers)), holdout)?;
        let acts = extract_activations(model, &holdout.x, layers)?;
        let fit = match early_stop {
            Some(r) => fit_variance_head_early_stop(&acts, &holdout.y, cfg, r)?,
            None => fit_variance_head(&acts, &holdout.y, cfg)?,
        };
        Ok((fit.head, fit.best_epoch))
    }
}

pub fn layer_label(layers: &LayerSet) -> String {
    layers.indices().iter().map(usize::to_string).collect::<Vec<_>>().join("+")
}

#[derive(Debug, Clone)]
pub struct TrainedNetwork {
    pub model: MlpModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Trains one end-to-end network on the train split with hold-out early stopping.
pub fn train_network(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    method: Method,
    beta: f64,
    seed: u64,
) -> Result<TrainedNetwork> {
    let (head, loss) = method
        .network(beta)
        .ok_or_else(|| Error::invalid(format!("{method} is not an end-to-end network")))?;
    data.train.require_split(SplitTag::Train, "train")?;
    let label = match method {
        Method::BetaNll => format!("{method}:{beta}"),
        _ => method.to_string(),
    };
    let model = MlpModel::new(
        data.train.n_features(),
        &cfg.model.hidden,
        cfg.model.activation,
        head,
        derive_seed(seed, &format!("model:{label}")),
    )?;
    let tc = TrainConfig {
        seed: derive_seed(seed, &format!("train:{label}")),
        ..cfg.train
    };
    let out = train(model, loss, &data.train, Some(&data.holdout), &tc)?;
    Ok(TrainedNetwork {
        model: out.model,
        history: out.history,
        best_epoch: out.best_epoch,
    })
}

/// Raw-unit predictive of a network whose variance is scaled by `gamma`.
pub fn network_predictive(model: &MlpModel, gamma: f64, x: &Matrix, stats: &Standardization) -> Result<Predictive> {
    let (mu, var) = model.predict(x)?;
    let var = var.ok_or_else(|| Error::invalid("network has no variance output"))?;
    let var: Vec<f64> = var.iter().map(|v| gamma * v).collect();
    Predictive::gaussian(stats.y_to_raw(&mu), stats.variance_to_raw(&var))
}


/// Raw-unit equal-mean mixture over `heads` on the frozen `model`.
pub fn heads_predictive(
    model: &MlpModel,
    heads: &[VarianceHead],
    x: &Matrix,
    stats: &Standardization,
) -> Result<Predictive> {
    if heads.is_empty() {
        return Err(Error::invalid("no heads to evaluate"));
    }
    let trace = model.forward(x)?;
    let comps = heads
        .iter()
        .map(|h| Ok(stats.variance_to_raw(&h.predict_trace(&trace)?)))
        .collect::<Result<Vec<_>>>()?;
    let mu = stats.y_to_raw(&trace.mean());
    if heads.len() == 1 {
        Predictive::gaussian(mu, comps.into_iter().next().expect("one head"))
    } else {
        Predictive::mixture(mu, &comps)
    }
}

/// Metrics (and curves) of a raw-unit predictive on test and optional OOD inputs.
pub fn evaluate_predictive(
    method: &str,
    target: &str,
    seed: u64,
    test: &Predictive,
    y_test: &[f64],
    ood: Option<&Predictive>,
    ece_levels: usize,
) -> Result<(Vec<MetricRecord>, Vec<CalibrationCurve>)> {
    let rec = |metric, value| MetricRecord {
        method: method.to_string(),
        target: target.to_string(),
        seed,
        metric,
        value,
    };
    let mut records = vec![
        rec(Metric::Mae, mae(&test.mu, y_test)?),
        rec(Metric::Nll, predictive_nll(test, y_test)?),
        rec(Metric::Ece, ece(test, y_test, ece_levels)?),
    ];
    let scores_id = test.mixture_variance();
    if let Some(o) = ood {
        let scores_ood = o.mixture_variance();
        records.push(rec(Metric::Auroc, auroc(&scores_id, &scores_ood)?));
        records.push(rec(Metric::Fpr95, fpr95(&scores_id, &scores_ood)?));
    }
    if let Some(r) = records.iter().find(|r| !r.value.is_finite()) {
        return Err(Error::invalid(format!("{} evaluated to {}", r.metric, r.value)));
    }
    let abs: Vec<f64> = test.mu.iter().zip(y_test).map(|(m, y)| (y - m).abs()).collect();
    let curves = vec![
        calibration_curve(format!("{method}/seed{seed}"), &abs, &scores_id, false)?,
        oracle_curve(format!("{method}/seed{seed}/oracle"), &abs)?,
    ];
    Ok((records, curves))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub method: String,
    pub seed: u64,
    pub kind: String,
    pub message: String,
}

impl CellFailure {
    fn new(method: impl fmt::Display, seed: u64, err: &Error) -> Self {
        CellFailure {
            method: method.to_string(),
            seed,
            kind: err.kind().to_string(),
            message: err.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaCandidate {
    pub beta: f64,
    /// Recalibrated hold-out NLL; `None` if training failed.
    pub holdout_nll: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSelection {
    pub seed: u64,
    pub candidates: Vec<BetaCandidate>,
    pub chosen: Option<f64>,
}

/// Index of the lowest finite hold-out NLL; the first wins ties.
pub fn select_beta(candidates: &[BetaCandidate]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        if let Some(v) = c.holdout_nll.filter(|v| v.is_finite()) {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Fitted objects of one seed, kept for checkpointing.
#[derive(Debug, Clone, Default)]
pub struct SeedArtifacts {
    pub seed: u64,
    pub models: BTreeMap<String, MlpModel>,
    pub gammas: BTreeMap<String, f64>,
    pub heads: BTreeMap<String, Vec<VarianceHead>>,
    pub histories: BTreeMap<String, Vec<EpochRecord>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunProvenance {
    pub seed: u64,
    pub data_seed: u64,
    pub config_hash: String,
    /// Early-stopped epoch per trained network.
    pub best_epochs: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub name: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub target: String,
    pub nll_units: String,
    pub records: Vec<MetricRecord>,
    pub ranks: Vec<RankRow>,
    pub failures: Vec<CellFailure>,
    pub beta_selection: Vec<BetaSelection>,
    pub standardization: Standardization,
    pub provenance: Vec<RunProvenance>,
    #[serde(skip)]
    pub curves: Vec<CalibrationCurve>,
    #[serde(skip)]
    pub audit: Vec<AuditEntry>,
    #[serde(skip)]
    pub artifacts: Vec<SeedArtifacts>,
    #[serde(skip)]
    pub runtimes: Vec<(u64, f64)>,
}

impl ExperimentReport {
    pub fn value(&self, method: &str, seed: u64, metric: Metric) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.method == method && r.seed == seed && r.metric == metric)
            .map(|r| r.value)
    }
}

struct SeedRun {
    records: Vec<MetricRecord>,
    curves: Vec<CalibrationCurve>,
    failures: Vec<CellFailure>,
    beta: Option<BetaSelection>,
    audit: Vec<AuditEntry>,
    artifacts: SeedArtifacts,
    provenance: RunProvenance,
    runtime: f64,
}

fn needs_backbone(methods: &[Method]) -> bool {
    methods.iter().any(|m| *m == Method::Homoskedastic || m.is_posthoc())
}

/// Layer sets the configured post-hoc methods require.
fn head_layer_sets(methods: &[Method], depth: usize) -> Result<Vec<LayerSet>> {
    let mut sets = Vec::new();
    let mut push = |s: LayerSet| {
        if !sets.contains(&s) {
            sets.push(s);
        }
    };
    for m in methods {
        match m {
            Method::PosthocSingle(l) => push(LayerSet::single(*l, depth)?),
            Method::PosthocEnsemble => {
                for l in 0..depth {
                    push(LayerSet::single(l, depth)?);
                }
            }
            Method::PosthocAll => push(LayerSet::all(depth)?),
            _ => {}
        }
    }
    Ok(sets)
}

/// Heads for every configured post-hoc method, keyed by method.
fn posthoc_heads(
    methods: &[Method],
    fitted: &BTreeMap<String, Result<VarianceHead, String>>,
    depth: usize,
) -> Vec<(Method, Result<Vec<VarianceHead>, String>)> {
    let get = |s: &LayerSet| {
        fitted
            .get(&layer_label(s))
            .cloned()
            .unwrap_or_else(|| Err("head not fitted".into()))
    };
    methods
        .iter()
        .filter(|m| m.is_posthoc())
        .map(|&m| {
            let heads = match m {
                Method::PosthocSingle(l) => LayerSet::single(l, depth).map_err(|e| e.to_string()).and_then(|s| get(&s)).map(|h| vec![h]),
                Method::PosthocAll => LayerSet::all(depth).map_err(|e| e.to_string()).and_then(|s| get(&s)).map(|h| vec![h]),
                _ => (0..depth)
                    .map(|l| LayerSet::single(l, depth).map_err(|e| e.to_string()).and_then(|s| get(&s)))
                    .collect(),
            };
            (m, heads)
        })
        .collect()
}

/// Networks, γ values and β selection for one seed.
#[derive(Debug, Clone, Default)]
pub struct TrainStage {
    pub artifacts: SeedArtifacts,
    pub failures: Vec<CellFailure>,
    pub beta: Option<BetaSelection>,
    pub best_epochs: BTreeMap<String, usize>,
}

/// Recalibrated hold-out NLL of a trained β-NLL candidate.
fn beta_candidate(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    guard: &mut HoldoutGuard,
    beta: f64,
    seed: u64,
) -> Result<(TrainedNetwork, f64, f64)> {
    let t = train_network(cfg, data, Method::BetaNll, beta, seed)?;
    let g = guard.fit_gamma(seed, &format!("fit_gamma[beta_nll:{beta}]"), &t.model, &data.holdout)?;
    let (mu, var) = t.model.predict(&data.holdout.x)?;
    let var: Vec<f64> = var
        .ok_or_else(|| Error::invalid("beta_nll network has no variance output"))?
        .iter()
        .map(|v| g * v)
        .collect();
    let nll = gaussian_nll(&mu, &var, &data.holdout.y)?.loss;
    Ok((t, g, nll))
}

/// Trains the backbone and every end-to-end baseline on TRAIN and fits γ
/// for each on HOLD-OUT.
pub fn train_stage(cfg: &ExperimentConfig, data: &PreparedData, seed: u64, guard: &mut HoldoutGuard) -> TrainStage {
    let mut out = TrainStage {
        artifacts: SeedArtifacts {
            seed,
            ..SeedArtifacts::default()
        },
        ..TrainStage::default()
    };
    let keep = |out: &mut TrainStage, name: String, t: TrainedNetwork, gamma: f64| {
        out.best_epochs.insert(name.clone(), t.best_epoch);
        out.artifacts.histories.insert(name.clone(), t.history);
        out.artifacts.gammas.insert(name.clone(), gamma);
        out.artifacts.models.insert(name, t.model);
    };
    let mut networks: Vec<Method> = cfg.methods.iter().copied().filter(|m| !m.is_posthoc()).collect();
    if needs_backbone(&cfg.methods) && !networks.contains(&Method::Homoskedastic) {
        networks.insert(0, Method::Homoskedastic);
    }
    for method in networks {
        let name = method.to_string();
        if method == Method::BetaNll {
            let mut candidates = Vec::new();
            let mut trained = Vec::new();
            for &beta in &cfg.sweep.beta_grid {
                match beta_candidate(cfg, data, guard, beta, seed) {
                    Ok((t, g, nll)) => {
                        candidates.push(BetaCandidate {
                            beta,
                            holdout_nll: Some(nll),
                            error: None,
                        });
                        trained.push(Some((t, g)));
                    }
                    Err(e) => {
                        candidates.push(BetaCandidate {
                            beta,
                            holdout_nll: None,
                            error: Some(e.to_string()),
                        });
                        trained.push(None);
                    }
                }
            }
            let chosen = select_beta(&candidates);
            out.beta = Some(BetaSelection {
                seed,
                chosen: chosen.map(|i| candidates[i].beta),
                candidates,
            });
            match chosen.and_then(|i| trained[i].take()) {
                Some((t, g)) => keep(&mut out, name, t, g),
                None => out
                    .failures
                    .push(CellFailure::new(&name, seed, &Error::invalid("every beta candidate failed"))),
            }
            continue;
        }
        let res = train_network(cfg, data, method, 0.0, seed)
            .and_then(|t| Ok((guard.fit_gamma(seed, &format!("fit_gamma[{name}]"), &t.model, &data.holdout)?, t)));
        match res {
            Ok((g, t)) => keep(&mut out, name, t, g),
            Err(e) => {
                if method == Method::Homoskedastic {
                    for m in cfg.methods.iter().filter(|m| m.is_posthoc()) {
                        out.failures.push(CellFailure::new(m, seed, &e));
                    }
                }
                if cfg.methods.contains(&method) {
                    out.failures.push(CellFailure::new(&name, seed, &e));
                }
            }
        }
    }
    out
}

/// Fits the configured post-hoc heads on HOLD-OUT over the frozen
/// homoskedastic backbone in `artifacts` and stores them there.
pub fn posthoc_stage(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    artifacts: &mut SeedArtifacts,
    guard: &mut HoldoutGuard,
) -> Vec<CellFailure> {
    let seed = artifacts.seed;
    let mut failures = Vec::new();
    let Some(bb) = artifacts.models.get("homoskedastic") else {
        return failures;
    };
    let depth = cfg.model.hidden.len();
    let mut fitted = BTreeMap::new();
    match head_layer_sets(&cfg.methods, depth) {
        Ok(sets) => {
            for set in sets {
                let label = layer_label(&set);
                let hc = HeadFitConfig {
                    seed: derive_seed(seed, &format!("head:{label}")),
                    ..cfg.head
                };
                let res = guard.fit_head(seed, bb, &data.holdout, &set, &hc, None);
                fitted.insert(label, res.map(|(h, _)| h).map_err(|e| e.to_string()));
            }
        }
        Err(e) => failures.push(CellFailure::new("posthoc", seed, &e)),
    }
    for (method, heads) in posthoc_heads(&cfg.methods, &fitted, depth) {
        match heads {
            Ok(heads) => {
                artifacts.heads.insert(method.to_string(), heads);
            }
            Err(msg) => failures.push(CellFailure {
                method: method.to_string(),
                seed,
                kind: "head_fit".into(),
                message: msg,
            }),
        }
    }
    failures
}

/// Evaluates every configured method present in `artifacts` on TEST (and
/// OOD). Methods with no fitted artifact are skipped when `skip_missing`,
/// otherwise recorded as failures.
pub fn evaluate_stage(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    artifacts: &SeedArtifacts,
    skip_missing: bool,
) -> (Vec<MetricRecord>, Vec<CalibrationCurve>, Vec<CellFailure>) {
    let seed = artifacts.seed;
    let stats = &data.standardization;
    let mut records = Vec::new();
    let mut curves = Vec::new();
    let mut failures = Vec::new();
    for &method in &cfg.methods {
        let name = method.to_string();
        let preds = if method.is_posthoc() {
            match (artifacts.models.get("homoskedastic"), artifacts.heads.get(&name)) {
                (Some(bb), Some(heads)) => Some((
                    heads_predictive(bb, heads, &data.test.x, stats),
                    data.ood.as_ref().map(|o| heads_predictive(bb, heads, &o.x, stats)),
                )),
                _ => None,
            }
        } else {
            match (artifacts.models.get(&name), artifacts.gammas.get(&name)) {
                (Some(model), Some(&g)) => Some((
                    network_predictive(model, g, &data.test.x, stats),
                    data.ood.as_ref().map(|o| network_predictive(model, g, &o.x, stats)),
                )),
                _ => None,
            }
        };
        let Some((test, ood)) = preds else {
            if !skip_missing {
                failures.push(CellFailure {
                    method: name,
                    seed,
                    kind: "missing_artifact".into(),
                    message: "no fitted model for this method".into(),
                });
            }
            continue;
        };
        let result = test.and_then(|t| {
            let o = ood.transpose()?;
            evaluate_predictive(&name, &data.test.target_name, seed, &t, &data.raw_test.y, o.as_ref(), cfg.ece_levels)
        });
        match result {
            Ok((r, c)) => {
                records.extend(r);
                curves.extend(c);
            }
            Err(e) => failures.push(CellFailure::new(&name, seed, &e)),
        }
    }
    (records, curves, failures)
}

fn run_seed(cfg: &ExperimentConfig, data: &PreparedData, seed: u64, hash: &str) -> SeedRun {
    let start = Instant::now();
    let mut guard = HoldoutGuard::default();
    let TrainStage {
        mut artifacts,
        mut failures,
        beta,
        best_epochs,
    } = train_stage(cfg, data, seed, &mut guard);
    failures.extend(posthoc_stage(cfg, data, &mut artifacts, &mut guard));
    let (records, curves, eval_failures) = evaluate_stage(cfg, data, &artifacts, true);
    failures.extend(eval_failures);
    SeedRun {
        records,
        curves,
        failures,
        beta,
        audit: guard.entries,
        artifacts,
        provenance: RunProvenance {
            seed,
            data_seed: cfg.dataset.seed,
            config_hash: hash.to_string(),
            best_epochs,
        },
        runtime: start.elapsed().as_secs_f64(),
    }
}

fn for_seeds<T: Send>(cfg: &ExperimentConfig, f: impl Fn(u64) -> T + Sync) -> Vec<T> {
    if cfg.parallel {
        cfg.seeds.par_iter().map(|&s| f(s)).collect()
    } else {
        cfg.seeds.iter().map(|&s| f(s)).collect()
    }
}

/// Ranks over the methods that have a record in every (target, seed) cell.
pub fn complete_ranks(records: &[MetricRecord], seeds: &[u64]) -> Result<Vec<RankRow>> {
    let mut keep = Vec::new();
    for metric in Metric::ALL {
        let of_metric: Vec<&MetricRecord> = records.iter().filter(|r| r.metric == metric).collect();
        let methods: BTreeSet<&str> = of_metric.iter().map(|r| r.method.as_str()).collect();
        for m in methods {
            let have: BTreeSet<u64> = of_metric.iter().filter(|r| r.method == m).map(|r| r.seed).collect();
            if seeds.iter().all(|s| have.contains(s)) {
                keep.extend(of_metric.iter().filter(|r| r.method == m).map(|r| (*r).clone()));
            }
        }
    }
    aggregate_ranks(&keep, Metric::lower_is_better)
}

pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let data = prepare_data(&cfg.dataset)?;
    run_pipeline_on(cfg, &data)
}

/// As [`run_pipeline`] with data prepared by the caller.
pub fn run_pipeline_on(cfg: &ExperimentConfig, data: &PreparedData) -> Result<ExperimentReport> {
    cfg.validate()?;
    let hash = cfg.hash();
    let runs = for_seeds(cfg, |seed| run_seed(cfg, data, seed, &hash));
    assemble_report(cfg, data, hash, runs)
}

/// Evaluates checkpoints written by [`write_seed_checkpoints`] under `root`.
/// Methods without a checkpoint are recorded as failed cells.
pub fn evaluate_checkpoints(cfg: &ExperimentConfig, data: &PreparedData, root: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    let hash = cfg.hash();
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let start = Instant::now();
        let artifacts = load_seed_checkpoints(root, seed, &cfg.methods)?;
        let (records, curves, failures) = evaluate_stage(cfg, data, &artifacts, false);
        runs.push(SeedRun {
            records,
            curves,
            failures,
            beta: None,
            audit: Vec::new(),
            artifacts,
            provenance: RunProvenance {
                seed,
                data_seed: cfg.dataset.seed,
                config_hash: hash.clone(),
                best_epochs: BTreeMap::new(),
            },
            runtime: start.elapsed().as_secs_f64(),
        });
    }
    assemble_report(cfg, data, hash, runs)
}

fn assemble_report(cfg: &ExperimentConfig, data: &PreparedData, hash: String, runs: Vec<SeedRun>) -> Result<ExperimentReport> {
    let mut report = ExperimentReport {
        name: cfg.name.clone(),
        config_hash: hash,
        config: cfg.clone(),
        target: data.test.target_name.clone(),
        nll_units: "nats per point, raw target units, including the ½log(2π) constant".into(),
        records: Vec::new(),
        ranks: Vec::new(),
        failures: Vec::new(),
        beta_selection: Vec::new(),
        standardization: data.standardization.clone(),
        provenance: Vec::new(),
        curves: Vec::new(),
        audit: Vec::new(),
        artifacts: Vec::new(),
        runtimes: Vec::new(),
    };
    for run in runs {
        report.records.extend(run.records);
        report.curves.extend(run.curves);
        report.failures.extend(run.failures);
        report.beta_selection.extend(run.beta);
        report.audit.extend(run.audit);
        report.runtimes.push((run.artifacts.seed, run.runtime));
        report.artifacts.push(run.artifacts);
        report.provenance.push(run.provenance);
    }
    report.ranks = complete_ranks(&report.records, &cfg.seeds)?;
    Ok(report)
}

/// Outcome of a stage run from the CLI against a checkpoint directory.
#[derive(Debug, Clone, Serialize)]
pub struct StageSummary {
    pub stage: String,
    pub config_hash: String,
    pub failures: Vec<CellFailure>,
    pub beta_selection: Vec<BetaSelection>,
    pub provenance: Vec<RunProvenance>,
    pub audit: Vec<AuditEntry>,
    pub files: Vec<PathBuf>,
}

/// Trains all networks for every seed and writes them under `root`.
pub fn train_checkpoints(cfg: &ExperimentConfig, data: &PreparedData, root: &Path) -> Result<StageSummary> {
    cfg.validate()?;
    let hash = cfg.hash();
    let stages = for_seeds(cfg, |seed| {
        let mut guard = HoldoutGuard::default();
        let st = train_stage(cfg, data, seed, &mut guard);
        (st, guard.entries)
    });
    let mut summary = StageSummary {
        stage: "train".into(),
        config_hash: hash.clone(),
        failures: Vec::new(),
        beta_selection: Vec::new(),
        provenance: Vec::new(),
        audit: Vec::new(),
        files: Vec::new(),
    };
    for (st, audit) in stages {
        summary.files.extend(write_seed_checkpoints(&st.artifacts, root)?);
        summary.failures.extend(st.failures);
        summary.beta_selection.extend(st.beta);
        summary.provenance.push(RunProvenance {
            seed: st.artifacts.seed,
            data_seed: cfg.dataset.seed,
            config_hash: hash.clone(),
            best_epochs: st.best_epochs,
        });
        summary.audit.extend(audit);
    }
    Ok(summary)
}

/// Fits post-hoc heads over the backbone checkpoint of every seed under
/// `root` and writes them next to it.
pub fn posthoc_checkpoints(cfg: &ExperimentConfig, data: &PreparedData, root: &Path) -> Result<StageSummary> {
    cfg.validate()?;
    let hash = cfg.hash();
    let mut summary = StageSummary {
        stage: "posthoc".into(),
        config_hash: hash.clone(),
        failures: Vec::new(),
        beta_selection: Vec::new(),
        provenance: Vec::new(),
        audit: Vec::new(),
        files: Vec::new(),
    };
    for &seed in &cfg.seeds {
        let mut a = load_seed_checkpoints(root, seed, &[Method::Homoskedastic])?;
        if !a.models.contains_key("homoskedastic") {
            return Err(Error::Input {
                path: root.join(format!("seed{seed}")).join("homoskedastic.model.json"),
                message: "backbone checkpoint not found; run `train` first".into(),
            });
        }
        let mut guard = HoldoutGuard::default();
        summary.failures.extend(posthoc_stage(cfg, data, &mut a, &mut guard));
        a.models.clear();
        a.gammas = load_seed_checkpoints(root, seed, &[])?.gammas;
        summary.files.extend(write_seed_checkpoints(&a, root)?);
        summary.audit.extend(guard.entries);
        summary.provenance.push(RunProvenance {
            seed,
            data_seed: cfg.dataset.seed,
            config_hash: hash.clone(),
            best_epochs: BTreeMap::new(),
        });
    }
    Ok(summary)
}

/// Writes `report.json`, `metrics.csv`, `curves.csv`, `ranks.csv`,
/// `manifest.json` and `checkpoints/`.
pub fn write_report_dir(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    let mut put = |name: &str, body: &[u8]| -> Result<()> {
        let p = dir.join(name);
        write_file(&p, body)?;
        files.push(p);
        Ok(())
    };
    put("report.json", serde_json::to_string_pretty(report)?.as_bytes())?;
    put("metrics.csv", metrics_csv(&report.records).as_bytes())?;
    put("curves.csv", curves_csv(&report.curves).as_bytes())?;
    put("ranks.csv", ranks_csv(&report.ranks).as_bytes())?;
    for a in &report.artifacts {
        files.extend(write_seed_checkpoints(a, &dir.join("checkpoints"))?);
    }
    let manifest = serde_json::json!({
        "config_hash": report.config_hash,
        "crate_version": env!("CARGO_PKG_VERSION"),
        "runtimes_seconds": report.runtimes.iter().map(|(s, t)| (s.to_string(), *t)).collect::<BTreeMap<_, _>>(),
        "files": files.iter().map(|p| p.strip_prefix(dir).unwrap_or(p).display().to_string()).collect::<Vec<_>>(),
    });
    let p = dir.join("manifest.json");
    write_file(&p, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    files.push(p);
    Ok(files)
}

/// `checkpoints/seed<s>/`: one model file per network, one head file per
/// post-hoc method, training histories and fitted γ values.
pub fn write_seed_checkpoints(a: &SeedArtifacts, root: &Path) -> Result<Vec<PathBuf>> {
    let dir = root.join(format!("seed{}", a.seed));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut files = Vec::new();
    for (name, model) in &a.models {
        let p = dir.join(format!("{name}.model.json"));
        model.save_json(&p)?;
        files.push(p);
    }
    for (name, heads) in &a.heads {
        let p = dir.join(heads_file_name(name));
        save_heads_json(heads, &p)?;
        files.push(p);
    }
    for (name, h) in &a.histories {
        let p = dir.join(format!("{name}.history.csv"));
        write_file(&p, history_csv(h).as_bytes())?;
        files.push(p);
    }
    let p = dir.join("gammas.json");
    write_file(&p, serde_json::to_string_pretty(&a.gammas)?.as_bytes())?;
    files.push(p);
    Ok(files)
}

fn heads_file_name(method: &str) -> String {
    format!("{}.heads.json", method.replace(':', "_"))
}

/// Reads back whatever [`write_seed_checkpoints`] wrote for `methods`;
/// absent files are left out. Histories are not loaded.
pub fn load_seed_checkpoints(root: &Path, seed: u64, methods: &[Method]) -> Result<SeedArtifacts> {
    let dir = root.join(format!("seed{seed}"));
    if !dir.is_dir() {
        return Err(Error::Input {
            path: dir,
            message: "checkpoint directory not found".into(),
        });
    }
    let mut a = SeedArtifacts {
        seed,
        ..SeedArtifacts::default()
    };
    let gammas = dir.join("gammas.json");
    if gammas.is_file() {
        let text = std::fs::read_to_string(&gammas).map_err(|e| Error::io(&gammas, e))?;
        a.gammas = serde_json::from_str(&text).map_err(|e| Error::Input {
            path: gammas.clone(),
            message: e.to_string(),
        })?;
    }
    let mut names: Vec<String> = methods.iter().filter(|m| !m.is_posthoc()).map(Method::to_string).collect();
    if !names.iter().any(|n| n == "homoskedastic") {
        names.push("homoskedastic".into());
    }
    for name in names {
        let p = dir.join(format!("{name}.model.json"));
        if p.is_file() {
            a.models.insert(name, MlpModel::load_json(&p)?);
        }
    }
    for m in methods.iter().filter(|m| m.is_posthoc()) {
        let p = dir.join(heads_file_name(&m.to_string()));
        if p.is_file() {
            a.heads.insert(m.to_string(), load_heads_json(&p)?);
        }
    }
    Ok(a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Hold-out size or weight-decay value.
    pub setting: f64,
    pub seed: u64,
    pub method: String,
    pub nll: Option<f64>,
    /// Early-stopped epoch count for post-hoc heads.
    pub steps: Option<usize>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub setting: f64,
    pub method: String,
    pub median_nll: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub kind: String,
    pub config_hash: String,
    pub settings: Vec<f64>,
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
    pub notes: Vec<String>,
    #[serde(skip)]
    pub audit: Vec<AuditEntry>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},seed,method,nll,steps,note\n", self.setting_name());
        for r in &self.rows {
            out.push_str(&format!(
                "{:?},{},{},{},{},{}\n",
                r.setting,
                r.seed,
                r.method,
                r.nll.map_or_else(|| "NaN".into(), |v| format!("{v:?}")),
                r.steps.map_or_else(String::new, |s| s.to_string()),
                r.note.as_deref().unwrap_or("").replace(',', ";"),
            ));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = format!("{},method,median_nll\n", self.setting_name());
        for s in &self.summary {
            out.push_str(&format!(
                "{:?},{},{}\n",
                s.setting,
                s.method,
                s.median_nll.map_or_else(|| "NaN".into(), |v| format!("{v:?}"))
            ));
        }
        out
    }

    fn setting_name(&self) -> &'static str {
        if self.kind == "holdout_size" {
            "holdout_size"
        } else {
            "weight_decay"
        }
    }

    pub fn median(&self, method: &str, setting: f64) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.method == method && s.setting == setting)
            .and_then(|s| s.median_nll)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();
        for (name, body) in [
            ("sweep.json", serde_json::to_string_pretty(self)?),
            ("sweep.csv", self.to_csv()),
            ("sweep_summary.csv", self.summary_csv()),
        ] {
            let p = dir.join(name);
            write_file(&p, body.as_bytes())?;
            files.push(p);
        }
        Ok(files)
    }
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

fn summarize(rows: &[SweepRow], settings: &[f64]) -> Vec<SweepSummary> {
    let mut methods: Vec<String> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    let mut out = Vec::new();
    for m in &methods {
        for &s in settings {
            let mut vals: Vec<f64> = rows
                .iter()
                .filter(|r| &r.method == m && r.setting == s)
                .filter_map(|r| r.nll)
                .collect();
            out.push(SweepSummary {
                setting: s,
                method: m.clone(),
                median_nll: median(&mut vals),
            });
        }
    }
    out
}

fn test_nll(pred: Result<Predictive>, y: &[f64]) -> Result<f64> {
    let v = predictive_nll(&pred?, y)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::invalid(format!("test NLL is {v}")))
    }
}

/// Post-hoc methods evaluated in sweeps: the configured ones, or all three
/// kinds when none are configured.
fn sweep_methods(cfg: &ExperimentConfig) -> Vec<Method> {
    let configured: Vec<Method> = cfg.methods.iter().copied().filter(|m| m.is_posthoc()).collect();
    if !configured.is_empty() {
        return configured;
    }
    let mut all: Vec<Method> = (0..cfg.model.hidden.len()).map(Method::PosthocSingle).collect();
    all.extend([Method::PosthocAll, Method::PosthocEnsemble]);
    all
}

/// Post-hoc heads with an internal early-stop refit (λ = 0) and baselines
/// with a closed-form γ, each on seeded nested subsamples of the hold-out.
pub fn run_holdout_size_sweep(cfg: &ExperimentConfig, sizes: &[usize]) -> Result<SweepReport> {
    cfg.validate()?;
    let data = prepare_data(&cfg.dataset)?;
    run_holdout_size_sweep_on(cfg, &data, sizes)
}

pub fn run_holdout_size_sweep_on(cfg: &ExperimentConfig, data: &PreparedData, sizes: &[usize]) -> Result<SweepReport> {
    cfg.validate()?;
    if sizes.is_empty() {
        return Err(Error::invalid("hold-out size list is empty"));
    }
    let available = data.holdout.len();
    if let Some(s) = sizes.iter().find(|s| **s > available) {
        return Err(Error::invalid(format!("hold-out size {s} exceeds the {available} available rows")));
    }
    let mut notes = Vec::new();
    let usable: Vec<usize> = sizes
        .iter()
        .copied()
        .filter(|&s| {
            let ok = s >= crate::optim::MIN_REFIT_ROWS;
            if !ok {
                notes.push(format!("hold-out size {s} skipped: fewer than {} rows", crate::optim::MIN_REFIT_ROWS));
            }
            ok
        })
        .collect();
    let posthoc = sweep_methods(cfg);
    let depth = cfg.model.hidden.len();
    let baselines: Vec<Method> = cfg
        .methods
        .iter()
        .copied()
        .filter(|m| !m.is_posthoc() && *m != Method::BetaNll)
        .collect();
    let head_cfg = HeadFitConfig {
        weight_decay: 0.0,
        ..cfg.head
    };
    let per_seed = for_seeds(cfg, |seed| -> (Vec<SweepRow>, Vec<AuditEntry>, Vec<String>) {
        let mut guard = HoldoutGuard::default();
        let mut rows = Vec::new();
        let mut notes = Vec::new();
        let stats = &data.standardization;
        let y = &data.raw_test.y;
        let mut networks: Vec<(Method, Result<MlpModel>)> = Vec::new();
        let need_backbone = !posthoc.is_empty() || baselines.contains(&Method::Homoskedastic);
        if need_backbone {
            networks.push((
                Method::Homoskedastic,
                train_network(cfg, data, Method::Homoskedastic, 0.0, seed).map(|t| t.model),
            ));
        }
        for &m in baselines.iter().filter(|m| **m != Method::Homoskedastic) {
            networks.push((m, train_network(cfg, data, m, 0.0, seed).map(|t| t.model)));
        }
        let order = Rng::derived(seed, "holdout-size").permutation(available);
        for &size in &usable {
            let sub = if size == available {
                data.holdout.clone()
            } else {
                data.holdout.subset(&order[..size], SplitTag::Holdout)
            };
            for (m, net) in &networks {
                if *m == Method::Homoskedastic && !baselines.contains(m) {
                    continue;
                }
                let res = net
                    .as_ref()
                    .map_err(|e| Error::invalid(e.to_string()))
                    .and_then(|model| {
                        let g = guard.fit_gamma(seed, &format!("fit_gamma[{m}]"), model, &sub)?;
                        test_nll(network_predictive(model, g, &data.test.x, stats), y)
                    });
                rows.push(sweep_row(size as f64, seed, &m.to_string(), res, None));
            }
            let backbone = match &networks.first() {
                Some((Method::Homoskedastic, Ok(b))) => b,
                Some((Method::Homoskedastic, Err(e))) => {
                    for m in &posthoc {
                        rows.push(sweep_row(size as f64, seed, &m.to_string(), Err(Error::invalid(e.to_string())), None));
                    }
                    continue;
                }
                _ => continue,
            };
            let mut fitted = BTreeMap::new();
            let mut steps = BTreeMap::new();
            let sets = match head_layer_sets(&posthoc, depth) {
                Ok(s) => s,
                Err(e) => {
                    notes.push(e.to_string());
                    Vec::new()
                }
            };
            for set in sets {
                let label = layer_label(&set);
                let hc = HeadFitConfig {
                    seed: derive_seed(seed, &format!("head:{label}:size{size}")),
                    ..head_cfg
                };
                let res = guard.fit_head(seed, backbone, &sub, &set, &hc, Some(&cfg.sweep.refit));
                if let Ok((_, k)) = &res {
                    steps.insert(label.clone(), *k);
                }
                fitted.insert(label, res.map(|(h, _)| h).map_err(|e| e.to_string()));
            }
            for (m, heads) in posthoc_heads(&posthoc, &fitted, depth) {
                let k = match m {
                    Method::PosthocSingle(l) => steps.get(&l.to_string()).copied(),
                    Method::PosthocAll => LayerSet::all(depth).ok().and_then(|s| steps.get(&layer_label(&s)).copied()),
                    _ => None,
                };
                let res = heads
                    .map_err(Error::invalid)
                    .and_then(|h| test_nll(heads_predictive(backbone, &h, &data.test.x, stats), y));
                rows.push(sweep_row(size as f64, seed, &m.to_string(), res, k));
            }
        }
        (rows, guard.entries, notes)
    });
    let settings: Vec<f64> = usable.iter().map(|&s| s as f64).collect();
    let mut rows = Vec::new();
    let mut audit = Vec::new();
    for (r, a, n) in per_seed {
        rows.extend(r);
        audit.extend(a);
        notes.extend(n);
    }
    Ok(SweepReport {
        kind: "holdout_size".into(),
        config_hash: cfg.hash(),
        summary: summarize(&rows, &settings),
        settings,
        rows,
        notes,
        audit,
    })
}

fn sweep_row(setting: f64, seed: u64, method: &str, res: Result<f64>, steps: Option<usize>) -> SweepRow {
    match res {
        Ok(v) => SweepRow {
            setting,
            seed,
            method: method.to_string(),
            nll: Some(v),
            steps,
            note: None,
        },
        Err(e) => SweepRow {
            setting,
            seed,
            method: method.to_string(),
            nll: None,
            steps: None,
            note: Some(format!("{}: {e}", e.kind())),
        },
    }
}

/// Test NLL of every post-hoc head choice for each weight-decay value.
pub fn run_weight_decay_sweep(cfg: &ExperimentConfig, grid: &[f64]) -> Result<SweepReport> {
    cfg.validate()?;
    let data = prepare_data(&cfg.dataset)?;
    run_weight_decay_sweep_on(cfg, &data, grid)
}

pub fn run_weight_decay_sweep_on(cfg: &ExperimentConfig, data: &PreparedData, grid: &[f64]) -> Result<SweepReport> {
    cfg.validate()?;
    check_grid("weight-decay grid", grid)?;
    let posthoc = sweep_methods(cfg);
    let depth = cfg.model.hidden.len();
    let per_seed = for_seeds(cfg, |seed| -> (Vec<SweepRow>, Vec<AuditEntry>) {
        let mut guard = HoldoutGuard::default();
        let mut rows = Vec::new();
        let backbone = train_network(cfg, data, Method::Homoskedastic, 0.0, seed).map(|t| t.model);
        for &lambda in grid {
            let backbone = match &backbone {
                Ok(b) => b,
                Err(e) => {
                    for m in &posthoc {
                        rows.push(sweep_row(lambda, seed, &m.to_string(), Err(Error::invalid(e.to_string())), None));
                    }
                    continue;
                }
            };
            let mut fitted = BTreeMap::new();
            for set in head_layer_sets(&posthoc, depth).unwrap_or_default() {
                let label = layer_label(&set);
                let hc = HeadFitConfig {
                    weight_decay: lambda,
                    seed: derive_seed(seed, &format!("head:{label}")),
                    ..cfg.head
                };
                let res = guard.fit_head(seed, backbone, &data.holdout, &set, &hc, None);
                fitted.insert(label, res.map(|(h, _)| h).map_err(|e| e.to_string()));
            }
            for (m, heads) in posthoc_heads(&posthoc, &fitted, depth) {
                let res = heads.map_err(Error::invalid).and_then(|h| {
                    test_nll(heads_predictive(backbone, &h, &data.test.x, &data.standardization), &data.raw_test.y)
                });
                rows.push(sweep_row(lambda, seed, &m.to_string(), res, None));
            }
        }
        (rows, guard.entries)
    });
    let mut rows = Vec::new();
    let mut audit = Vec::new();
    for (r, a) in per_seed {
        rows.extend(r);
        audit.extend(a);
    }
    Ok(SweepReport {
        kind: "weight_decay".into(),
        config_hash: cfg.hash(),
        summary: summarize(&rows, grid),
        settings: grid.to_vec(),
        rows,
        notes: Vec::new(),
        audit,
    })
}
