//! Methods, single runs, and the resumable experiment grid.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{labels_only_train, mv_strong_labels, mv_vote_labels, noise_aware_train};
use crate::data::{apply_strong_fraction, load_dataset, Split, StrongFractionPlan, WeakDataset};
use crate::end_model::{Architecture, EndModel, DEFAULT_HIDDEN_WIDTH};
use crate::error::{Error, Result};
use crate::label_model::{
    AmortizedLabelModel, LabelModel, LatentLabelModel, DEFAULT_LATENT_STATES,
};
use crate::math;
use crate::metrics;
use crate::synthetic::{self, SyntheticSpec};
use crate::training::{train, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "iWL")]
    Iwl,
    #[serde(rename = "iWLD")]
    Iwld,
    #[serde(rename = "MV-V")]
    MvV,
    #[serde(rename = "MV-S")]
    MvS,
    #[serde(rename = "LO")]
    Lo,
    #[serde(rename = "latent-h")]
    LatentH,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Iwl,
        Method::Iwld,
        Method::MvV,
        Method::MvS,
        Method::Lo,
        Method::LatentH,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Method::Iwl => "iWL",
            Method::Iwld => "iWLD",
            Method::MvV => "MV-V",
            Method::MvS => "MV-S",
            Method::Lo => "LO",
            Method::LatentH => "latent-h",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.id().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown method `{s}` (expected one of iWL, iWLD, MV-V, MV-S, LO, latent-h)"
                ))
            })
    }
}

/// Model shapes shared by the methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub hidden_width: usize,
    /// Hidden width of the amortized and latent-mixture networks.
    pub label_hidden_width: usize,
    pub latent_states: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Mlp2,
            hidden_width: DEFAULT_HIDDEN_WIDTH,
            label_hidden_width: DEFAULT_HIDDEN_WIDTH,
            latent_states: DEFAULT_LATENT_STATES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub dataset: String,
    pub method: Method,
    pub strong_fraction: f64,
    pub seed: u64,
    pub test_f1: f64,
    pub val_f1: f64,
    pub test_accuracy: f64,
    pub steps: usize,
    pub best_step: usize,
    pub wall_time_s: f64,
}

pub struct RunOutput {
    pub result: ExperimentResult,
    pub outcome: TrainOutcome,
}

/// Seed of the strong-label subset. Each fraction gets its own draw.
pub fn strong_subset_seed(seed: u64, fraction: f64) -> u64 {
    math::derive_seed(seed ^ fraction.to_bits(), 100)
}

/// Train one method on one dataset at one strong fraction and score it on
/// the test split. `train_set` must carry strong labels on every point.
#[allow(clippy::too_many_arguments)]
pub fn run_method(
    dataset: &str,
    method: Method,
    train_set: &WeakDataset,
    validation: &WeakDataset,
    test: &WeakDataset,
    fraction: f64,
    seed: u64,
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<RunOutput> {
    let start = Instant::now();
    let (strong, weak) = apply_strong_fraction(
        train_set,
        StrongFractionPlan {
            fraction,
            seed: strong_subset_seed(seed, fraction),
        },
    )?;
    let cfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let (d, c, k) = (
        train_set.feature_dim,
        train_set.num_classes,
        train_set.num_sources,
    );
    let mut end_rng = math::seeded_rng(math::derive_seed(seed, 200));
    let end_model = EndModel::new(
        model_cfg.architecture,
        d,
        c,
        model_cfg.hidden_width,
        &mut end_rng,
    )?;
    let mut label_rng = math::seeded_rng(math::derive_seed(seed, 201));
    let outcome = match method {
        Method::Iwl => train(
            LabelModel::global(c, k),
            end_model,
            &strong,
            &weak,
            validation,
            &cfg,
        )?,
        Method::Iwld => {
            let lm =
                AmortizedLabelModel::new(d, c, k, model_cfg.label_hidden_width, &mut label_rng)?;
            train(
                LabelModel::Amortized(lm),
                end_model,
                &strong,
                &weak,
                validation,
                &cfg,
            )?
        }
        Method::LatentH => {
            let lm = LatentLabelModel::new(
                d,
                c,
                k,
                model_cfg.latent_states,
                model_cfg.label_hidden_width,
                &mut label_rng,
            )?;
            train(
                LabelModel::Latent(lm),
                end_model,
                &strong,
                &weak,
                validation,
                &cfg,
            )?
        }
        Method::MvV => {
            let (all, labels) = mv_vote_labels(&strong, &weak)?;
            noise_aware_train(end_model, &all, &labels, validation, &cfg)?
        }
        Method::MvS => {
            let (all, labels) = mv_strong_labels(&strong, &weak)?;
            noise_aware_train(end_model, &all, &labels, validation, &cfg)?
        }
        Method::Lo => labels_only_train(end_model, &strong, validation, &cfg)?,
    };
    let test_metrics = metrics::evaluate(&outcome.end_model, test)?;
    let result = ExperimentResult {
        dataset: dataset.to_string(),
        method,
        strong_fraction: fraction,
        seed,
        test_f1: test_metrics.f1,
        val_f1: outcome.best_val_f1.unwrap_or(0.0),
        test_accuracy: test_metrics.accuracy,
        steps: outcome.steps,
        best_step: outcome.best_step,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutput { result, outcome })
}

/// Where a grid dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub name: String,
    /// Named synthetic preset: `default` or `two-region`.
    #[serde(default)]
    pub preset: Option<String>,
    /// Inline synthetic spec (overrides `preset`).
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub validation: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
}

pub fn synthetic_preset(name: &str) -> Result<SyntheticSpec> {
    match name {
        "default" => Ok(SyntheticSpec::default()),
        "two-region" => Ok(SyntheticSpec::two_region_default()),
        other => Err(Error::InvalidConfig(format!(
            "unknown synthetic preset `{other}` (expected default or two-region)"
        ))),
    }
}

/// Train, validation and test splits of a grid dataset.
pub struct Splits {
    pub train: WeakDataset,
    pub validation: WeakDataset,
    pub test: WeakDataset,
}

impl DatasetConfig {
    pub fn load(&self) -> Result<Splits> {
        let spec = match (&self.synthetic, &self.preset) {
            (Some(s), _) => Some(s.clone()),
            (None, Some(p)) => Some(synthetic_preset(p)?),
            (None, None) => None,
        };
        if let Some(spec) = spec {
            let data = synthetic::generate(&spec)?;
            return Ok(Splits {
                train: data.train,
                validation: data.validation,
                test: data.test,
            });
        }
        match (&self.train, &self.validation, &self.test) {
            (Some(tr), Some(va), Some(te)) => Ok(Splits {
                train: load_dataset(tr, Split::Train)?,
                validation: load_dataset(va, Split::Validation)?,
                test: load_dataset(te, Split::Test)?,
            }),
            _ => Err(Error::InvalidConfig(format!(
                "dataset `{}` needs a synthetic spec/preset or train, validation and test files",
                self.name
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub datasets: Vec<DatasetConfig>,
    pub methods: Vec<Method>,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelConfig,
    /// Run cells concurrently.
    #[serde(default = "default_true")]
    pub parallel: bool,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("results")
}

fn default_true() -> bool {
    true
}

impl GridConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub dataset: String,
    pub method: Method,
    pub strong_fraction: f64,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub method: Method,
    pub strong_fraction: f64,
    pub n: usize,
    pub mean_test_f1: f64,
    pub std_test_f1: f64,
    pub mean_val_f1: f64,
    pub std_val_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridReport {
    pub results: Vec<ExperimentResult>,
    pub failures: Vec<CellFailure>,
    pub summary: Vec<SummaryRow>,
}

/// `results/<dataset>/<method>/<fraction>/<seed>.json`.
pub fn cell_path(
    out_dir: &Path,
    dataset: &str,
    method: Method,
    fraction: f64,
    seed: u64,
) -> PathBuf {
    out_dir
        .join(dataset)
        .join(method.id())
        .join(fraction.to_string())
        .join(format!("{seed}.json"))
}

/// Write via a temporary sibling and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Mean and sample standard deviation (`n - 1`); std is 0 for one value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

pub fn summarize(results: &[ExperimentResult]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, Method, u64), Vec<&ExperimentResult>> = BTreeMap::new();
    for r in results {
        groups
            .entry((r.dataset.clone(), r.method, r.strong_fraction.to_bits()))
            .or_default()
            .push(r);
    }
    let mut rows: Vec<SummaryRow> = groups
        .into_iter()
        .map(|((dataset, method, bits), mut rs)| {
            rs.sort_by_key(|r| r.seed);
            let test: Vec<f64> = rs.iter().map(|r| r.test_f1).collect();
            let val: Vec<f64> = rs.iter().map(|r| r.val_f1).collect();
            let (mean_test_f1, std_test_f1) = mean_std(&test);
            let (mean_val_f1, std_val_f1) = mean_std(&val);
            SummaryRow {
                dataset,
                method,
                strong_fraction: f64::from_bits(bits),
                n: rs.len(),
                mean_test_f1,
                std_test_f1,
                mean_val_f1,
                std_val_f1,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        (&a.dataset, a.method)
            .cmp(&(&b.dataset, b.method))
            .then(a.strong_fraction.total_cmp(&b.strong_fraction))
    });
    rows
}

fn write_summary(out_dir: &Path, rows: &[SummaryRow], failures: &[CellFailure]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(&out_dir.join("summary.csv"), &bytes)?;
    write_atomic(
        &out_dir.join("summary.json"),
        serde_json::to_string_pretty(rows)?.as_bytes(),
    )?;
    write_atomic(
        &out_dir.join("failures.json"),
        serde_json::to_string_pretty(failures)?.as_bytes(),
    )?;
    Ok(())
}

/// Run every (dataset, method, fraction, seed) cell, skipping cells whose
/// result file already exists. Failures are collected, not fatal.
pub fn run_experiment_grid(cfg: &GridConfig) -> Result<GridReport> {
    cfg.train.validate()?;
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for ds_cfg in &cfg.datasets {
        let splits = ds_cfg.load()?;
        let cells: Vec<(Method, f64, u64)> = cfg
            .methods
            .iter()
            .flat_map(|&m| {
                cfg.fractions
                    .iter()
                    .flat_map(move |&f| cfg.seeds.iter().map(move |&s| (m, f, s)))
            })
            .collect();
        let run_cell = |&(method, fraction, seed): &(Method, f64, u64)| -> std::result::Result<ExperimentResult, CellFailure> {
            let path = cell_path(&cfg.out_dir, &ds_cfg.name, method, fraction, seed);
            let fail = |e: Error| CellFailure {
                dataset: ds_cfg.name.clone(),
                method,
                strong_fraction: fraction,
                seed,
                error: e.to_string(),
            };
            if let Ok(text) = fs::read_to_string(&path) {
                if let Ok(r) = serde_json::from_str::<ExperimentResult>(&text) {
                    return Ok(r);
                }
            }
            let out = run_method(
                &ds_cfg.name,
                method,
                &splits.train,
                &splits.validation,
                &splits.test,
                fraction,
                seed,
                &cfg.train,
                &cfg.model,
            )
            .map_err(fail)?;
            let text = serde_json::to_string_pretty(&out.result).map_err(|e| fail(e.into()))?;
            write_atomic(&path, text.as_bytes()).map_err(fail)?;
            Ok(out.result)
        };
        let outcomes: Vec<_> = if cfg.parallel {
            cells.par_iter().map(run_cell).collect()
        } else {
            cells.iter().map(run_cell).collect()
        };
        for o in outcomes {
            match o {
                Ok(r) => results.push(r),
                Err(f) => failures.push(f),
            }
        }
    }
    let summary = summarize(&results);
    write_summary(&cfg.out_dir, &summary, &failures)?;
    Ok(GridReport {
        results,
        failures,
        summary,
    })
}
