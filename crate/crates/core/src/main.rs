//! Command-line front end: dataset generation, single runs, grids and
//! diagnostics. Settings come from a TOML file; flags and `--set key=value`
//! override its keys.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use toml::{Table, Value};

use weaklearn::data::{coverage_stats, load_dataset, save_dataset, Split};
use weaklearn::experiment::{
    run_experiment_grid, run_method, synthetic_preset, write_atomic, DatasetConfig, GridConfig,
    Method, ModelConfig,
};
use weaklearn::export::export_transitions;
use weaklearn::label_model::LabelModel;
use weaklearn::synthetic::{generate, SyntheticSpec};
use weaklearn::training::{write_history, TrainConfig};

#[derive(Parser)]
#[command(
    name = "weaklearn",
    version,
    about = "Train classifiers jointly with label models from weak supervision"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set train.learning_rate=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/validation/test splits from a synthetic spec.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Base preset (`default` or `two-region`); `synthetic.*` keys apply on top.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Train one method on one dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        strong_fraction: Option<f64>,
        /// Directory holding train.jsonl, validation.jsonl and test.jsonl.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the method x fraction x seed matrix.
    Grid {
        #[command(flatten)]
        common: Common,
        /// Restrict the grid to one method.
        #[arg(long)]
        method: Option<Method>,
        /// Restrict the grid to one strong fraction.
        #[arg(long)]
        strong_fraction: Option<f64>,
    },
    /// Export per-point transition matrices of a trained x-dependent label model.
    InspectTransitions {
        /// Label model JSON written by `train`.
        #[arg(long)]
        model: PathBuf,
        /// Points to evaluate (JSON Lines dataset).
        #[arg(long)]
        data: PathBuf,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Coverage, accuracy and conflict diagnostics of a dataset.
    Stats {
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Deserialize)]
#[serde(default)]
struct SynthConfig {
    preset: Option<String>,
    out: PathBuf,
    synthetic: Table,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            preset: None,
            out: PathBuf::from("data"),
            synthetic: Table::new(),
        }
    }
}

#[derive(Deserialize)]
#[serde(default)]
struct TrainRunConfig {
    dataset: Option<DatasetConfig>,
    method: Method,
    strong_fraction: f64,
    out: PathBuf,
    train: TrainConfig,
    model: ModelConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            method: Method::Iwl,
            strong_fraction: 0.01,
            out: PathBuf::from("run"),
            train: TrainConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

fn read_table(path: Option<&Path>) -> Result<Table> {
    match path {
        None => Ok(Table::new()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            text.parse::<Table>()
                .with_context(|| format!("parsing {}", p.display()))
        }
    }
}

/// Set `a.b.c = value`, creating intermediate tables.
fn set_key(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .context("empty configuration key")?;
    let mut current = table;
    for p in parts {
        let entry = current
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        current = match entry {
            Value::Table(t) => t,
            _ => bail!("configuration key `{p}` in `{key}` is not a table"),
        };
    }
    current.insert(last.to_string(), value);
    Ok(())
}

/// Parse the right-hand side as a TOML value; bare words become strings.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn apply_overrides(table: &mut Table, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .with_context(|| format!("`--set {o}` is not KEY=VALUE"))?;
        set_key(table, k.trim(), parse_value(v.trim()))?;
    }
    Ok(())
}

fn decode<T: DeserializeOwned>(table: Table) -> Result<T> {
    Value::Table(table)
        .try_into()
        .context("invalid configuration")
}

/// Recursively overlay `over` onto `base`.
fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn path_value(p: &Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
        .with_context(|| format!("writing {}", path.display()))
}

fn synth(common: Common, preset: Option<String>) -> Result<()> {
    let mut table = read_table(common.config.as_deref())?;
    if let Some(p) = preset {
        table.insert("preset".into(), Value::String(p));
    }
    if let Some(seed) = common.seed {
        set_key(&mut table, "synthetic.seed", Value::Integer(seed as i64))?;
    }
    if let Some(out) = &common.out {
        table.insert("out".into(), path_value(out));
    }
    apply_overrides(&mut table, &common.overrides)?;
    let cfg: SynthConfig = decode(table)?;
    let base = synthetic_preset(cfg.preset.as_deref().unwrap_or("default"))?;
    let mut spec_table = Table::try_from(&base).context("encoding preset")?;
    merge(&mut spec_table, cfg.synthetic);
    let spec: SyntheticSpec = decode(spec_table)?;
    let data = generate(&spec)?;
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    for (name, ds) in [
        ("train", &data.train),
        ("validation", &data.validation),
        ("test", &data.test),
    ] {
        save_dataset(ds, &cfg.out.join(format!("{name}.jsonl")))?;
    }
    data.truth.save(&cfg.out.join("truth.json"))?;
    println!(
        "wrote {} / {} / {} points to {}",
        data.train.len(),
        data.validation.len(),
        data.test.len(),
        cfg.out.display()
    );
    Ok(())
}

fn train(
    common: Common,
    method: Option<Method>,
    fraction: Option<f64>,
    data: Option<PathBuf>,
) -> Result<()> {
    let mut table = read_table(common.config.as_deref())?;
    if let Some(m) = method {
        table.insert("method".into(), Value::String(m.id().into()));
    }
    if let Some(f) = fraction {
        table.insert("strong_fraction".into(), Value::Float(f));
    }
    if let Some(seed) = common.seed {
        set_key(&mut table, "train.seed", Value::Integer(seed as i64))?;
    }
    if let Some(out) = &common.out {
        table.insert("out".into(), path_value(out));
    }
    if let Some(dir) = &data {
        let mut ds = Table::new();
        ds.insert("name".into(), Value::String(dataset_name(dir)));
        for split in ["train", "validation", "test"] {
            ds.insert(
                split.into(),
                path_value(&dir.join(format!("{split}.jsonl"))),
            );
        }
        table.insert("dataset".into(), Value::Table(ds));
    }
    apply_overrides(&mut table, &common.overrides)?;
    let cfg: TrainRunConfig = decode(table)?;
    let dataset = cfg.dataset.unwrap_or(DatasetConfig {
        name: "default".into(),
        preset: Some("default".into()),
        synthetic: None,
        train: None,
        validation: None,
        test: None,
    });
    let splits = dataset.load()?;
    let run = run_method(
        &dataset.name,
        cfg.method,
        &splits.train,
        &splits.validation,
        &splits.test,
        cfg.strong_fraction,
        cfg.train.seed,
        &cfg.train,
        &cfg.model,
    )?;
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    write_json(&cfg.out.join("result.json"), &run.result)?;
    write_history(&run.outcome.history, &cfg.out.join("history.jsonl"))?;
    write_json(&cfg.out.join("end_model.json"), &run.outcome.end_model)?;
    if let Some(lm) = &run.outcome.label_model {
        write_json(&cfg.out.join("label_model.json"), lm)?;
    }
    println!("{}", serde_json::to_string(&run.result)?);
    Ok(())
}

fn dataset_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into())
}

fn grid(common: Common, method: Option<Method>, fraction: Option<f64>) -> Result<()> {
    let Some(path) = common.config.as_deref() else {
        bail!("grid needs --config <path>");
    };
    let mut table = read_table(Some(path))?;
    if let Some(m) = method {
        table.insert(
            "methods".into(),
            Value::Array(vec![Value::String(m.id().into())]),
        );
    }
    if let Some(f) = fraction {
        table.insert("fractions".into(), Value::Array(vec![Value::Float(f)]));
    }
    if let Some(seed) = common.seed {
        table.insert(
            "seeds".into(),
            Value::Array(vec![Value::Integer(seed as i64)]),
        );
    }
    if let Some(out) = &common.out {
        table.insert("out_dir".into(), path_value(out));
    }
    apply_overrides(&mut table, &common.overrides)?;
    let cfg: GridConfig = decode(table)?;
    let report = run_experiment_grid(&cfg)?;
    println!("dataset,method,strong_fraction,n,mean_test_f1,std_test_f1");
    for r in &report.summary {
        println!(
            "{},{},{},{},{:.4},{:.4}",
            r.dataset, r.method, r.strong_fraction, r.n, r.mean_test_f1, r.std_test_f1
        );
    }
    for f in &report.failures {
        eprintln!("failed: {f:?}");
    }
    if !report.failures.is_empty() {
        bail!(
            "{} grid cells failed (see failures.json)",
            report.failures.len()
        );
    }
    Ok(())
}

fn inspect(model: &Path, data: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(model).with_context(|| format!("reading {}", model.display()))?;
    let lm: LabelModel = serde_json::from_str(&text).context("decoding label model")?;
    let ds = load_dataset(data, Split::Test)?;
    let export = export_transitions(&lm, &ds.points)?;
    export.write_csv(out)?;
    for (k, v) in export.source_variance.iter().enumerate() {
        println!("source {k}: variance {v:.6e}");
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth { common, preset } => synth(common, preset),
        Command::Train {
            common,
            method,
            strong_fraction,
            data,
        } => train(common, method, strong_fraction, data),
        Command::Grid {
            common,
            method,
            strong_fraction,
        } => grid(common, method, strong_fraction),
        Command::InspectTransitions { model, data, out } => inspect(&model, &data, &out),
        Command::Stats { data } => {
            let ds = load_dataset(&data, Split::Train)?;
            println!("{}", serde_json::to_string_pretty(&coverage_stats(&ds)?)?);
            Ok(())
        }
    }
}
