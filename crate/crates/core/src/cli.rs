//! Run configuration and the `dgib` commands.
//!
//! A run is described by one TOML file whose sections namespace the keys
//! (`synthetic.n_nodes`, `bound.beta1`, ...). Every section is optional:
//!
//! ```toml
//! seed = 7
//!
//! [dataset]            # or a [synthetic] section, never both
//! manifest = "data/manifest.json"
//!
//! [model]
//! hidden_dim = 16
//!
//! [bound]
//! beta1 = 0.01
//! time_indices_a = "all"   # "none" or a list such as [1, 2]
//!
//! [train]
//! max_epochs = 200
//!
//! [attack]
//! mode = "feature"
//! lambda = 1.0
//!
//! [sweep]
//! inv_beta1 = [10.0, 100.0]
//! inv_beta2 = [10.0, 100.0]
//! attacks = ["feature"]
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attacks::{AttackMode, AttackPhase, AttackSpec};
use crate::bounds::{BoundConfig, TimeIndices};
use crate::dyngraph::{generate_synthetic, load_dataset, save_dataset, DynamicGraph, SyntheticParams};
use crate::error::{DgibError, Result};
use crate::model::{DGIBModel, ModelConfig};
use crate::rng;
use crate::train::{beta_sweep, csv_err, evaluate_attack, train, Ablation, TrainConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const INFOPLANE_FILE: &str = "infoplane.csv";
pub const TRADEOFF_FILE: &str = "tradeoff.csv";
pub const ATTACK_FILE: &str = "attack.csv";

#[derive(Debug, Parser)]
#[command(name = "dgib", version, about = "Dynamic graph information bottleneck experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the `seed` key of the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Structure,
    Feature,
    Targeted,
}

impl From<ModeArg> for AttackMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Structure => AttackMode::StructureLinktype,
            ModeArg::Feature => AttackMode::FeatureNoise,
            ModeArg::Targeted => AttackMode::Targeted,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PhaseArg {
    Evasion,
    Poisoning,
}

impl From<PhaseArg> for AttackPhase {
    fn from(p: PhaseArg) -> Self {
        match p {
            PhaseArg::Evasion => AttackPhase::Evasion,
            PhaseArg::Poisoning => AttackPhase::Poisoning,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(CommonArgs),
    /// Train a model and write metrics, report and checkpoint.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_parser = parse_ablation)]
        ablation: Option<Ablation>,
    },
    /// Evaluate a trained checkpoint under an attack.
    AttackEval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Perturbations per target of the targeted attack.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_enum)]
        phase: Option<PhaseArg>,
        /// Clean checkpoint; defaults to `<out>/checkpoint.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train over a (1/beta1, 1/beta2) grid and tabulate clean and attacked AUC.
    Sweep(CommonArgs),
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    s.parse().map_err(|e: DgibError| e.to_string())
}

/// Process exit code of an error.
pub fn exit_code(e: &DgibError) -> i32 {
    match e {
        DgibError::Argument(_) | DgibError::Validation { .. } | DgibError::Parse { .. } => 2,
        DgibError::Divergence { .. } => 3,
        DgibError::MissingArtifact(_) => 4,
        DgibError::Io { .. } | DgibError::EmptyResult(_) => 1,
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    seed: Option<u64>,
    dataset: Option<DatasetSection>,
    synthetic: Option<toml::Table>,
    model: ModelSection,
    bound: Option<toml::Table>,
    train: TrainSection,
    attack: Option<toml::Table>,
    sweep: SweepSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetSection {
    manifest: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelSection {
    hidden_dim: Option<usize>,
    num_layers: Option<usize>,
    k: Option<usize>,
    temperature_initial: Option<f64>,
    temperature_decay: Option<f64>,
    temperature_floor: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainSection {
    learning_rate: Option<f64>,
    max_epochs: Option<usize>,
    patience: Option<usize>,
    ablation: Option<Ablation>,
    info_plane_bins: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SweepSection {
    inv_beta1: Option<Vec<f64>>,
    inv_beta2: Option<Vec<f64>>,
    attacks: Option<Vec<AttackMode>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum DatasetSource {
    Manifest(PathBuf),
    Synthetic(SyntheticParams),
}

/// A fully resolved run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetSource,
    /// Model shape; `input_dim` is filled from the dataset.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub attack: AttackSpec,
    pub sweep_grid: Vec<(f64, f64)>,
    pub sweep_attacks: Vec<AttackSpec>,
    pub output_dir: PathBuf,
    /// Source text and flattened `section.key` view of the config file.
    pub source: Option<String>,
    pub flat: BTreeMap<String, toml::Value>,
}

fn config_err(path: &str, message: impl Into<String>) -> DgibError {
    DgibError::Parse { file: path.to_string(), message: message.into() }
}

/// Overlays the keys of `section` on the serialized `base`, rejecting keys
/// `base` does not have (other than `optional`).
fn overlay<T: Serialize + DeserializeOwned>(
    base: &T,
    section: Option<&toml::Table>,
    name: &str,
    optional: &[&str],
    file: &str,
) -> Result<T> {
    let mut table = toml::Table::try_from(base).map_err(|e| config_err(file, e.to_string()))?;
    if let Some(section) = section {
        for (k, v) in section {
            if !table.contains_key(k) && !optional.contains(&k.as_str()) {
                return Err(config_err(file, format!("unknown key `{name}.{k}`")));
            }
            table.insert(k.clone(), v.clone());
        }
    }
    table.try_into().map_err(|e: toml::de::Error| config_err(file, format!("[{name}] {}", e.message())))
}

fn time_indices(v: &toml::Value, key: &str, file: &str) -> Result<TimeIndices> {
    match v {
        toml::Value::String(s) if s == "all" => Ok(TimeIndices::All),
        toml::Value::String(s) if s == "none" => Ok(TimeIndices::none()),
        toml::Value::Array(items) => items
            .iter()
            .map(|x| match x.as_integer() {
                Some(t) if t >= 1 => Ok(t as usize),
                _ => Err(config_err(file, format!("`bound.{key}` entries must be integers >= 1"))),
            })
            .collect::<Result<_>>()
            .map(TimeIndices::Subset),
        _ => Err(config_err(file, format!("`bound.{key}` must be \"all\", \"none\" or a list of time steps"))),
    }
}

fn flatten_into(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten_into(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

impl RunConfig {
    /// Resolves a config file (or the defaults when absent) and command-line
    /// overrides.
    pub fn load(common: &CommonArgs) -> Result<Self> {
        let (text, file) = match &common.config {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| config_err(&p.display().to_string(), format!("cannot read config: {e}")))?;
                (Some(text), p.display().to_string())
            }
            None => (None, "<defaults>".to_string()),
        };
        let mut cfg = Self::from_toml(text.as_deref().unwrap_or(""), &file, common.seed)?;
        cfg.source = text;
        cfg.output_dir = common.out.clone();
        Ok(cfg)
    }

    pub fn from_toml(text: &str, file: &str, seed_override: Option<u64>) -> Result<Self> {
        let raw: toml::Table = text.parse().map_err(|e: toml::de::Error| config_err(file, e.message()))?;
        let mut flat = BTreeMap::new();
        flatten_into("", &raw, &mut flat);
        let parsed: ConfigFile = toml::Value::Table(raw)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(file, e.message()))?;
        let seed = seed_override.or(parsed.seed).unwrap_or(0);

        let dataset = match (parsed.dataset, parsed.synthetic) {
            (Some(_), Some(_)) => {
                return Err(config_err(file, "give either [dataset] or [synthetic], not both"));
            }
            (Some(d), None) => DatasetSource::Manifest(d.manifest),
            (None, syn) => {
                let base = SyntheticParams { seed, ..Default::default() };
                let mut syn = syn.unwrap_or_default();
                // an omitted split stays automatic
                let split = syn.remove("split");
                let mut params: SyntheticParams = overlay(&base, Some(&syn), "synthetic", &[], file)?;
                if let Some(split) = split {
                    params.split = split
                        .try_into()
                        .map_err(|e: toml::de::Error| config_err(file, format!("[synthetic.split] {}", e.message())))?;
                }
                params.validate()?;
                DatasetSource::Synthetic(params)
            }
        };

        let mut bound_table = parsed.bound.unwrap_or_default();
        let mut bound_base = BoundConfig::default();
        for key in ["time_indices_a", "time_indices_z"] {
            if let Some(v) = bound_table.remove(key) {
                let ti = time_indices(&v, key, file)?;
                match key {
                    "time_indices_a" => bound_base.time_indices_a = ti,
                    _ => bound_base.time_indices_z = ti,
                }
            }
        }
        let bound: BoundConfig = overlay(&bound_base, Some(&bound_table), "bound", &[], file)?;
        bound.validate()?;

        let m = parsed.model;
        let mut model = ModelConfig::new(0);
        model.hidden_dim = m.hidden_dim.unwrap_or(model.hidden_dim);
        model.num_layers = m.num_layers.unwrap_or(model.num_layers);
        model.k = m.k.unwrap_or(model.k);
        model.temperature.initial = m.temperature_initial.unwrap_or(model.temperature.initial);
        model.temperature.decay = m.temperature_decay.unwrap_or(model.temperature.decay);
        model.temperature.floor = m.temperature_floor.unwrap_or(model.temperature.floor);
        model.bound = bound.clone();

        let t = parsed.train;
        let defaults = TrainConfig::default();
        let train = TrainConfig {
            learning_rate: t.learning_rate.unwrap_or(defaults.learning_rate),
            max_epochs: t.max_epochs.unwrap_or(defaults.max_epochs),
            patience: t.patience.unwrap_or(defaults.patience),
            seed,
            bound_cfg: bound,
            ablation: t.ablation.unwrap_or(defaults.ablation),
            info_plane_bins: t.info_plane_bins.unwrap_or(defaults.info_plane_bins),
        };
        train.validate()?;

        let attack_table = parsed.attack.unwrap_or_default();
        let attack_base = AttackSpec { seed, ..Default::default() };
        let attack: AttackSpec = overlay(&attack_base, Some(&attack_table), "attack", &["removed_type"], file)?;

        let s = parsed.sweep;
        let inv1 = s.inv_beta1.unwrap_or_else(|| vec![1.0 / train.bound_cfg.beta1.max(f64::MIN_POSITIVE)]);
        let inv2 = s.inv_beta2.unwrap_or_else(|| vec![1.0 / train.bound_cfg.beta2.max(f64::MIN_POSITIVE)]);
        let sweep_grid = inv1.iter().flat_map(|&a| inv2.iter().map(move |&b| (a, b))).collect();
        let sweep_attacks = s
            .attacks
            .unwrap_or_else(|| vec![attack.mode])
            .into_iter()
            .map(|mode| AttackSpec { mode, ..attack.clone() })
            .collect();

        Ok(RunConfig {
            seed,
            dataset,
            model,
            train,
            attack,
            sweep_grid,
            sweep_attacks,
            output_dir: PathBuf::new(),
            source: None,
            flat,
        })
    }

    pub fn load_graph(&self) -> Result<DynamicGraph> {
        match &self.dataset {
            DatasetSource::Manifest(p) => {
                if !p.exists() {
                    return Err(DgibError::MissingArtifact(p.clone()));
                }
                load_dataset(p)
            }
            DatasetSource::Synthetic(params) => generate_synthetic(params),
        }
    }

    fn model_config(&self, dg: &DynamicGraph) -> ModelConfig {
        ModelConfig { input_dim: dg.feature_dim, ..self.model.clone() }
    }

    fn fresh_model(&self, dg: &DynamicGraph) -> Result<DGIBModel> {
        DGIBModel::new(self.model_config(dg), &mut rng::stream(self.seed, 0x1417))
    }

    fn echo(&self) -> serde_json::Value {
        serde_json::json!({
            "source": self.source,
            "keys": self.flat,
            "seed": self.seed,
        })
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DgibError::io(dir, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json serializes");
    fs::write(path, text + "\n").map_err(|e| DgibError::io(path, e))
}

/// Generates the configured synthetic dataset; returns the manifest path.
pub fn cmd_gen(cfg: &RunConfig) -> Result<PathBuf> {
    let DatasetSource::Synthetic(params) = &cfg.dataset else {
        return Err(DgibError::arg("gen needs a [synthetic] section, not a [dataset] manifest"));
    };
    let dg = generate_synthetic(params)?;
    save_dataset(&dg, &cfg.output_dir)
}

/// Trains and writes metrics, information-plane, report and checkpoint files.
pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf> {
    let started = Instant::now();
    let dg = cfg.load_graph()?;
    ensure_dir(&cfg.output_dir)?;
    let (model, report) = train(cfg.fresh_model(&dg)?, &dg, &cfg.train)?;
    let out = &cfg.output_dir;
    report.write_metrics_csv(&out.join(METRICS_FILE))?;
    report.write_infoplane_csv(&out.join(INFOPLANE_FILE))?;
    model.save_checkpoint(out.join(CHECKPOINT_FILE))?;
    let per_epoch: Vec<f64> = report.epochs.iter().map(|e| e.seconds).collect();
    write_json(
        &out.join(REPORT_FILE),
        &serde_json::json!({
            "command": "train",
            "dataset": dg.name,
            "ablation": cfg.train.ablation,
            "test_auc": report.test_auc,
            "best_val_auc": report.best_val_auc,
            "best_epoch": report.best_epoch,
            "epochs_run": report.epochs.len(),
            "stopped_early": report.stopped_early,
            "model": model.cfg,
            "train": cfg.train,
            "config": cfg.echo(),
            "epoch_seconds": per_epoch,
            "runtime_seconds": started.elapsed().as_secs_f64(),
        }),
    )?;
    Ok(out.join(REPORT_FILE))
}

/// Evaluates the clean checkpoint under the configured attack.
pub fn cmd_attack_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<PathBuf> {
    let started = Instant::now();
    cfg.attack.validate()?;
    let dg = cfg.load_graph()?;
    if cfg.attack.mode == AttackMode::StructureLinktype && dg.link_types < 2 {
        return Err(DgibError::arg(format!(
            "structure attack needs a typed dataset, `{}` has {} link types",
            dg.name, dg.link_types
        )));
    }
    let model = DGIBModel::load_checkpoint(checkpoint)?;
    if model.cfg.input_dim != dg.feature_dim {
        return Err(DgibError::arg(format!(
            "checkpoint expects {} input features, dataset has {}",
            model.cfg.input_dim, dg.feature_dim
        )));
    }
    ensure_dir(&cfg.output_dir)?;
    let outcome = evaluate_attack(&model, &model.cfg, &dg, &cfg.attack, &cfg.train)?;
    let path = cfg.output_dir.join(ATTACK_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["attack", "setting", "auc"]).map_err(|e| csv_err(&path, e))?;
    for (setting, auc) in [("clean", outcome.clean_auc), ("attacked", outcome.attacked_auc)] {
        w.write_record([outcome.attack.as_str(), setting, &auc.to_string()]).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| DgibError::io(&path, e))?;
    write_json(
        &cfg.output_dir.join(REPORT_FILE),
        &serde_json::json!({
            "command": "attack-eval",
            "dataset": dg.name,
            "checkpoint": checkpoint,
            "attack": cfg.attack,
            "rows": [
                {"setting": "clean", "auc": outcome.clean_auc},
                {"setting": "attacked", "auc": outcome.attacked_auc},
            ],
            "removed_type": outcome.removed_type,
            "targets": outcome.targets,
            "config": cfg.echo(),
            "runtime_seconds": started.elapsed().as_secs_f64(),
        }),
    )?;
    Ok(cfg.output_dir.join(REPORT_FILE))
}

/// Runs the β grid and writes `tradeoff.csv`.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<PathBuf> {
    let started = Instant::now();
    let dg = cfg.load_graph()?;
    ensure_dir(&cfg.output_dir)?;
    let rows = beta_sweep(&dg, &cfg.sweep_grid, &cfg.sweep_attacks, &cfg.model_config(&dg), &cfg.train)?;
    let path = cfg.output_dir.join(TRADEOFF_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["inv_beta1", "inv_beta2", "attack", "clean_auc", "attacked_auc"])
        .map_err(|e| csv_err(&path, e))?;
    for r in &rows {
        w.write_record([
            r.inv_beta1.to_string(),
            r.inv_beta2.to_string(),
            r.attack.clone(),
            r.clean_auc.to_string(),
            r.attacked_auc.to_string(),
        ])
        .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| DgibError::io(&path, e))?;
    write_json(
        &cfg.output_dir.join(REPORT_FILE),
        &serde_json::json!({
            "command": "sweep",
            "dataset": dg.name,
            "rows": rows.len(),
            "attacks": cfg.sweep_attacks,
            "config": cfg.echo(),
            "runtime_seconds": started.elapsed().as_secs_f64(),
        }),
    )?;
    Ok(path)
}

/// Dispatches a parsed command line; returns the primary output path.
pub fn run(cli: Cli) -> Result<PathBuf> {
    match cli.command {
        Command::Gen(common) => cmd_gen(&RunConfig::load(&common)?),
        Command::Train { common, ablation } => {
            let mut cfg = RunConfig::load(&common)?;
            if let Some(a) = ablation {
                cfg.train.ablation = a;
            }
            cmd_train(&cfg)
        }
        Command::AttackEval { common, mode, lambda, n, phase, checkpoint } => {
            let mut cfg = RunConfig::load(&common)?;
            if let Some(m) = mode {
                cfg.attack.mode = m.into();
            }
            if let Some(l) = lambda {
                cfg.attack.lambda = l;
            }
            if let Some(n) = n {
                cfg.attack.n_perturbations = n;
            }
            if let Some(p) = phase {
                cfg.attack.phase = p.into();
            }
            let checkpoint = checkpoint.unwrap_or_else(|| cfg.output_dir.join(CHECKPOINT_FILE));
            cmd_attack_eval(&cfg, &checkpoint)
        }
        Command::Sweep(common) => cmd_sweep(&RunConfig::load(&common)?),
    }
}
