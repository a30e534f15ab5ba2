//! `ipf` command-line front end.
//!
//! Every flag may also come from a TOML file passed with `--config`, using
//! the flag name as the key (`n-per-class = 500`). Flags win over the file,
//! and the file wins over built-in defaults. Each subcommand writes
//! `manifest.json` into `--out` with the resolved configuration and SHA-256
//! digests of everything it produced.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::feature_io::{self, FeatureMatrix};
use crate::grid::{self, GridMode};
use crate::ipf::{self, IpfField};
use crate::metrics::{self, EvalReport};
use crate::net::{self, SnMlp, TrainConfig};
use crate::synth::{self, LabeledDataset2D};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "ipf", version, about = "Information potential field uncertainty and OOD scoring")]
pub struct Cli {
    /// TOML file with default values for any flag
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the two-moons or three-spirals dataset as CSV
    GenData(RunArgs),
    /// Train the residual MLP and export its training-set features
    Train(RunArgs),
    /// Score iD/OOD test sets against a field over reference features
    Score(RunArgs),
    /// Pick the bandwidth with the best AUROC over a grid
    Sweep(RunArgs),
    /// Render 100x100 uncertainty maps over the 2D viewport
    Heatmap(RunArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Score(_) => "score",
            Command::Sweep(_) => "sweep",
            Command::Heatmap(_) => "heatmap",
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::GenData(a) | Command::Train(a) | Command::Score(a) | Command::Sweep(a) | Command::Heatmap(a) => a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Moons,
    Spirals,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Feature,
    Input,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunArgs {
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetKind>,
    /// Labeled 2D dataset CSV (x,y,label) used instead of generating one
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub n_per_class: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Spectral normalization on (default)
    #[arg(long, overrides_with = "no_sn")]
    #[serde(default)]
    pub sn: bool,
    /// Spectral normalization off
    #[arg(long, overrides_with = "sn")]
    #[serde(skip)]
    pub no_sn: bool,
    #[arg(long)]
    pub sn_coeff: Option<f64>,
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Comma list (0.1,0.2) or lin:LO:HI:COUNT or log:LO:HI:COUNT
    #[arg(long)]
    pub bandwidth_grid: Option<String>,
    #[arg(long)]
    pub threshold_percentile: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub ref_features: Option<PathBuf>,
    #[arg(long)]
    pub test_id_features: Option<PathBuf>,
    #[arg(long)]
    pub test_ood_features: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Fully resolved configuration, recorded in every manifest.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub subcommand: String,
    pub dataset: DatasetKind,
    pub data: Option<PathBuf>,
    pub n_per_class: usize,
    pub noise: f64,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub sn: bool,
    pub sn_coeff: f64,
    pub bandwidth: f64,
    pub bandwidth_grid: Option<String>,
    pub threshold_percentile: f64,
    pub mode: ModeArg,
    pub checkpoint: Option<PathBuf>,
    pub ref_features: Option<PathBuf>,
    pub test_id_features: Option<PathBuf>,
    pub test_ood_features: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Run(Error::Diverged { .. } | Error::NonFinite(_)) => EXIT_NUMERICAL,
            CliError::Run(_) => EXIT_DATA,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl RunConfig {
    pub fn resolve(subcommand: &str, flags: &RunArgs, file: Option<&RunArgs>) -> CliResult<Self> {
        let empty = RunArgs::default();
        let file = file.unwrap_or(&empty);
        macro_rules! pick {
            ($field:ident) => {
                flags.$field.clone().or_else(|| file.$field.clone())
            };
        }
        let dataset = pick!(dataset).unwrap_or(DatasetKind::Moons);
        let (default_n, default_noise) = match dataset {
            DatasetKind::Moons => (2000, 0.1),
            DatasetKind::Spirals => (1200, 0.08),
        };
        let sn = if flags.no_sn {
            false
        } else if flags.sn {
            true
        } else {
            // the file only carries `sn = true|false`; absent means on
            file_sn(file).unwrap_or(true)
        };
        let cfg = RunConfig {
            subcommand: subcommand.to_string(),
            dataset,
            data: pick!(data),
            n_per_class: pick!(n_per_class).unwrap_or(default_n),
            noise: pick!(noise).unwrap_or(default_noise),
            seed: pick!(seed).unwrap_or(0),
            epochs: pick!(epochs).unwrap_or(300),
            lr: pick!(lr).unwrap_or(0.05),
            momentum: pick!(momentum).unwrap_or(0.9),
            batch_size: pick!(batch_size).unwrap_or(128),
            sn,
            sn_coeff: pick!(sn_coeff).unwrap_or(1.0),
            bandwidth: pick!(bandwidth).unwrap_or(0.3),
            bandwidth_grid: pick!(bandwidth_grid),
            threshold_percentile: pick!(threshold_percentile).unwrap_or(ipf::DEFAULT_THRESHOLD_PERCENTILE),
            mode: pick!(mode).unwrap_or(ModeArg::Feature),
            checkpoint: pick!(checkpoint),
            ref_features: pick!(ref_features),
            test_id_features: pick!(test_id_features),
            test_ood_features: pick!(test_ood_features),
            out: pick!(out).unwrap_or_else(|| PathBuf::from(".")),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> CliResult<()> {
        if self.n_per_class == 0 {
            return Err(usage("--n-per-class must be >= 1"));
        }
        if !(self.noise >= 0.0) {
            return Err(usage("--noise must be >= 0"));
        }
        if !(self.bandwidth > 0.0) || !self.bandwidth.is_finite() {
            return Err(usage("--bandwidth must be > 0"));
        }
        if !(self.threshold_percentile > 0.0 && self.threshold_percentile < 100.0) {
            return Err(usage("--threshold-percentile must lie in (0, 100)"));
        }
        // input paths are checked before any long computation starts
        for p in [&self.data, &self.checkpoint, &self.ref_features, &self.test_id_features, &self.test_ood_features]
            .into_iter()
            .flatten()
        {
            if !p.is_file() {
                return Err(CliError::Run(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("input file {} does not exist", p.display()),
                ))));
            }
        }
        Ok(())
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.lr,
            momentum: self.momentum,
            batch_size: self.batch_size,
            seed: self.seed,
            sn_enabled: self.sn,
            sn_coeff: self.sn_coeff,
            ..TrainConfig::default()
        }
    }

    fn grid_mode(&self) -> GridMode {
        match self.mode {
            ModeArg::Feature => GridMode::FeatureSpace,
            ModeArg::Input => GridMode::InputSpace,
        }
    }
}

fn file_sn(file: &RunArgs) -> Option<bool> {
    // `sn` deserializes to false when absent, so only a true value is a signal;
    // `sn = false` in the file is carried through `no_sn` by `load_config_file`.
    if file.no_sn {
        Some(false)
    } else if file.sn {
        Some(true)
    } else {
        None
    }
}

pub fn load_config_file(path: &Path) -> CliResult<RunArgs> {
    let text = std::fs::read_to_string(path)?;
    let table: toml::Table = text.parse().map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    let sn_false = matches!(table.get("sn"), Some(toml::Value::Boolean(false)));
    let mut args: RunArgs = table.try_into().map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    args.no_sn = sn_false;
    Ok(args)
}

/// Parses `0.1,0.2`, `lin:LO:HI:N` or `log:LO:HI:N`.
pub fn parse_bandwidth_grid(text: &str) -> CliResult<Vec<f64>> {
    let bad = || usage(format!("bad --bandwidth-grid {text:?}"));
    let grid = if let Some(rest) = text.strip_prefix("lin:").or_else(|| text.strip_prefix("log:")) {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let lo: f64 = parts[0].parse().map_err(|_| bad())?;
        let hi: f64 = parts[1].parse().map_err(|_| bad())?;
        let n: usize = parts[2].parse().map_err(|_| bad())?;
        if text.starts_with("lin:") {
            ipf::linear_grid(lo, hi, n)
        } else {
            if lo <= 0.0 || hi <= 0.0 {
                return Err(bad());
            }
            ipf::log_grid(lo, hi, n)
        }
    } else {
        text.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<CliResult<_>>()?
    };
    if grid.is_empty() {
        return Err(usage("bandwidth grid is empty"));
    }
    if grid.iter().any(|h| !(*h > 0.0) || !h.is_finite()) {
        return Err(usage("bandwidths must be finite and > 0"));
    }
    Ok(grid)
}

struct Manifest {
    artifacts: BTreeMap<String, String>,
}

impl Manifest {
    fn new() -> Self {
        Self { artifacts: BTreeMap::new() }
    }

    fn record(&mut self, path: &Path) -> CliResult<()> {
        let digest = Sha256::digest(std::fs::read(path)?);
        let hex = digest.iter().fold(String::new(), |mut s, b| {
            write!(s, "{b:02x}").unwrap();
            s
        });
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        self.artifacts.insert(name, hex);
        Ok(())
    }

    fn write(&self, cfg: &RunConfig, extra: serde_json::Value) -> CliResult<PathBuf> {
        let doc = serde_json::json!({
            "tool": "ipf",
            "version": env!("CARGO_PKG_VERSION"),
            "subcommand": cfg.subcommand,
            "seed": cfg.seed,
            "config": cfg,
            "results": extra,
            "artifacts": self.artifacts,
        });
        let path = cfg.out.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&doc).expect("serializable manifest"))?;
        Ok(path)
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let file = cli.config.as_deref().map(load_config_file).transpose()?;
    let cfg = RunConfig::resolve(cli.command.name(), cli.command.args(), file.as_ref())?;
    std::fs::create_dir_all(&cfg.out)?;
    match cli.command {
        Command::GenData(_) => cmd_gen_data(&cfg),
        Command::Train(_) => cmd_train(&cfg),
        Command::Score(_) => cmd_score(&cfg),
        Command::Sweep(_) => cmd_sweep(&cfg),
        Command::Heatmap(_) => cmd_heatmap(&cfg),
    }
}

fn dataset_name(kind: DatasetKind) -> &'static str {
    match kind {
        DatasetKind::Moons => "moons",
        DatasetKind::Spirals => "spirals",
    }
}

fn generate(cfg: &RunConfig, seed: u64) -> crate::error::Result<LabeledDataset2D> {
    match cfg.dataset {
        DatasetKind::Moons => synth::make_two_moons(cfg.n_per_class, cfg.noise, seed),
        DatasetKind::Spirals => synth::make_three_spirals(cfg.n_per_class, cfg.noise, seed),
    }
}

/// Training data from `--data` or generated from `--dataset` and `--seed`.
fn training_data(cfg: &RunConfig) -> crate::error::Result<LabeledDataset2D> {
    match &cfg.data {
        Some(path) => dataset_from_csv(path),
        None => generate(cfg, cfg.seed),
    }
}

pub fn dataset_from_csv(path: &Path) -> crate::error::Result<LabeledDataset2D> {
    let m = feature_io::read_csv_features(path)?;
    let labels = m
        .labels
        .ok_or_else(|| Error::invalid(format!("{} has no label column", path.display())))?;
    if labels.iter().any(|&l| l < 0) {
        return Err(Error::invalid("negative class label"));
    }
    let labels: Vec<usize> = labels.into_iter().map(|l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset2D::new(m.data, labels, num_classes)
}

fn cmd_gen_data(cfg: &RunConfig) -> CliResult<()> {
    let name = dataset_name(cfg.dataset);
    let train = generate(cfg, cfg.seed)?;
    let test = generate(cfg, cfg.seed.wrapping_add(1))?;
    let mut manifest = Manifest::new();
    for (suffix, d) in [("train", &train), ("test", &test)] {
        let path = cfg.out.join(format!("{name}_{suffix}.csv"));
        d.write_csv(&path)?;
        manifest.record(&path)?;
    }
    manifest.write(cfg, serde_json::json!({ "n_train": train.len(), "n_test": test.len() }))?;
    println!("wrote {name}_train.csv ({} rows) and {name}_test.csv ({} rows)", train.len(), test.len());
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> CliResult<()> {
    let train = training_data(cfg)?;
    let held_out = match cfg.data {
        Some(_) => None,
        None => Some(generate(cfg, cfg.seed.wrapping_add(1))?),
    };
    let tc = cfg.train_config();
    let (model, curve) = net::train(&train, &tc)?;

    let mut manifest = Manifest::new();
    let ckpt = cfg.out.join("model.snml");
    model.save(&ckpt)?;
    manifest.record(&ckpt)?;

    let loss_path = cfg.out.join("loss.csv");
    let mut text = String::from("epoch,loss\n");
    for (e, l) in curve.iter().enumerate() {
        writeln!(text, "{e},{l}").unwrap();
    }
    std::fs::write(&loss_path, text)?;
    manifest.record(&loss_path)?;

    let features = model.features(train.points.view())?;
    let labels = train.labels.iter().map(|&l| l as i32).collect();
    let fm = FeatureMatrix::new(features, Some(labels), format!("{} train features", dataset_name(cfg.dataset)))?;
    let feat_path = cfg.out.join("train_features.ipff");
    feature_io::write_features(&fm, &feat_path)?;
    manifest.record(&feat_path)?;

    let train_acc = metrics::accuracy(&model.predict(train.points.view())?, &train.labels)?;
    let test_acc = match &held_out {
        Some(t) => Some(metrics::accuracy(&model.predict(t.points.view())?, &t.labels)?),
        None => None,
    };
    manifest.write(
        cfg,
        serde_json::json!({
            "final_loss": curve.last(),
            "train_accuracy": train_acc,
            "held_out_accuracy": test_acc,
            "spectral_estimates": model.spectral_estimates(50),
        }),
    )?;
    println!("final loss {:.6}, train accuracy {train_acc:.4}", curve.last().copied().unwrap_or(f64::NAN));
    if let Some(a) = test_acc {
        println!("held-out accuracy {a:.4}");
    }
    Ok(())
}

/// A scored input set: features for the field plus logits when a model ran.
struct Prepared {
    features: Array2<f64>,
    logits: Option<Array2<f64>>,
    labels: Option<Vec<i32>>,
}

fn prepare(path: &Path, model: Option<&SnMlp>) -> CliResult<Prepared> {
    let m = feature_io::read_any(path)?;
    match model {
        Some(model) => {
            let (features, logits) = model.forward(m.data.view())?;
            Ok(Prepared { features, logits: Some(logits), labels: m.labels })
        }
        None => Ok(Prepared { features: m.data, logits: None, labels: m.labels }),
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    p.as_deref().ok_or_else(|| usage(format!("{flag} is required")))
}

fn load_model(cfg: &RunConfig) -> CliResult<Option<SnMlp>> {
    match (cfg.mode, &cfg.checkpoint) {
        (ModeArg::Feature, Some(path)) => Ok(Some(SnMlp::load(path)?)),
        _ => Ok(None),
    }
}

fn write_scores(path: &Path, psi: &[f64], threshold: f64) -> CliResult<()> {
    let mut text = String::from("index,psi,is_ood\n");
    for (i, p) in psi.iter().enumerate() {
        writeln!(text, "{i},{p:.16e},{}", u8::from(*p < threshold)).unwrap();
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_score(cfg: &RunConfig) -> CliResult<()> {
    let ref_path = required(&cfg.ref_features, "--ref-features")?;
    let id_path = required(&cfg.test_id_features, "--test-id-features")?;
    let ood_path = required(&cfg.test_ood_features, "--test-ood-features")?;
    let model = load_model(cfg)?;

    let reference = prepare(ref_path, model.as_ref())?;
    let id = prepare(id_path, model.as_ref())?;
    let ood = prepare(ood_path, model.as_ref())?;

    let field = IpfField::new(reference.features, cfg.bandwidth)?;
    let threshold = field.calibrate_threshold(cfg.threshold_percentile)?;
    let psi_id = field.evaluate(id.features.view())?;
    let psi_ood = field.evaluate(ood.features.view())?;
    // ln psi ranks like psi but does not tie at zero under underflow
    let auroc = metrics::auroc(&field.evaluate_log(id.features.view())?, &field.evaluate_log(ood.features.view())?)?;

    let (accuracy, ece) = match (&id.logits, &id.labels) {
        (Some(logits), Some(labels)) => {
            let (pred, conf) = metrics::predictions_and_confidences(logits.view())?;
            let truth: Vec<usize> = labels.iter().map(|&l| l.max(0) as usize).collect();
            let correct: Vec<bool> = pred.iter().zip(&truth).map(|(p, t)| p == t).collect();
            (Some(metrics::accuracy(&pred, &truth)?), Some(metrics::ece(&conf, &correct, metrics::DEFAULT_ECE_BINS)?))
        }
        _ => (None, None),
    };
    let entropy_auroc = match (&id.logits, &ood.logits) {
        (Some(a), Some(b)) => Some(entropy_baseline_auroc(a.view(), b.view())?),
        _ => None,
    };

    let report = EvalReport { accuracy, ece, auroc, n_id: psi_id.len(), n_ood: psi_ood.len(), bandwidth_used: cfg.bandwidth };
    let mut manifest = Manifest::new();
    let id_csv = cfg.out.join("scores_id.csv");
    let ood_csv = cfg.out.join("scores_ood.csv");
    write_scores(&id_csv, &psi_id, threshold)?;
    write_scores(&ood_csv, &psi_ood, threshold)?;
    let report_path = cfg.out.join("report.txt");
    std::fs::write(&report_path, report.to_kv())?;
    for p in [&id_csv, &ood_csv, &report_path] {
        manifest.record(p)?;
    }
    let flagged_id = psi_id.iter().filter(|&&p| p < threshold).count();
    let flagged_ood = psi_ood.iter().filter(|&&p| p < threshold).count();
    manifest.write(
        cfg,
        serde_json::json!({
            "threshold": threshold,
            "auroc": auroc,
            "accuracy": accuracy,
            "ece": ece,
            "softmax_entropy_auroc": entropy_auroc,
            "flagged_id": flagged_id,
            "flagged_ood": flagged_ood,
        }),
    )?;
    print!("{}", report.to_kv());
    if let Some(e) = entropy_auroc {
        println!("softmax_entropy_auroc={e}");
    }
    println!("threshold={threshold} flagged_id={flagged_id}/{} flagged_ood={flagged_ood}/{}", psi_id.len(), psi_ood.len());
    Ok(())
}

/// AUROC of the softmax-entropy baseline; entropy is negated so that iD
/// scores high, matching the psi convention.
pub fn entropy_baseline_auroc(id_logits: ArrayView2<f64>, ood_logits: ArrayView2<f64>) -> crate::error::Result<f64> {
    let neg = |v: Vec<f64>| v.into_iter().map(|h| -h).collect::<Vec<_>>();
    metrics::auroc(&neg(metrics::softmax_entropy(id_logits)?), &neg(metrics::softmax_entropy(ood_logits)?))
}

fn cmd_sweep(cfg: &RunConfig) -> CliResult<()> {
    let grid_text = cfg.bandwidth_grid.clone().unwrap_or_else(|| "lin:0.1:1:10".to_string());
    let grid = parse_bandwidth_grid(&grid_text)?;
    let ref_path = required(&cfg.ref_features, "--ref-features")?;
    let id_path = required(&cfg.test_id_features, "--test-id-features")?;
    let ood_path = required(&cfg.test_ood_features, "--test-ood-features")?;
    let model = load_model(cfg)?;
    let reference = prepare(ref_path, model.as_ref())?;
    let id = prepare(id_path, model.as_ref())?;
    let ood = prepare(ood_path, model.as_ref())?;

    let result = ipf::sweep_bandwidth(reference.features.view(), id.features.view(), ood.features.view(), &grid)?;
    let mut manifest = Manifest::new();
    let table = cfg.out.join("sweep.csv");
    std::fs::write(&table, result.to_csv())?;
    manifest.record(&table)?;
    manifest.write(cfg, serde_json::json!({ "best_bandwidth": result.best_bandwidth, "best_auroc": result.best_auroc }))?;
    print!("{}", result.to_csv());
    println!("best_bandwidth={} auroc={}", result.best_bandwidth, result.best_auroc);
    Ok(())
}

fn cmd_heatmap(cfg: &RunConfig) -> CliResult<()> {
    let bandwidths = match &cfg.bandwidth_grid {
        Some(text) => parse_bandwidth_grid(text)?,
        None => vec![cfg.bandwidth],
    };
    let mode = cfg.grid_mode();
    let model = match mode {
        GridMode::FeatureSpace => {
            let path = required(&cfg.checkpoint, "--checkpoint (feature mode)")?;
            Some(SnMlp::load(path)?)
        }
        GridMode::InputSpace => None,
    };
    let train = training_data(cfg)?;
    let reference = match &model {
        Some(m) => m.features(train.points.view())?,
        None => train.points.clone(),
    };

    let mut manifest = Manifest::new();
    let mut panels = Vec::new();
    for &h in &bandwidths {
        let field = IpfField::new(reference.clone(), h)?;
        let g = grid::build_grid(&field, model.as_ref(), mode)?;
        let img = cfg.out.join(format!("heatmap_{}_{}_h{h}.pgm", dataset_name(cfg.dataset), mode));
        let csv = grid::render(&g, &img)?;
        manifest.record(&img)?;
        manifest.record(&csv)?;
        let above = g.count_above(0.05);
        println!("h={h}: {} ({above} cells with psi > 0.05)", img.display());
        panels.push(serde_json::json!({ "bandwidth": h, "cells_above_0.05": above, "max_psi": g.max_psi() }));
    }
    manifest.write(cfg, serde_json::json!({ "panels": panels }))?;
    Ok(())
}
