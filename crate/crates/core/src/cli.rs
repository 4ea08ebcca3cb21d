//! Command-line entry point and the run-config file.
//!
//! Config files are TOML with dotted keys (`loss.m = 0.5`); unknown keys are
//! rejected. Every subcommand that writes files also writes the fully
//! resolved config next to them as `config.toml`.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{self, generate, generate_split, make_pairs, SphereMixtureSpec};
use crate::error::{Error, Result};
use crate::eval::{self, board_count, kfold_accuracy, pair_accuracy, rank1, AccuracyTable};
use crate::format::{flat_toml, fmt9, to_json_line, to_json_pretty};
use crate::geometry::{EmbeddingBatch, Matrix};
use crate::gradcheck::{run_suite, suite_configs, DEFAULT_REL_TOL, DEFAULT_STEP, SUITE_SCALE};
use crate::losses::{decision_point, GradientMode, MarginConfig, Variant};
use crate::trainer::{toy_summary, train, ModelKind, ToyModel, ToySummary, TrainConfig};

/// Margin-config overrides on top of a named preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub name: Option<String>,
    pub s: Option<f64>,
    pub m1_mult: Option<f64>,
    pub m2_add: Option<f64>,
    pub m3_sub: Option<f64>,
    pub m_split_1: Option<f64>,
    pub m_split_2: Option<f64>,
    pub m: Option<f64>,
    pub alpha: Option<f64>,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub fixed_d_inter: Option<f64>,
    pub gradient_mode: Option<GradientMode>,
}

impl LossSection {
    pub fn named(name: &str) -> Self {
        Self { name: Some(name.to_string()), ..Self::default() }
    }

    pub fn name(&self) -> &str {
        self.name.as_deref().unwrap_or("arcface")
    }

    /// Preset plus overrides, validated.
    pub fn resolve(&self) -> Result<MarginConfig> {
        let mut cfg = MarginConfig::preset(self.name())?;
        let scalars = [
            ("s", self.s),
            ("m1_mult", self.m1_mult),
            // Before m2_add so an explicit m2_add wins over the AML coupling.
            ("m", self.m),
            ("m2_add", self.m2_add),
            ("m3_sub", self.m3_sub),
            ("m_split_1", self.m_split_1),
            ("m_split_2", self.m_split_2),
            ("alpha", self.alpha),
            ("a", self.a),
            ("b", self.b),
            ("fixed_d_inter", self.fixed_d_inter),
        ];
        for (name, value) in scalars {
            if let Some(v) = value {
                cfg = cfg.with_param(name, v)?;
            }
        }
        if let Some(mode) = self.gradient_mode {
            cfg = cfg.with_mode(mode);
        }
        if let Some(m) = self.m {
            cfg.m = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every field spelled out, for the resolved config file.
    fn spelled_out(name: &str, c: &MarginConfig) -> Self {
        Self {
            name: Some(name.to_string()),
            s: Some(c.s),
            m1_mult: Some(c.m1_mult),
            m2_add: Some(c.m2_add),
            m3_sub: Some(c.m3_sub),
            m_split_1: Some(c.m_split_1),
            m_split_2: Some(c.m_split_2),
            m: Some(c.m),
            alpha: Some(c.alpha),
            a: Some(c.a),
            b: Some(c.b),
            fixed_d_inter: Some(c.fixed_d_inter),
            gradient_mode: Some(c.gradient_mode),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub far: Vec<f64>,
    pub folds: usize,
    pub pairs_per_kind: usize,
    /// Noise levels of the held-out sets that form the sweep's benchmark
    /// columns.
    pub sigma_levels: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { far: vec![1e-3, 1e-2, 1e-1], folds: 10, pairs_per_kind: 300, sigma_levels: vec![0.2, 0.3, 0.4, 0.5, 0.6] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub loss: LossSection,
    pub data: SphereMixtureSpec,
    pub trainer: TrainConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            loss: LossSection::default(),
            data: SphereMixtureSpec::default(),
            trainer: TrainConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| Error::Io { path: path.display().to_string(), source })?;
        let cfg: Self = toml::from_str(&text)
            .map_err(|e| Error::ConfigInvalid(format!("{}: {}", path.display(), e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.resolve()?;
        self.data.validate()?;
        let samples = self.data.num_classes * self.data.samples_per_class;
        self.trainer.schedule(samples)?;
        if self.trainer.embed_dim < 2 {
            return Err(Error::ConfigInvalid("trainer.embed_dim must be at least 2".into()));
        }
        let e = &self.eval;
        if let Some(f) = e.far.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::FarOutOfRange(*f));
        }
        if e.folds < 2 {
            return Err(Error::ConfigInvalid(format!("eval.folds must be at least 2, got {}", e.folds)));
        }
        if e.pairs_per_kind == 0 {
            return Err(Error::ConfigInvalid("eval.pairs_per_kind must be positive".into()));
        }
        if e.sigma_levels.is_empty() || e.sigma_levels.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::ConfigInvalid("eval.sigma_levels must be non-empty, finite and >= 0".into()));
        }
        Ok(())
    }

    fn set_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.data.seed = s;
            self.trainer.seed = s;
        }
    }

    /// Flat dotted-key text of this config with the loss fully resolved.
    pub fn resolved_text(&self) -> Result<String> {
        let cfg = self.loss.resolve()?;
        let resolved = Self { loss: LossSection::spelled_out(self.loss.name(), &cfg), ..self.clone() };
        let table = toml::Table::try_from(&resolved).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        Ok(flat_toml(&table))
    }
}

#[derive(Debug, Parser)]
#[command(name = "interface", version, about = "Angular-margin losses: verification, toy training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run config (TOML with dotted keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides both data.seed and trainer.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: <output_dir>/<subcommand>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset, its centers and a pair list.
    Generate(Common),
    /// Train a model on the configured dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Loss preset, overriding loss.name.
        #[arg(long)]
        loss: Option<String>,
    },
    /// Certify analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Suite entry or variant name; repeatable. Default: all.
        #[arg(long)]
        variant: Vec<String>,
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = SUITE_SCALE)]
        scale: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verification metrics for scored pairs, or Board Count for a table.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        gallery: Option<PathBuf>,
        /// Accuracy table CSV; switches to Board-Count mode.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Train one model per parameter value and rank them by Board Count.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        loss: Option<String>,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        values: Vec<f64>,
    },
    /// Sample the two-class decision function over an angle grid.
    Boundary {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        loss: Option<String>,
        #[arg(long, default_value_t = 0.0)]
        theta_min: f64,
        #[arg(long, default_value_t = std::f64::consts::PI)]
        theta_max: f64,
        #[arg(long, default_value_t = 0.05)]
        step: f64,
        /// Inter-class angle for the measured-distance variants (default:
        /// loss.fixed_d_inter).
        #[arg(long)]
        d_inter: Option<f64>,
    },
    /// The 8-class 2-D toy protocol.
    Toy {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "arcface")]
        loss: String,
    },
}

/// What a subcommand concluded.
enum Outcome {
    Ok,
    VerificationFailed,
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code: 0 success, 1 invalid input, 2 verification failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            let kind = match e.kind() {
                ErrorKind::InvalidSubcommand => "UnknownSubcommand",
                _ => "UsageError",
            };
            error_line(err, kind, &first);
            return 1;
        }
    };
    match dispatch(cli.command, out) {
        Ok(Outcome::Ok) => 0,
        Ok(Outcome::VerificationFailed) => {
            error_line(err, "VerificationFailed", "analytic gradients disagree with finite differences");
            2
        }
        Err(e) => {
            error_line(err, e.kind(), &e.to_string());
            1
        }
    }
}

fn error_line(err: &mut dyn Write, kind: &str, message: &str) {
    let line = serde_json::json!({ "error": kind, "message": message });
    let _ = writeln!(err, "{line}");
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.set_seed(common.seed);
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(common: &Common, cfg: &RunConfig, default_leaf: &str) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| cfg.output_dir.join(default_leaf));
    std::fs::create_dir_all(&dir).map_err(|source| Error::Io { path: dir.display().to_string(), source })?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.display().to_string(), source })
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_text(&dir.join("config.toml"), &cfg.resolved_text()?)
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<Outcome> {
    match command {
        Command::Generate(common) => cmd_generate(&common, out),
        Command::Train { common, loss } => {
            let mut cfg = load_config(&common)?;
            if let Some(name) = loss {
                cfg.loss.name = Some(name);
                cfg.validate()?;
            }
            let dir = output_dir(&common, &cfg, "train")?;
            train_run(&cfg, &dir, out)
        }
        Command::Gradcheck { seed, variant, instances, scale, out: dir } => {
            cmd_gradcheck(seed, &variant, instances, scale, dir.as_deref(), out)
        }
        Command::Eval { common, dataset, pairs, gallery, table } => {
            cmd_eval(&common, dataset, pairs, gallery, table, out)
        }
        Command::Sweep { common, loss, param, values } => cmd_sweep(&common, loss, &param, &values, out),
        Command::Boundary { common, loss, theta_min, theta_max, step, d_inter } => {
            cmd_boundary(&common, loss, (theta_min, theta_max, step), d_inter, out)
        }
        Command::Toy { common, loss } => {
            let mut cfg = load_config(&common)?;
            cfg.loss.name = Some(loss.clone());
            // The toy protocol fixes the constant inter-class angle at pi/4
            // (8 evenly spaced classes).
            if cfg.loss.resolve()?.variant == Variant::InterfaceCidCt && cfg.loss.fixed_d_inter.is_none() {
                cfg.loss.fixed_d_inter = Some(std::f64::consts::FRAC_PI_4);
            }
            cfg.validate()?;
            let leaf = format!("toy-{loss}-seed{}", cfg.trainer.seed);
            let dir = output_dir(&common, &cfg, &leaf)?;
            train_run(&cfg, &dir, out)
        }
    }
}

fn cmd_generate(common: &Common, out: &mut dyn Write) -> Result<Outcome> {
    let cfg = load_config(common)?;
    let dir = output_dir(common, &cfg, "generate")?;
    let batch = generate(&cfg.data)?;
    let pairs = make_pairs(&batch, cfg.eval.pairs_per_kind, cfg.data.seed)?;
    let centers = data::centers(&cfg.data)?;
    data::write_dataset(&dir.join("dataset.csv"), &batch)?;
    data::write_pairs(&dir.join("pairs.csv"), &pairs)?;
    write_centers(&dir.join("centers.csv"), &centers)?;
    write_config(&dir, &cfg)?;
    let _ = writeln!(out, "wrote {} samples and {} pairs to {}", batch.len(), pairs.pairs.len(), dir.display());
    Ok(Outcome::Ok)
}

fn coord_header(dim: usize) -> Vec<String> {
    if dim == 2 {
        vec!["x".into(), "y".into()]
    } else {
        (0..dim).map(|k| format!("v{k}")).collect()
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| data::csv_err(path, e))
}

fn write_centers(path: &Path, centers: &Matrix) -> Result<()> {
    let mut w = csv_writer(path)?;
    // Same layout as a dataset file, so centers can serve as a gallery.
    let header: Vec<String> = std::iter::once("label".to_string()).chain((0..centers.cols()).map(|k| format!("v{k}"))).collect();
    w.write_record(&header).map_err(|e| data::csv_err(path, e))?;
    for (c, row) in centers.iter_rows().enumerate() {
        let rec = std::iter::once(c.to_string()).chain(row.iter().map(|&v| fmt9(v)));
        w.write_record(rec).map_err(|e| data::csv_err(path, e))?;
    }
    w.flush().map_err(|source| Error::Io { path: path.display().to_string(), source })
}

fn write_embeddings(path: &Path, emb: &EmbeddingBatch) -> Result<()> {
    let mut w = csv_writer(path)?;
    let header: Vec<String> = ["id".to_string(), "label".to_string()].into_iter().chain(coord_header(emb.dim())).collect();
    w.write_record(&header).map_err(|e| data::csv_err(path, e))?;
    for (i, (row, l)) in emb.embeddings().iter_rows().zip(emb.labels()).enumerate() {
        let rec = [i.to_string(), l.to_string()].into_iter().chain(row.iter().map(|&v| fmt9(v)));
        w.write_record(rec).map_err(|e| data::csv_err(path, e))?;
    }
    w.flush().map_err(|source| Error::Io { path: path.display().to_string(), source })
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    loss: &'a str,
    variant: Variant,
    epochs: usize,
    first_epoch_loss: f64,
    final_epoch_loss: f64,
    final_mean_target_angle: f64,
    toy: Option<ToySummary>,
}

fn train_run(cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> Result<Outcome> {
    let margin = cfg.loss.resolve()?;
    let tc = &cfg.trainer;
    let data = generate(&cfg.data)?;
    let model = ToyModel::init(tc.model, &data, cfg.data.num_classes, tc.embed_dim, tc.hidden, tc.seed)?;
    let (model, log) = train(&data, model, &margin, tc)?;
    let emb = model.embed(&data)?;

    let metrics: String = log.iter().map(|r| to_json_line(r) + "\n").collect();
    write_text(&dir.join("metrics.jsonl"), &metrics)?;
    write_embeddings(&dir.join("embeddings.csv"), &emb)?;
    write_centers(&dir.join("centers.csv"), &model.weights)?;
    let toy = if model.embed_dim() == 2 { Some(toy_summary(&model.weights, &emb)?) } else { None };
    let last = log.last().expect("at least one epoch");
    let summary = TrainSummary {
        loss: cfg.loss.name(),
        variant: margin.variant,
        epochs: log.len(),
        first_epoch_loss: log[0].loss,
        final_epoch_loss: last.loss,
        final_mean_target_angle: last.mean_target_angle,
        toy,
    };
    write_text(&dir.join("summary.json"), &(to_json_pretty(&summary) + "\n"))?;
    write_config(dir, cfg)?;
    let gap = summary.toy.as_ref().map_or(String::new(), |t| format!(", gap std {}", fmt9(t.gap_std)));
    let _ = writeln!(
        out,
        "{}: loss {} -> {}{gap}; outputs in {}",
        cfg.loss.name(),
        fmt9(summary.first_epoch_loss),
        fmt9(summary.final_epoch_loss),
        dir.display()
    );
    Ok(Outcome::Ok)
}

fn cmd_gradcheck(
    seed: u64,
    filter: &[String],
    instances: usize,
    scale: f64,
    dir: Option<&Path>,
    out: &mut dyn Write,
) -> Result<Outcome> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidMarginConfig(format!("scale must be positive, got {scale}")));
    }
    let all = suite_configs();
    let mut chosen: Vec<(&str, MarginConfig)> = Vec::new();
    for (name, cfg) in &all {
        if filter.is_empty() || filter.iter().any(|f| f.as_str() == *name || f.as_str() == cfg.variant.name()) {
            chosen.push((name, cfg.with_scale(scale)));
        }
    }
    if let Some(f) = filter.iter().find(|f| !all.iter().any(|(n, c)| f.as_str() == *n || f.as_str() == c.variant.name())) {
        return Err(Error::InvalidMarginConfig(format!("unknown gradcheck entry {f:?}")));
    }
    let rows = run_suite(&chosen, seed, instances, DEFAULT_STEP, DEFAULT_REL_TOL)?;
    let _ = writeln!(out, "{:<18} {:<7} {:>9} {:>15} {:>15}  pass", "config", "mode", "instances", "max_rel_error", "max_abs_error");
    for r in &rows {
        let _ = writeln!(
            out,
            "{:<18} {:<7} {:>9} {:>15} {:>15}  {}",
            r.name,
            r.mode,
            r.instances,
            fmt9(r.report.max_rel_error),
            fmt9(r.report.max_abs_error),
            r.report.pass
        );
    }
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.display().to_string(), source })?;
        write_text(&dir.join("gradcheck.json"), &(to_json_pretty(&rows) + "\n"))?;
    }
    Ok(if rows.iter().all(|r| r.report.pass) { Outcome::Ok } else { Outcome::VerificationFailed })
}

#[derive(Serialize)]
struct TarRow {
    far: f64,
    tar: f64,
    threshold: f64,
}

#[derive(Serialize)]
struct EvalReport {
    pairs: usize,
    accuracy: f64,
    threshold: f64,
    tar_at_far: Vec<TarRow>,
    kfold: eval::KFoldReport,
    rank1: Option<f64>,
}

fn cmd_eval(
    common: &Common,
    dataset: Option<PathBuf>,
    pairs: Option<PathBuf>,
    gallery: Option<PathBuf>,
    table: Option<PathBuf>,
    out: &mut dyn Write,
) -> Result<Outcome> {
    let cfg = load_config(common)?;
    let dir = output_dir(common, &cfg, "eval")?;
    if let Some(path) = table {
        let t = AccuracyTable::read_csv(&path)?;
        let bc = board_count(&t)?;
        bc.write_csv(&t, &dir.join("board_count.csv"))?;
        write_text(&dir.join("board_count.json"), &(to_json_pretty(&bc.summary(&t)) + "\n"))?;
        let _ = writeln!(out, "best row {} ({}), BC sum {}", bc.best_row, t.row_labels[bc.best_row], bc.row_sums[bc.best_row]);
        return Ok(Outcome::Ok);
    }
    let (Some(dataset), Some(pairs)) = (dataset, pairs) else {
        return Err(Error::ConfigInvalid("eval needs --table, or both --dataset and --pairs".into()));
    };
    let batch = data::read_dataset(&dataset)?;
    let pair_set = data::read_pairs(&pairs)?;
    let scored = pair_set.scores(&batch)?;
    let (accuracy, threshold) = pair_accuracy(&scored)?;
    let mut tar_at_far = Vec::new();
    for &far in &cfg.eval.far {
        let (tar, threshold) = eval::tar_at_far_with_threshold(&scored, far)?;
        tar_at_far.push(TarRow { far, tar, threshold });
    }
    let kfold = kfold_accuracy(&pair_set.labeled_scores(&batch), cfg.eval.folds)?;
    let rank1 = match gallery {
        Some(g) => Some(rank1(&batch, &data::read_dataset(&g)?)?),
        None => None,
    };
    let report = EvalReport { pairs: pair_set.pairs.len(), accuracy, threshold, tar_at_far, kfold, rank1 };
    write_text(&dir.join("metrics.json"), &(to_json_pretty(&report) + "\n"))?;
    write_config(&dir, &cfg)?;
    let _ = writeln!(out, "accuracy {} at threshold {}, {}-fold {}", fmt9(accuracy), fmt9(threshold), cfg.eval.folds, fmt9(report.kfold.mean_accuracy));
    Ok(Outcome::Ok)
}

/// Runs the sweep and returns its accuracy table. Each value trains the
/// perceptron encoder (held-out sets need embeddings of unseen samples) on
/// the configured data; column `k` scores pairs from a fresh draw at
/// `sigma_levels[k]` around the same centers.
pub fn sweep_table(cfg: &RunConfig, param: &str, values: &[f64]) -> Result<AccuracyTable> {
    if values.len() < 2 {
        return Err(Error::ConfigInvalid(format!("sweep needs at least 2 values, got {}", values.len())));
    }
    let base = cfg.loss.resolve()?;
    let data = generate(&cfg.data)?;
    let tc = TrainConfig { model: ModelKind::Mlp, ..cfg.trainer.clone() };
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let margin = base.with_param(param, v)?;
        margin.validate()?;
        let model = ToyModel::init(ModelKind::Mlp, &data, cfg.data.num_classes, tc.embed_dim, tc.hidden, tc.seed)?;
        let (model, _) = train(&data, model, &margin, &tc)?;
        let mut row = Vec::with_capacity(cfg.eval.sigma_levels.len());
        for (k, &sigma) in cfg.eval.sigma_levels.iter().enumerate() {
            let spec = SphereMixtureSpec { noise_sigma: sigma, ..cfg.data };
            let held_out = generate_split(&spec, k as u64 + 1)?;
            let emb = model.embed(&held_out)?;
            let pairs = make_pairs(&emb, cfg.eval.pairs_per_kind, cfg.data.seed.wrapping_add(k as u64))?;
            row.push(100.0 * pair_accuracy(&pairs.scores(&emb)?)?.0);
        }
        rows.push(row);
    }
    AccuracyTable::new(
        values.iter().map(|v| format!("{param}={}", fmt9(*v))).collect(),
        cfg.eval.sigma_levels.iter().map(|s| format!("sigma={}", fmt9(*s))).collect(),
        rows,
    )
}

fn cmd_sweep(common: &Common, loss: Option<String>, param: &str, values: &[f64], out: &mut dyn Write) -> Result<Outcome> {
    let mut cfg = load_config(common)?;
    if let Some(name) = loss {
        cfg.loss.name = Some(name);
        cfg.validate()?;
    }
    let table = sweep_table(&cfg, param, values)?;
    let bc = board_count(&table)?;
    let dir = output_dir(common, &cfg, &format!("sweep-{param}"))?;
    table.write_csv(&dir.join("accuracy_table.csv"))?;
    bc.write_csv(&table, &dir.join("board_count.csv"))?;
    write_text(&dir.join("board_count.json"), &(to_json_pretty(&bc.summary(&table)) + "\n"))?;
    write_config(&dir, &cfg)?;
    let _ = writeln!(out, "best {} (BC sum {}); outputs in {}", table.row_labels[bc.best_row], bc.row_sums[bc.best_row], dir.display());
    Ok(Outcome::Ok)
}

const MAX_GRID_POINTS: usize = 10_001;

/// Grid `min, min + step, ..` up to `max` (inclusive within rounding).
pub fn angle_grid(min: f64, max: f64, step: f64) -> Result<Vec<f64>> {
    if !(min.is_finite() && max.is_finite() && step.is_finite()) || min >= max || step <= 0.0 {
        return Err(Error::BadGrid(format!("need finite min < max and step > 0, got ({min}, {max}, {step})")));
    }
    let count = ((max - min) / step * (1.0 + 1e-12)).floor() as usize + 1;
    if count > MAX_GRID_POINTS {
        return Err(Error::BadGrid(format!("{count} points per axis exceeds {MAX_GRID_POINTS}")));
    }
    Ok((0..count).map(|k| min + k as f64 * step).collect())
}

fn cmd_boundary(
    common: &Common,
    loss: Option<String>,
    grid: (f64, f64, f64),
    d_inter: Option<f64>,
    out: &mut dyn Write,
) -> Result<Outcome> {
    let mut cfg = load_config(common)?;
    if let Some(name) = loss {
        cfg.loss.name = Some(name);
        cfg.validate()?;
    }
    let margin = cfg.loss.resolve()?;
    let thetas = angle_grid(grid.0, grid.1, grid.2)?;
    let d = d_inter.unwrap_or(margin.fixed_d_inter);
    let dir = output_dir(common, &cfg, "boundary")?;
    let path = dir.join("boundary.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["theta_y", "theta_j", "margin_f", "target_logit", "nontarget_logit", "sign"])
        .map_err(|e| data::csv_err(&path, e))?;
    for &ty in &thetas {
        for &tj in &thetas {
            let p = decision_point(&margin, ty, tj, d)?;
            let rec = [
                fmt9(p.theta_y),
                fmt9(p.theta_j),
                fmt9(p.margin_f),
                fmt9(p.target_logit),
                fmt9(p.nontarget_logit),
                p.sign.to_string(),
            ];
            w.write_record(&rec).map_err(|e| data::csv_err(&path, e))?;
        }
    }
    w.flush().map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    write_config(&dir, &cfg)?;
    let _ = writeln!(out, "wrote {} grid points to {}", thetas.len() * thetas.len(), path.display());
    Ok(Outcome::Ok)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_keys_parse_and_unknown_keys_fail() {
        let cfg = RunConfig::from_toml_str("loss.name = \"interface-did-ct\"\nloss.a = 0.4\ndata.seed = 9\n").unwrap();
        let m = cfg.loss.resolve().unwrap();
        assert_eq!((m.variant, m.a), (Variant::InterfaceDidCt, 0.4));
        assert_eq!(cfg.data.seed, 9);
        assert!(matches!(RunConfig::from_toml_str("loss.mm = 1.0\n"), Err(Error::ConfigInvalid(_))));
        assert!(matches!(RunConfig::from_toml_str("colour = 1\n"), Err(Error::ConfigInvalid(_))));
    }

    #[test]
    fn invalid_sections_are_rejected_on_load() {
        assert!(matches!(RunConfig::from_toml_str("data.num_classes = 1\n"), Err(Error::InvalidDataSpec(_))));
        assert!(matches!(RunConfig::from_toml_str("eval.far = [0.0]\n"), Err(Error::FarOutOfRange(_))));
        assert!(RunConfig::from_toml_str("loss.name = \"rarc\"\nloss.m_split_1 = 0.4\nloss.m = 0.3\n").is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::from_toml_str("loss.name = \"cosface\"\ntrainer.epochs = 3\n").unwrap();
        let text = cfg.resolved_text().unwrap();
        assert!(text.contains("loss.m3_sub = 0.35\n"));
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back.loss.resolve().unwrap(), cfg.loss.resolve().unwrap());
        assert_eq!(back.trainer, cfg.trainer);
    }

    #[test]
    fn grids() {
        assert_eq!(angle_grid(0.0, 1.0, 0.25).unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(angle_grid(0.0, 0.3, 0.1).unwrap().len(), 4);
        for bad in [(1.0, 0.0, 0.1), (0.0, 1.0, 0.0), (0.0, f64::NAN, 0.1), (0.0, 1.0, 1e-9)] {
            assert!(matches!(angle_grid(bad.0, bad.1, bad.2), Err(Error::BadGrid(_))));
        }
    }

    #[test]
    fn single_value_sweep_is_rejected() {
        let cfg = RunConfig::default();
        assert!(matches!(sweep_table(&cfg, "a", &[0.2]), Err(Error::ConfigInvalid(_))));
    }
}
