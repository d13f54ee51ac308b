//! Command line front end: `gen-data`, `flism`, `train`, `eval`, `viz` and
//! `gradcheck`.
//!
//! Every failure ends with one JSON line on stderr,
//! `{"error": kind, "exit_code": n, "message": ...}`. Exit codes: 2 for bad
//! flags or configuration, 3 for data and I/O problems, 4 for numerical
//! failures. Each subcommand also leaves a `run-<subcommand>.json` manifest
//! holding the resolved settings and format versions. Manifests carry no
//! absolute paths or timestamps so that repeated runs are byte-identical.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use goalign::datagen::{generate_dataset, read_manifest, write_manifest, DatasetSpec, MANIFEST_VERSION};
use goalign::encoders::checkpoint::CHECKPOINT_FORMAT;
use goalign::encoders::params::Params;
use goalign::evalkit::{dataset_id, evaluate, export_attention, overlay_path, REPORT_VERSION};
use goalign::flism::{
    read_detections, read_flism_manifest, run_flism, write_flism_manifest, AlignedRecord, AttributeEmbedder,
    FlismConfig, RegionSentenceEmbedder, Strategy, FLISM_VERSION,
};
use goalign::image_ops::load_png;
use goalign::trainer::{
    build_vocab, fit, grad_check, init_model, make_batch, prepare, GradCheckReport, Model, ModelConfig, TrainConfig,
    TrainState,
    CONFIG_VERSION, FINAL_CHECKPOINT,
};

pub const RUN_MANIFEST_VERSION: &str = "goalign-run/1";
pub const DATA_MANIFEST: &str = "manifest.jsonl";
pub const FLISM_MANIFEST: &str = "flism.jsonl";
pub const RESOLVED_CONFIG: &str = "config.toml";
pub const DEFAULT_REPORT: &str = "report.json";
pub const SEED_ENV: &str = "GOALIGN_SEED";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] goalign::Error),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use goalign::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::Config(_)) => 2,
            CliError::Core(E::NonFinite { .. } | E::ZeroNorm { .. }) | CliError::GradCheck(_) => 4,
            CliError::Core(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "usage",
            4 => "numeric",
            _ => "data",
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "goalign", version, about = "Global-local image/long-caption alignment on synthetic scenes")]
struct Cli {
    /// Log filter: off, error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset.
    GenData(GenDataArgs),
    /// Match sentences to regions and store the selected local pairs.
    Flism(FlismArgs),
    /// Train the dual encoder.
    Train(TrainArgs),
    /// Recall@K retrieval in both directions.
    Eval(EvalArgs),
    /// Export the principal-component map of the final patch tokens.
    Viz(VizArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

impl Toggle {
    fn on(self) -> bool {
        self == Toggle::On
    }
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: goalign::Error| e.to_string())
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    n: usize,
    /// Falls back to $GOALIGN_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    /// Fixed object count; shorthand for equal --min-objects and --max-objects.
    #[arg(long, conflicts_with_all = ["min_objects", "max_objects"])]
    objects: Option<usize>,
    #[arg(long, default_value_t = 1)]
    min_objects: usize,
    #[arg(long, default_value_t = 4)]
    max_objects: usize,
    /// Extra descriptive clauses per caption.
    #[arg(long, default_value_t = 0)]
    verbosity: usize,
}

#[derive(Debug, Args)]
struct FlismArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_strategy, default_value = "top1")]
    strategy: Strategy,
    #[arg(long, value_enum, default_value = "on")]
    partitions: Toggle,
    /// Detector boxes, one `{"record_id", "boxes"}` object per line. Records
    /// without an entry use their ground-truth boxes.
    #[arg(long)]
    boxes: Option<PathBuf>,
    /// Score regions with this model instead of the color-attribute embedder.
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Falls back to the config file, then $GOALIGN_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda_global: Option<f64>,
    #[arg(long)]
    lambda_local: Option<f64>,
    #[arg(long)]
    lambda_tsl: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Used only when the data directory has no flism.jsonl.
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    #[arg(long, value_enum)]
    partitions: Option<Toggle>,
    /// Continue from a per-epoch checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,15,25,50")]
    ks: Vec<usize>,
    /// Report path; defaults to report.json beside the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VizArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// PNG path of the map; the overlay goes to `<stem>_overlay.png`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Falls back to $GOALIGN_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Directory for the run manifest; nothing is written without it.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parse `argv` (program name first), run, and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            if code != 0 {
                let msg = e.render().to_string();
                let first = msg.lines().next().unwrap_or("invalid arguments").trim().to_string();
                report_error("usage", code, &first);
            }
            return code;
        }
    };
    init_logging(cli.log_level);
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Flism(a) => flism(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Viz(a) => viz(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            report_error(e.kind(), code, &e.to_string());
            code
        }
    }
}

fn report_error(kind: &str, code: i32, message: &str) {
    let line = json!({"error": kind, "exit_code": code, "message": message});
    eprintln!("{line}");
}

/// One JSON object per log line. Repeated calls (tests run many commands in
/// one process) keep the first logger.
fn init_logging(level: log::LevelFilter) {
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format(|buf, record| {
            let line = json!({
                "level": record.level().as_str(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .try_init();
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(goalign::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn require_dir(path: &Path) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{} is not a directory", path.display())))
    }
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{} does not exist", path.display())))
    }
}

/// Just the final component, so manifests do not depend on where the run
/// happened.
fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn write_run_manifest(dir: &Path, subcommand: &str, settings: Value, results: Value) -> CliResult<()> {
    let manifest = json!({
        "version": RUN_MANIFEST_VERSION,
        "subcommand": subcommand,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "formats": {
            "dataset": MANIFEST_VERSION,
            "flism": FLISM_VERSION,
            "config": CONFIG_VERSION,
            "checkpoint": CHECKPOINT_FORMAT,
            "report": REPORT_VERSION,
        },
        "settings": settings,
        "results": results,
    });
    let path = dir.join(format!("run-{subcommand}.json"));
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
}

fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let seed = a.seed.or(env_seed()?).unwrap_or(0);
    let (min_objects, max_objects) = match a.objects {
        Some(k) => (k, k),
        None => (a.min_objects, a.max_objects),
    };
    if a.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    if min_objects == 0 || min_objects > max_objects {
        return Err(CliError::Usage(format!(
            "need 1 <= --min-objects <= --max-objects, got {min_objects} and {max_objects}"
        )));
    }
    let spec = DatasetSpec {
        n_records: a.n,
        seed,
        min_objects,
        max_objects,
        image_size: a.image_size,
        verbosity: a.verbosity,
    };
    // the largest object count is the one that can fail
    goalign::datagen::SceneSpec {
        n_objects: max_objects,
        ..spec.scene_spec(0)
    }
    .validate()?;
    let records = generate_dataset(&spec)?;
    create_dir(&a.out)?;
    write_manifest(&records, &a.out.join(DATA_MANIFEST))?;
    log::info!("wrote {} records to {}", records.len(), a.out.display());
    write_run_manifest(
        &a.out,
        "gen-data",
        serde_json::to_value(&spec).expect("spec serializes"),
        json!({"n_records": records.len(), "dataset_id": dataset_id(&records)}),
    )
}

fn flism(a: FlismArgs) -> CliResult<()> {
    require_dir(&a.data)?;
    let records = read_manifest(&a.data.join(DATA_MANIFEST))?;
    let detections = match &a.boxes {
        Some(p) => {
            require_file(p)?;
            Some(read_detections(p)?)
        }
        None => None,
    };
    let model = match &a.ckpt {
        Some(p) => {
            require_file(p)?;
            Some(Model::load(p)?)
        }
        None => None,
    };
    let attribute = AttributeEmbedder::default();
    let embedder: &dyn RegionSentenceEmbedder = match &model {
        Some(m) => m,
        None => &attribute,
    };
    let cfg = FlismConfig {
        strategy: a.strategy,
        use_partitions: a.partitions.on(),
    };
    let aligned = run_flism(&records, detections.as_ref(), &cfg, embedder)?;
    write_flism_manifest(&aligned, &a.data.join(FLISM_MANIFEST))?;
    let n_pairs: usize = aligned.iter().map(|r| r.local_pairs.len()).sum();
    log::info!("matched {} records, {} local pairs", aligned.len(), n_pairs);
    write_run_manifest(
        &a.data,
        "flism",
        json!({
            "strategy": cfg.strategy.to_string(),
            "use_partitions": cfg.use_partitions,
            "boxes": a.boxes.as_deref().map(file_name),
            "embedder": match &model {
                Some(m) => format!("model:{:016x}", m.checksum()),
                None => "attribute".to_string(),
            },
        }),
        json!({"n_records": aligned.len(), "n_local_pairs": n_pairs}),
    )
}

/// Defaults, then the config file, then flags. The seed falls back to
/// $GOALIGN_SEED only when neither the file nor a flag sets it.
fn resolve_train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let (mut cfg, file_has_seed) = match &a.config {
        Some(p) => {
            require_file(p)?;
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            let cfg = TrainConfig::from_toml(&text)?;
            let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Usage(e.to_string()))?;
            (cfg, table.contains_key("seed"))
        }
        None => (TrainConfig::default(), false),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    } else if !file_has_seed {
        if let Some(s) = env_seed()? {
            cfg.seed = s;
        }
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.lambda_global {
        cfg.weights.global = v;
    }
    if let Some(v) = a.lambda_local {
        cfg.weights.local = v;
    }
    if let Some(v) = a.lambda_tsl {
        cfg.weights.tsl = v;
    }
    if let Some(v) = a.temperature {
        cfg.weights.temperature = v;
    }
    if let Some(v) = a.strategy {
        cfg.strategy = v;
    }
    if let Some(v) = a.partitions {
        cfg.use_partitions = v.on();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `flism.jsonl` when present, otherwise match on the fly with the
/// attribute embedder and ground-truth boxes.
fn load_aligned(data: &Path, cfg: &TrainConfig) -> CliResult<Vec<AlignedRecord>> {
    let flism_path = data.join(FLISM_MANIFEST);
    if flism_path.is_file() {
        log::info!("using existing {FLISM_MANIFEST}");
        return Ok(read_flism_manifest(&flism_path)?);
    }
    let records = read_manifest(&data.join(DATA_MANIFEST))?;
    let fcfg = FlismConfig {
        strategy: cfg.strategy,
        use_partitions: cfg.use_partitions,
    };
    Ok(run_flism(&records, None, &fcfg, &AttributeEmbedder::default())?)
}

fn train(a: TrainArgs) -> CliResult<()> {
    require_dir(&a.data)?;
    let cfg = resolve_train_config(&a)?;
    let aligned = load_aligned(&a.data, &cfg)?;
    let state = match &a.resume {
        Some(p) => {
            require_file(p)?;
            let mut state = TrainState::load(p)?;
            // the vocabulary size always comes from the checkpoint
            let mut expected = cfg.model.clone();
            expected.text.vocab_size = state.model.config.text.vocab_size;
            if state.model.config != expected {
                return Err(CliError::Usage(format!(
                    "model settings of {} differ from the resolved configuration",
                    p.display()
                )));
            }
            state.optimizer.lr = cfg.learning_rate;
            state.optimizer.weight_decay = cfg.weight_decay;
            log::info!("resuming after epoch {} (step {})", state.epoch, state.step);
            state
        }
        None => TrainState::new(init_model(build_vocab(&aligned), &cfg)?, &cfg),
    };
    let prepared = prepare(&aligned, &state.model)?;
    create_dir(&a.out)?;
    let cfg_path = a.out.join(RESOLVED_CONFIG);
    fs::write(&cfg_path, cfg.to_toml()?).map_err(|e| io_err(&cfg_path, e))?;
    let state = fit(&prepared, state, &cfg, Some(&a.out))?;
    let last = state.history.last();
    write_run_manifest(
        &a.out,
        "train",
        json!({
            "config": cfg,
            "resume": a.resume.as_deref().map(file_name),
            "n_records": prepared.len(),
        }),
        json!({
            "epochs": state.epoch,
            "steps": state.step,
            "final_total": last.map(|s| s.total),
            "final_global": last.map(|s| s.global),
            "model_checksum": format!("{:016x}", state.model.checksum()),
            "checkpoint": FINAL_CHECKPOINT,
        }),
    )
}

fn check_ks(ks: &[usize]) -> CliResult<()> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(CliError::Usage("--ks needs one or more values, each at least 1".into()));
    }
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    require_file(&a.ckpt)?;
    require_dir(&a.data)?;
    check_ks(&a.ks)?;
    let model = Model::load(&a.ckpt)?;
    let records = read_manifest(&a.data.join(DATA_MANIFEST))?;
    let report = evaluate(&model, &records, &a.ks)?;
    let out = a.out.clone().unwrap_or_else(|| parent_dir(&a.ckpt).join(DEFAULT_REPORT));
    let dir = parent_dir(&out);
    create_dir(&dir)?;
    report.save(&out)?;
    let summary = json!({"t2i": report.t2i, "i2t": report.i2t, "n_queries": report.n_queries});
    println!("{summary}");
    write_run_manifest(
        &dir,
        "eval",
        json!({"ks": a.ks, "checkpoint": file_name(&a.ckpt), "report": file_name(&out)}),
        json!({"model_id": report.model_id, "dataset_id": report.dataset_id, "n_queries": report.n_queries}),
    )
}

fn viz(a: VizArgs) -> CliResult<()> {
    require_file(&a.ckpt)?;
    require_file(&a.image)?;
    let model = Model::load(&a.ckpt)?;
    let image = load_png(&a.image)?;
    let dir = parent_dir(&a.out);
    create_dir(&dir)?;
    let art = export_attention(&image, &model, &a.out)?;
    let (rows, cols, _) = art.grid.dim();
    if art.degenerate {
        log::warn!("degenerate input; the map is all zeros");
    }
    let summary = json!({"grid": [rows, cols], "energies": art.energies, "degenerate": art.degenerate});
    println!("{summary}");
    write_run_manifest(
        &dir,
        "viz",
        json!({
            "checkpoint": file_name(&a.ckpt),
            "image": file_name(&a.image),
            "out": file_name(&a.out),
            "overlay": file_name(&overlay_path(&a.out)),
        }),
        summary,
    )
}

/// Gradient check on the default tiny model: three scenes at 32 px matched
/// with weighted top-3 so that every loss term and both branches are
/// exercised. Returns the report and the parameter count.
pub fn default_gradcheck(seed: u64, tolerance: f64) -> goalign::Result<(GradCheckReport, usize)> {
    let records = generate_dataset(&DatasetSpec {
        n_records: 3,
        seed,
        min_objects: 1,
        max_objects: 3,
        image_size: 32,
        verbosity: 0,
    })?;
    let fcfg = FlismConfig {
        strategy: Strategy::Top3Weighted,
        use_partitions: true,
    };
    let aligned = run_flism(&records, None, &fcfg, &AttributeEmbedder::default())?;
    let cfg = TrainConfig {
        seed,
        model: ModelConfig::tiny(),
        ..TrainConfig::default()
    };
    let model = init_model(build_vocab(&aligned), &cfg)?;
    let prepared = prepare(&aligned, &model)?;
    let batch = make_batch(&prepared, &(0..prepared.len()).collect::<Vec<_>>())?;
    let report = grad_check(&model, &batch, &cfg.objective_options(), tolerance)?;
    Ok((report, model.num_params()))
}

fn gradcheck(a: GradcheckArgs) -> CliResult<()> {
    let seed = a.seed.or(env_seed()?).unwrap_or(0);
    if !(a.tolerance > 0.0) {
        return Err(CliError::Usage("--tolerance must be positive".into()));
    }
    let started = std::time::Instant::now();
    let (report, n_params) = default_gradcheck(seed, a.tolerance)?;
    log::info!("checked {} tensors in {:.1}s", report.tensors.len(), started.elapsed().as_secs_f64());
    let summary = json!({
        "max_rel_err": report.max_rel_err,
        "tolerance": report.tolerance,
        "passed": report.passed,
        "n_tensors": report.tensors.len(),
        "n_params": n_params,
        "failing": report.failing,
    });
    println!("{summary}");
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_run_manifest(dir, "gradcheck", json!({"seed": seed, "tolerance": a.tolerance, "batch": 3}), summary)?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(CliError::GradCheck(format!(
            "max relative error {:.3e} over {:?}",
            report.max_rel_err, report.failing
        )))
    }
}
