//! Command-line front end: `prepare`, `train`, `evaluate`, `navigate` and `report`.
//!
//! Exit codes: 0 on success, 1 for usage and configuration errors, 2 for
//! runtime failures including training divergence. Artifacts land under
//! `<output root>/<run name>/` and each embeds the run configuration and
//! [`FORMAT_VERSION`].

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::datakit::{
    make_splits, read_manifest, read_split, sample_name, synth_generate, write_corpus, Sample,
};
use crate::error::{io_err, Error, Result};
use crate::metrics::SampleMetrics;
use crate::navsim::{
    bundled_worlds, run_protocol, ConstantPerception, Grid, ModelPerception, NoisyPerception,
    OraclePerception, Perception, SuccessTable,
};
use crate::segnet::predict_labels;
use crate::trainer::{
    pretrain_stage1, train_stage2_joint, JointModel, ModelConfig, Schedule, SegPipeline, TrainLog,
};
use crate::FORMAT_VERSION;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const STAGE1_CHECKPOINT: &str = "ckpt_stage1.ulrck";
pub const BEST_CHECKPOINT: &str = "ckpt_best.ulrck";
pub const LAST_CHECKPOINT: &str = "ckpt_last.ulrck";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const REPORT: &str = "report.md";

#[derive(Debug, Parser)]
#[command(
    name = "ulrseg",
    version,
    about = "Segmentation from ultra-low-resolution RGB"
)]
pub struct Cli {
    /// TOML run configuration; defaults to the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in configuration used when no file is given.
    #[arg(long, global = true, default_value = "desk")]
    pub preset: String,
    /// Run name; overrides the configuration.
    #[arg(long, global = true)]
    pub name: Option<String>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    Sad,
    Afe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus, splits and manifest.
    Prepare {
        /// Dataset directory; overrides the configuration.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one training stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Stage-1 checkpoint to start joint training from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Start joint training from freshly initialized networks.
        #[arg(long)]
        cold_start: bool,
        /// Modules to disable in joint training.
        #[arg(long, value_enum, value_delimiter = ',')]
        ablate: Vec<Ablation>,
        /// Stage length in optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on a dataset split.
    Evaluate {
        /// Defaults to the run's best joint checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
    },
    /// Run the navigation trial protocol.
    Navigate {
        /// oracle, noisy:<p>, constant:<class> or checkpoint:<path>.
        #[arg(long, default_value = "oracle")]
        perception: String,
        /// Trials per world, taken from the front of the protocol.
        #[arg(long)]
        trials: Option<usize>,
        /// Repeats per target/start pair.
        #[arg(long)]
        repeats: Option<usize>,
        /// World files; defaults to the configured or bundled worlds.
        worlds: Vec<PathBuf>,
    },
    /// Render the run's logs and reports as Markdown.
    Report,
}

/// Either a usage problem or a failure while doing the work.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::OutputExists(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

/// Resolves the run configuration from file or preset plus flag overrides.
pub fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::preset(&cli.preset)?,
    };
    if let Some(name) = &cli.name {
        cfg.name = name.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    let mut cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Prepare { out } => {
            if let Some(out) = out {
                let cwd = std::env::current_dir().map_err(|e| CliError::Runtime(io_err(".")(e)))?;
                cfg.dataset.root_path = cwd.join(out);
            }
            cmd_prepare(&cfg, cli.force)
        }
        Command::Train {
            stage,
            init,
            cold_start,
            ablate,
            steps,
            seed,
        } => {
            if let Some(seed) = seed {
                cfg.train.seed = *seed;
            }
            if let Some(n) = steps {
                match stage {
                    1 => cfg.train.stage1 = Schedule::Steps(*n),
                    _ => cfg.train.stage2 = Schedule::Steps(*n),
                }
            }
            if *stage == 1 {
                if init.is_some() || *cold_start || !ablate.is_empty() {
                    return usage("--init, --cold-start and --ablate apply to stage 2 only");
                }
                return cmd_train_stage1(&cfg, cli.force);
            }
            cfg.train.cold_start = *cold_start;
            cfg.train.sad = !ablate.contains(&Ablation::Sad);
            cfg.train.afe = !ablate.contains(&Ablation::Afe);
            match (init, cold_start) {
                (Some(_), true) => usage("--init and --cold-start are mutually exclusive"),
                (None, false) => usage("stage 2 needs --init <stage-1 checkpoint> or --cold-start"),
                _ => cmd_train_stage2(&cfg, init.as_deref(), cli.force),
            }
        }
        Command::Evaluate { checkpoint, split } => {
            let path = checkpoint
                .clone()
                .unwrap_or_else(|| cfg.run_dir().join(BEST_CHECKPOINT));
            cmd_evaluate(&cfg, &path, split.as_str(), cli.force).map(|_| ())
        }
        Command::Navigate {
            perception,
            trials,
            repeats,
            worlds,
        } => {
            if let Some(r) = repeats {
                if *r == 0 {
                    return usage("--repeats must be positive");
                }
                cfg.nav.repeats = *r;
            }
            if !worlds.is_empty() {
                cfg.nav.worlds = worlds.clone();
            }
            let spec = PerceptionSpec::parse(perception)?;
            cmd_navigate(&cfg, &spec, *trials, cli.force).map(|_| ())
        }
        Command::Report => {
            let text = cmd_report(&cfg)?;
            print!("{text}");
            Ok(())
        }
    }
}

fn ensure_absent(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::OutputExists(path.to_path_buf()));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_jsonl(path: &Path, rows: &[Value]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

fn read_jsonl(path: &Path) -> Result<Vec<Value>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Writes the synthetic corpus, `splits.json` and content hashes.
pub fn cmd_prepare(cfg: &RunConfig, force: bool) -> CliResult<()> {
    let root = &cfg.dataset_dir();
    let non_empty = fs::read_dir(root).is_ok_and(|mut d| d.next().is_some());
    if non_empty {
        if !force {
            return Err(Error::OutputExists(root.clone()).into());
        }
        for sub in ["images", "labels"] {
            let p = root.join(sub);
            if p.exists() {
                fs::remove_dir_all(&p).map_err(io_err(&p))?;
            }
        }
        let m = root.join("splits.json");
        if m.exists() {
            fs::remove_file(&m).map_err(io_err(&m))?;
        }
    }
    let corpus = synth_generate(&cfg.dataset)?;
    let splits = make_splits(&cfg.dataset, corpus.len())?;
    let manifest = write_corpus(root, &corpus, &splits, cfg.echo())?;
    println!(
        "wrote {} samples to {} (train {}, val {}, test {}); {} files hashed",
        corpus.len(),
        root.display(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        manifest.hashes.len()
    );
    Ok(())
}

fn load_split(cfg: &RunConfig, split: &str) -> Result<Vec<Sample>> {
    let root = &cfg.dataset_dir();
    if !root.join("splits.json").exists() {
        return Err(Error::Invalid(format!(
            "no dataset at {}; run `ulrseg prepare` first",
            root.display()
        )));
    }
    read_split(root, &cfg.dataset, split)
}

/// Keeps log lines of other stages so a forced rerun replaces only its own.
fn reset_stage_log(path: &Path, stage: u8) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<Value> = read_jsonl(path)?
        .into_iter()
        .filter(|r| r.get("stage").and_then(Value::as_u64) != Some(u64::from(stage)))
        .collect();
    write_jsonl(path, &kept)
}

pub fn cmd_train_stage1(cfg: &RunConfig, force: bool) -> CliResult<()> {
    let dir = cfg.run_dir();
    let ck_path = dir.join(STAGE1_CHECKPOINT);
    ensure_absent(&ck_path, force)?;
    let train = load_split(cfg, "train")?;
    create_dir(&dir)?;
    let log_path = dir.join(TRAIN_LOG);
    reset_stage_log(&log_path, 1)?;
    let mut log = TrainLog::append_to(&log_path, cfg.echo())?;
    let out = pretrain_stage1(&cfg.models, &cfg.train, &train, &mut log)?;
    out.checkpoint.save(&ck_path)?;
    let first = out.losses.first().map_or(f64::NAN, |b| b.total);
    let last = out.losses.last().map_or(f64::NAN, |b| b.total);
    println!(
        "stage 1: {} steps, objective {first:.4} -> {last:.4}; checkpoint {}",
        out.losses.len(),
        ck_path.display()
    );
    Ok(())
}

pub fn cmd_train_stage2(cfg: &RunConfig, init: Option<&Path>, force: bool) -> CliResult<()> {
    let dir = cfg.run_dir();
    let best_path = dir.join(BEST_CHECKPOINT);
    let last_path = dir.join(LAST_CHECKPOINT);
    ensure_absent(&best_path, force)?;
    ensure_absent(&last_path, force)?;
    let init = init.map(Checkpoint::load).transpose()?;
    let train = load_split(cfg, "train")?;
    let val = load_split(cfg, "val")?;
    create_dir(&dir)?;
    let log_path = dir.join(TRAIN_LOG);
    reset_stage_log(&log_path, 2)?;
    let mut log = TrainLog::append_to(&log_path, cfg.echo())?;
    let out = train_stage2_joint(
        &cfg.models,
        &cfg.train,
        &train,
        &val,
        init.as_ref(),
        &mut log,
    )?;
    out.best.save(&best_path)?;
    out.last.save(&last_path)?;
    println!(
        "stage 2: {} steps, best val mIoU {:.4} at step {}; checkpoints {} and {}",
        out.losses.len(),
        out.best.meta.val_miou.unwrap_or(f64::NAN),
        out.best.meta.step,
        best_path.display(),
        last_path.display()
    );
    Ok(())
}

/// Network layout recorded in a checkpoint, falling back to `fallback`.
fn checkpoint_models(ck: &Checkpoint, fallback: &ModelConfig) -> Result<ModelConfig> {
    match ck.meta.config.get("models") {
        Some(m) => Ok(serde_json::from_value(m.clone())?),
        None => Ok(fallback.clone()),
    }
}

/// Loads a joint model and checks it predicts `num_classes` classes.
pub fn load_joint_model(
    path: &Path,
    fallback: &ModelConfig,
    num_classes: usize,
) -> Result<JointModel> {
    let ck = Checkpoint::load(path)?;
    let models = checkpoint_models(&ck, fallback)?;
    if models.num_classes() != num_classes {
        return Err(Error::Config(format!(
            "checkpoint {} predicts {} classes but the data has {num_classes}",
            path.display(),
            models.num_classes()
        )));
    }
    JointModel::from_checkpoint(&models, &ck)
}

/// Per-sample metric rows and their mean.
pub fn evaluate_pipeline(
    pipeline: &dyn SegPipeline,
    samples: &[Sample],
    ignore: u8,
) -> Result<(Vec<SampleMetrics>, SampleMetrics)> {
    if samples.is_empty() {
        return Err(Error::Invalid("evaluation split is empty".into()));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let (sr, logits) = pipeline.infer(&s.lr)?;
        let pred = predict_labels(&logits);
        rows.push(SampleMetrics::compute(
            &sr,
            &s.hr,
            &pred,
            &s.label,
            pipeline.num_classes(),
            ignore,
            None,
        )?);
    }
    let mean = SampleMetrics::mean(&rows)?;
    Ok((rows, mean))
}

/// Report lines: one `sample` row per sample then one `aggregate` row carrying
/// the configuration echo.
pub fn evaluation_report(
    rows: &[SampleMetrics],
    aggregate: &SampleMetrics,
    names: &[String],
    split: &str,
    checkpoint: &str,
    echo: &Value,
) -> Result<Vec<Value>> {
    let mut out = Vec::with_capacity(rows.len() + 1);
    for (i, r) in rows.iter().enumerate() {
        out.push(json!({
            "kind": "sample",
            "index": i,
            "name": names.get(i),
            "metrics": serde_json::to_value(r)?,
        }));
    }
    out.push(json!({
        "kind": "aggregate",
        "split": split,
        "samples": rows.len(),
        "checkpoint": checkpoint,
        "metrics": serde_json::to_value(aggregate)?,
        "format_version": FORMAT_VERSION,
        "config": echo,
    }));
    Ok(out)
}

/// Scores the checkpoint and writes `eval_<split>.jsonl`; returns its path.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    checkpoint: &Path,
    split: &str,
    force: bool,
) -> CliResult<PathBuf> {
    let dir = cfg.run_dir();
    let out_path = dir.join(format!("eval_{split}.jsonl"));
    ensure_absent(&out_path, force)?;
    let model = load_joint_model(checkpoint, &cfg.models, cfg.dataset.num_classes)?;
    let samples = load_split(cfg, split)?;
    let names = read_manifest(&cfg.dataset_dir())?
        .splits
        .get(split)
        .cloned()
        .unwrap_or_else(|| (0..samples.len()).map(sample_name).collect());
    let (rows, mean) = evaluate_pipeline(&model, &samples, cfg.dataset.ignore_index)?;
    let lines = evaluation_report(
        &rows,
        &mean,
        &names,
        split,
        &checkpoint.display().to_string(),
        &cfg.echo(),
    )?;
    create_dir(&dir)?;
    write_jsonl(&out_path, &lines)?;
    println!(
        "{split} ({} samples): mIoU {:.4}  PSNR {:.2}  SSIM {:.4}  ARI {:.4}  covering {:.4}  BF {:.4}",
        rows.len(),
        mean.miou,
        mean.psnr,
        mean.ssim,
        mean.ari,
        mean.covering,
        mean.bf
    );
    println!("report {}", out_path.display());
    Ok(out_path)
}

/// Parsed `--perception` value.
#[derive(Clone, Debug, PartialEq)]
pub enum PerceptionSpec {
    Oracle,
    Noisy(f64),
    Constant(u8),
    Checkpoint(PathBuf),
}

impl PerceptionSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "unknown perception {s:?} (expected oracle, noisy:<p>, constant:<class> or checkpoint:<path>)"
            ))
        };
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        match (kind, arg) {
            ("oracle", None) => Ok(Self::Oracle),
            ("noisy", Some(p)) => {
                let p: f64 = p.parse().map_err(|_| bad())?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(bad());
                }
                Ok(Self::Noisy(p))
            }
            ("constant", Some(k)) => k.parse().map(Self::Constant).map_err(|_| bad()),
            ("checkpoint", Some(p)) if !p.is_empty() => Ok(Self::Checkpoint(p.into())),
            _ => Err(bad()),
        }
    }

    /// File-name friendly label.
    pub fn label(&self) -> String {
        match self {
            Self::Oracle => "oracle".into(),
            Self::Noisy(p) => format!("noisy-{p}"),
            Self::Constant(k) => format!("constant-{k}"),
            Self::Checkpoint(_) => "checkpoint".into(),
        }
    }
}

fn load_worlds(cfg: &RunConfig) -> Result<Vec<Grid>> {
    if cfg.nav.worlds.is_empty() {
        return bundled_worlds();
    }
    cfg.nav.worlds.iter().map(|p| Grid::load(p)).collect()
}

/// Outcome of a navigation batch.
pub struct NavigationRun {
    pub lines: Vec<Value>,
    pub tables: Vec<SuccessTable>,
}

/// Runs the protocol on every configured world; `trials` limits trials per world.
pub fn navigate(
    cfg: &RunConfig,
    spec: &PerceptionSpec,
    trials: Option<usize>,
) -> Result<NavigationRun> {
    let grids = load_worlds(cfg)?;
    let model = match spec {
        PerceptionSpec::Checkpoint(path) => {
            let classes = grids.iter().map(Grid::num_classes).max().unwrap_or(0);
            let m = load_joint_model(path, &cfg.models, cfg.dataset.num_classes)?;
            if classes > m.num_classes() {
                return Err(Error::Config(format!(
                    "worlds use {classes} classes, the model predicts {}",
                    m.num_classes()
                )));
            }
            Some(Rc::new(m))
        }
        _ => None,
    };
    let mut lines = vec![json!({
        "kind": "header",
        "perception": spec.label(),
        "format_version": FORMAT_VERSION,
        "config": cfg.echo(),
    })];
    let mut tables = Vec::new();
    for grid in &grids {
        let classes = grid.num_classes();
        let mut factory = |t: &crate::navsim::TrialSpec| -> Result<Box<dyn Perception>> {
            Ok(match spec {
                PerceptionSpec::Oracle => Box::new(OraclePerception),
                PerceptionSpec::Noisy(p) => Box::new(NoisyPerception::new(*p, classes, t.seed)?),
                PerceptionSpec::Constant(k) => Box::new(ConstantPerception(*k)),
                PerceptionSpec::Checkpoint(_) => Box::new(ModelPerception {
                    pipeline: Rc::clone(model.as_ref().expect("model loaded")),
                    lr_size: cfg.dataset.lr_size,
                }),
            })
        };
        let (records, table) =
            run_protocol(grid, &cfg.nav.fsm, cfg.nav.repeats, trials, &mut factory)?;
        for r in &records {
            let mut v = serde_json::to_value(r)?;
            v["kind"] = json!("trial");
            lines.push(v);
        }
        let mut v = serde_json::to_value(&table)?;
        v["kind"] = json!("summary");
        lines.push(v);
        tables.push(table);
    }
    Ok(NavigationRun { lines, tables })
}

/// Writes `nav_<perception>.jsonl` and prints the success tables.
pub fn cmd_navigate(
    cfg: &RunConfig,
    spec: &PerceptionSpec,
    trials: Option<usize>,
    force: bool,
) -> CliResult<PathBuf> {
    let dir = cfg.run_dir();
    let out_path = dir.join(format!("nav_{}.jsonl", spec.label()));
    ensure_absent(&out_path, force)?;
    let run = navigate(cfg, spec, trials)?;
    create_dir(&dir)?;
    write_jsonl(&out_path, &run.lines)?;
    let (mut ok, mut n) = (0, 0);
    for t in &run.tables {
        println!("{}", t.render());
        ok += t.total.successes;
        n += t.total.trials;
    }
    println!("overall {ok}/{n}; records {}", out_path.display());
    Ok(out_path)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

/// Markdown summary of every artifact in the run directory; also written to `report.md`.
pub fn cmd_report(cfg: &RunConfig) -> CliResult<String> {
    let dir = cfg.run_dir();
    if !dir.is_dir() {
        return Err(Error::Invalid(format!("no run directory {}", dir.display())).into());
    }
    let mut out = format!("# Run {}\n\nformat version {FORMAT_VERSION}\n", cfg.name);

    let log_path = dir.join(TRAIN_LOG);
    if log_path.exists() {
        let recs = read_jsonl(&log_path)?;
        out.push_str("\n## Training\n\n| stage | steps | first total | last total | best val mIoU |\n|---|---|---|---|---|\n");
        for stage in [1u64, 2] {
            let of = |kind: &str| {
                recs.iter()
                    .filter(move |r| r["stage"].as_u64() == Some(stage) && r["kind"] == kind)
                    .collect::<Vec<_>>()
            };
            let steps = of("step");
            if steps.is_empty() {
                continue;
            }
            let total = |r: &Value| r["losses"]["total"].as_f64();
            let best = of("val")
                .iter()
                .filter_map(|r| r["val_miou"].as_f64())
                .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
            let _ = writeln!(
                out,
                "| {stage} | {} | {} | {} | {} |",
                steps.len(),
                fmt_opt(steps.first().and_then(|r| total(r))),
                fmt_opt(steps.last().and_then(|r| total(r))),
                fmt_opt(best)
            );
        }
        for r in recs
            .iter()
            .filter(|r| r["kind"] == "abort" || r["kind"] == "diagnostic")
        {
            let _ = writeln!(out, "\n- {}: {}", r["kind"], r);
        }
    }

    let mut entries: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(io_err(&dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    let evals: Vec<&PathBuf> = entries
        .iter()
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("eval_") && n.ends_with(".jsonl"))
        })
        .collect();
    if !evals.is_empty() {
        out.push_str("\n## Evaluation\n\n| split | samples | mIoU | PSNR | SSIM | ARI | covering | BF |\n|---|---|---|---|---|---|---|---|\n");
        for p in evals {
            let recs = read_jsonl(p)?;
            if let Some(a) = recs.iter().find(|r| r["kind"] == "aggregate") {
                let m = &a["metrics"];
                let f = |k: &str| fmt_opt(m[k].as_f64());
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} | {} | {} | {} | {} |",
                    a["split"].as_str().unwrap_or("?"),
                    a["samples"],
                    f("miou"),
                    f("psnr"),
                    f("ssim"),
                    f("ari"),
                    f("covering"),
                    f("bf")
                );
            }
        }
    }

    let navs: Vec<&PathBuf> = entries
        .iter()
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("nav_") && n.ends_with(".jsonl"))
        })
        .collect();
    if !navs.is_empty() {
        out.push_str("\n## Navigation\n");
        for p in navs {
            for r in read_jsonl(p)?
                .into_iter()
                .filter(|r| r["kind"] == "summary")
            {
                let table: SuccessTable = serde_json::from_value(r)?;
                let _ = write!(out, "\n```\n{}```\n", table.render());
            }
        }
    }

    let _ = write!(
        out,
        "\n## Configuration\n\n```json\n{}\n```\n",
        serde_json::to_string_pretty(&cfg.echo())?
    );
    let path = dir.join(REPORT);
    fs::write(&path, &out).map_err(io_err(&path))?;
    Ok(out)
}
