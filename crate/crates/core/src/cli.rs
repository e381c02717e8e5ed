//! The `gid` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use crate::data::{generate, Dataset, DatasetSpec, Split};
use crate::detector::{DetectorConfig, HeadVariant};
use crate::error::{GidError, Result};
use crate::gism::GiType;
use crate::report::{ablation_table, render_report};
use crate::trainer::{
    ablate, run_distill, run_eval, run_train, DatasetRef, DistillConfig, GridKind, Knowledge, RunKind, RunManifest,
    StepLog, TrainConfig,
};

/// Overrides the root that relative output directories resolve against.
pub const OUTPUT_ROOT_ENV: &str = "GID_OUTPUT_ROOT";
const DEFAULT_OUTPUT_ROOT: &str = "runs";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "gid", version, about = "General-instance distillation for one-stage detectors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic shapes dataset.
    GenData(GenDataArgs),
    /// Train a teacher detector.
    TrainTeacher(TrainArgs),
    /// Train a student with the task loss only.
    TrainBaseline(TrainArgs),
    /// Distil a student from a teacher checkpoint.
    Distill(DistillArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Run an ablation grid.
    Ablate(AblateArgs),
    /// Render tables, GI count curves and heatmaps from recorded runs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Dataset spec (JSON); omitted fields take their defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_count: Option<usize>,
    #[arg(long)]
    pub val_count: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    AnchorBased,
    AnchorFree,
}

impl From<VariantArg> for HeadVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::AnchorBased => HeadVariant::AnchorBased,
            VariantArg::AnchorFree => HeadVariant::AnchorFree,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Full detector config (JSON). Defaults to the built-in teacher or student.
    #[arg(long)]
    pub detector: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "anchor-based")]
    pub variant: VariantArg,
    /// Training config (JSON); omitted fields take their defaults.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Print a progress line every this many steps; 0 is silent.
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DistillFlags {
    /// Teacher checkpoint.
    #[arg(long)]
    pub teacher: PathBuf,
    /// Distillation config (JSON); omitted fields take their defaults.
    #[arg(long)]
    pub distill: Option<PathBuf>,
    /// GIs kept per image.
    #[arg(long)]
    pub k: Option<usize>,
    /// Comma-separated subset of feature,relation,response, or `all` / `none`.
    #[arg(long)]
    pub knowledge: Option<String>,
    /// Comma-separated GI types to distil (pos, semipos, neg).
    #[arg(long)]
    pub gi_types: Option<String>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub lambda3: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub distill: DistillFlags,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GridArg {
    Knowledge,
    GiTypes,
    TopK,
}

impl From<GridArg> for GridKind {
    fn from(g: GridArg) -> Self {
        match g {
            GridArg::Knowledge => GridKind::Knowledge,
            GridArg::GiTypes => GridKind::GiTypes,
            GridArg::TopK => GridKind::TopK,
        }
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub grid: GridArg,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub distill: DistillFlags,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run or ablation directories to scan, recursively.
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &GidError) -> i32 {
    match e {
        GidError::Config { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::TrainTeacher(a) => train_cmd(RunKind::Teacher, a),
        Command::TrainBaseline(a) => train_cmd(RunKind::Baseline, a),
        Command::Distill(a) => distill_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Report(a) => report_cmd(a),
    }
}

/// Resolves `--out`: relative paths and the per-command default sit under
/// the output root.
pub fn output_dir(out: Option<&Path>, command: &str) -> PathBuf {
    let root = std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
    match out {
        Some(p) if p.is_absolute() => p.to_path_buf(),
        Some(p) if std::env::var_os(OUTPUT_ROOT_ENV).is_some() => root.join(p),
        Some(p) => p.to_path_buf(),
        None => root.join(command),
    }
}

fn writable_dir(dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| GidError::config("out", format!("{}: {e}", dir.display())))?;
    Ok(dir.to_path_buf())
}

fn existing(path: &Path, field: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(GidError::config(field, format!("{} does not exist", path.display())))
    }
}

/// Reads a JSON config, reporting schema errors against the offending field.
pub fn load_config<T: DeserializeOwned>(path: &Path, field: &str) -> Result<T> {
    existing(path, field)?;
    let text = std::fs::read_to_string(path).map_err(|e| GidError::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        let name = if at == "." { field.to_string() } else { format!("{field}.{at}") };
        GidError::config(name, format!("{} ({})", e.inner(), path.display()))
    })
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => load_config::<DatasetSpec>(p, "spec")?,
        None => DatasetSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.train_count {
        spec.train_count = n;
    }
    if let Some(n) = a.val_count {
        spec.val_count = n;
    }
    spec.validate()?;
    let out = writable_dir(&output_dir(a.out.as_deref(), "data"))?;
    let data = generate(&spec)?;
    data.save(&out)?;
    println!("dataset {} checksum {}", out.display(), data.checksum());
    Ok(())
}

fn load_data(path: &Path) -> Result<Dataset> {
    existing(path, "data")?;
    Dataset::load(path)
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.train {
        Some(p) => load_config::<TrainConfig>(p, "train")?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.steps {
        cfg.steps = n;
    }
    if let Some(n) = a.batch_size {
        cfg.batch_size = n;
    }
    if let Some(lr) = a.lr {
        cfg.optim.lr = lr;
    }
    if let Some(n) = a.eval_every {
        cfg.eval_every = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn detector_config(a: &TrainArgs, teacher: bool, num_classes: usize) -> Result<DetectorConfig> {
    let cfg = match &a.detector {
        Some(p) => load_config::<DetectorConfig>(p, "detector")?,
        None if teacher => DetectorConfig::teacher(a.variant.into(), num_classes),
        None => DetectorConfig::student(a.variant.into(), num_classes),
    };
    cfg.validate()?;
    if cfg.num_classes != num_classes {
        return Err(GidError::config(
            "detector.num_classes",
            format!("{} does not match the dataset's {num_classes}", cfg.num_classes),
        ));
    }
    Ok(cfg)
}

pub fn parse_knowledge(s: &str) -> Result<Knowledge> {
    let mut k = Knowledge::NONE;
    match s.trim() {
        "all" => return Ok(Knowledge::ALL),
        "none" | "" => return Ok(k),
        _ => {}
    }
    for part in s.split(['+', ',']) {
        match part.trim() {
            "feature" => k.feature = true,
            "relation" => k.relation = true,
            "response" => k.response = true,
            other => return Err(GidError::config("knowledge", format!("unknown knowledge type `{other}`"))),
        }
    }
    Ok(k)
}

pub fn parse_gi_types(s: &str) -> Result<Vec<GiType>> {
    s.split(['+', ','])
        .map(|p| {
            let p = p.trim();
            GiType::ALL
                .into_iter()
                .find(|t| t.name() == p)
                .ok_or_else(|| GidError::config("gi_types", format!("unknown GI type `{p}`")))
        })
        .collect()
}

fn distill_config(f: &DistillFlags) -> Result<DistillConfig> {
    let mut d = match &f.distill {
        Some(p) => load_config::<DistillConfig>(p, "distill")?,
        None => DistillConfig::default(),
    };
    if let Some(k) = f.k {
        d.k = k;
    }
    if let Some(s) = &f.knowledge {
        d.knowledge = parse_knowledge(s)?;
    }
    if let Some(s) = &f.gi_types {
        d.gi_types = Some(parse_gi_types(s)?);
    }
    for (v, slot) in [(f.lambda1, &mut d.lambda1), (f.lambda2, &mut d.lambda2), (f.lambda3, &mut d.lambda3)] {
        if let Some(v) = v {
            *slot = v;
        }
    }
    d.validate()?;
    Ok(d)
}

fn progress(every: usize, tag: &str) -> impl FnMut(&StepLog) + '_ {
    move |l: &StepLog| {
        if every > 0 && l.step % every == 0 {
            let x = &l.losses;
            eprintln!(
                "{tag}step {} lr {:.5} total {:.4} task {:.4} feature {:.4} relation {:.4} response {:.4}",
                l.step, l.lr, x.total, x.task, x.feature, x.relation, x.response
            );
        }
    }
}

fn print_result(m: &RunManifest, dir: &Path) {
    match &m.final_eval {
        Some(e) => println!(
            "{} mAP {:.4} AP50 {:.4} AP75 {:.4}",
            dir.display(),
            e.map,
            e.ap50,
            e.ap75
        ),
        None => println!("{}", dir.display()),
    }
}

fn train_cmd(kind: RunKind, a: TrainArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let cfg = train_config(&a)?;
    let det = detector_config(&a, kind == RunKind::Teacher, data.spec.num_classes)?;
    let name = if kind == RunKind::Teacher { "teacher" } else { "baseline" };
    let out = writable_dir(&output_dir(a.out.as_deref(), name))?;
    let res = run_train(kind, &det, &cfg, &data, DatasetRef::new(&a.data, &data), &out, &mut progress(a.log_every, ""))?;
    print_result(&res.manifest, &out);
    Ok(())
}

fn distill_cmd(a: DistillArgs) -> Result<()> {
    existing(&a.distill.teacher, "teacher")?;
    let data = load_data(&a.train.data)?;
    let cfg = train_config(&a.train)?;
    let det = detector_config(&a.train, false, data.spec.num_classes)?;
    let d = distill_config(&a.distill)?;
    let out = writable_dir(&output_dir(a.train.out.as_deref(), "distill"))?;
    let res = run_distill(
        &a.distill.teacher,
        &det,
        &cfg,
        &d,
        &data,
        DatasetRef::new(&a.train.data, &data),
        &out,
        &mut progress(a.train.log_every, ""),
    )?;
    print_result(&res.manifest, &out);
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    existing(&a.checkpoint, "checkpoint")?;
    let data = load_data(&a.data)?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
    };
    let out = writable_dir(&output_dir(a.out.as_deref(), "eval"))?;
    let m = run_eval(&a.checkpoint, &data, split, DatasetRef::new(&a.data, &data), &out)?;
    print_result(&m, &out);
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    existing(&a.distill.teacher, "teacher")?;
    let data = load_data(&a.train.data)?;
    let cfg = train_config(&a.train)?;
    let det = detector_config(&a.train, false, data.spec.num_classes)?;
    let d = distill_config(&a.distill)?;
    let kind: GridKind = a.grid.into();
    let out = writable_dir(&output_dir(a.train.out.as_deref(), &format!("ablate_{}", kind.name())))?;
    let every = a.train.log_every;
    let table = ablate(
        kind,
        &a.distill.teacher,
        &det,
        &cfg,
        &d,
        &data,
        DatasetRef::new(&a.train.data, &data),
        &out,
        &mut |cell, l| progress(every, &format!("[{cell}] "))(l),
    )?;
    print!("{}", ablation_table(&table).to_markdown());
    Ok(())
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    for p in &a.inputs {
        existing(p, "input")?;
    }
    let out = writable_dir(&output_dir(a.out.as_deref(), "report"))?;
    let s = render_report(&a.inputs, &out)?;
    let meta = serde_json::json!({
        "inputs": a.inputs,
        "runs": s.runs,
        "ablations": s.ablations,
        "traces": s.traces,
        "heatmaps": s.heatmaps,
        "files": s.files,
    });
    let path = out.join("report_manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| GidError::io(&path, e))?;
    println!(
        "{}: {} runs, {} ablations, {} traces, {} heatmaps",
        out.join("report.md").display(),
        s.runs,
        s.ablations,
        s.traces,
        s.heatmaps
    );
    Ok(())
}
