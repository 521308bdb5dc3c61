//! Command-line driver: one subcommand per experiment stage.
//!
//! Every artifact path comes from the `paths.*` config keys and is resolved
//! against `--out`. Each command writes its artifacts atomically and then a
//! `manifest-<command>.json` with the config hash, seeds, version string and
//! artifact digests. Training commands keep an epoch-boundary state file next
//! to their checkpoint while running and resume from it if present.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::{json, Map, Value};

use dvcc_core::config::{EvalSplit, ExperimentConfig, FinetuneInit};
use dvcc_core::datagen::{build_corpus, read_corpus, Condition, Corpus, CorpusPaths, Split};
use dvcc_core::eval::{det_csv, det_sweep, evaluate_conditions, filter_condition, layer_weights_csv, score_corpus};
use dvcc_core::fsio::{sha256_file, write_atomic};
use dvcc_core::losses::gradcheck::loss_gradient_suite;
use dvcc_core::losses::LossRecord;
use dvcc_core::models::{StudentModel, TeacherModel};
use dvcc_core::tensor::{load_checkpoint, save_checkpoint, Tensor};
use dvcc_core::train::{
    distill, finetune, pretrain_teacher, DistillState, FinetuneRecord, FinetuneState, TeacherState,
};
use dvcc_core::{Error, Result};

/// Version string baked in at build time (`git describe` when available).
pub const VERSION: &str = env!("DVCC_VERSION");

/// Gradient-check tolerance on the max relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Seeded instances per loss in `gradcheck`.
pub const GRADCHECK_INSTANCES: usize = 10;

#[derive(Debug, Parser)]
#[command(name = "dvcc", version = VERSION, about = "Dual-view distillation experiments for keyword spotting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Config override `key=value`; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    /// Output directory; relative `paths.*` are resolved against it.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,

    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Synthesize the train/valid/test corpora.
    GenData,
    /// Pretrain the teacher and write a frozen checkpoint.
    PretrainTeacher,
    /// Distill the frozen teacher into a student.
    Distill,
    /// Fine-tune a distilled or random student on keyword labels.
    Finetune,
    /// Compare a model against the baseline at matched FRR.
    Eval,
    /// Finite-difference check of every loss.
    Gradcheck,
    /// Write the learned teacher-layer weights of a distilled student.
    ExportWeights,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::PretrainTeacher => "pretrain-teacher",
            Command::Distill => "distill",
            Command::Finetune => "finetune",
            Command::Eval => "eval",
            Command::Gradcheck => "gradcheck",
            Command::ExportWeights => "export-weights",
        }
    }
}

/// Exit status for scripting.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INVALID: i32 = 1;
    pub const RUNTIME: i32 = 2;
}

/// Failure of a command, already classified by exit status.
#[derive(Debug)]
pub enum Failure {
    Invalid(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Invalid(_) => exit::INVALID,
            Failure::Runtime(_) => exit::RUNTIME,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Invalid(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_runtime() {
            Failure::Runtime(e.to_string())
        } else {
            Failure::Invalid(e.to_string())
        }
    }
}

/// Parses `args` (program name first) and runs the command, writing
/// progress to `out` and errors to `err`. Returns the exit status.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::INVALID } else { exit::OK };
            let text = e.render().to_string();
            if code == exit::OK {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match run(&cli, out) {
        Ok(()) => exit::OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message());
            f.code()
        }
    }
}

/// Loads the config named by the flags: defaults, then `--config`, then
/// each `--set` in order, then `--seed`.
pub fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.apply_text(&text)?;
    }
    for s in &cli.set {
        cfg.apply_override(s)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let cfg = load_config(cli)?;
    fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    let ctx = Context { cfg, dir: cli.out.clone() };
    let artifacts = match cli.command {
        Command::GenData => gen_data(&ctx)?,
        Command::PretrainTeacher => pretrain(&ctx, out)?,
        Command::Distill => run_distill(&ctx, out)?,
        Command::Finetune => run_finetune(&ctx, out)?,
        Command::Eval => run_eval(&ctx, out)?,
        Command::Gradcheck => return gradcheck(&ctx, out),
        Command::ExportWeights => export_weights(&ctx)?,
    };
    let name = match cli.command {
        Command::Finetune => format!("finetune-{}", stem(&ctx.cfg.paths.model)),
        c => c.name().to_string(),
    };
    write_manifest(&ctx, cli.command, &name, &artifacts)?;
    Ok(())
}

struct Context {
    cfg: ExperimentConfig,
    dir: PathBuf,
}

impl Context {
    fn path(&self, p: &Path) -> PathBuf {
        self.dir.join(p)
    }

    fn corpus(&self, split: Split) -> Result<Corpus> {
        let paths = CorpusPaths::in_dir(&self.path(&self.cfg.paths.data));
        let p = paths.get(split);
        if !p.exists() {
            return Err(Error::config("paths.data", format!("missing corpus file {}", p.display())));
        }
        read_corpus(p)
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

/// Epoch-boundary state file kept next to a checkpoint during training.
fn state_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".state");
    PathBuf::from(s)
}

/// Log rows of already-finished epochs, kept next to the state file.
fn state_log_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".state.csv");
    PathBuf::from(s)
}

fn load_existing(path: &Path, key: &str) -> Result<Vec<(String, Tensor)>> {
    if !path.exists() {
        return Err(Error::config(key, format!("missing checkpoint {}", path.display())));
    }
    load_checkpoint(path)
}

fn read_log_rows(path: &Path) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().skip(1).map(str::to_string).collect())
}

fn csv(header: &str, rows: &[String]) -> String {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    s
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn remove_state(ckpt: &Path) -> Result<()> {
    for p in [state_path(ckpt), state_log_path(ckpt)] {
        if p.exists() {
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}

fn gen_data(ctx: &Context) -> Result<Vec<PathBuf>> {
    let dir = ctx.path(&ctx.cfg.paths.data);
    let paths = build_corpus(&ctx.cfg.corpus, &dir, ctx.cfg.execution)?;
    Ok(Split::ALL.iter().map(|&s| paths.get(s).to_path_buf()).collect())
}

fn pretrain(ctx: &Context, out: &mut dyn Write) -> Result<Vec<PathBuf>> {
    let cfg = &ctx.cfg;
    let train = ctx.corpus(Split::Train)?;
    let ckpt = ctx.path(&cfg.paths.teacher);
    let (state_file, log_file) = (state_path(&ckpt), state_log_path(&ckpt));
    let lr = cfg.teacher_train.phase.lr;
    let mut state = if state_file.exists() {
        let s = TeacherState::from_entries(&load_checkpoint(&state_file)?, lr)?;
        if *s.teacher.config() != cfg.teacher {
            return Err(Error::config("teacher", "resume state was built with a different teacher config"));
        }
        s
    } else {
        TeacherState::new(cfg.teacher, lr)
    };
    let mut rows = read_log_rows(&log_file)?;
    let base = rows.len();
    let line = |i: usize, l: &f64| format!("{},{l:.17e}", base + i);
    let losses = pretrain_teacher(&train, &cfg.teacher_train, cfg.seed, &mut state, cfg.execution, &mut |s, ls| {
        save_checkpoint(&state_file, &s.to_entries())?;
        let mut all = rows.clone();
        all.extend(ls.iter().enumerate().map(|(i, l)| line(i, l)));
        write_text(&log_file, &csv("step,loss", &all))?;
        let _ = writeln!(out, "teacher epoch {} done", s.epochs_done);
        Ok(())
    })?;
    rows.extend(losses.iter().enumerate().map(|(i, l)| line(i, l)));
    state.teacher.freeze();
    save_checkpoint(&ckpt, &state.teacher.to_entries())?;
    let log = ckpt.with_file_name(format!("{}_loss.csv", stem(&ckpt)));
    write_text(&log, &csv("step,loss", &rows))?;
    remove_state(&ckpt)?;
    Ok(vec![ckpt, log])
}

fn load_teacher(ctx: &Context) -> Result<TeacherModel> {
    let path = ctx.path(&ctx.cfg.paths.teacher);
    let teacher = TeacherModel::from_entries(&load_existing(&path, "paths.teacher")?)?;
    if !teacher.is_frozen() {
        return Err(Error::config("paths.teacher", format!("{} is not a frozen teacher", path.display())));
    }
    if *teacher.config() != ctx.cfg.teacher {
        return Err(Error::config(
            "teacher",
            format!("{} was built with a different teacher config", path.display()),
        ));
    }
    Ok(teacher)
}

fn run_distill(ctx: &Context, out: &mut dyn Write) -> Result<Vec<PathBuf>> {
    let cfg = &ctx.cfg;
    let train = ctx.corpus(Split::Train)?;
    let teacher = load_teacher(ctx)?;
    let ckpt = ctx.path(&cfg.paths.student);
    let (state_file, log_file) = (state_path(&ckpt), state_log_path(&ckpt));
    let phase = &cfg.distill_train;
    let mut state = if state_file.exists() {
        DistillState::from_entries(&load_checkpoint(&state_file)?, phase.lr)?
    } else {
        DistillState::new(cfg.student_config(), &cfg.distill.layer_subset, phase.lr)?
    };
    let mut rows = read_log_rows(&log_file)?;
    let records = distill(&train, &teacher, &cfg.distill, phase, cfg.seed, &mut state, cfg.execution, &mut |s, recs| {
        save_checkpoint(&state_file, &s.to_entries())?;
        let mut all = rows.clone();
        all.extend(recs.iter().map(LossRecord::csv_line));
        write_text(&log_file, &csv(LossRecord::CSV_HEADER, &all))?;
        let _ = writeln!(out, "distill epoch {} done", s.epochs_done);
        Ok(())
    })?;
    rows.extend(records.iter().map(LossRecord::csv_line));
    save_checkpoint(&ckpt, &state.to_entries())?;
    let loss_csv = ckpt.with_file_name("distill_loss.csv");
    write_text(&loss_csv, &csv(LossRecord::CSV_HEADER, &rows))?;
    let weights = ckpt.with_file_name("layer_weights.csv");
    write_text(&weights, &layer_weights_csv(&state.agg, teacher.num_layers()))?;
    remove_state(&ckpt)?;
    Ok(vec![ckpt, loss_csv, weights])
}

fn run_finetune(ctx: &Context, out: &mut dyn Write) -> Result<Vec<PathBuf>> {
    let cfg = &ctx.cfg;
    let train = ctx.corpus(Split::Train)?;
    let ckpt = ctx.path(&cfg.paths.model);
    let (state_file, log_file) = (state_path(&ckpt), state_log_path(&ckpt));
    let phase = &cfg.finetune.phase;
    let mut state = if state_file.exists() {
        FinetuneState::from_entries(&load_checkpoint(&state_file)?, phase.lr)?
    } else {
        let student = match cfg.finetune.init {
            FinetuneInit::Random => StudentModel::new(cfg.student_config()),
            FinetuneInit::Distilled => {
                let path = ctx.path(&cfg.paths.student);
                StudentModel::from_entries(&load_existing(&path, "paths.student")?)?
            }
        };
        FinetuneState::new(student, phase.lr)
    };
    let mut rows = read_log_rows(&log_file)?;
    let records = finetune(&train, phase, cfg.finetune.mode, cfg.seed, &mut state, cfg.execution, &mut |s, recs| {
        save_checkpoint(&state_file, &s.to_entries())?;
        let mut all = rows.clone();
        all.extend(recs.iter().map(FinetuneRecord::csv_line));
        write_text(&log_file, &csv(FinetuneRecord::CSV_HEADER, &all))?;
        let _ = writeln!(out, "finetune epoch {} done", s.epochs_done);
        Ok(())
    })?;
    rows.extend(records.iter().map(FinetuneRecord::csv_line));
    save_checkpoint(&ckpt, &state.to_entries())?;
    let log = ckpt.with_file_name(format!("{}_finetune_log.csv", stem(&ckpt)));
    write_text(&log, &csv(FinetuneRecord::CSV_HEADER, &rows))?;
    remove_state(&ckpt)?;
    Ok(vec![ckpt, log])
}

fn load_finetuned(path: &Path, key: &str, lr: f64) -> Result<StudentModel> {
    Ok(FinetuneState::from_entries(&load_existing(path, key)?, lr)?.student)
}

fn run_eval(ctx: &Context, out: &mut dyn Write) -> Result<Vec<PathBuf>> {
    let cfg = &ctx.cfg;
    let split = match cfg.eval.split {
        EvalSplit::Valid => Split::Valid,
        EvalSplit::Test => Split::Test,
    };
    let corpus = ctx.corpus(split)?;
    let lr = cfg.finetune.phase.lr;
    let model = load_finetuned(&ctx.path(&cfg.paths.model), "paths.model", lr)?;
    let baseline = load_finetuned(&ctx.path(&cfg.paths.baseline), "paths.baseline", lr)?;
    let m = score_corpus(&model, &corpus, cfg.execution)?;
    let b = score_corpus(&baseline, &corpus, cfg.execution)?;
    let reports = evaluate_conditions(&m, &b, cfg.eval.target_frr)?;
    let mut artifacts = Vec::new();
    for r in &reports {
        let cond = if r.condition == Condition::Playback.name() { Condition::Playback } else { Condition::Normal };
        let det = det_sweep(&filter_condition(&m, cond))?;
        let path = ctx.dir.join(format!("det_{}.csv", r.condition));
        write_text(&path, &det_csv(&det))?;
        artifacts.push(path);
        let rel = r.relative_far_value().map_or("undefined".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(out, "{}: far {:.6} frr {:.6} relative_far {rel}", r.condition, r.model.far, r.model.frr);
    }
    let report = json!({
        "split": split.name(),
        "target_frr": cfg.eval.target_frr,
        "model": cfg.paths.model.display().to_string(),
        "baseline": cfg.paths.baseline.display().to_string(),
        "conditions": reports.iter().map(|r| r.to_json()).collect::<Vec<_>>(),
    });
    let path = ctx.dir.join("eval_report.json");
    write_text(&path, &(serde_json::to_string_pretty(&report).expect("json") + "\n"))?;
    artifacts.insert(0, path);
    Ok(artifacts)
}

fn gradcheck(ctx: &Context, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let rows = loss_gradient_suite(GRADCHECK_INSTANCES, ctx.cfg.seed)?;
    let mut ok = true;
    for r in &rows {
        let pass = r.max_error < GRADCHECK_TOLERANCE;
        ok &= pass;
        let _ = writeln!(out, "{:<16} max_rel_error {:.3e} {}", r.name, r.max_error, if pass { "ok" } else { "FAIL" });
    }
    write_manifest(ctx, Command::Gradcheck, Command::Gradcheck.name(), &[])?;
    if ok {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("gradient check above {GRADCHECK_TOLERANCE:e}")))
    }
}

fn export_weights(ctx: &Context) -> Result<Vec<PathBuf>> {
    let cfg = &ctx.cfg;
    let path = ctx.path(&cfg.paths.student);
    let state = DistillState::from_entries(&load_existing(&path, "paths.student")?, cfg.distill_train.lr)?;
    let out = ctx.dir.join(format!("layer_weights_{}.csv", stem(&path)));
    write_text(&out, &layer_weights_csv(&state.agg, cfg.teacher.layers + 1))?;
    Ok(vec![out])
}

fn write_manifest(ctx: &Context, command: Command, name: &str, artifacts: &[PathBuf]) -> Result<()> {
    let cfg = &ctx.cfg;
    let mut config = Map::new();
    for key in ExperimentConfig::KEYS {
        config.insert(key.to_string(), Value::String(cfg.get(key).unwrap_or_default()));
    }
    let mut digests = Map::new();
    for a in artifacts {
        let rel = a.strip_prefix(&ctx.dir).unwrap_or(a);
        digests.insert(rel.display().to_string(), Value::String(sha256_file(a)?));
    }
    let manifest = json!({
        "command": command.name(),
        "version": VERSION,
        "config_hash": cfg.hash(),
        "config": config,
        "seeds": {
            "seed": cfg.seed,
            "corpus": cfg.corpus.master_seed,
            "teacher": cfg.teacher.seed,
            "student": cfg.student_config().seed,
        },
        "artifacts": digests,
    });
    let path = ctx.dir.join(format!("manifest-{name}.json"));
    write_text(&path, &(serde_json::to_string_pretty(&manifest).expect("json") + "\n"))
}
