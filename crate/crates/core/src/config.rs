//! Flat `key = value` experiment configuration.
//!
//! Every field of every phase is addressable by a dotted key. Lines starting
//! with `#` and blank lines are ignored; trailing `# ...` comments are
//! stripped. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::datagen::CorpusConfig;
use crate::exec::Execution;
use crate::losses::{DistillConfig, DistillVariant, NegativeSource};
use crate::models::{StudentConfig, StudentSize, TeacherConfig};
use crate::{Error, Result};

/// Epoch/step/batch/lr shape shared by all training phases.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl PhaseConfig {
    fn validate(&self, prefix: &str) -> Result<()> {
        for (k, v) in [
            ("epochs", self.epochs),
            ("steps_per_epoch", self.steps_per_epoch),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{prefix}.{k}"), "must be >= 1"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("{prefix}.lr"), "must be a positive finite value"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TeacherTrainConfig {
    pub phase: PhaseConfig,
    pub mask_prob: f64,
    pub mask_span: usize,
    pub negatives: usize,
    pub diversity_weight: f64,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        Self {
            phase: PhaseConfig {
                epochs: 2,
                steps_per_epoch: 100,
                batch_size: 8,
                lr: 1e-3,
            },
            mask_prob: 0.08,
            mask_span: 4,
            negatives: 7,
            diversity_weight: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneMode {
    Whole,
    LinearProbe,
}

/// Where the fine-tuned student starts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneInit {
    Distilled,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub phase: PhaseConfig,
    pub mode: FinetuneMode,
    pub init: FinetuneInit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    Valid,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub target_frr: f64,
    pub split: EvalSplit,
}

/// Input and output locations. Relative paths are resolved against the
/// command's output directory.
#[derive(Clone, Debug, PartialEq)]
pub struct PathsConfig {
    pub data: PathBuf,
    pub teacher: PathBuf,
    pub student: PathBuf,
    pub model: PathBuf,
    pub baseline: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub execution: Execution,
    pub corpus: CorpusConfig,
    pub teacher: TeacherConfig,
    pub teacher_train: TeacherTrainConfig,
    pub student_size: StudentSize,
    pub student_positional: bool,
    pub distill: DistillConfig,
    pub distill_train: PhaseConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            execution: Execution::Parallel,
            corpus: CorpusConfig::default(),
            teacher: TeacherConfig::default(),
            teacher_train: TeacherTrainConfig::default(),
            student_size: StudentSize::Large,
            student_positional: true,
            distill: DistillConfig::default(),
            distill_train: PhaseConfig {
                epochs: 10,
                steps_per_epoch: 200,
                batch_size: 32,
                lr: 1e-3,
            },
            finetune: FinetuneConfig {
                phase: PhaseConfig {
                    epochs: 10,
                    steps_per_epoch: 200,
                    batch_size: 64,
                    lr: 1e-3,
                },
                mode: FinetuneMode::Whole,
                init: FinetuneInit::Distilled,
            },
            eval: EvalConfig {
                target_frr: 0.05,
                split: EvalSplit::Test,
            },
            paths: PathsConfig {
                data: "data".into(),
                teacher: "teacher.ckpt".into(),
                student: "student.ckpt".into(),
                model: "model.ckpt".into(),
                baseline: "baseline.ckpt".into(),
            },
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got '{value}'"))),
    }
}

/// Parses a layer set such as `0..4,9..12` or `5,6,7` (ranges inclusive).
pub fn parse_layers(key: &str, value: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once("..") {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (parse(key, a.trim())?, parse(key, b.trim())?);
                if a > b {
                    return Err(Error::config(key, format!("empty range '{part}'")));
                }
                out.extend(a..=b);
            }
            None => out.push(parse(key, part)?),
        }
    }
    out.sort_unstable();
    out.dedup();
    if out.is_empty() {
        return Err(Error::config(key, "layer set is empty"));
    }
    Ok(out)
}

/// Inverse of [`parse_layers`]: compact inclusive ranges.
pub fn format_layers(layers: &[usize]) -> String {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < layers.len() {
        let mut j = i;
        while j + 1 < layers.len() && layers[j + 1] == layers[j] + 1 {
            j += 1;
        }
        parts.push(if i == j {
            layers[i].to_string()
        } else {
            format!("{}..{}", layers[i], layers[j])
        });
        i = j + 1;
    }
    parts.join(",")
}

impl ExperimentConfig {
    /// Every accepted key, in canonical order.
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "execution",
        "corpus.num_train",
        "corpus.num_valid",
        "corpus.num_test",
        "corpus.positive_rate",
        "corpus.playback_rate",
        "corpus.snr_db",
        "corpus.min_duration_s",
        "corpus.max_duration_s",
        "corpus.seed",
        "teacher.width",
        "teacher.layers",
        "teacher.heads",
        "teacher.codebook_size",
        "teacher.code_dim",
        "teacher.seed",
        "teacher_train.epochs",
        "teacher_train.steps_per_epoch",
        "teacher_train.batch_size",
        "teacher_train.lr",
        "teacher_train.mask_prob",
        "teacher_train.mask_span",
        "teacher_train.negatives",
        "teacher_train.diversity_weight",
        "student.size",
        "student.positional",
        "distill.variant",
        "distill.alpha",
        "distill.beta",
        "distill.gamma",
        "distill.lambda",
        "distill.negatives",
        "distill.negative_source",
        "distill.layers",
        "distill.mask_prob",
        "distill.mask_span",
        "distill.epsilon_corr",
        "distill.epsilon_sg",
        "distill.epochs",
        "distill.steps_per_epoch",
        "distill.batch_size",
        "distill.lr",
        "finetune.epochs",
        "finetune.steps_per_epoch",
        "finetune.batch_size",
        "finetune.lr",
        "finetune.mode",
        "finetune.init",
        "eval.target_frr",
        "eval.split",
        "paths.data",
        "paths.teacher",
        "paths.student",
        "paths.model",
        "paths.baseline",
    ];

    /// Parses a config file body on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}", n + 1), format!("expected 'key = value', got '{line}'"))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let c = &mut self.corpus;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "execution" => {
                self.execution = match v {
                    "parallel" => Execution::Parallel,
                    "sequential" => Execution::Sequential,
                    _ => return Err(Error::config(key, "expected parallel or sequential")),
                }
            }
            "corpus.num_train" => c.num_train = parse(key, v)?,
            "corpus.num_valid" => c.num_valid = parse(key, v)?,
            "corpus.num_test" => c.num_test = parse(key, v)?,
            "corpus.positive_rate" => c.positive_rate = parse(key, v)?,
            "corpus.playback_rate" => c.playback_rate = parse(key, v)?,
            "corpus.snr_db" => c.snr_db = parse(key, v)?,
            "corpus.min_duration_s" => c.min_duration_s = parse(key, v)?,
            "corpus.max_duration_s" => c.max_duration_s = parse(key, v)?,
            "corpus.seed" => c.master_seed = parse(key, v)?,
            "teacher.width" => self.teacher.width = parse(key, v)?,
            "teacher.layers" => self.teacher.layers = parse(key, v)?,
            "teacher.heads" => self.teacher.heads = parse(key, v)?,
            "teacher.codebook_size" => self.teacher.codebook_size = parse(key, v)?,
            "teacher.code_dim" => self.teacher.code_dim = parse(key, v)?,
            "teacher.seed" => self.teacher.seed = parse(key, v)?,
            "teacher_train.epochs" => self.teacher_train.phase.epochs = parse(key, v)?,
            "teacher_train.steps_per_epoch" => self.teacher_train.phase.steps_per_epoch = parse(key, v)?,
            "teacher_train.batch_size" => self.teacher_train.phase.batch_size = parse(key, v)?,
            "teacher_train.lr" => self.teacher_train.phase.lr = parse(key, v)?,
            "teacher_train.mask_prob" => self.teacher_train.mask_prob = parse(key, v)?,
            "teacher_train.mask_span" => self.teacher_train.mask_span = parse(key, v)?,
            "teacher_train.negatives" => self.teacher_train.negatives = parse(key, v)?,
            "teacher_train.diversity_weight" => self.teacher_train.diversity_weight = parse(key, v)?,
            "student.size" => {
                self.student_size = StudentSize::parse(v)
                    .ok_or_else(|| Error::config(key, "expected large or small"))?
            }
            "student.positional" => self.student_positional = parse_bool(key, v)?,
            "distill.variant" => {
                self.distill.variant = DistillVariant::parse(v).ok_or_else(|| {
                    Error::config(key, format!("unknown variant '{v}'"))
                })?
            }
            "distill.alpha" => self.distill.alpha = parse(key, v)?,
            "distill.beta" => self.distill.beta = parse(key, v)?,
            "distill.gamma" => self.distill.gamma = parse(key, v)?,
            "distill.lambda" => self.distill.lambda = parse(key, v)?,
            "distill.negatives" => self.distill.negatives = parse(key, v)?,
            "distill.negative_source" => {
                self.distill.negative_source = NegativeSource::parse(v)
                    .ok_or_else(|| Error::config(key, "expected codebook or frames"))?
            }
            "distill.layers" => self.distill.layer_subset = parse_layers(key, v)?,
            "distill.mask_prob" => self.distill.mask_prob = parse(key, v)?,
            "distill.mask_span" => self.distill.mask_span = parse(key, v)?,
            "distill.epsilon_corr" => self.distill.epsilon_corr = parse(key, v)?,
            "distill.epsilon_sg" => self.distill.epsilon_sg = parse(key, v)?,
            "distill.epochs" => self.distill_train.epochs = parse(key, v)?,
            "distill.steps_per_epoch" => self.distill_train.steps_per_epoch = parse(key, v)?,
            "distill.batch_size" => self.distill_train.batch_size = parse(key, v)?,
            "distill.lr" => self.distill_train.lr = parse(key, v)?,
            "finetune.epochs" => self.finetune.phase.epochs = parse(key, v)?,
            "finetune.steps_per_epoch" => self.finetune.phase.steps_per_epoch = parse(key, v)?,
            "finetune.batch_size" => self.finetune.phase.batch_size = parse(key, v)?,
            "finetune.lr" => self.finetune.phase.lr = parse(key, v)?,
            "finetune.mode" => {
                self.finetune.mode = match v {
                    "whole" => FinetuneMode::Whole,
                    "linear_probe" => FinetuneMode::LinearProbe,
                    _ => return Err(Error::config(key, "expected whole or linear_probe")),
                }
            }
            "finetune.init" => {
                self.finetune.init = match v {
                    "distilled" => FinetuneInit::Distilled,
                    "random" => FinetuneInit::Random,
                    _ => return Err(Error::config(key, "expected distilled or random")),
                }
            }
            "eval.target_frr" => self.eval.target_frr = parse(key, v)?,
            "eval.split" => {
                self.eval.split = match v {
                    "valid" => EvalSplit::Valid,
                    "test" => EvalSplit::Test,
                    _ => return Err(Error::config(key, "expected valid or test")),
                }
            }
            "paths.data" => self.paths.data = v.into(),
            "paths.teacher" => self.paths.teacher = v.into(),
            "paths.student" => self.paths.student = v.into(),
            "paths.model" => self.paths.model = v.into(),
            "paths.baseline" => self.paths.baseline = v.into(),
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Value of `key` in its canonical textual form.
    pub fn get(&self, key: &str) -> Option<String> {
        let c = &self.corpus;
        let f = |x: f64| format!("{x:?}");
        Some(match key {
            "seed" => self.seed.to_string(),
            "execution" => match self.execution {
                Execution::Parallel => "parallel".into(),
                Execution::Sequential => "sequential".into(),
            },
            "corpus.num_train" => c.num_train.to_string(),
            "corpus.num_valid" => c.num_valid.to_string(),
            "corpus.num_test" => c.num_test.to_string(),
            "corpus.positive_rate" => f(c.positive_rate),
            "corpus.playback_rate" => f(c.playback_rate),
            "corpus.snr_db" => f(c.snr_db),
            "corpus.min_duration_s" => f(c.min_duration_s),
            "corpus.max_duration_s" => f(c.max_duration_s),
            "corpus.seed" => c.master_seed.to_string(),
            "teacher.width" => self.teacher.width.to_string(),
            "teacher.layers" => self.teacher.layers.to_string(),
            "teacher.heads" => self.teacher.heads.to_string(),
            "teacher.codebook_size" => self.teacher.codebook_size.to_string(),
            "teacher.code_dim" => self.teacher.code_dim.to_string(),
            "teacher.seed" => self.teacher.seed.to_string(),
            "teacher_train.epochs" => self.teacher_train.phase.epochs.to_string(),
            "teacher_train.steps_per_epoch" => self.teacher_train.phase.steps_per_epoch.to_string(),
            "teacher_train.batch_size" => self.teacher_train.phase.batch_size.to_string(),
            "teacher_train.lr" => f(self.teacher_train.phase.lr),
            "teacher_train.mask_prob" => f(self.teacher_train.mask_prob),
            "teacher_train.mask_span" => self.teacher_train.mask_span.to_string(),
            "teacher_train.negatives" => self.teacher_train.negatives.to_string(),
            "teacher_train.diversity_weight" => f(self.teacher_train.diversity_weight),
            "student.size" => self.student_size.name().into(),
            "student.positional" => self.student_positional.to_string(),
            "distill.variant" => self.distill.variant.name().into(),
            "distill.alpha" => f(self.distill.alpha),
            "distill.beta" => f(self.distill.beta),
            "distill.gamma" => f(self.distill.gamma),
            "distill.lambda" => f(self.distill.lambda),
            "distill.negatives" => self.distill.negatives.to_string(),
            "distill.negative_source" => self.distill.negative_source.name().into(),
            "distill.layers" => format_layers(&self.distill.layer_subset),
            "distill.mask_prob" => f(self.distill.mask_prob),
            "distill.mask_span" => self.distill.mask_span.to_string(),
            "distill.epsilon_corr" => f(self.distill.epsilon_corr),
            "distill.epsilon_sg" => f(self.distill.epsilon_sg),
            "distill.epochs" => self.distill_train.epochs.to_string(),
            "distill.steps_per_epoch" => self.distill_train.steps_per_epoch.to_string(),
            "distill.batch_size" => self.distill_train.batch_size.to_string(),
            "distill.lr" => f(self.distill_train.lr),
            "finetune.epochs" => self.finetune.phase.epochs.to_string(),
            "finetune.steps_per_epoch" => self.finetune.phase.steps_per_epoch.to_string(),
            "finetune.batch_size" => self.finetune.phase.batch_size.to_string(),
            "finetune.lr" => f(self.finetune.phase.lr),
            "finetune.mode" => match self.finetune.mode {
                FinetuneMode::Whole => "whole".into(),
                FinetuneMode::LinearProbe => "linear_probe".into(),
            },
            "finetune.init" => match self.finetune.init {
                FinetuneInit::Distilled => "distilled".into(),
                FinetuneInit::Random => "random".into(),
            },
            "eval.target_frr" => f(self.eval.target_frr),
            "eval.split" => match self.eval.split {
                EvalSplit::Valid => "valid".into(),
                EvalSplit::Test => "test".into(),
            },
            "paths.data" => self.paths.data.display().to_string(),
            "paths.teacher" => self.paths.teacher.display().to_string(),
            "paths.student" => self.paths.student.display().to_string(),
            "paths.model" => self.paths.model.display().to_string(),
            "paths.baseline" => self.paths.baseline.display().to_string(),
            _ => return None,
        })
    }

    /// Canonical text listing every key; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    /// SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn student_config(&self) -> StudentConfig {
        let mut s = StudentConfig::new(self.student_size, self.seed);
        s.teacher_width = self.teacher.width;
        s.code_dim = self.teacher.code_dim;
        s.positional = self.student_positional;
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        let t = &self.teacher;
        for (k, v) in [
            ("teacher.width", t.width),
            ("teacher.layers", t.layers),
            ("teacher.heads", t.heads),
            ("teacher.code_dim", t.code_dim),
        ] {
            if v == 0 {
                return Err(Error::config(k, "must be >= 1"));
            }
        }
        if !t.width.is_multiple_of(t.heads) {
            return Err(Error::config("teacher.heads", "must divide teacher.width"));
        }
        if t.codebook_size < 2 {
            return Err(Error::config("teacher.codebook_size", "must be >= 2"));
        }
        let tt = &self.teacher_train;
        tt.phase.validate("teacher_train")?;
        if !(tt.mask_prob > 0.0 && tt.mask_prob < 1.0) {
            return Err(Error::config("teacher_train.mask_prob", "must lie in (0, 1)"));
        }
        if tt.mask_span == 0 {
            return Err(Error::config("teacher_train.mask_span", "must be >= 1"));
        }
        if tt.negatives == 0 || tt.negatives >= t.codebook_size {
            return Err(Error::config(
                "teacher_train.negatives",
                "must lie in 1..teacher.codebook_size",
            ));
        }
        if !(tt.diversity_weight >= 0.0 && tt.diversity_weight.is_finite()) {
            return Err(Error::config("teacher_train.diversity_weight", "must be >= 0"));
        }
        self.distill.validate(t.layers)?;
        if self.distill.negative_source == NegativeSource::Codebook
            && self.distill.negatives >= t.codebook_size
        {
            return Err(Error::config(
                "distill.negatives",
                "must be smaller than teacher.codebook_size",
            ));
        }
        self.distill_train.validate("distill")?;
        if self.distill.variant.is_batch_coupled() && self.distill_train.batch_size < 2 {
            return Err(Error::config("distill.batch_size", "batch-coupled losses need >= 2"));
        }
        self.finetune.phase.validate("finetune")?;
        if !(0.0..=1.0).contains(&self.eval.target_frr) {
            return Err(Error::config("eval.target_frr", "must lie in [0, 1]"));
        }
        Ok(())
    }
}
