use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use super::{apply_playback, synth_utterance};
use crate::dsp::{lfbe_extract, FeatureSeq, NUM_CHANNELS};
use crate::exec::Execution;
use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    NonKeyword,
    Keyword,
}

impl Label {
    pub fn is_keyword(self) -> bool {
        self == Label::Keyword
    }

    fn to_u8(self) -> u8 {
        self as u8
    }

    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Label::NonKeyword),
            1 => Ok(Label::Keyword),
            _ => Err(Error::format("corpus", format!("bad label byte {v}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Condition {
    Normal,
    Playback,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::Normal => "normal",
            Condition::Playback => "playback",
        }
    }

    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Condition::Normal),
            1 => Ok(Condition::Playback),
            _ => Err(Error::format("corpus", format!("bad condition byte {v}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    fn code(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Valid => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: u64,
    pub label: Label,
    pub condition: Condition,
    pub seed: u64,
    pub features: FeatureSeq,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn filter_condition(&self, condition: Condition) -> Corpus {
        Corpus {
            utterances: self
                .utterances
                .iter()
                .filter(|u| u.condition == condition)
                .cloned()
                .collect(),
        }
    }

    pub fn num_keyword(&self) -> usize {
        self.utterances.iter().filter(|u| u.label.is_keyword()).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub num_train: usize,
    pub num_valid: usize,
    pub num_test: usize,
    pub positive_rate: f64,
    pub playback_rate: f64,
    pub snr_db: f64,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub master_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_train: 2000,
            num_valid: 200,
            num_test: 800,
            positive_rate: 0.7,
            playback_rate: 0.5,
            snr_db: 5.0,
            min_duration_s: 0.8,
            max_duration_s: 1.2,
            master_seed: 1,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, n) in [
            ("corpus.num_train", self.num_train),
            ("corpus.num_valid", self.num_valid),
            ("corpus.num_test", self.num_test),
        ] {
            if n == 0 {
                return Err(Error::config(key, "must be >= 1"));
            }
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return Err(Error::config("corpus.positive_rate", "must be in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.playback_rate) {
            return Err(Error::config("corpus.playback_rate", "must be in [0, 1]"));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::config("corpus.snr_db", "must be finite"));
        }
        if !(0.5 <= self.min_duration_s
            && self.min_duration_s <= self.max_duration_s
            && self.max_duration_s <= 3.0)
        {
            return Err(Error::config(
                "corpus.min_duration_s",
                "durations must satisfy 0.5 <= min <= max <= 3.0",
            ));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.num_train,
            Split::Valid => self.num_valid,
            Split::Test => self.num_test,
        }
    }
}

/// Label and condition of every utterance in a split. Exactly
/// `round(positive_rate · n)` keywords; on the test split exactly
/// `round(playback_rate · n)` playback utterances, assigned independently.
pub fn split_plan(config: &CorpusConfig, split: Split) -> Vec<(Label, Condition)> {
    let n = config.count(split);
    let num_pos = (config.positive_rate * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng_for(&[config.master_seed, split.code(), rng::tag("labels")]));
    let mut plan = vec![(Label::NonKeyword, Condition::Normal); n];
    for &i in &order[..num_pos] {
        plan[i].0 = Label::Keyword;
    }
    if split == Split::Test {
        let num_pb = (config.playback_rate * n as f64).round() as usize;
        order.shuffle(&mut rng::rng_for(&[
            config.master_seed,
            split.code(),
            rng::tag("conditions"),
        ]));
        for &i in &order[..num_pb] {
            plan[i].1 = Condition::Playback;
        }
    }
    plan
}

fn utterance_seed(config: &CorpusConfig, split: Split, index: usize) -> u64 {
    rng::derive(&[config.master_seed, split.code(), index as u64])
}

fn utterance_id(split: Split, index: usize) -> u64 {
    (split.code() << 40) | index as u64
}

/// Round trip through `f32`, the storage precision of the corpus container.
fn storage_precision(features: FeatureSeq) -> Result<FeatureSeq> {
    let (t, c) = features.frames().dims2();
    let data = features
        .frames()
        .data()
        .iter()
        .map(|&v| v as f32 as f64)
        .collect();
    FeatureSeq::new(Tensor::new(vec![t, c], data)?)
}

fn make_utterance(
    config: &CorpusConfig,
    split: Split,
    index: usize,
    label: Label,
    condition: Condition,
) -> Result<Utterance> {
    let seed = utterance_seed(config, split, index);
    let duration = rng::rng_for(&[seed, rng::tag("duration")])
        .gen_range(config.min_duration_s..=config.max_duration_s);
    let mut clip = synth_utterance(seed, label, duration)?;
    if condition == Condition::Playback {
        clip = apply_playback(&clip, seed, config.snr_db)?;
    }
    Ok(Utterance {
        id: utterance_id(split, index),
        label,
        condition,
        seed,
        features: storage_precision(lfbe_extract(&clip)?)?,
    })
}

/// Regenerates utterance `index` of `split` on its own.
pub fn generate_utterance(config: &CorpusConfig, split: Split, index: usize) -> Result<Utterance> {
    let n = config.count(split);
    if index >= n {
        return Err(Error::invalid(format!(
            "utterance index {index} out of range for {} split of {n}",
            split.name()
        )));
    }
    let (label, condition) = split_plan(config, split)[index];
    make_utterance(config, split, index, label, condition)
}

pub fn generate_split(config: &CorpusConfig, split: Split, exec: Execution) -> Result<Corpus> {
    config.validate()?;
    let plan = split_plan(config, split);
    let utterances = exec
        .map(plan.len(), |i| make_utterance(config, split, i, plan[i].0, plan[i].1))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { utterances })
}

const MAGIC: &[u8; 8] = b"DVCCORP1";

pub fn encode_corpus(corpus: &Corpus) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(corpus.len() as u32).to_le_bytes());
    for u in &corpus.utterances {
        out.extend_from_slice(&u.id.to_le_bytes());
        out.push(u.label.to_u8());
        out.push(u.condition as u8);
        out.extend_from_slice(&u.seed.to_le_bytes());
        let (t, c) = u.features.frames().dims2();
        out.extend_from_slice(&(t as u32).to_le_bytes());
        out.extend_from_slice(&(c as u32).to_le_bytes());
        for &v in u.features.frames().data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_corpus(bytes: &[u8]) -> Result<Corpus> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(Error::format("corpus", "truncated"));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(8)? != MAGIC {
        return Err(Error::format("corpus", "bad magic"));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().expect("4")) as usize;
    let mut utterances = Vec::with_capacity(count);
    let mut ids = HashSet::new();
    for _ in 0..count {
        let id = u64::from_le_bytes(take(8)?.try_into().expect("8"));
        let label = Label::from_u8(take(1)?[0])?;
        let condition = Condition::from_u8(take(1)?[0])?;
        let seed = u64::from_le_bytes(take(8)?.try_into().expect("8"));
        let t = u32::from_le_bytes(take(4)?.try_into().expect("4")) as usize;
        let c = u32::from_le_bytes(take(4)?.try_into().expect("4")) as usize;
        if c != NUM_CHANNELS {
            return Err(Error::format("corpus", format!("expected 64 channels, got {c}")));
        }
        let data = take(t * c * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4")) as f64)
            .collect();
        if !ids.insert(id) {
            return Err(Error::format("corpus", format!("duplicate utterance id {id}")));
        }
        utterances.push(Utterance {
            id,
            label,
            condition,
            seed,
            features: FeatureSeq::new(Tensor::new(vec![t, c], data)?)?,
        });
    }
    if pos != bytes.len() {
        return Err(Error::format("corpus", "trailing bytes"));
    }
    Ok(Corpus { utterances })
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    crate::fsio::write_atomic(path, &encode_corpus(corpus))
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_corpus(&bytes)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusPaths {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
}

impl CorpusPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            train: dir.join("train.corpus"),
            valid: dir.join("valid.corpus"),
            test: dir.join("test.corpus"),
        }
    }

    pub fn get(&self, split: Split) -> &Path {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// Generates all three splits and writes `{train,valid,test}.corpus` to `dir`.
pub fn build_corpus(config: &CorpusConfig, dir: &Path, exec: Execution) -> Result<CorpusPaths> {
    config.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = CorpusPaths::in_dir(dir);
    for split in Split::ALL {
        let corpus = generate_split(config, split, exec)?;
        write_corpus(paths.get(split), &corpus)?;
    }
    Ok(paths)
}
