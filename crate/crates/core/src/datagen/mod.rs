//! Deterministic synthetic keyword corpus.
//!
//! Utterances are colored noise with, for keyword-positive clips, a fixed
//! three-tone chirp/formant template at a seeded offset. Negatives may carry
//! a distractor in a disjoint band. The test split mixes in a playback
//! condition (babble noise plus echo at a controlled SNR). Every utterance is
//! a pure function of `(master_seed, split, index)`.

mod corpus;
mod playback;
mod synth;

pub use corpus::{
    build_corpus, decode_corpus, encode_corpus, generate_split, generate_utterance, read_corpus,
    split_plan, write_corpus, Condition, Corpus, CorpusConfig, CorpusPaths, Label, Split,
    Utterance,
};
pub use playback::{apply_playback, playback_components, PlaybackMix, ECHO_DELAY, ECHO_GAIN};
pub use synth::{
    keyword_template, synth_utterance, DISTRACTOR_BAND_HZ, KEYWORD_BAND_HZ, KEYWORD_SAMPLES,
};
