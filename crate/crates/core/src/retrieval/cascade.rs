//! Query-side embedding for every compared method, including the simulated
//! recognize-then-retrieve cascade.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ctc_align_embed, EmbeddingModel, SpeechTextSystem};
use crate::synth::{rng_for, SpeechUtterance};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    TextOnly,
    Ours,
    AsrPipeline,
    ProjectToText,
    CtcAlign,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::TextOnly,
        Method::AsrPipeline,
        Method::ProjectToText,
        Method::CtcAlign,
        Method::Ours,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::TextOnly => "text_only",
            Method::Ours => "ours",
            Method::AsrPipeline => "asr_pipeline",
            Method::ProjectToText => "project_to_text",
            Method::CtcAlign => "ctc_align",
        }
    }

    /// Whether the method reads the `wer` knob.
    pub fn uses_wer(self) -> bool {
        self == Method::AsrPipeline
    }

    /// The model whose document path builds this method's index.
    pub fn key_model(self, sys: &SpeechTextSystem) -> &EmbeddingModel<f32> {
        match self {
            Method::ProjectToText => &sys.projection.net,
            _ => &sys.main,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method `{s}` (text_only|ours|asr_pipeline|project_to_text|ctc_align)"
                ))
            })
    }
}

/// Substitutes each token independently with probability `wer`.
///
/// Each position draws its coin and its replacement from the same seeded
/// stream regardless of `wer`, so the corrupted set only grows with `wer`.
pub fn corrupt_tokens(tokens: &[u32], wer: f64, vocab: usize, seed: u64) -> Result<Vec<u32>> {
    if !(0.0..=1.0).contains(&wer) {
        return Err(Error::range("wer", wer, "[0, 1]"));
    }
    if vocab < 2 {
        return Err(Error::range("vocab", vocab, "[2, inf)"));
    }
    Ok(tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let mut rng = rng_for(seed, 31, i as u64);
            let coin: f64 = rng.random();
            let offset = rng.random_range(1..vocab as u32);
            if coin < wer {
                (t + offset) % vocab as u32
            } else {
                t
            }
        })
        .collect())
}

/// Greedy CTC decode, seeded substitution noise, then the text path.
pub fn cascaded_pipeline(sys: &SpeechTextSystem, utt: &SpeechUtterance, wer: f64, seed: u64) -> Result<Vec<f32>> {
    let decoded = sys.asr.transcribe(&utt.frames)?;
    if decoded.is_empty() {
        return Err(Error::EmptyTranscript);
    }
    let noisy = corrupt_tokens(&decoded, wer, sys.config.vocab, rng_seed(seed, utt))?;
    sys.main.embed_text(&noisy)
}

fn rng_seed(seed: u64, utt: &SpeechUtterance) -> u64 {
    crate::synth::derive_seed(seed, 30, utt.utt_id as u64)
}

/// Embeds a spoken query with the given method.
pub fn query_embedding(
    sys: &SpeechTextSystem,
    utt: &SpeechUtterance,
    method: Method,
    wer: f64,
    seed: u64,
) -> Result<Vec<f32>> {
    match method {
        Method::TextOnly => sys.main.embed_text(&utt.transcript),
        Method::Ours => sys.main.embed_speech(&utt.frames),
        Method::AsrPipeline => cascaded_pipeline(sys, utt, wer, seed),
        Method::ProjectToText => sys.projection.embed_speech(&utt.frames),
        Method::CtcAlign => ctc_align_embed(&sys.asr, &sys.main, &utt.frames),
    }
}
