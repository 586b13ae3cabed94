//! Seeded synthetic corpus: topic-clustered documents, related spoken
//! queries rendered through fixed per-voice transforms, and quality metadata.

mod encoders;
pub mod io;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::init_normal;
use crate::ops;
use crate::tensor::Tensor2D;

pub use encoders::{SpeechEncoder, SpeechTrace, TextEncoder, TextTrace};

/// Number of distinct synthetic voices.
pub const NUM_VOICES: u8 = 6;
/// Frames emitted per token, inclusive range.
pub const MIN_FRAMES_PER_TOKEN: usize = 2;
pub const MAX_FRAMES_PER_TOKEN: usize = 6;
pub const MIN_DOC_LEN: usize = 3;
pub const MAX_DOC_LEN: usize = 32;
/// Quality lost per unit of noise standard deviation.
pub const QUALITY_SLOPE: f64 = 4.0;

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn rng_for(base: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream, index))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: u32,
    pub tokens: Vec<u32>,
    /// Topic cluster; also seeds related-query generation.
    pub semantic_seed: u64,
}

/// Topic clusters: each owns a pool of preferred tokens. The pool doubles
/// as the label text of the topic for classification tasks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopicModel {
    pub vocab: usize,
    pub pools: Vec<Vec<u32>>,
}

/// Documents per topic cluster.
pub const DOCS_PER_TOPIC: usize = 10;
const TOPIC_POOL: usize = 8;
const TOPIC_PROB: f64 = 0.7;

impl TopicModel {
    pub fn new(n_docs: usize, vocab: usize, seed: u64) -> Self {
        let n_topics = n_docs.div_ceil(DOCS_PER_TOPIC).max(1);
        let all: Vec<u32> = (0..vocab as u32).collect();
        let pools = (0..n_topics)
            .map(|t| {
                let mut rng = rng_for(seed, 1, t as u64);
                let mut pool: Vec<u32> = all
                    .choose_multiple(&mut rng, TOPIC_POOL.min(vocab / 2))
                    .copied()
                    .collect();
                pool.sort_unstable();
                pool
            })
            .collect();
        Self { vocab, pools }
    }

    pub fn n_topics(&self) -> usize {
        self.pools.len()
    }

    pub fn label_document(&self, topic: usize) -> Document {
        Document {
            doc_id: topic as u32,
            tokens: self.pools[topic].clone(),
            semantic_seed: topic as u64,
        }
    }
}

/// Generates `n_docs` topic-clustered documents. Pure in its arguments.
pub fn gen_corpus(n_docs: usize, vocab_size: usize, seed: u64) -> Result<Vec<Document>> {
    if n_docs == 0 {
        return Err(Error::range("n_docs", n_docs, ">= 1"));
    }
    if vocab_size < 8 {
        return Err(Error::range("vocab_size", vocab_size, ">= 8"));
    }
    let topics = TopicModel::new(n_docs, vocab_size, seed);
    let docs = (0..n_docs)
        .map(|i| {
            let mut rng = rng_for(seed, 2, i as u64);
            let topic = i % topics.n_topics();
            let pool = &topics.pools[topic];
            let len = rng.random_range(MIN_DOC_LEN..=MAX_DOC_LEN);
            let tokens = (0..len)
                .map(|_| {
                    if rng.random_bool(TOPIC_PROB) {
                        pool[rng.random_range(0..pool.len())]
                    } else {
                        rng.random_range(0..vocab_size as u32)
                    }
                })
                .collect();
            Document {
                doc_id: i as u32,
                tokens,
                semantic_seed: topic as u64,
            }
        })
        .collect();
    Ok(docs)
}

/// Fraction of document tokens a related query keeps.
pub const QUERY_KEEP: f64 = 0.75;

/// A query about `doc`: an order-preserving random subset of its tokens,
/// at least [`MIN_DOC_LEN`] long (or the whole document if shorter).
pub fn related_query(doc: &Document, seed: u64) -> Vec<u32> {
    let mut rng = rng_for(seed ^ doc.semantic_seed, 3, doc.doc_id as u64);
    let keep: Vec<bool> = doc.tokens.iter().map(|_| rng.random_bool(QUERY_KEEP)).collect();
    let min_len = MIN_DOC_LEN.min(doc.tokens.len());
    let mut mask = keep;
    let mut kept = mask.iter().filter(|&&k| k).count();
    let mut order: Vec<usize> = (0..doc.tokens.len()).collect();
    order.shuffle(&mut rng);
    for i in order {
        if kept >= min_len {
            break;
        }
        if !mask[i] {
            mask[i] = true;
            kept += 1;
        }
    }
    doc.tokens
        .iter()
        .zip(&mask)
        .filter(|(_, &k)| k)
        .map(|(&t, _)| t)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeechUtterance {
    pub utt_id: u32,
    pub source_doc: u32,
    pub voice_id: u8,
    pub noise_sigma: f64,
    pub quality_score: f64,
    /// Token sequence spoken in this utterance.
    pub transcript: Vec<u32>,
    /// Frames emitted per transcript token.
    pub phoneme_durations: Vec<usize>,
    #[serde(with = "io::frames_b64")]
    pub frames: Tensor2D<f32>,
}

impl SpeechUtterance {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn mean_phoneme_duration(&self) -> f64 {
        if self.phoneme_durations.is_empty() {
            return 0.0;
        }
        self.phoneme_durations.iter().sum::<usize>() as f64 / self.phoneme_durations.len() as f64
    }
}

/// The synthetic quality score for a given noise level, on the `[1, 5]` scale.
pub fn quality_for_noise(noise_sigma: f64) -> f64 {
    (5.0 - QUALITY_SLOPE * noise_sigma).clamp(1.0, 5.0)
}

/// Fixed acoustic rendering of tokens: a token-to-frame table plus one
/// near-orthogonal transform per voice. Nothing here is trainable.
#[derive(Clone, Debug)]
pub struct SpeechSynth {
    acoustic: Tensor2D<f32>,
    voices: Vec<Tensor2D<f32>>,
}

/// How far each voice transform departs from the identity before orthonormalization.
const VOICE_SPREAD: f64 = 0.4;

fn orthonormalize_columns(m: &mut Tensor2D<f64>) {
    let n = m.cols();
    for c in 0..n {
        for prev in 0..c {
            let proj: f64 = (0..m.rows()).map(|r| m.get(r, c) * m.get(r, prev)).sum();
            for r in 0..m.rows() {
                let v = m.get(r, c) - proj * m.get(r, prev);
                m.set(r, c, v);
            }
        }
        let norm: f64 = (0..m.rows()).map(|r| m.get(r, c).powi(2)).sum::<f64>().sqrt();
        for r in 0..m.rows() {
            let v = m.get(r, c) / norm;
            m.set(r, c, v);
        }
    }
}

impl SpeechSynth {
    pub fn new(vocab: usize, speech_dim: usize, world_seed: u64) -> Self {
        let mut rng = rng_for(world_seed, 4, 0);
        let acoustic = init_normal::<f32>(vocab, speech_dim, 1.0, &mut rng);
        let voices = (0..NUM_VOICES as u64)
            .map(|v| {
                let mut rng = rng_for(world_seed, 5, v);
                let noise: Tensor2D<f64> =
                    init_normal(speech_dim, speech_dim, VOICE_SPREAD / (speech_dim as f64).sqrt(), &mut rng);
                let mut m = Tensor2D::<f64>::identity(speech_dim);
                m.add_assign(&noise).expect("square");
                orthonormalize_columns(&mut m);
                m.cast::<f32>()
            })
            .collect();
        Self { acoustic, voices }
    }

    pub fn vocab(&self) -> usize {
        self.acoustic.rows()
    }

    pub fn speech_dim(&self) -> usize {
        self.acoustic.cols()
    }

    pub fn voice_transform(&self, voice_id: u8) -> Result<&Tensor2D<f32>> {
        self.voices
            .get(voice_id as usize)
            .ok_or_else(|| Error::range("voice_id", voice_id, "[0, 5]"))
    }

    /// Renders `tokens` as frames: each token lasts 2..=6 frames of its
    /// acoustic row mapped through the voice transform, plus Gaussian noise.
    pub fn synth_speech(
        &self,
        tokens: &[u32],
        voice_id: u8,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<SpeechUtterance> {
        let voice = self.voice_transform(voice_id)?;
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::range("noise_sigma", noise_sigma, ">= 0"));
        }
        if tokens.is_empty() {
            return Err(Error::EmptySequence("synth_speech"));
        }
        if let Some(&token) = tokens.iter().find(|&&t| t as usize >= self.vocab()) {
            return Err(Error::Vocabulary {
                token,
                vocab: self.vocab(),
            });
        }
        let mut rng = rng_for(seed, 6, voice_id as u64);
        let durations: Vec<usize> = tokens
            .iter()
            .map(|_| rng.random_range(MIN_FRAMES_PER_TOKEN..=MAX_FRAMES_PER_TOKEN))
            .collect();
        let rendered = ops::matmul(&self.acoustic, voice)?;
        let noise = Normal::new(0.0, noise_sigma).expect("validated sigma");
        let rows: Vec<Vec<f32>> = tokens
            .iter()
            .zip(&durations)
            .flat_map(|(&t, &r)| std::iter::repeat_n(t, r))
            .map(|t| {
                rendered
                    .row(t as usize)
                    .iter()
                    .map(|&v| {
                        if noise_sigma > 0.0 {
                            v + noise.sample(&mut rng) as f32
                        } else {
                            v
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(SpeechUtterance {
            utt_id: 0,
            source_doc: 0,
            voice_id,
            noise_sigma,
            quality_score: quality_for_noise(noise_sigma),
            transcript: tokens.to_vec(),
            phoneme_durations: durations,
            frames: Tensor2D::from_rows(&rows)?,
        })
    }
}

/// Parameters of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub docs: usize,
    pub vocab: usize,
    pub speech_dim: usize,
    pub seed: u64,
    /// Utterances per document, one per voice in rotation.
    pub utterances_per_doc: usize,
    /// Per-utterance noise is uniform in `[0, max_noise]`.
    pub max_noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            docs: 200,
            vocab: 64,
            speech_dim: 32,
            seed: 1,
            utterances_per_doc: NUM_VOICES as usize,
            max_noise: 0.6,
        }
    }
}

/// Documents, topic labels and spoken queries.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: usize,
    pub documents: Vec<Document>,
    pub topics: Vec<Document>,
    pub utterances: Vec<SpeechUtterance>,
}

impl Dataset {
    pub fn document(&self, doc_id: u32) -> Result<&Document> {
        self.documents
            .get(doc_id as usize)
            .filter(|d| d.doc_id == doc_id)
            .or_else(|| self.documents.iter().find(|d| d.doc_id == doc_id))
            .ok_or_else(|| Error::Dataset(format!("unknown document id {doc_id}")))
    }

    pub fn topic_of(&self, doc_id: u32) -> Result<usize> {
        Ok(self.document(doc_id)?.semantic_seed as usize)
    }
}

pub fn gen_dataset(config: &DataConfig) -> Result<Dataset> {
    let documents = gen_corpus(config.docs, config.vocab, config.seed)?;
    let topics_model = TopicModel::new(config.docs, config.vocab, config.seed);
    let topics = (0..topics_model.n_topics())
        .map(|t| topics_model.label_document(t))
        .collect();
    let synth = SpeechSynth::new(config.vocab, config.speech_dim, config.seed);
    let mut utterances = Vec::with_capacity(config.docs * config.utterances_per_doc);
    for doc in &documents {
        for k in 0..config.utterances_per_doc {
            let utt_id = (doc.doc_id as usize * config.utterances_per_doc + k) as u32;
            let voice = ((doc.doc_id as usize + k) % NUM_VOICES as usize) as u8;
            let mut rng = rng_for(config.seed, 7, utt_id as u64);
            let sigma = rng.random_range(0.0..=config.max_noise);
            let query = related_query(doc, derive_seed(config.seed, 8, utt_id as u64));
            let mut utt = synth.synth_speech(&query, voice, sigma, derive_seed(config.seed, 9, utt_id as u64))?;
            utt.utt_id = utt_id;
            utt.source_doc = doc.doc_id;
            utterances.push(utt);
        }
    }
    Ok(Dataset {
        vocab: config.vocab,
        documents,
        topics,
        utterances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn jaccard(a: &[u32], b: &[u32]) -> f64 {
        let a: HashSet<_> = a.iter().collect();
        let b: HashSet<_> = b.iter().collect();
        a.intersection(&b).count() as f64 / a.union(&b).count() as f64
    }

    #[test]
    fn corpus_is_deterministic_and_in_vocab() {
        assert_eq!(gen_corpus(10, 64, 7).unwrap(), gen_corpus(10, 64, 7).unwrap());
        let docs = gen_corpus(500, 64, 1).unwrap();
        assert_eq!(docs.len(), 500);
        for d in &docs {
            assert!(d.tokens.iter().all(|&t| t < 64));
            assert!((MIN_DOC_LEN..=MAX_DOC_LEN).contains(&d.tokens.len()));
        }
        assert!(gen_corpus(0, 64, 1).is_err());
        assert!(gen_corpus(5, 7, 1).is_err());
    }

    #[test]
    fn topic_clusters_raise_token_overlap() {
        let docs = gen_corpus(200, 64, 1).unwrap();
        let (mut same, mut cross) = ((0.0, 0usize), (0.0, 0usize));
        for i in 0..docs.len() {
            for j in i + 1..docs.len() {
                let jac = jaccard(&docs[i].tokens, &docs[j].tokens);
                if docs[i].semantic_seed == docs[j].semantic_seed {
                    same = (same.0 + jac, same.1 + 1);
                } else {
                    cross = (cross.0 + jac, cross.1 + 1);
                }
            }
        }
        let (same, cross) = (same.0 / same.1 as f64, cross.0 / cross.1 as f64);
        assert!(same > cross, "same-topic {same} vs cross-topic {cross}");
    }

    #[test]
    fn speech_lengths_follow_durations() {
        let synth = SpeechSynth::new(64, 32, 3);
        let utt = synth.synth_speech(&[1, 2, 3, 4], 2, 0.1, 5).unwrap();
        assert!((8..=24).contains(&utt.num_frames()));
        assert_eq!(utt.num_frames(), utt.phoneme_durations.iter().sum::<usize>());
        assert_eq!(utt.frames.cols(), 32);
    }

    #[test]
    fn noiseless_speech_is_deterministic_and_voice_dependent() {
        let synth = SpeechSynth::new(64, 32, 3);
        let a = synth.synth_speech(&[5, 9, 9, 1], 0, 0.0, 11).unwrap();
        let b = synth.synth_speech(&[5, 9, 9, 1], 0, 0.0, 11).unwrap();
        assert_eq!(a, b);
        let c = synth.synth_speech(&[5, 9, 9, 1], 3, 0.0, 11).unwrap();
        // first frame: same token, different voice
        assert_ne!(a.frames.row(0), c.frames.row(0));
        assert_eq!(a.transcript, c.transcript);
    }

    #[test]
    fn invalid_voice_and_noise() {
        let synth = SpeechSynth::new(64, 32, 3);
        assert!(matches!(synth.synth_speech(&[1], 6, 0.0, 0), Err(Error::Range { .. })));
        assert!(synth.synth_speech(&[1], 0, -0.1, 0).is_err());
        assert!(matches!(
            synth.synth_speech(&[64], 0, 0.0, 0),
            Err(Error::Vocabulary { .. })
        ));
    }

    #[test]
    fn voice_transforms_are_orthonormal() {
        let synth = SpeechSynth::new(16, 8, 1);
        for v in 0..NUM_VOICES {
            let m = synth.voice_transform(v).unwrap().cast::<f64>();
            let gram = ops::matmul_tn(&m, &m).unwrap();
            for r in 0..8 {
                for c in 0..8 {
                    let want = if r == c { 1.0 } else { 0.0 };
                    assert!((gram.get(r, c) - want).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn dataset_invariants() {
        let cfg = DataConfig {
            docs: 20,
            ..DataConfig::default()
        };
        let ds = gen_dataset(&cfg).unwrap();
        assert_eq!(ds.utterances.len(), 120);
        assert_eq!(ds, gen_dataset(&cfg).unwrap());
        for u in &ds.utterances {
            let l = u.transcript.len();
            assert!(u.num_frames() >= 2 * l && u.num_frames() <= 6 * l);
            assert!((1.0..=5.0).contains(&u.quality_score));
            let doc = ds.document(u.source_doc).unwrap();
            assert!(u.transcript.iter().all(|t| doc.tokens.contains(t)));
        }
        let voices: HashSet<u8> = ds.utterances.iter().map(|u| u.voice_id).collect();
        assert_eq!(voices.len(), NUM_VOICES as usize);
        // every document is spoken by all six voices
        for chunk in ds.utterances.chunks(NUM_VOICES as usize) {
            let v: HashSet<u8> = chunk.iter().map(|u| u.voice_id).collect();
            assert_eq!(v.len(), NUM_VOICES as usize);
            assert!(chunk.iter().all(|u| u.source_doc == chunk[0].source_doc));
        }
    }

    proptest::proptest! {
        #[test]
        fn quality_monotone_in_noise(a in 0.0f64..2.0, b in 0.0f64..2.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            proptest::prop_assert!(quality_for_noise(hi) <= quality_for_noise(lo));
            proptest::prop_assert!((1.0..=5.0).contains(&quality_for_noise(a)));
        }
    }
}
