//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use speechemb_core::layers::init_normal;
use speechemb_core::model::{ModelConfig, SpeechTextSystem};
use speechemb_core::synth::{gen_dataset, DataConfig, Dataset};
use speechemb_core::Tensor2D;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor2D<f32> {
    init_normal(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Default-sized untrained system and a corpus of `docs` documents.
pub fn system_and_corpus(docs: usize) -> (SpeechTextSystem, Dataset) {
    let ds = gen_dataset(&DataConfig { docs, ..DataConfig::default() }).expect("corpus");
    let sys = SpeechTextSystem::new(&ModelConfig::default()).expect("system");
    (sys, ds)
}
