//! Shared fixtures for the integration tests.
#![allow(dead_code)]

pub mod training;

use candle_core::{Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use groundcap::datagen::{Corpus, CorpusConfig, SceneConfig};
use groundcap::vocab::Vocabulary;

/// Small corpus whose scenes fit a 4-query model.
pub fn tiny_corpus(vocab: &Vocabulary, scenes: usize, max_objects: usize) -> (Corpus, CorpusConfig) {
    let cfg = CorpusConfig {
        num_scenes: scenes,
        first_seed: 7,
        scene: SceneConfig {
            min_objects: 2,
            max_objects,
            ..Default::default()
        },
        max_negatives: 2,
    };
    (Corpus::generate(&cfg, vocab).unwrap(), cfg)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}
