//! Minibatch SGD loops shared by pretraining, federated clients and
//! personalization.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenizedSentence;
use crate::error::{Error, Result};
use crate::model::{sgd_step, ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::util::derive_seed;
use crate::vocab::Vocabulary;

/// Sentence indices `0..n` shuffled under `seed` and cut into batches.
pub fn shuffled_batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Centralized next-word training, the stand-in for large-corpus pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 1.0,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Runs `epochs` passes of shuffled minibatch SGD; returns the mean batch
/// loss of every epoch.
pub fn train_epochs<T: Scalar>(
    params: &mut ModelParams<T>,
    config: &ModelConfig,
    vocab: &Vocabulary,
    sentences: &[TokenizedSentence],
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let batches = shuffled_batches(sentences.len(), batch_size, derive_seed(seed, "epoch", &epoch.to_string()));
        let mut sum = 0.0;
        for idx in &batches {
            let batch: Vec<TokenizedSentence> = idx.iter().map(|&i| sentences[i].clone()).collect();
            sum += sgd_step(params, config, vocab, &batch, lr)?.to_f64_lossy();
        }
        let mean = if batches.is_empty() { 0.0 } else { sum / batches.len() as f64 };
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("epoch {epoch} mean loss {mean}")));
        }
        log::debug!("epoch {epoch}: mean loss {mean:.4}");
        history.push(mean);
    }
    Ok(history)
}

pub fn pretrain<T: Scalar>(
    params: &mut ModelParams<T>,
    config: &ModelConfig,
    vocab: &Vocabulary,
    sentences: &[TokenizedSentence],
    pc: &PretrainConfig,
) -> Result<Vec<f64>> {
    train_epochs(params, config, vocab, sentences, pc.epochs, pc.batch_size, pc.lr, pc.seed)
}
