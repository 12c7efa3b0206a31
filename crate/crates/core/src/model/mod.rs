//! Character-aware LSTM language model: a CharCNN word embedder, a stacked
//! LSTM encoder and a linear decoder over the closed vocabulary.

mod charcnn;
mod lm;
mod lstm;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamSet, Tensor};
use crate::vocab::{Vocabulary, SPECIAL_TOKENS};

pub use charcnn::{word_bytes, CharCnnCache};
pub use lm::{
    apply_gradient, head_loss, log_softmax, Scorer,
    forward, hidden_states, loss_and_grad, next_word_scores, nll_loss, predict_topk, sgd_step,
    top_k_indices, EmbeddingCache, Head, LossGrad, ScoreRow,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Byte embedding width.
    pub char_dim: usize,
    /// Convolution channels, which is also the LSTM width.
    pub hidden_dim: usize,
    pub kernel_width: usize,
    pub lstm_layers: usize,
    /// Number of decoder outputs: the word block plus the special tokens.
    pub vocab_size: usize,
    pub max_word_bytes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            char_dim: 100,
            hidden_dim: 200,
            kernel_width: 4,
            lstm_layers: 2,
            vocab_size: 5000,
            max_word_bytes: 20,
        }
    }
}

impl ModelConfig {
    /// Default hyperparameters with the decoder sized for `vocab`.
    pub fn for_vocab(vocab: &Vocabulary) -> Self {
        Self {
            vocab_size: vocab.len(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.char_dim,
            self.hidden_dim,
            self.kernel_width,
            self.lstm_layers,
            self.vocab_size,
            self.max_word_bytes,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if self.vocab_size <= SPECIAL_TOKENS.len() {
            return Err(Error::Config("vocab_size must exceed the number of special tokens".into()));
        }
        Ok(())
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        if vocab.len() != self.vocab_size {
            return Err(Error::Config(format!(
                "model decodes {} entries but the vocabulary has {}",
                self.vocab_size,
                vocab.len()
            )));
        }
        Ok(())
    }

    /// Padded byte length fed to the convolution.
    pub fn padded_word_len(&self) -> usize {
        self.max_word_bytes.max(self.kernel_width)
    }
}

/// Closed-form parameter count; equals `ModelParams::new(config).num_scalars()`.
pub fn param_count(config: &ModelConfig) -> usize {
    let (e, d, k, m, v) = (
        config.char_dim,
        config.hidden_dim,
        config.kernel_width,
        config.lstm_layers,
        config.vocab_size,
    );
    256 * e + (d * e * k + d) + m * (4 * (d * d + d * d + 2 * d)) + (d * v + v) + 3 * d
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer<T> {
    /// `[4D, D]`, gate blocks in the order input, forget, cell, output.
    pub w_ih: Tensor<T>,
    pub w_hh: Tensor<T>,
    pub b_ih: Tensor<T>,
    pub b_hh: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    /// `[256, E]`, one row per byte value.
    pub char_embedding: Tensor<T>,
    /// `[D, E, K]`.
    pub conv_weight: Tensor<T>,
    pub conv_bias: Tensor<T>,
    /// `[3, D]` input vectors for `[UNK]`, `[BOS]`, `[PAD]`.
    pub special_embedding: Tensor<T>,
    pub lstm: Vec<LstmLayer<T>>,
    /// `[D, V]`.
    pub decoder_weight: Tensor<T>,
    pub decoder_bias: Tensor<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (e, d, k, v) = (
            config.char_dim,
            config.hidden_dim,
            config.kernel_width,
            config.vocab_size,
        );
        Self {
            char_embedding: Tensor::zeros(&[256, e]),
            conv_weight: Tensor::zeros(&[d, e, k]),
            conv_bias: Tensor::zeros(&[d]),
            special_embedding: Tensor::zeros(&[SPECIAL_TOKENS.len(), d]),
            lstm: (0..config.lstm_layers)
                .map(|_| LstmLayer {
                    w_ih: Tensor::zeros(&[4 * d, d]),
                    w_hh: Tensor::zeros(&[4 * d, d]),
                    b_ih: Tensor::zeros(&[4 * d]),
                    b_hh: Tensor::zeros(&[4 * d]),
                })
                .collect(),
            decoder_weight: Tensor::zeros(&[d, v]),
            decoder_bias: Tensor::zeros(&[v]),
        }
    }

    /// Seeded uniform initialization.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(config);
        let mut fill = |t: &mut Tensor<T>, bound: f64| {
            for x in &mut t.data {
                *x = T::from_f64_lossy(rng.random_range(-bound..=bound));
            }
        };
        let d = config.hidden_dim as f64;
        let conv_bound = 1.0 / ((config.char_dim * config.kernel_width) as f64).sqrt();
        fill(&mut p.char_embedding, 0.5);
        fill(&mut p.conv_weight, conv_bound);
        fill(&mut p.conv_bias, conv_bound);
        fill(&mut p.special_embedding, 0.5);
        for layer in &mut p.lstm {
            fill(&mut layer.w_ih, 1.0 / d.sqrt());
            fill(&mut layer.w_hh, 1.0 / d.sqrt());
            fill(&mut layer.b_ih, 1.0 / d.sqrt());
            fill(&mut layer.b_hh, 1.0 / d.sqrt());
        }
        fill(&mut p.decoder_weight, 1.0 / d.sqrt());
        p
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            char_embedding: self.char_embedding.cast(),
            conv_weight: self.conv_weight.cast(),
            conv_bias: self.conv_bias.cast(),
            special_embedding: self.special_embedding.cast(),
            lstm: self
                .lstm
                .iter()
                .map(|l| LstmLayer {
                    w_ih: l.w_ih.cast(),
                    w_hh: l.w_hh.cast(),
                    b_ih: l.b_ih.cast(),
                    b_hh: l.b_hh.cast(),
                })
                .collect(),
            decoder_weight: self.decoder_weight.cast(),
            decoder_bias: self.decoder_bias.cast(),
        }
    }

    /// Checks that every tensor has the shape `config` implies.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = Self::zeros(config);
        if self.lstm.len() != expected.lstm.len() {
            return Err(Error::Config("LSTM layer count mismatch".into()));
        }
        for ((name, got), want) in self.names().iter().zip(self.tensors()).zip(expected.tensors()) {
            if got.shape != want.shape || got.data.len() != want.data.len() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape, want.shape
                )));
            }
        }
        Ok(())
    }
}

impl<T: Scalar> ParamSet<T> for ModelParams<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![
            &self.char_embedding,
            &self.conv_weight,
            &self.conv_bias,
            &self.special_embedding,
        ];
        for l in &self.lstm {
            out.extend([&l.w_ih, &l.w_hh, &l.b_ih, &l.b_hh]);
        }
        out.extend([&self.decoder_weight, &self.decoder_bias]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![
            &mut self.char_embedding,
            &mut self.conv_weight,
            &mut self.conv_bias,
            &mut self.special_embedding,
        ];
        for l in &mut self.lstm {
            out.extend([&mut l.w_ih, &mut l.w_hh, &mut l.b_ih, &mut l.b_hh]);
        }
        out.extend([&mut self.decoder_weight, &mut self.decoder_bias]);
        out
    }

    fn names(&self) -> Vec<String> {
        let mut out: Vec<String> = ["char_embedding", "conv_weight", "conv_bias", "special_embedding"]
            .map(String::from)
            .to_vec();
        for i in 0..self.lstm.len() {
            for n in ["w_ih", "w_hh", "b_ih", "b_hh"] {
                out.push(format!("lstm.{i}.{n}"));
            }
        }
        out.extend(["decoder_weight".to_string(), "decoder_bias".to_string()]);
        out
    }
}
