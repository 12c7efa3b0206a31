use crate::scalar::Scalar;

use super::{ModelConfig, ModelParams};

/// UTF-8 bytes of `word`, truncated to `max_word_bytes` and right-padded
/// with byte 0 to the fixed convolution input length.
pub fn word_bytes(word: &str, config: &ModelConfig) -> Vec<u8> {
    let len = config.padded_word_len();
    let mut bytes: Vec<u8> = word.bytes().take(config.max_word_bytes).collect();
    bytes.resize(len, 0);
    bytes
}

/// What the backward pass needs from one word's forward pass.
#[derive(Clone, Debug)]
pub struct CharCnnCache<T> {
    pub bytes: Vec<u8>,
    /// Window index that won the max-pool, per channel.
    pub argmax: Vec<usize>,
    /// Pooled `tanh` activations, the word embedding itself.
    pub embedding: Vec<T>,
}

fn window<T: Scalar>(params: &ModelParams<T>, config: &ModelConfig, bytes: &[u8], start: usize, out: &mut [T]) {
    let (e, k) = (config.char_dim, config.kernel_width);
    for j in 0..k {
        let row = params.char_embedding.row(bytes[start + j] as usize);
        for (c, &x) in row.iter().enumerate().take(e) {
            out[c * k + j] = x;
        }
    }
}

pub(crate) fn forward_word<T: Scalar>(params: &ModelParams<T>, config: &ModelConfig, word: &str) -> CharCnnCache<T> {
    let bytes = word_bytes(word, config);
    let (d, e, k) = (config.hidden_dim, config.char_dim, config.kernel_width);
    let positions = bytes.len() - k + 1;
    let mut best = vec![T::neg_infinity(); d];
    let mut argmax = vec![0usize; d];
    let mut win = vec![T::zero(); e * k];
    for p in 0..positions {
        window(params, config, &bytes, p, &mut win);
        for ch in 0..d {
            let w = params.conv_weight.row(ch);
            let z = params.conv_bias.data[ch] + w.iter().zip(&win).map(|(&a, &b)| a * b).sum::<T>();
            if z > best[ch] {
                best[ch] = z;
                argmax[ch] = p;
            }
        }
    }
    // tanh is monotone, so pooling before the nonlinearity is equivalent.
    let embedding = best.into_iter().map(T::tanh).collect();
    CharCnnCache {
        bytes,
        argmax,
        embedding,
    }
}

pub(crate) fn backward_word<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    cache: &CharCnnCache<T>,
    d_embedding: &[T],
    grads: &mut ModelParams<T>,
) {
    let (d, e, k) = (config.hidden_dim, config.char_dim, config.kernel_width);
    let mut win = vec![T::zero(); e * k];
    for ch in 0..d {
        let a = cache.embedding[ch];
        let g = d_embedding[ch] * (T::one() - a * a);
        if g == T::zero() {
            continue;
        }
        let p = cache.argmax[ch];
        window(params, config, &cache.bytes, p, &mut win);
        grads.conv_bias.data[ch] = grads.conv_bias.data[ch] + g;
        let dw = grads.conv_weight.row_mut(ch);
        for (dw, &x) in dw.iter_mut().zip(&win) {
            *dw = *dw + g * x;
        }
        let w = params.conv_weight.row(ch);
        for j in 0..k {
            let byte = cache.bytes[p + j] as usize;
            let dx = grads.char_embedding.row_mut(byte);
            for c in 0..e {
                dx[c] = dx[c] + g * w[c * k + j];
            }
        }
    }
}
