//! OOV Expansion head: a residual MLP that turns CharCNN embeddings of a
//! client's OOV words into output embeddings, scored by inner product with
//! the LSTM states and appended to the vocabulary scores.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::log_softmax;
use crate::scalar::Scalar;
use crate::tensor::{ParamSet, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Hidden-dimension choices searched during personalization.
pub const HIDDEN_DIMS_GRID: [&[usize]; 3] = [&[960], &[128, 256, 128], &[256, 512, 256]];
/// Init standard deviations searched during personalization.
pub const SIGMA_GRID: [f64; 7] = [0.0, 1e-5, 1e-4, 1e-3, 1e-2, 0.1, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub hidden_dims: Vec<usize>,
    pub init_sigma: f64,
    /// Embedding width on both ends; the model's hidden dimension.
    pub io_dim: usize,
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) || self.io_dim == 0 {
            return Err(Error::Config(format!("invalid adapter dimensions: {self:?}")));
        }
        if !(self.init_sigma >= 0.0 && self.init_sigma.is_finite()) {
            return Err(Error::Config(format!("invalid adapter sigma {}", self.init_sigma)));
        }
        Ok(())
    }

    /// `(in, out)` of every linear layer, `D → H_1 → … → H_L → D`.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.io_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.io_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

pub fn adapter_param_count(config: &AdapterConfig) -> usize {
    2 * config.io_dim + config.layer_dims().iter().map(|&(i, o)| i * o + o).sum::<usize>()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `[out, in]`.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams<T> {
    pub ln_scale: Tensor<T>,
    pub ln_shift: Tensor<T>,
    pub layers: Vec<Linear<T>>,
}

impl<T: Scalar> AdapterParams<T> {
    pub fn zeros(config: &AdapterConfig) -> Self {
        Self {
            ln_scale: Tensor::zeros(&[config.io_dim]),
            ln_shift: Tensor::zeros(&[config.io_dim]),
            layers: config
                .layer_dims()
                .into_iter()
                .map(|(i, o)| Linear {
                    weight: Tensor::zeros(&[o, i]),
                    bias: Tensor::zeros(&[o]),
                })
                .collect(),
        }
    }

    pub fn check_shapes(&self, config: &AdapterConfig) -> Result<()> {
        let want = Self::zeros(config);
        let ok = self.layers.len() == want.layers.len()
            && self
                .tensors()
                .iter()
                .zip(want.tensors())
                .all(|(a, b)| a.shape == b.shape && a.data.len() == b.data.len());
        if ok {
            Ok(())
        } else {
            Err(Error::Config("adapter parameter shapes do not match config".into()))
        }
    }
}

impl<T: Scalar> ParamSet<T> for AdapterParams<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.ln_scale, &self.ln_shift];
        for l in &self.layers {
            out.extend([&l.weight, &l.bias]);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.ln_scale, &mut self.ln_shift];
        for l in &mut self.layers {
            out.extend([&mut l.weight, &mut l.bias]);
        }
        out
    }

    fn names(&self) -> Vec<String> {
        let mut out = vec!["ln_scale".to_string(), "ln_shift".to_string()];
        for i in 0..self.layers.len() {
            out.push(format!("linear.{i}.weight"));
            out.push(format!("linear.{i}.bias"));
        }
        out
    }
}

/// Linear weights and biases drawn from `N(0, σ²)`; LayerNorm starts as the
/// identity (scale 1, shift 0).
pub fn init_adapter<T: Scalar>(config: &AdapterConfig, seed: u64) -> Result<AdapterParams<T>> {
    config.validate()?;
    let mut params = AdapterParams::zeros(config);
    params.ln_scale.data.iter_mut().for_each(|x| *x = T::one());
    if config.init_sigma > 0.0 {
        let normal = Normal::new(0.0, config.init_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut params.layers {
            for x in layer.weight.data.iter_mut().chain(layer.bias.data.iter_mut()) {
                *x = T::from_f64_lossy(normal.sample(&mut rng));
            }
        }
    }
    Ok(params)
}

/// Intermediate values of one adapted row.
#[derive(Clone, Debug)]
pub(crate) struct RowCache<T> {
    xhat: Vec<T>,
    inv_std: T,
    /// Input of every linear layer; entries after the first are post-ReLU.
    inputs: Vec<Vec<T>>,
}

pub(crate) fn adapt_row<T: Scalar>(params: &AdapterParams<T>, x: &[T]) -> (Vec<T>, RowCache<T>) {
    let n = T::from_usize(x.len()).expect("dimension fits the scalar type");
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + T::from_f64_lossy(LAYER_NORM_EPS)).sqrt();
    let xhat: Vec<T> = x.iter().map(|&v| (v - mean) * inv_std).collect();
    let mut h: Vec<T> = xhat
        .iter()
        .zip(&params.ln_scale.data)
        .zip(&params.ln_shift.data)
        .map(|((&v, &g), &b)| v * g + b)
        .collect();
    let mut inputs = Vec::with_capacity(params.layers.len());
    let last = params.layers.len() - 1;
    for (li, layer) in params.layers.iter().enumerate() {
        let cols = h.len();
        let mut out = layer.bias.data.clone();
        for (r, o) in out.iter_mut().enumerate() {
            let row = &layer.weight.data[r * cols..(r + 1) * cols];
            *o = *o + row.iter().zip(&h).map(|(&w, &v)| w * v).sum::<T>();
        }
        if li != last {
            out.iter_mut().for_each(|v| *v = v.max(T::zero()));
        }
        inputs.push(h);
        h = out;
    }
    let y = x.iter().zip(&h).map(|(&a, &b)| a + b).collect();
    (y, RowCache { xhat, inv_std, inputs })
}

/// Accumulates parameter gradients and returns `dL/dx` for one row.
pub(crate) fn adapt_row_backward<T: Scalar>(
    params: &AdapterParams<T>,
    cache: &RowCache<T>,
    dy: &[T],
    grads: &mut AdapterParams<T>,
) -> Vec<T> {
    let mut d = dy.to_vec();
    for (li, layer) in params.layers.iter().enumerate().rev() {
        let input = &cache.inputs[li];
        let cols = input.len();
        let g = &mut grads.layers[li];
        let mut d_in = vec![T::zero(); cols];
        for (r, &dr) in d.iter().enumerate() {
            if dr == T::zero() {
                continue;
            }
            g.bias.data[r] = g.bias.data[r] + dr;
            let wrow = &layer.weight.data[r * cols..(r + 1) * cols];
            let grow = &mut g.weight.data[r * cols..(r + 1) * cols];
            for c in 0..cols {
                grow[c] = grow[c] + dr * input[c];
                d_in[c] = d_in[c] + dr * wrow[c];
            }
        }
        if li > 0 {
            // input is a ReLU output; zero entries had a non-positive argument.
            for (dv, &v) in d_in.iter_mut().zip(input) {
                if v <= T::zero() {
                    *dv = T::zero();
                }
            }
        }
        d = d_in;
    }
    let n = T::from_usize(d.len()).expect("dimension fits the scalar type");
    let mut dxhat = vec![T::zero(); d.len()];
    for j in 0..d.len() {
        grads.ln_scale.data[j] = grads.ln_scale.data[j] + d[j] * cache.xhat[j];
        grads.ln_shift.data[j] = grads.ln_shift.data[j] + d[j];
        dxhat[j] = d[j] * params.ln_scale.data[j];
    }
    let mean_d = dxhat.iter().copied().sum::<T>() / n;
    let mean_dx = dxhat.iter().zip(&cache.xhat).map(|(&a, &b)| a * b).sum::<T>() / n;
    (0..d.len())
        .map(|j| dy[j] + cache.inv_std * (dxhat[j] - mean_d - cache.xhat[j] * mean_dx))
        .collect()
}

/// `y = x + MLP(LayerNorm(x))` for every row of an `[n, D]` matrix.
pub fn adapt_embeddings<T: Scalar>(raw: &Tensor<T>, params: &AdapterParams<T>) -> Tensor<T> {
    let rows = raw.shape.first().copied().unwrap_or(0);
    let mut out = Tensor::zeros(&raw.shape);
    for r in 0..rows {
        let (y, _) = adapt_row(params, raw.row(r));
        out.row_mut(r).copy_from_slice(&y);
    }
    out
}

/// `[T, n]` matrix of inner products between LSTM states and adapted OOV
/// embeddings.
pub fn oov_scores<T: Scalar>(states: &[Vec<T>], adapted: &Tensor<T>) -> Vec<Vec<T>> {
    let n = adapted.shape.first().copied().unwrap_or(0);
    states
        .iter()
        .map(|h| {
            (0..n)
                .map(|i| adapted.row(i).iter().zip(h).map(|(&a, &b)| a * b).sum())
                .collect()
        })
        .collect()
}

/// Vocabulary scores followed by OOV scores, normalized with LogSoftmax over
/// the union.
pub fn join_scores<T: Scalar>(vocab_row: &[T], oov_row: &[T]) -> Vec<T> {
    let joined: Vec<T> = vocab_row.iter().chain(oov_row).copied().collect();
    log_softmax(&joined)
}
