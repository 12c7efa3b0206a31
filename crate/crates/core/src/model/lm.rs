use std::cell::RefCell;
use std::collections::HashMap;

use crate::adapter::{adapt_row, adapt_row_backward, AdapterParams};
use crate::corpus::TokenizedSentence;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamSet, Tensor};
use crate::vocab::{OovList, Vocabulary};

use super::charcnn::{backward_word, forward_word};
use super::{lstm, ModelConfig, ModelParams};

/// Pre-LogSoftmax scores for one prediction position.
pub type ScoreRow<T> = Vec<T>;

pub fn log_softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if row.is_empty() {
        return Vec::new();
    }
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
    row.iter().map(|&x| x - lse).collect()
}

/// Indices of the `k` largest scores among those not excluded. Earlier
/// indices win ties.
pub fn top_k_indices<T: Scalar>(scores: &[T], k: usize, exclude: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut best: Vec<(T, usize)> = Vec::with_capacity(k + 1);
    for (i, &s) in scores.iter().enumerate() {
        if k == 0 || exclude(i) {
            continue;
        }
        if best.len() == k && s <= best[k - 1].0 {
            continue;
        }
        // Insert after every entry with score >= s to keep index order on ties.
        let pos = best.iter().position(|&(b, _)| s > b).unwrap_or(best.len());
        best.insert(pos, (s, i));
        best.truncate(k);
    }
    best.into_iter().map(|(_, i)| i).collect()
}

/// Which scores the model emits over.
#[derive(Clone, Copy, Debug)]
pub enum Head<'a, T> {
    /// Decoder scores over the closed vocabulary; OOV targets are `[UNK]`.
    Closed,
    /// Decoder scores joined with inner-product scores for a client's OOV
    /// words. `adapter: None` is the identity block.
    Expanded {
        oov: &'a OovList,
        adapter: Option<&'a AdapterParams<T>>,
    },
}

impl<'a, T> Head<'a, T> {
    pub fn oov(&self) -> Option<&'a OovList> {
        match self {
            Head::Closed => None,
            Head::Expanded { oov, .. } => Some(oov),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Input {
    Special(usize),
    Word(usize),
}

/// Distinct surface words of a batch, looked up once.
struct WordTable<'w> {
    words: Vec<&'w str>,
    index: HashMap<&'w str, usize>,
}

impl<'w> WordTable<'w> {
    fn new() -> Self {
        Self {
            words: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn intern(&mut self, w: &'w str) -> usize {
        if let Some(&i) = self.index.get(w) {
            return i;
        }
        self.words.push(w);
        self.index.insert(w, self.words.len() - 1);
        self.words.len() - 1
    }
}

/// LSTM inputs for a sentence: `[BOS]` then every word but the last, with
/// OOV words mapped to `[UNK]`.
fn sentence_inputs<'w>(sentence: &'w TokenizedSentence, vocab: &Vocabulary, table: &mut WordTable<'w>) -> Vec<Input> {
    let n = sentence.len();
    let mut inputs = Vec::with_capacity(n);
    if n == 0 {
        return inputs;
    }
    inputs.push(Input::Special(vocab.bos() - vocab.unk()));
    for w in &sentence.words[..n - 1] {
        inputs.push(match vocab.lookup(w) {
            Some(_) => Input::Word(table.intern(w)),
            None => Input::Special(0),
        });
    }
    inputs
}

fn target_index(word: &str, vocab: &Vocabulary, oov: Option<&HashMap<&str, usize>>) -> usize {
    if let Some(i) = vocab.lookup(word) {
        return i;
    }
    match oov.and_then(|m| m.get(word)) {
        Some(&i) => vocab.len() + i,
        None => vocab.unk(),
    }
}

fn decode<T: Scalar>(params: &ModelParams<T>, h: &[T]) -> Vec<T> {
    let mut scores = params.decoder_bias.data.clone();
    for (d, &hd) in h.iter().enumerate() {
        let row = params.decoder_weight.row(d);
        for (s, &w) in scores.iter_mut().zip(row) {
            *s = *s + hd * w;
        }
    }
    scores
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Memoized CharCNN embeddings for evaluation on fixed parameters.
#[derive(Default)]
pub struct EmbeddingCache<T> {
    map: HashMap<String, Vec<T>>,
}

impl<T: Scalar> EmbeddingCache<T> {
    pub fn new() -> Self {
        Self { map: HashMap::new() }
    }

    pub fn get(&mut self, params: &ModelParams<T>, config: &ModelConfig, word: &str) -> &[T] {
        if !self.map.contains_key(word) {
            let e = forward_word(params, config, word).embedding;
            self.map.insert(word.to_owned(), e);
        }
        &self.map[word]
    }
}

fn input_vectors<T: Scalar>(
    sentence: &[String],
    params: &ModelParams<T>,
    config: &ModelConfig,
    vocab: &Vocabulary,
    cache: &mut EmbeddingCache<T>,
) -> Vec<Vec<T>> {
    let mut out = Vec::with_capacity(sentence.len() + 1);
    out.push(params.special_embedding.row(vocab.bos() - vocab.unk()).to_vec());
    for w in sentence {
        if vocab.contains(w) {
            out.push(cache.get(params, config, w).to_vec());
        } else {
            out.push(params.special_embedding.row(0).to_vec());
        }
    }
    out
}

/// Top-layer LSTM state after `[BOS]` and after each word of `prefix`;
/// `prefix.len() + 1` states.
pub fn hidden_states<T: Scalar>(
    prefix: &[String],
    params: &ModelParams<T>,
    config: &ModelConfig,
    vocab: &Vocabulary,
    cache: &mut EmbeddingCache<T>,
) -> Vec<Vec<T>> {
    let inputs = input_vectors(prefix, params, config, vocab, cache);
    lstm::forward(&params.lstm, config.hidden_dim, inputs, false).0
}

/// One score row per word of `sentence`; row `t` predicts word `t` from the
/// words before it.
pub fn forward<T: Scalar>(
    sentence: &TokenizedSentence,
    params: &ModelParams<T>,
    config: &ModelConfig,
    vocab: &Vocabulary,
) -> Vec<ScoreRow<T>> {
    let n = sentence.len();
    if n == 0 {
        return Vec::new();
    }
    let mut cache = EmbeddingCache::new();
    let states = hidden_states(&sentence.words[..n - 1], params, config, vocab, &mut cache);
    states.iter().map(|h| decode(params, h)).collect()
}

/// Vocabulary scores for the word following `prefix`.
pub fn next_word_scores<T: Scalar>(
    prefix: &[String],
    params: &ModelParams<T>,
    config: &ModelConfig,
    vocab: &Vocabulary,
) -> (Vec<T>, Vec<T>) {
    let mut cache = EmbeddingCache::new();
    let states = hidden_states(prefix, params, config, vocab, &mut cache);
    let h = states.last().expect("at least the BOS state").clone();
    (decode(params, &h), h)
}

/// The `k` best next-word candidates after `prefix`. `extra` appends scores
/// for OOV words (in list order) to the vocabulary scores. Special tokens are
/// never suggested.
pub fn predict_topk<T: Scalar>(
    prefix: &[String],
    k: usize,
    params: &ModelParams<T>,
    config: &ModelConfig,
    vocab: &Vocabulary,
    extra: Option<(&[T], &OovList)>,
) -> Vec<String> {
    let (mut scores, _) = next_word_scores(prefix, params, config, vocab);
    if let Some((s, _)) = extra {
        scores.extend_from_slice(s);
    }
    top_k_indices(&scores, k, |i| i < vocab.len() && vocab.is_special(i))
        .into_iter()
        .map(|i| match (i < vocab.len(), extra) {
            (true, _) => vocab.token(i).to_owned(),
            (false, Some((_, list))) => list.words[i - vocab.len()].clone(),
            (false, None) => unreachable!("index past the vocabulary without extra scores"),
        })
        .collect()
}

/// Mean loss over predicted positions plus gradients.
#[derive(Clone, Debug)]
pub struct LossGrad<T> {
    pub loss: T,
    pub positions: usize,
    pub model: ModelParams<T>,
    pub adapter: Option<AdapterParams<T>>,
}

/// Mean next-word cross entropy on the closed vocabulary.
pub fn nll_loss<T: Scalar>(
    batch: &[TokenizedSentence],
    params: &ModelParams<T>,
    config: &ModelConfig,
    vocab: &Vocabulary,
) -> T {
    run(params, config, vocab, Head::Closed, batch, false).loss
}

pub fn loss_and_grad<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    vocab: &Vocabulary,
    head: Head<'_, T>,
    batch: &[TokenizedSentence],
) -> LossGrad<T> {
    run(params, config, vocab, head, batch, true)
}

/// Loss only, for any head.
pub fn head_loss<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    vocab: &Vocabulary,
    head: Head<'_, T>,
    batch: &[TokenizedSentence],
) -> T {
    run(params, config, vocab, head, batch, false).loss
}

fn run<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    vocab: &Vocabulary,
    head: Head<'_, T>,
    batch: &[TokenizedSentence],
    want_grad: bool,
) -> LossGrad<T> {
    let d = config.hidden_dim;
    let v = vocab.len();
    let mut table = WordTable::new();
    let inputs: Vec<Vec<Input>> = batch
        .iter()
        .map(|s| sentence_inputs(s, vocab, &mut table))
        .collect();
    let oov_words: Vec<usize> = head
        .oov()
        .map(|l| l.words.iter().map(|w| table.intern(w)).collect())
        .unwrap_or_default();
    let oov_index = head.oov().map(OovList::index_map);

    let cnn: Vec<_> = table.words.iter().map(|w| forward_word(params, config, w)).collect();
    let (adapted, adapter_caches): (Vec<Vec<T>>, Vec<_>) = match head {
        Head::Expanded {
            adapter: Some(adapter), ..
        } => oov_words
            .iter()
            .map(|&i| {
                let (y, c) = adapt_row(adapter, &cnn[i].embedding);
                (y, Some(c))
            })
            .unzip(),
        _ => oov_words.iter().map(|&i| (cnn[i].embedding.clone(), None)).unzip(),
    };

    let positions: usize = batch.iter().map(TokenizedSentence::len).sum();
    let mut grads = want_grad.then(|| ModelParams::zeros(config));
    let mut d_table = vec![vec![T::zero(); d]; if want_grad { table.words.len() } else { 0 }];
    let mut d_adapted = vec![vec![T::zero(); d]; if want_grad { adapted.len() } else { 0 }];
    let scale = if positions > 0 {
        T::one() / T::from_usize(positions).expect("position count fits the scalar type")
    } else {
        T::zero()
    };
    let mut total = T::zero();

    for (sentence, ins) in batch.iter().zip(&inputs) {
        if ins.is_empty() {
            continue;
        }
        let vectors: Vec<Vec<T>> = ins
            .iter()
            .map(|inp| match *inp {
                Input::Special(s) => params.special_embedding.row(s).to_vec(),
                Input::Word(i) => cnn[i].embedding.clone(),
            })
            .collect();
        let (states, seq_cache) = lstm::forward(&params.lstm, d, vectors, want_grad);
        let mut d_states = Vec::new();
        for (t, h) in states.iter().enumerate() {
            let mut scores = decode(params, h);
            scores.extend(adapted.iter().map(|a| dot(a, h)));
            let logp = log_softmax(&scores);
            let target = target_index(&sentence.words[t], vocab, oov_index.as_ref());
            total = total - logp[target];
            let Some(g) = grads.as_mut() else { continue };
            // dL/dscore = softmax - onehot, averaged over positions.
            let ds: Vec<T> = logp
                .iter()
                .enumerate()
                .map(|(i, &lp)| (lp.exp() - if i == target { T::one() } else { T::zero() }) * scale)
                .collect();
            let mut dh = vec![T::zero(); d];
            for (j, dhj) in dh.iter_mut().enumerate() {
                let wrow = params.decoder_weight.row(j);
                let grow = g.decoder_weight.row_mut(j);
                let hj = h[j];
                let mut acc = T::zero();
                for c in 0..v {
                    acc = acc + wrow[c] * ds[c];
                    grow[c] = grow[c] + hj * ds[c];
                }
                *dhj = acc;
            }
            for (b, &s) in g.decoder_bias.data.iter_mut().zip(&ds[..v]) {
                *b = *b + s;
            }
            for (i, a) in adapted.iter().enumerate() {
                let s = ds[v + i];
                for j in 0..d {
                    dh[j] = dh[j] + s * a[j];
                    d_adapted[i][j] = d_adapted[i][j] + s * h[j];
                }
            }
            d_states.push(dh);
        }
        if let (Some(g), Some(cache)) = (grads.as_mut(), seq_cache) {
            let d_inputs = lstm::backward(&params.lstm, d, &cache, d_states, &mut g.lstm);
            for (inp, dx) in ins.iter().zip(d_inputs) {
                let dst = match *inp {
                    Input::Special(s) => g.special_embedding.row_mut(s),
                    Input::Word(i) => &mut d_table[i][..],
                };
                for (a, b) in dst.iter_mut().zip(dx) {
                    *a = *a + b;
                }
            }
        }
    }

    let loss = total * scale;
    let Some(mut g) = grads else {
        return LossGrad {
            loss,
            positions,
            model: ModelParams::zeros(&ModelConfig {
                char_dim: 1,
                hidden_dim: 1,
                kernel_width: 1,
                lstm_layers: 0,
                vocab_size: 1,
                max_word_bytes: 1,
            }),
            adapter: None,
        };
    };

    let mut adapter_grads = None;
    if let Head::Expanded { adapter, .. } = head {
        let mut ag = adapter.map(|a| {
            let mut z = a.clone();
            z.zero_all();
            z
        });
        for (i, &w) in oov_words.iter().enumerate() {
            let d_raw = match (adapter, ag.as_mut(), &adapter_caches[i]) {
                (Some(a), Some(ag), Some(c)) => adapt_row_backward(a, c, &d_adapted[i], ag),
                _ => d_adapted[i].clone(),
            };
            for (a, b) in d_table[w].iter_mut().zip(d_raw) {
                *a = *a + b;
            }
        }
        adapter_grads = ag;
    }
    for (i, cache) in cnn.iter().enumerate() {
        if d_table[i].iter().any(|&x| x != T::zero()) {
            backward_word(params, config, cache, &d_table[i], &mut g);
        }
    }
    LossGrad {
        loss,
        positions,
        model: g,
        adapter: adapter_grads,
    }
}

/// `params -= lr * grads`, refusing non-finite gradients.
pub fn apply_gradient<T: Scalar, P: ParamSet<T>>(params: &mut P, grads: &P, lr: f64) -> Result<()> {
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradient contains NaN or infinity".into()));
    }
    params.axpy(-T::from_f64_lossy(lr), grads);
    Ok(())
}

/// One plain SGD step on the closed-vocabulary loss. Returns the loss before
/// the step.
pub fn sgd_step<T: Scalar>(
    params: &mut ModelParams<T>,
    config: &ModelConfig,
    vocab: &Vocabulary,
    batch: &[TokenizedSentence],
    lr: f64,
) -> Result<T> {
    if !(lr >= 0.0) {
        return Err(Error::Config(format!("learning rate must be non-negative, got {lr}")));
    }
    let lg = loss_and_grad(params, config, vocab, Head::Closed, batch);
    if !lg.loss.is_finite() {
        return Err(Error::NonFinite(format!("loss is {}", lg.loss)));
    }
    apply_gradient(params, &lg.model, lr)?;
    Ok(lg.loss)
}

/// Evaluation-time scorer over fixed parameters with optional OOV expansion.
pub struct Scorer<'a, T: Scalar> {
    params: &'a ModelParams<T>,
    config: &'a ModelConfig,
    vocab: &'a Vocabulary,
    oov: Option<(&'a OovList, Tensor<T>)>,
    cache: RefCell<EmbeddingCache<T>>,
}

impl<'a, T: Scalar> Scorer<'a, T> {
    pub fn new(params: &'a ModelParams<T>, config: &'a ModelConfig, vocab: &'a Vocabulary, head: Head<'a, T>) -> Self {
        let mut cache = EmbeddingCache::new();
        let oov = head.oov().map(|list| {
            let mut raw = Tensor::zeros(&[list.len(), config.hidden_dim]);
            for (i, w) in list.words.iter().enumerate() {
                raw.row_mut(i).copy_from_slice(cache.get(params, config, w));
            }
            let adapted = match head {
                Head::Expanded {
                    adapter: Some(a), ..
                } => crate::adapter::adapt_embeddings(&raw, a),
                _ => raw,
            };
            (list, adapted)
        });
        Self {
            params,
            config,
            vocab,
            oov,
            cache: RefCell::new(cache),
        }
    }

    /// Joined (vocabulary then OOV) pre-softmax scores for every position of
    /// `sentence`.
    pub fn score_rows(&self, sentence: &[String]) -> Vec<Vec<T>> {
        let n = sentence.len();
        if n == 0 {
            return Vec::new();
        }
        let states = hidden_states(
            &sentence[..n - 1],
            self.params,
            self.config,
            self.vocab,
            &mut self.cache.borrow_mut(),
        );
        states
            .iter()
            .map(|h| {
                let mut s = decode(self.params, h);
                if let Some((_, adapted)) = &self.oov {
                    s.extend(crate::adapter::oov_scores(std::slice::from_ref(h), adapted).remove(0));
                }
                s
            })
            .collect()
    }

    /// Top-`k` suggested words for every position of `sentence`.
    pub fn top_k_rows(&self, sentence: &[String], k: usize) -> Vec<Vec<String>> {
        let v = self.vocab.len();
        self.score_rows(sentence)
            .iter()
            .map(|row| {
                top_k_indices(row, k, |i| i < v && self.vocab.is_special(i))
                    .into_iter()
                    .map(|i| match &self.oov {
                        Some((list, _)) if i >= v => list.words[i - v].clone(),
                        _ => self.vocab.token(i).to_owned(),
                    })
                    .collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    fn tiny() -> (ModelConfig, Vocabulary) {
        let vocab = Vocabulary::from_words(["the", "cat", "sat"]).unwrap();
        let config = ModelConfig {
            char_dim: 3,
            hidden_dim: 4,
            kernel_width: 2,
            lstm_layers: 2,
            vocab_size: vocab.len(),
            max_word_bytes: 5,
        };
        (config, vocab)
    }

    #[test]
    fn top_k_rules() {
        let scores = [0.1f64, 0.9, 0.5, 0.7, 0.2, 0.3, 0.4, 0.7];
        assert_eq!(top_k_indices(&scores, 1, |_| false), vec![1]);
        assert_eq!(top_k_indices(&scores, 1, |i| i == 1), vec![3]);
        // Tie between 3 and 7 at the last slot: the lower index wins.
        assert_eq!(top_k_indices(&scores, 2, |_| false), vec![1, 3]);
        assert_eq!(top_k_indices(&scores, 3, |_| false), vec![1, 3, 7]);
        assert!(top_k_indices(&scores, 0, |_| false).is_empty());
    }

    #[test]
    fn empty_sentence_has_no_rows() {
        let (c, v) = tiny();
        let p = ModelParams::<f64>::init(&c, 0);
        assert!(forward(&TokenizedSentence::default(), &p, &c, &v).is_empty());
    }

    #[test]
    fn forward_is_causal_and_deterministic() {
        let (c, v) = tiny();
        let p = ModelParams::<f64>::init(&c, 0);
        let short = forward(&tokenize("the cat"), &p, &c, &v);
        let long = forward(&tokenize("the cat sat zzz the"), &p, &c, &v);
        assert_eq!(short.len(), 2);
        assert_eq!(long.len(), 5);
        assert_eq!(&long[..2], &short[..]);
        assert_eq!(forward(&tokenize("the cat"), &p, &c, &v), short);
    }

    #[test]
    fn uniform_scores_give_log_v() {
        let (c, v) = tiny();
        let mut p = ModelParams::<f64>::init(&c, 0);
        p.decoder_weight.fill_zero();
        p.decoder_bias.fill_zero();
        let loss = nll_loss(&[tokenize("the cat qq")], &p, &c, &v);
        assert!((loss - (v.len() as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn huge_margin_gives_near_zero_loss() {
        let (c, v) = tiny();
        let mut p = ModelParams::<f64>::init(&c, 0);
        p.decoder_weight.fill_zero();
        p.decoder_bias.fill_zero();
        p.decoder_bias.data[v.lookup("cat").unwrap()] = 1e3;
        assert!(nll_loss(&[tokenize("cat cat")], &p, &c, &v) < 1e-12);
    }

    #[test]
    fn predict_skips_specials() {
        let (c, v) = tiny();
        let mut p = ModelParams::<f64>::init(&c, 0);
        p.decoder_weight.fill_zero();
        p.decoder_bias.data = vec![0.0, 0.5, 0.2, 9.0, 8.0, 7.0];
        let got = predict_topk(&[], 2, &p, &c, &v, None);
        assert_eq!(got, vec!["cat", "sat"]);
        let list = OovList {
            words: vec!["zz".into()],
            counts: vec![1],
        };
        let got = predict_topk(&[], 2, &p, &c, &v, Some((&[0.3][..], &list)));
        assert_eq!(got, vec!["cat", "zz"]);
    }

    #[test]
    fn scorer_matches_forward() {
        let (c, v) = tiny();
        let p = ModelParams::<f64>::init(&c, 4);
        let s = tokenize("the zzz cat sat");
        let scorer = Scorer::new(&p, &c, &v, Head::Closed);
        assert_eq!(scorer.score_rows(&s.words), forward(&s, &p, &c, &v));
    }

    #[test]
    fn zero_gradient_step_is_a_fixed_point() {
        let (c, v) = tiny();
        let mut p = ModelParams::<f64>::init(&c, 1);
        let before = p.clone();
        sgd_step(&mut p, &c, &v, &[TokenizedSentence::default()], 0.5).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn identical_steps_are_identical() {
        let (c, v) = tiny();
        let batch = [tokenize("the cat sat"), tokenize("cat qq the")];
        let mut a = ModelParams::<f32>::init(&c, 2);
        let mut b = a.clone();
        sgd_step(&mut a, &c, &v, &batch, 0.1).unwrap();
        sgd_step(&mut b, &c, &v, &batch, 0.1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_gradients_abort() {
        let (c, v) = tiny();
        let mut p = ModelParams::<f64>::init(&c, 1);
        p.decoder_bias.data[0] = f64::NAN;
        assert!(matches!(
            sgd_step(&mut p, &c, &v, &[tokenize("the cat")], 0.1),
            Err(Error::NonFinite(_))
        ));
    }
}
