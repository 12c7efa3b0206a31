//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use fedvocab::adapter::{init_adapter, AdapterConfig, AdapterParams};
use fedvocab::corpus::{tokenize, TokenizedSentence};
use fedvocab::model::{head_loss, loss_and_grad, Head, ModelConfig, ModelParams};
use fedvocab::tensor::ParamSet;
use fedvocab::vocab::{OovList, Vocabulary};

pub const STEP: f64 = 1e-4;
pub const MAX_REL_ERR: f64 = 1e-4;
/// Denominator floor: coordinates whose true gradient is below this are
/// compared in absolute terms.
pub const FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

pub fn setup() -> (ModelConfig, Vocabulary, OovList, AdapterConfig) {
    let vocab = Vocabulary::from_words(["ab", "ba"]).unwrap();
    let config = ModelConfig {
        char_dim: 2,
        hidden_dim: 3,
        kernel_width: 2,
        lstm_layers: 1,
        vocab_size: vocab.len(),
        max_word_bytes: 4,
    };
    assert_eq!(config.vocab_size, 5);
    let oov = OovList {
        words: vec!["zq".into(), "qqz".into()],
        counts: vec![2, 1],
    };
    let adapter = AdapterConfig {
        hidden_dims: vec![2],
        init_sigma: 0.5,
        io_dim: 3,
    };
    (config, vocab, oov, adapter)
}

pub fn batch() -> Vec<TokenizedSentence> {
    vec![tokenize("ab zq ba ab"), tokenize("ba ab qqz zq xx"), tokenize("zq")]
}

/// Max relative error per named group, perturbing every coordinate.
pub fn check_model(head_of: impl Fn(&ModelParams<f64>) -> f64, params: &ModelParams<f64>, grads: &ModelParams<f64>) -> Vec<(String, f64)> {
    let names = params.names();
    let mut out = Vec::new();
    for (ti, name) in names.iter().enumerate() {
        let mut worst = 0.0f64;
        let len = params.tensors()[ti].len();
        for j in 0..len {
            let mut plus = params.clone();
            plus.tensors_mut()[ti].data[j] += STEP;
            let mut minus = params.clone();
            minus.tensors_mut()[ti].data[j] -= STEP;
            let numeric = (head_of(&plus) - head_of(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(grads.tensors()[ti].data[j], numeric));
        }
        out.push((name.clone(), worst));
    }
    out
}

/// Max relative error of every adapter group.
pub fn check_adapter(
    head_of: impl Fn(&AdapterParams<f64>) -> f64,
    adapter: &AdapterParams<f64>,
    grads: &AdapterParams<f64>,
) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (ti, name) in adapter.names().iter().enumerate() {
        let mut worst = 0.0f64;
        for j in 0..adapter.tensors()[ti].len() {
            let mut plus = adapter.clone();
            plus.tensors_mut()[ti].data[j] += STEP;
            let mut minus = adapter.clone();
            minus.tensors_mut()[ti].data[j] -= STEP;
            let numeric = (head_of(&plus) - head_of(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(grads.tensors()[ti].data[j], numeric));
        }
        out.push((name.clone(), worst));
    }
    out
}

/// Every parameter group of the closed head, the expanded head with an
/// adapter and the identity block, labelled by head.
pub fn full_gradient_report() -> Vec<(String, f64)> {
    let (config, vocab, oov, acfg) = setup();
    let b = batch();
    let mut out = Vec::new();

    let params = ModelParams::<f64>::init(&config, 11);
    let lg = loss_and_grad(&params, &config, &vocab, Head::Closed, &b);
    for (n, e) in check_model(|p| head_loss(p, &config, &vocab, Head::Closed, &b), &params, &lg.model) {
        out.push((format!("closed/{n}"), e));
    }

    let params = ModelParams::<f64>::init(&config, 12);
    let adapter: AdapterParams<f64> = init_adapter(&acfg, 3).unwrap();
    let head = Head::Expanded {
        oov: &oov,
        adapter: Some(&adapter),
    };
    let lg = loss_and_grad(&params, &config, &vocab, head, &b);
    for (n, e) in check_model(|p| head_loss(p, &config, &vocab, head, &b), &params, &lg.model) {
        out.push((format!("expanded/{n}"), e));
    }
    let ag = lg.adapter.expect("adapter gradients");
    let f = |a: &AdapterParams<f64>| head_loss(&params, &config, &vocab, Head::Expanded { oov: &oov, adapter: Some(a) }, &b);
    for (n, e) in check_adapter(f, &adapter, &ag) {
        out.push((format!("expanded/adapter.{n}"), e));
    }

    let params = ModelParams::<f64>::init(&config, 13);
    let head = Head::Expanded { oov: &oov, adapter: None };
    let lg = loss_and_grad(&params, &config, &vocab, head, &b);
    for (n, e) in check_model(|p| head_loss(p, &config, &vocab, head, &b), &params, &lg.model) {
        out.push((format!("identity/{n}"), e));
    }
    out
}
