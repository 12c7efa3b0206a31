//! Autodiff gradients against central finite differences.

mod common;

use common::{batch, full_gradient_report, setup, MAX_REL_ERR};
use fedvocab::adapter::{init_adapter, AdapterParams};
use fedvocab::corpus::tokenize;
use fedvocab::model::{loss_and_grad, Head, ModelParams};
use fedvocab::tensor::ParamSet;

#[test]
fn all_heads_match_finite_differences() {
    let report = full_gradient_report();
    assert!(report.iter().any(|(n, _)| n.starts_with("expanded/adapter.")));
    for (name, err) in &report {
        println!("{name}: {err:.3e}");
        assert!(*err < MAX_REL_ERR, "{name}: {err}");
    }
}

#[test]
fn identity_block_has_no_adapter_gradient() {
    let (config, vocab, oov, _) = setup();
    let params = ModelParams::<f64>::init(&config, 13);
    let lg = loss_and_grad(&params, &config, &vocab, Head::Expanded { oov: &oov, adapter: None }, &batch());
    assert!(lg.adapter.is_none());
}

#[test]
fn oov_targets_train_the_adapter_not_unk() {
    let (config, vocab, oov, acfg) = setup();
    let params = ModelParams::<f64>::init(&config, 14);
    let adapter: AdapterParams<f64> = init_adapter(&acfg, 3).unwrap();
    // Only target is the OOV word "zq".
    let b = vec![tokenize("zq")];
    let lg = loss_and_grad(&params, &config, &vocab, Head::Expanded { oov: &oov, adapter: Some(&adapter) }, &b);
    let ag = lg.adapter.unwrap();
    assert!(ag.flat_values().iter().any(|&g| g != 0.0));
    // The [UNK] decoder bias gradient is softmax mass only (positive), never
    // the -1 of a target.
    let unk_bias_grad = lg.model.decoder_bias.data[vocab.unk()];
    assert!(unk_bias_grad > 0.0);
    let closed = loss_and_grad(&params, &config, &vocab, Head::Closed, &b);
    assert!(closed.model.decoder_bias.data[vocab.unk()] < 0.0);
}
