//! End-to-end properties of local training, federated rounds and
//! per-client personalization on small synthetic corpora.

use fedvocab::corpus::{generate_synthetic, FederatedCorpus, Pool, PoolRatios, SyntheticConfig};
use fedvocab::fedsim::{local_update, run_fl, FlConfig};
use fedvocab::model::{loss_and_grad, nll_loss, sgd_step, Head, ModelConfig, ModelParams};
use fedvocab::personalize::{personalize_all, personalize_client, PersonalizationConfig, Strategy};
use fedvocab::tensor::ParamSet;
use fedvocab::vocab::{build_vocab_with, ranked_counts, rank_frequency_slope, oov_rate, Vocabulary};

fn small() -> (FederatedCorpus, Vocabulary, ModelConfig) {
    let syn = SyntheticConfig {
        n_clients: 24,
        shared_vocab_size: 40,
        tail_size_per_client: 4,
        sentences_per_client: 30,
        sentence_length_range: (3, 7),
        private_weight: 0.15,
        seed: 9,
        ..SyntheticConfig::default()
    };
    let corpus = generate_synthetic(&syn, 1, PoolRatios([0.5, 0.2, 0.3])).unwrap().corpus;
    let vocab = build_vocab_with(&corpus, 40, 2).unwrap();
    let config = ModelConfig {
        char_dim: 3,
        hidden_dim: 5,
        kernel_width: 2,
        lstm_layers: 1,
        vocab_size: vocab.len(),
        max_word_bytes: 10,
    };
    (corpus, vocab, config)
}

fn fl() -> FlConfig {
    FlConfig {
        clients_per_round: 4,
        local_batch_size: 8,
        global_epochs: 1,
        client_lr: 0.3,
        server_lr: 0.01,
        seed: 5,
        ..FlConfig::default()
    }
}

fn max_abs<T: ParamSet<f64>>(p: &T) -> f64 {
    p.tensors().iter().flat_map(|t| t.data.iter()).fold(0.0f64, |m, x| m.max(x.abs()))
}

#[test]
fn zero_client_lr_gives_zero_delta() {
    let (corpus, vocab, config) = small();
    let global = ModelParams::<f64>::init(&config, 1);
    let client = corpus.pool(Pool::Train).next().unwrap();
    let cfg = FlConfig { client_lr: 0.0, ..fl() };
    let up = local_update(&global, client, &config, &vocab, &cfg, 3).unwrap();
    assert_eq!(max_abs(&up.delta), 0.0);
    assert_eq!(up.weight, client.token_count() as u64);
}

#[test]
fn single_batch_delta_is_minus_lr_times_gradient() {
    let (corpus, vocab, config) = small();
    let global = ModelParams::<f64>::init(&config, 2);
    let client = corpus.pool(Pool::Train).next().unwrap();
    let cfg = FlConfig {
        local_batch_size: client.sentences.len(),
        client_lr: 0.2,
        ..fl()
    };
    let up = local_update(&global, client, &config, &vocab, &cfg, 3).unwrap();
    let grad = loss_and_grad(&global, &config, &vocab, Head::Closed, &client.sentences).model;
    for (d, g) in up.delta.tensors().iter().zip(grad.tensors()) {
        for (a, b) in d.data.iter().zip(&g.data) {
            assert!((a + 0.2 * b).abs() < 1e-12, "{a} vs {}", -0.2 * b);
        }
    }
}

#[test]
fn zero_global_epochs_keeps_initial_params() {
    let (corpus, vocab, config) = small();
    let init = ModelParams::<f64>::init(&config, 3);
    let out = run_fl(init.clone(), &corpus, &vocab, &config, &FlConfig { global_epochs: 0, ..fl() }).unwrap();
    assert!(out.logs.is_empty());
    assert_eq!(out.best_params, init);
    assert_eq!(out.best_val_emr, out.initial_val_emr);
}

#[test]
fn fl_is_deterministic_and_logs_every_round() {
    let (corpus, vocab, config) = small();
    let init = ModelParams::<f64>::init(&config, 4);
    let a = run_fl(init.clone(), &corpus, &vocab, &config, &fl()).unwrap();
    let b = run_fl(init, &corpus, &vocab, &config, &fl()).unwrap();
    assert_eq!(a.best_params, b.best_params);
    assert_eq!(a.state.global_params, b.state.global_params);
    let train = corpus.pool(Pool::Train).count();
    assert_eq!(a.logs.len(), train.div_ceil(4));
    for (i, log) in a.logs.iter().enumerate() {
        assert_eq!(log.round_index, i);
        assert_eq!(log.sampled.len(), 4);
        assert_eq!(log.mean_client_loss, b.logs[i].mean_client_loss);
    }
    assert!(a.best_val_emr >= a.initial_val_emr);
}

#[test]
fn repeated_steps_overfit_a_batch() {
    let (corpus, vocab, config) = small();
    let mut params = ModelParams::<f64>::init(&config, 5);
    let batch = &corpus.pool(Pool::Train).next().unwrap().sentences[..4];
    let start = nll_loss(batch, &params, &config, &vocab);
    for _ in 0..200 {
        sgd_step(&mut params, &config, &vocab, batch, 1.0).unwrap();
    }
    let end = nll_loss(batch, &params, &config, &vocab);
    assert!(end < 0.5 * start, "{start} -> {end}");
}

fn pc(strategy: Strategy) -> PersonalizationConfig {
    PersonalizationConfig {
        strategy,
        lr_grid: vec![0.1],
        sigma_grid: vec![0.1],
        hidden_dims_grid: vec![vec![4]],
        max_epochs: 2,
        ..PersonalizationConfig::default()
    }
}

#[test]
fn zero_lr_personalization_changes_nothing() {
    let (corpus, vocab, config) = small();
    let global = ModelParams::<f64>::init(&config, 6);
    let client = corpus.pool(Pool::Test).find(|c| !c.degenerate).unwrap();
    let cfg = PersonalizationConfig { lr_grid: vec![0.0], ..pc(Strategy::OovAsUnk) };
    let (model, result) = personalize_client(&global, &config, &vocab, client, &cfg).unwrap();
    assert_eq!(model.params, global);
    assert_eq!(result.before.emr_k, result.after.emr_k);
}

#[test]
fn clients_are_personalized_in_isolation() {
    let (corpus, vocab, config) = small();
    let global = ModelParams::<f64>::init(&config, 7);
    let cfg = pc(Strategy::OovExpansion);
    let full = personalize_all(&global, &config, &vocab, &corpus, &cfg, None).unwrap();

    let target = full.results[0].client_id.clone();
    let mut mutated = corpus.clone();
    for (id, c) in mutated.clients.iter_mut() {
        if c.pool == Pool::Test && *id != target {
            c.sentences.reverse();
            c.sentences.truncate(c.sentences.len() / 2 + 1);
        }
    }
    let again = personalize_all(&global, &config, &vocab, &mutated, &cfg, None).unwrap();
    let find = |r: &fedvocab::personalize::PersonalizationReport| {
        r.results.iter().find(|x| x.client_id == target).unwrap().clone()
    };
    let (a, b) = (find(&full), find(&again));
    assert_eq!(a.after.emr_k, b.after.emr_k);
    assert_eq!(a.chosen, b.chosen);
}

#[test]
fn one_client_aggregate_equals_its_own_metrics() {
    let (mut corpus, vocab, config) = small();
    let keep = corpus.pool(Pool::Test).find(|c| !c.degenerate).unwrap().client_id.clone();
    corpus.clients.retain(|id, c| c.pool != Pool::Test || *id == keep);
    let global = ModelParams::<f64>::init(&config, 8);
    let report = personalize_all(&global, &config, &vocab, &corpus, &pc(Strategy::OovAsUnk), None).unwrap();
    assert_eq!(report.results.len(), 1);
    assert_eq!(report.after.emr(3), report.results[0].after.emr_k[&3]);
    assert_eq!(report.before.emr(3), report.results[0].before.emr_k[&3]);
}

#[test]
fn generator_tail_matches_targets() {
    let syn = SyntheticConfig {
        n_clients: 60,
        shared_vocab_size: 5000,
        tail_size_per_client: 200,
        zipf_exponent: 1.1,
        sentences_per_client: 200,
        seed: 3,
        ..SyntheticConfig::default()
    };
    let out = generate_synthetic(&syn, 0, PoolRatios([0.5, 0.1, 0.4])).unwrap();
    let all: Vec<_> = out.corpus.clients.values().flat_map(|c| c.sentences.iter()).cloned().collect();
    // Shared words only, so the fitted exponent reflects the Zipf draw.
    let shared: std::collections::HashSet<&str> = out.shared_words.iter().map(String::as_str).collect();
    let ranked: Vec<_> = ranked_counts(&all).into_iter().filter(|(w, _)| shared.contains(w.as_str())).collect();
    let slope = rank_frequency_slope(&ranked, 1000);
    assert!((slope + syn.zipf_exponent).abs() < 0.15, "slope {slope}");

    let vocab = Vocabulary::from_words(out.shared_words.iter().cloned()).unwrap();
    let rate = oov_rate(&all, &vocab, None);
    assert!((rate - syn.private_weight).abs() < 0.03, "oov rate {rate}");
}
