//! Simulated federated training: per-round client sampling, local SGD on
//! each sampled client, token-weighted delta aggregation and a FedAdam
//! server update.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClientDataset, FederatedCorpus, Pool};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_client, MetricsReport};
use crate::model::{sgd_step, Head, ModelConfig, ModelParams, Scorer};
use crate::scalar::Scalar;
use crate::tensor::ParamSet;
use crate::training::shuffled_batches;
use crate::util::{derive_seed, div_ceil};
use crate::vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlConfig {
    pub clients_per_round: usize,
    pub local_epochs: usize,
    pub local_batch_size: usize,
    pub global_epochs: usize,
    pub client_lr: f64,
    pub server_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FlConfig {
    fn default() -> Self {
        Self {
            clients_per_round: 96,
            local_epochs: 1,
            local_batch_size: 8,
            global_epochs: 1,
            client_lr: 0.1,
            server_lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
            seed: 0,
        }
    }
}

/// Best learning rates found for the two baselines on the two public
/// benchmarks, with their global epoch counts.
pub fn preset(name: &str) -> Option<FlConfig> {
    let (client_lr, server_lr, global_epochs) = match name {
        "reddit-as-unk" => (0.840, 0.003, 6),
        "reddit-oracle" => (0.258, 0.004, 6),
        "stackoverflow-as-unk" => (0.168, 0.005, 3),
        "stackoverflow-oracle" => (0.129, 0.008, 3),
        _ => return None,
    };
    Some(FlConfig {
        client_lr,
        server_lr,
        global_epochs,
        ..FlConfig::default()
    })
}

pub const PRESETS: [&str; 4] = [
    "reddit-as-unk",
    "reddit-oracle",
    "stackoverflow-as-unk",
    "stackoverflow-oracle",
];

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.clients_per_round > 0
            && self.local_batch_size > 0
            && self.client_lr >= 0.0
            && self.server_lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid federated config: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerState<T> {
    pub global_params: ModelParams<T>,
    pub first_moment: ModelParams<T>,
    pub second_moment: ModelParams<T>,
    pub round_index: usize,
}

impl<T: Scalar> ServerState<T> {
    pub fn new(global_params: ModelParams<T>) -> Self {
        let mut zeros = global_params.clone();
        zeros.zero_all();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            global_params,
            round_index: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round_index: usize,
    pub epoch: usize,
    pub sampled: Vec<String>,
    pub dropped: Vec<String>,
    pub mean_client_loss: f64,
    pub wall_time_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_emr3: Option<f64>,
}

/// Uniform sample of `k` distinct ids.
pub fn sample_clients(pool: &[String], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<String>> {
    if k > pool.len() {
        return Err(Error::Config(format!(
            "cannot sample {k} clients from a pool of {}",
            pool.len()
        )));
    }
    Ok(rand::seq::index::sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect())
}

#[derive(Clone, Debug)]
pub struct ClientUpdate<T> {
    pub client_id: String,
    pub delta: ModelParams<T>,
    /// Token count of the client's data.
    pub weight: u64,
    pub mean_loss: f64,
}

/// Local SGD from the global parameters; returns `local - global`.
pub fn local_update<T: Scalar>(
    global: &ModelParams<T>,
    client: &ClientDataset,
    config: &ModelConfig,
    vocab: &Vocabulary,
    fl: &FlConfig,
    seed: u64,
) -> Result<ClientUpdate<T>> {
    if client.sentences.is_empty() {
        return Err(Error::InvalidInput(format!("client {} has no sentences", client.client_id)));
    }
    let mut local = global.clone();
    let mut losses = Vec::new();
    for epoch in 0..fl.local_epochs {
        let batches = shuffled_batches(
            client.sentences.len(),
            fl.local_batch_size,
            derive_seed(seed, "local-epoch", &epoch.to_string()),
        );
        for idx in batches {
            let batch: Vec<_> = idx.iter().map(|&i| client.sentences[i].clone()).collect();
            let loss = sgd_step(&mut local, config, vocab, &batch, fl.client_lr)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("client {} loss {loss}", client.client_id)));
            }
            losses.push(loss.to_f64_lossy());
        }
    }
    Ok(ClientUpdate {
        client_id: client.client_id.clone(),
        delta: local.difference(global),
        weight: client.token_count() as u64,
        mean_loss: if losses.is_empty() {
            0.0
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        },
    })
}

/// Token-weighted mean delta, reduced in ascending client-id order.
pub fn weighted_mean_delta<T: Scalar>(updates: &[ClientUpdate<T>]) -> Option<ModelParams<T>> {
    let mut sorted: Vec<&ClientUpdate<T>> = updates.iter().collect();
    sorted.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    let total: u64 = sorted.iter().map(|u| u.weight).sum();
    if sorted.is_empty() || total == 0 {
        return None;
    }
    let mut acc = sorted[0].delta.clone();
    acc.zero_all();
    for u in &sorted {
        acc.axpy(T::from_u64(u.weight).expect("weight fits the scalar type"), &u.delta);
    }
    let inv = T::one() / T::from_u64(total).expect("weight fits the scalar type");
    for t in acc.tensors_mut() {
        t.data.iter_mut().for_each(|x| *x = *x * inv);
    }
    Some(acc)
}

/// One FedAdam step on the pseudo-gradient `-mean(delta)` with bias
/// correction and decoupled weight decay. Returns false (and leaves the state
/// untouched) when no update carries weight.
pub fn server_step<T: Scalar>(state: &mut ServerState<T>, updates: &[ClientUpdate<T>], fl: &FlConfig) -> bool {
    let Some(mean) = weighted_mean_delta(updates) else {
        log::warn!("round {} has no surviving client updates; skipped", state.round_index);
        return false;
    };
    let c = |x: f64| T::from_f64_lossy(x);
    let t = (state.round_index + 1) as i32;
    let (b1, b2) = (fl.beta1, fl.beta2);
    let bc1 = c(1.0 - b1.powi(t));
    let bc2 = c(1.0 - b2.powi(t));
    let (lr, wd, eps) = (c(fl.server_lr), c(fl.weight_decay), c(fl.eps));
    let params = state.global_params.tensors_mut();
    let m = state.first_moment.tensors_mut();
    let v = state.second_moment.tensors_mut();
    for (((p, m), v), d) in params.into_iter().zip(m).zip(v).zip(mean.tensors()) {
        for i in 0..p.data.len() {
            let g = -d.data[i];
            m.data[i] = c(b1) * m.data[i] + c(1.0 - b1) * g;
            v.data[i] = c(b2) * v.data[i] + c(1.0 - b2) * g * g;
            let m_hat = m.data[i] / bc1;
            let v_hat = v.data[i] / bc2;
            p.data[i] = p.data[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * p.data[i]);
        }
    }
    state.round_index += 1;
    true
}

/// Token-weighted EMR over every sentence of every validation-pool client.
pub fn validation_report<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    vocab: &Vocabulary,
    clients: &[&ClientDataset],
    k: usize,
) -> MetricsReport {
    let per_client = clients
        .par_iter()
        .map(|c| {
            let scorer = Scorer::new(params, config, vocab, Head::Closed);
            evaluate_client(&c.client_id, &c.sentences, &scorer, vocab, None, &[k])
        })
        .collect();
    MetricsReport::from_clients(per_client)
}

#[derive(Clone, Debug)]
pub struct FlOutcome<T> {
    pub state: ServerState<T>,
    /// Parameters with the best validation EMR_3, the initial ones included.
    pub best_params: ModelParams<T>,
    pub best_val_emr: f64,
    pub initial_val_emr: f64,
    pub logs: Vec<RoundLog>,
}

pub fn rounds_per_epoch(train_clients: usize, clients_per_round: usize) -> usize {
    div_ceil(train_clients, clients_per_round)
}

/// Federated training from `init`. Client work within a round runs on the
/// current rayon pool; the result does not depend on its size.
pub fn run_fl<T: Scalar>(
    init: ModelParams<T>,
    corpus: &FederatedCorpus,
    vocab: &Vocabulary,
    config: &ModelConfig,
    fl: &FlConfig,
) -> Result<FlOutcome<T>> {
    fl.validate()?;
    config.check_vocab(vocab)?;
    let train: Vec<&ClientDataset> = corpus.pool(Pool::Train).filter(|c| !c.sentences.is_empty()).collect();
    if train.is_empty() {
        return Err(Error::Config("the train pool is empty".into()));
    }
    let ids: Vec<String> = train.iter().map(|c| c.client_id.clone()).collect();
    if fl.clients_per_round > ids.len() {
        return Err(Error::Config(format!(
            "clients_per_round {} exceeds the {} train clients",
            fl.clients_per_round,
            ids.len()
        )));
    }
    let val: Vec<&ClientDataset> = corpus.pool(Pool::Validation).collect();
    let per_epoch = rounds_per_epoch(ids.len(), fl.clients_per_round);
    let mut state = ServerState::new(init);
    let initial_val_emr = validation_report(&state.global_params, config, vocab, &val, 3).emr(3);
    let mut best_params = state.global_params.clone();
    let mut best_val_emr = initial_val_emr;
    let mut logs = Vec::new();

    for epoch in 0..fl.global_epochs {
        for r in 0..per_epoch {
            let round = epoch * per_epoch + r;
            let start = Instant::now();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(fl.seed, "round", &round.to_string()));
            let sampled = sample_clients(&ids, fl.clients_per_round, &mut rng)?;
            let global = &state.global_params;
            let results: Vec<(String, Result<ClientUpdate<T>>)> = sampled
                .par_iter()
                .map(|id| {
                    let client = corpus.clients.get(id).expect("sampled from the corpus");
                    let seed = derive_seed(fl.seed, &format!("client-round-{round}"), id);
                    (id.clone(), local_update(global, client, config, vocab, fl, seed))
                })
                .collect();
            let mut updates = Vec::new();
            let mut dropped = Vec::new();
            for (id, r) in results {
                match r {
                    Ok(u) => updates.push(u),
                    Err(e) => {
                        log::warn!("round {round}: dropping client {id}: {e}");
                        dropped.push(id);
                    }
                }
            }
            let mean_client_loss = if updates.is_empty() {
                f64::NAN
            } else {
                let mut sorted: Vec<&ClientUpdate<T>> = updates.iter().collect();
                sorted.sort_by(|a, b| a.client_id.cmp(&b.client_id));
                sorted.iter().map(|u| u.mean_loss).sum::<f64>() / sorted.len() as f64
            };
            server_step(&mut state, &updates, fl);
            logs.push(RoundLog {
                round_index: round,
                epoch,
                sampled,
                dropped,
                mean_client_loss,
                wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
                val_emr3: None,
            });
        }
        let emr = validation_report(&state.global_params, config, vocab, &val, 3).emr(3);
        if let Some(last) = logs.last_mut() {
            last.val_emr3 = Some(emr);
        }
        log::info!("federated epoch {epoch}: validation EMR_3 {emr:.4}");
        if emr > best_val_emr {
            best_val_emr = emr;
            best_params = state.global_params.clone();
        }
    }
    Ok(FlOutcome {
        state,
        best_params,
        best_val_emr,
        initial_val_emr,
        logs,
    })
}

/// Round logs as JSON lines.
pub fn round_logs_jsonl(logs: &[RoundLog]) -> Result<String> {
    let mut out = String::new();
    for l in logs {
        out.push_str(&serde_json::to_string(l)?);
        out.push('\n');
    }
    Ok(out)
}

/// Log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// Default server-side sweep: 8 client and 8 server learning rates,
/// log-spaced over `[1e-6, 0.05]` and `[1e-5, 1]`.
pub fn default_lr_grid() -> (Vec<f64>, Vec<f64>) {
    (log_grid(1e-6, 0.05, 8), log_grid(1e-5, 1.0, 8))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub client_lr: f64,
    pub server_lr: f64,
    pub best_val_emr3: f64,
}

/// Runs federated training for every `(client_lr, server_lr)` pair.
pub fn grid_search<T: Scalar>(
    init: &ModelParams<T>,
    corpus: &FederatedCorpus,
    vocab: &Vocabulary,
    config: &ModelConfig,
    base: &FlConfig,
    client_lrs: &[f64],
    server_lrs: &[f64],
) -> Result<Vec<GridPoint>> {
    let mut out = Vec::new();
    for &client_lr in client_lrs {
        for &server_lr in server_lrs {
            let fl = FlConfig {
                client_lr,
                server_lr,
                ..base.clone()
            };
            let outcome = run_fl(init.clone(), corpus, vocab, config, &fl)?;
            out.push(GridPoint {
                client_lr,
                server_lr,
                best_val_emr3: outcome.best_val_emr,
            });
        }
    }
    Ok(out)
}

/// The grid point with the highest validation EMR; earlier points win ties.
pub fn best_grid_point(points: &[GridPoint]) -> Option<&GridPoint> {
    points.iter().fold(None, |best: Option<&GridPoint>, p| match best {
        Some(b) if b.best_val_emr3 >= p.best_val_emr3 => Some(b),
        _ => Some(p),
    })
}
