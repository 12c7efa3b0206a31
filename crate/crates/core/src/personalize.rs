//! Per-client fine-tuning of the global model under the three OOV
//! strategies, with grid search over learning rate (and adapter shape and
//! init scale for expansion) and early stopping on the validation segment.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{adapter_param_count, init_adapter, AdapterConfig, AdapterParams, HIDDEN_DIMS_GRID, SIGMA_GRID};
use crate::corpus::{ClientDataset, FederatedCorpus, Pool, Segment, TokenizedSentence};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_client, ClientMetrics, MetricsReport};
use crate::model::{apply_gradient, loss_and_grad, param_count, Head, ModelConfig, ModelParams, Scorer};
use crate::scalar::Scalar;
use crate::training::shuffled_batches;
use crate::util::derive_seed;
use crate::vocab::{client_top_oov, OovList, Vocabulary};

pub const LR_GRID: [f64; 6] = [1e-4, 1e-3, 1e-2, 0.1, 1.0, 10.0];
pub const MAX_OOV: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    OovAsUnk,
    OovOracle,
    OovExpansion,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::OovAsUnk, Strategy::OovOracle, Strategy::OovExpansion];

    pub fn short_name(self) -> &'static str {
        match self {
            Strategy::OovAsUnk => "as-unk",
            Strategy::OovOracle => "oracle",
            Strategy::OovExpansion => "expansion",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as-unk" | "oov_as_unk" => Ok(Strategy::OovAsUnk),
            "oracle" | "oov_oracle" => Ok(Strategy::OovOracle),
            "expansion" | "oov_expansion" => Ok(Strategy::OovExpansion),
            _ => Err(Error::Config(format!("unknown strategy {s:?} (expected as-unk, oracle or expansion)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PersonalizationConfig {
    pub strategy: Strategy,
    pub n_oov: usize,
    pub lr_grid: Vec<f64>,
    pub sigma_grid: Vec<f64>,
    pub hidden_dims_grid: Vec<Vec<usize>>,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Train only the adapter during expansion.
    pub freeze_base: bool,
    /// Expansion without an adapter: OOV output embeddings are the raw
    /// CharCNN embeddings.
    pub identity_adapter: bool,
    pub seed: u64,
}

impl Default for PersonalizationConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::OovAsUnk,
            n_oov: MAX_OOV,
            lr_grid: LR_GRID.to_vec(),
            sigma_grid: SIGMA_GRID.to_vec(),
            hidden_dims_grid: HIDDEN_DIMS_GRID.iter().map(|h| h.to_vec()).collect(),
            max_epochs: 10,
            patience: 1,
            batch_size: 8,
            freeze_base: false,
            identity_adapter: false,
            seed: 0,
        }
    }
}

impl PersonalizationConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_oov > MAX_OOV {
            return fail(format!("n_oov {} exceeds {MAX_OOV}", self.n_oov));
        }
        if self.lr_grid.is_empty() || self.lr_grid.iter().any(|&lr| !(lr >= 0.0 && lr.is_finite())) {
            return fail(format!("invalid lr grid {:?}", self.lr_grid));
        }
        if self.max_epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return fail("max_epochs, patience and batch_size must be positive".into());
        }
        if self.uses_adapter() && (self.sigma_grid.is_empty() || self.hidden_dims_grid.is_empty()) {
            return fail("expansion needs non-empty sigma and hidden-dims grids".into());
        }
        Ok(())
    }

    fn uses_adapter(&self) -> bool {
        self.strategy == Strategy::OovExpansion && !self.identity_adapter
    }

    /// Grid points in tie-break order: smaller lr, then smaller sigma, then
    /// shorter (then lexicographically smaller) hidden dims.
    pub fn grid(&self) -> Vec<GridPoint> {
        let mut lrs = self.lr_grid.clone();
        lrs.sort_by(f64::total_cmp);
        lrs.dedup();
        if !self.uses_adapter() {
            return lrs.into_iter().map(|lr| GridPoint { lr, sigma: None, hidden_dims: None }).collect();
        }
        let mut sigmas = self.sigma_grid.clone();
        sigmas.sort_by(f64::total_cmp);
        sigmas.dedup();
        let mut hs = self.hidden_dims_grid.clone();
        hs.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
        hs.dedup();
        let mut out = Vec::new();
        for &lr in &lrs {
            for &sigma in &sigmas {
                for h in &hs {
                    out.push(GridPoint {
                        lr,
                        sigma: Some(sigma),
                        hidden_dims: Some(h.clone()),
                    });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_dims: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientResult {
    pub client_id: String,
    pub strategy: Strategy,
    /// `None` when the client was returned unmodified.
    pub chosen: Option<GridPoint>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub val_emr3: f64,
    pub before: ClientMetrics,
    pub after: ClientMetrics,
    pub oov_list_size: usize,
    pub param_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
}

impl ClientResult {
    pub fn emr3_before(&self) -> f64 {
        self.before.emr_k.get(&3).copied().unwrap_or(0.0)
    }

    pub fn emr3_after(&self) -> f64 {
        self.after.emr_k.get(&3).copied().unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PersonalizedModel<T> {
    pub params: ModelParams<T>,
    pub adapter: Option<(AdapterConfig, AdapterParams<T>)>,
    pub oov: Option<OovList>,
}

impl<T: Scalar> PersonalizedModel<T> {
    pub fn head(&self) -> Head<'_, T> {
        match &self.oov {
            Some(oov) => Head::Expanded {
                oov,
                adapter: self.adapter.as_ref().map(|(_, a)| a),
            },
            None => Head::Closed,
        }
    }
}

/// Cutoffs at which metrics are reported.
pub const REPORT_KS: [usize; 3] = [1, 3, 5];

fn evaluate<T: Scalar>(
    id: &str,
    data: &[TokenizedSentence],
    params: &ModelParams<T>,
    config: &ModelConfig,
    vocab: &Vocabulary,
    head: Head<'_, T>,
    ks: &[usize],
) -> ClientMetrics {
    let extra = head.oov();
    let scorer = Scorer::new(params, config, vocab, head);
    evaluate_client(id, data, &scorer, vocab, extra, ks)
}

fn emr3<T: Scalar>(
    data: &[TokenizedSentence],
    params: &ModelParams<T>,
    config: &ModelConfig,
    vocab: &Vocabulary,
    head: Head<'_, T>,
) -> f64 {
    evaluate("", data, params, config, vocab, head, &[3]).emr_k[&3]
}

fn head<'a, T>(oov: Option<&'a OovList>, adapter: Option<&'a AdapterParams<T>>) -> Head<'a, T> {
    match oov {
        Some(oov) => Head::Expanded { oov, adapter },
        None => Head::Closed,
    }
}

/// Outcome of early-stopped training at one grid point.
struct Trial<T> {
    params: ModelParams<T>,
    adapter: Option<AdapterParams<T>>,
    val_emr3: f64,
    best_epoch: usize,
    epochs_run: usize,
}

/// Keeps the best epoch; stops once `patience` consecutive epochs fail to
/// improve on it.
#[derive(Clone, Debug, Default)]
pub struct EarlyStopping {
    pub best: Option<(usize, f64)>,
    stale: usize,
    patience: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            best: None,
            stale: 0,
            patience,
        }
    }

    /// Records the validation score of `epoch`; returns whether it is the new
    /// best.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        match self.best {
            Some((_, b)) if score <= b => {
                self.stale += 1;
                false
            }
            _ => {
                self.best = Some((epoch, score));
                self.stale = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}

#[allow(clippy::too_many_arguments)]
fn run_trial<T: Scalar>(
    global: &ModelParams<T>,
    config: &ModelConfig,
    vocab: &Vocabulary,
    train: &[TokenizedSentence],
    val: &[TokenizedSentence],
    oov: Option<&OovList>,
    point: &GridPoint,
    pc: &PersonalizationConfig,
    seed: u64,
) -> Result<Option<Trial<T>>> {
    let mut params = global.clone();
    let mut adapter = match (&point.hidden_dims, point.sigma) {
        (Some(h), Some(sigma)) => Some(init_adapter::<T>(
            &AdapterConfig {
                hidden_dims: h.clone(),
                init_sigma: sigma,
                io_dim: config.hidden_dim,
            },
            derive_seed(seed, "adapter-init", ""),
        )?),
        _ => None,
    };
    let train_base = !(pc.freeze_base && oov.is_some());
    let mut stopper = EarlyStopping::new(pc.patience);
    // The untouched model competes as epoch 0, so training is only kept when
    // it beats it on validation.
    stopper.observe(0, emr3(val, &params, config, vocab, head(oov, adapter.as_ref())));
    let mut best = Some((params.clone(), adapter.clone()));
    let mut epochs_run = 0;
    'epochs: for epoch in 1..=pc.max_epochs {
        for idx in shuffled_batches(train.len(), pc.batch_size, derive_seed(seed, "epoch", &epoch.to_string())) {
            let batch: Vec<TokenizedSentence> = idx.iter().map(|&i| train[i].clone()).collect();
            let lg = loss_and_grad(&params, config, vocab, head(oov, adapter.as_ref()), &batch);
            let step = (|| -> Result<()> {
                if !lg.loss.is_finite() {
                    return Err(Error::NonFinite(format!("loss {}", lg.loss)));
                }
                if train_base {
                    apply_gradient(&mut params, &lg.model, point.lr)?;
                }
                if let (Some(a), Some(g)) = (adapter.as_mut(), lg.adapter.as_ref()) {
                    apply_gradient(a, g, point.lr)?;
                }
                Ok(())
            })();
            if let Err(e) = step {
                log::debug!("grid point {point:?} diverged in epoch {epoch}: {e}");
                break 'epochs;
            }
        }
        epochs_run = epoch;
        let score = emr3(val, &params, config, vocab, head(oov, adapter.as_ref()));
        if stopper.observe(epoch, score) {
            best = Some((params.clone(), adapter.clone()));
        }
        if stopper.should_stop() {
            break;
        }
    }
    Ok(match (best, stopper.best) {
        (Some((params, adapter)), Some((best_epoch, val_emr3))) => Some(Trial {
            params,
            adapter,
            val_emr3,
            best_epoch,
            epochs_run,
        }),
        _ => None,
    })
}

/// Personalizes one test client on its own segments. `global` and `vocab`
/// are the expanded oracle model and vocabulary under the oracle strategy.
pub fn personalize_client<T: Scalar>(
    global: &ModelParams<T>,
    config: &ModelConfig,
    vocab: &Vocabulary,
    client: &ClientDataset,
    pc: &PersonalizationConfig,
) -> Result<(PersonalizedModel<T>, ClientResult)> {
    pc.validate()?;
    config.check_vocab(vocab)?;
    if client.segments.is_none() {
        return Err(Error::InvalidInput(format!(
            "client {} has no personalization segments",
            client.client_id
        )));
    }
    let id = client.client_id.as_str();
    let train = client.segment(Segment::PersonalizeTrain);
    let val = client.segment(Segment::PersonalizeVal);
    let test = client.segment(Segment::PersonalizeTest);
    let seed = derive_seed(pc.seed, "personalize", id);

    let oov = (pc.strategy == Strategy::OovExpansion).then(|| client_top_oov(client, vocab, pc.n_oov));
    let before = evaluate(id, &test, global, config, vocab, Head::Closed, &REPORT_KS);
    let unmodified = |flag: &str, oov: Option<OovList>| {
        let model = PersonalizedModel {
            params: global.clone(),
            adapter: None,
            oov,
        };
        let after = evaluate(id, &test, &model.params, config, vocab, model.head(), &REPORT_KS);
        let result = ClientResult {
            client_id: id.to_owned(),
            strategy: pc.strategy,
            chosen: None,
            epochs_run: 0,
            best_epoch: 0,
            val_emr3: emr3(&val, &model.params, config, vocab, model.head()),
            before: before.clone(),
            after,
            oov_list_size: model.oov.as_ref().map_or(0, OovList::len),
            param_count: param_count(config),
            flag: Some(flag.to_owned()),
        };
        (model, result)
    };
    if train.is_empty() {
        log::warn!("client {id}: empty personalization train segment, returning the global model");
        return Ok(unmodified("empty_personalize_train", None));
    }

    let mut winner: Option<(GridPoint, Trial<T>)> = None;
    for (i, point) in pc.grid().into_iter().enumerate() {
        let trial_seed = derive_seed(seed, "grid", &i.to_string());
        let Some(trial) = run_trial(global, config, vocab, &train, &val, oov.as_ref(), &point, pc, trial_seed)? else {
            continue;
        };
        if winner.as_ref().is_none_or(|(_, w)| trial.val_emr3 > w.val_emr3) {
            winner = Some((point, trial));
        }
    }
    let Some((point, trial)) = winner else {
        log::warn!("client {id}: every grid point diverged, returning the global model");
        return Ok(unmodified("all_grid_points_diverged", oov));
    };
    let adapter = match (&point.hidden_dims, point.sigma, trial.adapter) {
        (Some(h), Some(sigma), Some(a)) => Some((
            AdapterConfig {
                hidden_dims: h.clone(),
                init_sigma: sigma,
                io_dim: config.hidden_dim,
            },
            a,
        )),
        _ => None,
    };
    let model = PersonalizedModel {
        params: trial.params,
        adapter,
        oov,
    };
    let after = evaluate(id, &test, &model.params, config, vocab, model.head(), &REPORT_KS);
    let result = ClientResult {
        client_id: id.to_owned(),
        strategy: pc.strategy,
        chosen: Some(point),
        epochs_run: trial.epochs_run,
        best_epoch: trial.best_epoch,
        val_emr3: trial.val_emr3,
        before,
        after,
        oov_list_size: model.oov.as_ref().map_or(0, OovList::len),
        param_count: param_count(config) + model.adapter.as_ref().map_or(0, |(c, _)| adapter_param_count(c)),
        flag: None,
    };
    Ok((model, result))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationReport {
    pub strategy: Strategy,
    pub results: Vec<ClientResult>,
    pub before: MetricsReport,
    pub after: MetricsReport,
    /// Degenerate test clients left out of personalization and aggregates.
    pub skipped: Vec<String>,
}

/// Called once per personalized client, possibly from several threads.
pub type ClientSink<'a, T> = dyn Fn(&ClientResult, &PersonalizedModel<T>) -> Result<()> + Sync + 'a;

/// Personalizes every non-degenerate test client independently, then
/// aggregates before/after metrics token-weighted in client-id order.
pub fn personalize_all<T: Scalar>(
    global: &ModelParams<T>,
    config: &ModelConfig,
    vocab: &Vocabulary,
    corpus: &FederatedCorpus,
    pc: &PersonalizationConfig,
    sink: Option<&ClientSink<'_, T>>,
) -> Result<PersonalizationReport> {
    pc.validate()?;
    let (clients, degenerate): (Vec<&ClientDataset>, Vec<&ClientDataset>) =
        corpus.pool(Pool::Test).partition(|c| !c.degenerate && c.segments.is_some());
    if clients.is_empty() {
        return Err(Error::InvalidInput("no non-degenerate test clients".into()));
    }
    let mut results = clients
        .par_iter()
        .map(|client| {
            let (model, result) = personalize_client(global, config, vocab, client, pc)?;
            if let Some(sink) = sink {
                sink(&result, &model)?;
            }
            Ok(result)
        })
        .collect::<Result<Vec<ClientResult>>>()?;
    results.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    Ok(PersonalizationReport {
        strategy: pc.strategy,
        before: MetricsReport::from_clients(results.iter().map(|r| r.before.clone()).collect()),
        after: MetricsReport::from_clients(results.iter().map(|r| r.after.clone()).collect()),
        skipped: degenerate.iter().map(|c| c.client_id.clone()).collect(),
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_keeps_best_epoch() {
        let mut s = EarlyStopping::new(1);
        let mut ran = 0;
        for (epoch, v) in [0.20, 0.25, 0.24, 0.30].into_iter().enumerate() {
            ran = epoch + 1;
            s.observe(epoch + 1, v);
            if s.should_stop() {
                break;
            }
        }
        assert_eq!(ran, 3);
        assert_eq!(s.best, Some((2, 0.25)));
    }

    #[test]
    fn baseline_wins_when_training_never_improves() {
        let mut s = EarlyStopping::new(1);
        s.observe(0, 0.30);
        assert!(!s.should_stop());
        s.observe(1, 0.28);
        assert!(s.should_stop());
        assert_eq!(s.best, Some((0, 0.30)));
    }

    #[test]
    fn equal_score_counts_as_no_improvement() {
        let mut s = EarlyStopping::new(1);
        assert!(s.observe(1, 0.0));
        assert!(!s.observe(2, 0.0));
        assert!(s.should_stop());
        assert_eq!(s.best, Some((1, 0.0)));
    }

    #[test]
    fn grid_order_and_sizes() {
        let pc = PersonalizationConfig::default();
        assert_eq!(pc.grid().len(), 6);
        let ex = PersonalizationConfig {
            strategy: Strategy::OovExpansion,
            lr_grid: vec![1.0, 0.1],
            sigma_grid: vec![0.1, 0.0],
            hidden_dims_grid: vec![vec![128, 256, 128], vec![960]],
            ..PersonalizationConfig::default()
        };
        let g = ex.grid();
        assert_eq!(g.len(), 8);
        assert_eq!(g[0], GridPoint { lr: 0.1, sigma: Some(0.0), hidden_dims: Some(vec![960]) });
        assert_eq!(g[1].hidden_dims, Some(vec![128, 256, 128]));
        assert_eq!(g[2].sigma, Some(0.1));
        assert_eq!(g[4].lr, 1.0);
        let full = PersonalizationConfig {
            strategy: Strategy::OovExpansion,
            ..PersonalizationConfig::default()
        };
        assert_eq!(full.grid().len(), 6 * 7 * 3);
        let identity = PersonalizationConfig { identity_adapter: true, ..full };
        assert!(identity.grid().iter().all(|p| p.sigma.is_none()));
    }

    #[test]
    fn config_validation() {
        assert!(PersonalizationConfig::default().validate().is_ok());
        let bad = PersonalizationConfig { n_oov: 1001, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = PersonalizationConfig {
            strategy: Strategy::OovExpansion,
            sigma_grid: vec![],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.short_name().parse::<Strategy>().unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(serde_json::from_str::<Strategy>(&json).unwrap(), s);
        }
        assert_eq!(serde_json::to_string(&Strategy::OovAsUnk).unwrap(), "\"oov_as_unk\"");
        assert!("unk".parse::<Strategy>().is_err());
    }
}
