//! End-to-end experiment plumbing shared by the command line and the
//! acceptance suite: configuration, corpus and vocabulary preparation,
//! global training and per-strategy personalization.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{generate_synthetic, load_corpus, FederatedCorpus, Pool, PoolRatios, SyntheticConfig, TokenizedSentence};
use crate::checkpoint::save_model;
use crate::error::{Error, Result};
use crate::fedsim::{round_logs_jsonl, run_fl, FlConfig, FlOutcome};
use crate::model::{ModelConfig, ModelParams};
use crate::personalize::{personalize_all, ClientSink, PersonalizationConfig, PersonalizationReport, Strategy};
use crate::scalar::Scalar;
use crate::training::{pretrain, PretrainConfig};
use crate::util::{derive_seed, write_atomic, write_json};
use crate::vocab::{build_vocab_with, expand_vocab_oracle, Vocabulary};

/// Prefix of environment variables that override configuration keys.
pub const ENV_PREFIX: &str = "FEDVOCAB_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSource {
    /// JSONL corpus; the generator is used when absent.
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
}

impl Default for CorpusSource {
    fn default() -> Self {
        Self {
            path: None,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus: CorpusSource,
    pub split_seed: u64,
    pub pool_ratios: [f64; 3],
    /// Closed vocabulary size in words, specials excluded.
    pub vocab_size: usize,
    /// Words used by fewer distinct train clients never enter the vocabulary.
    pub vocab_min_clients: usize,
    /// Extra words appended for the oracle vocabulary.
    pub oracle_extra_words: usize,
    /// `vocab_size` is filled in from the vocabulary.
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub fl: FlConfig,
    pub personalization: PersonalizationConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSource::default(),
            split_seed: 0,
            pool_ratios: PoolRatios::default().0,
            vocab_size: 5000,
            vocab_min_clients: 2,
            oracle_extra_words: 5000,
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            fl: FlConfig::default(),
            personalization: PersonalizationConfig::default(),
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Reseeds every stochastic stage from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.split_seed = derive_seed(seed, "split", "");
        self.corpus.synthetic.seed = derive_seed(seed, "generator", "");
        self.pretrain.seed = derive_seed(seed, "pretrain", "");
        self.fl.seed = derive_seed(seed, "fl", "");
        self.personalization.seed = derive_seed(seed, "personalize", "");
        self
    }

    pub fn ratios(&self) -> Result<PoolRatios> {
        let r = PoolRatios(self.pool_ratios);
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        self.ratios()?;
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        self.fl.validate()?;
        self.personalization.validate()
    }

    /// Reads a JSON config (defaults when `path` is `None`) and applies
    /// `FEDVOCAB_*` environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text)?
            }
            None => serde_json::to_value(Self::default())?,
        };
        apply_overrides(&mut value, std::env::vars())?;
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Applies `FEDVOCAB_A__B=value` pairs as `value` at key path `a.b`. Values
/// are parsed as JSON, falling back to a plain string.
pub fn apply_overrides(root: &mut Value, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(str::to_lowercase).collect();
        let parsed = serde_json::from_str(&raw).unwrap_or(Value::String(raw.clone()));
        let mut node = &mut *root;
        for (i, part) in path.iter().enumerate() {
            let Value::Object(map) = node else {
                return Err(Error::Config(format!("{key}: {} is not an object", path[..i].join("."))));
            };
            if i + 1 == path.len() {
                map.insert(part.clone(), parsed.clone());
                break;
            }
            node = map.entry(part.clone()).or_insert_with(|| Value::Object(Default::default()));
        }
    }
    Ok(())
}

/// The corpus plus, for generated corpora, every client's private tail.
#[derive(Clone, Debug)]
pub struct PreparedCorpus {
    pub corpus: FederatedCorpus,
    pub private_words: Option<std::collections::BTreeMap<String, Vec<String>>>,
}

pub fn prepare_corpus(cfg: &ExperimentConfig) -> Result<PreparedCorpus> {
    let ratios = cfg.ratios()?;
    match &cfg.corpus.path {
        Some(path) => Ok(PreparedCorpus {
            corpus: load_corpus(path, cfg.split_seed, ratios)?,
            private_words: None,
        }),
        None => {
            let s = generate_synthetic(&cfg.corpus.synthetic, cfg.split_seed, ratios)?;
            Ok(PreparedCorpus {
                corpus: s.corpus,
                private_words: Some(s.private_words),
            })
        }
    }
}

/// Closed vocabulary and its oracle expansion.
pub fn build_vocabularies(cfg: &ExperimentConfig, corpus: &FederatedCorpus) -> Result<(Vocabulary, Vocabulary)> {
    let closed = build_vocab_with(corpus, cfg.vocab_size, cfg.vocab_min_clients)?;
    let oracle = expand_vocab_oracle(&closed, corpus, cfg.oracle_extra_words)?;
    Ok((closed, oracle))
}

#[derive(Clone, Debug)]
pub struct GlobalModel<T> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    /// Best-by-validation parameters.
    pub params: ModelParams<T>,
    pub pretrain_losses: Vec<f64>,
    pub fl: FlOutcome<T>,
}

/// Initialization, centralized pretraining on the train-pool sentences and
/// federated training.
pub fn train_global<T: Scalar>(cfg: &ExperimentConfig, corpus: &FederatedCorpus, vocab: &Vocabulary) -> Result<GlobalModel<T>> {
    let config = ModelConfig {
        vocab_size: vocab.len(),
        ..cfg.model.clone()
    };
    config.validate()?;
    let mut params = ModelParams::init(&config, derive_seed(cfg.seed, "model-init", ""));
    let sentences: Vec<TokenizedSentence> = corpus
        .pool(Pool::Train)
        .flat_map(|c| c.sentences.iter().cloned())
        .collect();
    let pretrain_losses = pretrain(&mut params, &config, vocab, &sentences, &cfg.pretrain)?;
    let fl = run_fl(params, corpus, vocab, &config, &cfg.fl)?;
    Ok(GlobalModel {
        config,
        vocab: vocab.clone(),
        params: fl.best_params.clone(),
        pretrain_losses,
        fl,
    })
}

pub const BEST_DIR: &str = "best";
pub const FINAL_DIR: &str = "final";
pub const ROUND_LOG_FILE: &str = "round_logs.jsonl";
pub const FL_SUMMARY_FILE: &str = "fl_summary.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlSummary {
    pub rounds: usize,
    pub initial_val_emr3: f64,
    pub best_val_emr3: f64,
    pub pretrain_losses: Vec<f64>,
}

/// Writes the server-side artifacts of a global model: best and final
/// checkpoints, round logs and a summary.
pub fn save_global<T: Scalar>(dir: &Path, model: &GlobalModel<T>) -> Result<()> {
    save_model(&dir.join(BEST_DIR), &model.config, &model.params, &model.vocab)?;
    save_model(&dir.join(FINAL_DIR), &model.config, &model.fl.state.global_params, &model.vocab)?;
    write_atomic(&dir.join(ROUND_LOG_FILE), round_logs_jsonl(&model.fl.logs)?.as_bytes())?;
    write_json(
        &dir.join(FL_SUMMARY_FILE),
        &FlSummary {
            rounds: model.fl.logs.len(),
            initial_val_emr3: model.fl.initial_val_emr,
            best_val_emr3: model.fl.best_val_emr,
            pretrain_losses: model.pretrain_losses.clone(),
        },
    )
}

/// Runs `f` on a rayon pool of `jobs` threads, or the global pool when
/// `None`.
pub fn with_jobs<R: Send>(jobs: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match jobs {
        None => Ok(f()),
        Some(0) => Err(Error::Config("--jobs must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot build a {n}-thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Personalizes the test clients with `strategy`. `closed` serves as-unk and
/// expansion; `oracle` serves the oracle strategy.
pub fn personalize_strategy<T: Scalar>(
    cfg: &ExperimentConfig,
    corpus: &FederatedCorpus,
    closed: &GlobalModel<T>,
    oracle: Option<&GlobalModel<T>>,
    strategy: Strategy,
    identity_adapter: bool,
    sink: Option<&ClientSink<'_, T>>,
) -> Result<PersonalizationReport> {
    let global = match strategy {
        Strategy::OovOracle => oracle.ok_or_else(|| Error::Config("the oracle strategy needs the oracle model".into()))?,
        _ => closed,
    };
    let pc = PersonalizationConfig {
        strategy,
        identity_adapter,
        ..cfg.personalization.clone()
    };
    personalize_all(&global.params, &global.config, &global.vocab, corpus, &pc, sink)
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome<T> {
    pub corpus: PreparedCorpus,
    pub closed: GlobalModel<T>,
    pub oracle: Option<GlobalModel<T>>,
    pub reports: Vec<(String, PersonalizationReport)>,
}

/// A personalization run: strategy plus whether the adapter is replaced by
/// the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arm {
    pub strategy: Strategy,
    pub identity_adapter: bool,
}

impl Arm {
    pub fn label(&self) -> String {
        if self.identity_adapter {
            format!("{}-identity", self.strategy)
        } else {
            self.strategy.to_string()
        }
    }
}

/// Runs the whole pipeline for every arm.
pub fn run_experiment<T: Scalar>(cfg: &ExperimentConfig, arms: &[Arm]) -> Result<ExperimentOutcome<T>> {
    cfg.validate()?;
    let corpus = prepare_corpus(cfg)?;
    let (closed_vocab, oracle_vocab) = build_vocabularies(cfg, &corpus.corpus)?;
    let closed = train_global::<T>(cfg, &corpus.corpus, &closed_vocab)?;
    let oracle = if arms.iter().any(|a| a.strategy == Strategy::OovOracle) {
        Some(train_global::<T>(cfg, &corpus.corpus, &oracle_vocab)?)
    } else {
        None
    };
    let mut reports = Vec::new();
    for arm in arms {
        let report = personalize_strategy(cfg, &corpus.corpus, &closed, oracle.as_ref(), arm.strategy, arm.identity_adapter, None)?;
        reports.push((arm.label(), report));
    }
    Ok(ExperimentOutcome {
        corpus,
        closed,
        oracle,
        reports,
    })
}
