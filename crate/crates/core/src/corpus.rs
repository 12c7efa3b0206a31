//! Federated text corpora: tokenization, client pools, per-client segments,
//! and a synthetic long-tail generator.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{stable_hash, unit_fraction};

/// A whitespace-tokenized sentence. Words are kept as surface forms.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenizedSentence {
    pub words: Vec<String>,
}

impl TokenizedSentence {
    pub fn new<S: Into<String>>(words: impl IntoIterator<Item = S>) -> Self {
        Self {
            words: words.into_iter().map(Into::into).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Words joined by single spaces.
    pub fn to_text(&self) -> String {
        self.words.join(" ")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerOptions {
    /// Lowercase every word. Off by default: the prediction target is the
    /// surface form.
    pub case_fold: bool,
}

pub fn tokenize(text: &str) -> TokenizedSentence {
    tokenize_with(text, TokenizerOptions::default())
}

pub fn tokenize_with(text: &str, options: TokenizerOptions) -> TokenizedSentence {
    let words = text.split_whitespace().map(|w| {
        if options.case_fold {
            w.to_lowercase()
        } else {
            w.to_owned()
        }
    });
    TokenizedSentence {
        words: words.collect(),
    }
}

/// Tokenizes raw bytes, rejecting anything that is not UTF-8.
pub fn tokenize_bytes(bytes: &[u8]) -> Result<TokenizedSentence> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| Error::InvalidInput(format!("text is not valid UTF-8: {e}")))?;
    Ok(tokenize(text))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    PersonalizeTrain,
    PersonalizeVal,
    PersonalizeTest,
}

/// Minimum sentence count for an 8:1:1 split; smaller test clients keep all
/// data for training and are left out of aggregates.
pub const MIN_SEGMENTED_SENTENCES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: String,
    pub sentences: Vec<TokenizedSentence>,
    pub pool: Pool,
    /// One label per sentence; present iff `pool == Pool::Test`.
    pub segments: Option<Vec<Segment>>,
    pub degenerate: bool,
}

impl ClientDataset {
    pub fn new(client_id: impl Into<String>, sentences: Vec<TokenizedSentence>, pool: Pool) -> Self {
        Self {
            client_id: client_id.into(),
            sentences,
            pool,
            segments: None,
            degenerate: false,
        }
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(TokenizedSentence::len).sum()
    }

    /// Sentences carrying the given segment label, in original order. Empty
    /// for unsegmented clients.
    pub fn segment(&self, segment: Segment) -> Vec<TokenizedSentence> {
        match &self.segments {
            Some(labels) => self
                .sentences
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == segment)
                .map(|(s, _)| s.clone())
                .collect(),
            None => Vec::new(),
        }
    }

    pub fn segment_counts(&self) -> (usize, usize, usize) {
        let labels = self.segments.as_deref().unwrap_or(&[]);
        let count = |seg| labels.iter().filter(|&&l| l == seg).count();
        (
            count(Segment::PersonalizeTrain),
            count(Segment::PersonalizeVal),
            count(Segment::PersonalizeTest),
        )
    }
}

/// Labels a test client's sentences in original order: the first ⌈0.8n⌉ for
/// training, the next ⌈0.1n⌉ for validation and the remainder for test.
pub fn segment_client(mut client: ClientDataset) -> ClientDataset {
    let n = client.sentences.len();
    if n < MIN_SEGMENTED_SENTENCES {
        client.segments = Some(vec![Segment::PersonalizeTrain; n]);
        client.degenerate = true;
        return client;
    }
    let n_train = (8 * n).div_ceil(10);
    let n_val = n.div_ceil(10);
    let labels = (0..n)
        .map(|i| {
            if i < n_train {
                Segment::PersonalizeTrain
            } else if i < n_train + n_val {
                Segment::PersonalizeVal
            } else {
                Segment::PersonalizeTest
            }
        })
        .collect();
    client.segments = Some(labels);
    client.degenerate = false;
    client
}

/// Fractions of clients assigned to the train, validation and test pools.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolRatios(pub [f64; 3]);

impl Default for PoolRatios {
    fn default() -> Self {
        PoolRatios([0.8, 0.1, 0.1])
    }
}

impl PoolRatios {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self> {
        let r = PoolRatios([train, validation, test]);
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.0.iter().sum();
        if self.0.iter().any(|r| !r.is_finite() || *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "pool ratios must be non-negative and sum to 1, got {:?}",
                self.0
            )));
        }
        Ok(())
    }

    /// Parses `"A,B,C"`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<f64> = text
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("bad pool ratio {p:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        match parts.as_slice() {
            &[a, b, c] => Self::new(a, b, c),
            _ => Err(Error::Config(format!(
                "expected three pool ratios, got {}",
                parts.len()
            ))),
        }
    }
}

/// Deterministic pool for a client: a seeded hash of its id bucketed by the
/// cumulative ratios.
pub fn assign_pool(client_id: &str, split_seed: u64, ratios: PoolRatios) -> Pool {
    let u = unit_fraction(stable_hash(&[
        b"pool",
        &split_seed.to_le_bytes(),
        client_id.as_bytes(),
    ]));
    let [train, val, _] = ratios.0;
    if u < train {
        Pool::Train
    } else if u < train + val {
        Pool::Validation
    } else {
        Pool::Test
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FederatedCorpus {
    pub clients: BTreeMap<String, ClientDataset>,
    pub provenance: BTreeMap<String, String>,
}

impl FederatedCorpus {
    /// Builds a corpus from per-client sentence lists, assigning pools and
    /// segmenting test clients.
    pub fn from_client_sentences(
        records: impl IntoIterator<Item = (String, Vec<TokenizedSentence>)>,
        split_seed: u64,
        ratios: PoolRatios,
    ) -> Result<Self> {
        ratios.validate()?;
        let mut clients = BTreeMap::new();
        for (id, sentences) in records {
            let pool = assign_pool(&id, split_seed, ratios);
            let mut client = ClientDataset::new(id.clone(), sentences, pool);
            if pool == Pool::Test {
                client = segment_client(client);
            }
            if clients.insert(id.clone(), client).is_some() {
                return Err(Error::InvalidInput(format!("duplicate client id {id}")));
            }
        }
        let mut provenance = BTreeMap::new();
        provenance.insert("split_seed".into(), split_seed.to_string());
        provenance.insert("pool_ratios".into(), format!("{:?}", ratios.0));
        Ok(Self {
            clients,
            provenance,
        })
    }

    pub fn pool(&self, pool: Pool) -> impl Iterator<Item = &ClientDataset> {
        self.clients.values().filter(move |c| c.pool == pool)
    }

    pub fn pool_ids(&self, pool: Pool) -> Vec<String> {
        self.pool(pool).map(|c| c.client_id.clone()).collect()
    }

    pub fn all_sentences(&self) -> impl Iterator<Item = &TokenizedSentence> {
        self.clients.values().flat_map(|c| c.sentences.iter())
    }

    /// JSONL serialization: one `{"client_id", "text"}` object per sentence,
    /// clients in id order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for client in self.clients.values() {
            for s in &client.sentences {
                let line = serde_json::json!({ "client_id": client.client_id, "text": s.to_text() });
                out.push_str(&line.to_string());
                out.push('\n');
            }
        }
        out
    }
}

#[derive(Deserialize)]
struct CorpusLine {
    client_id: String,
    text: String,
}

/// Parses corpus JSONL text. Clients keep the order in which they first
/// appear; sentences keep file order.
pub fn parse_corpus_jsonl(
    text: &str,
    origin: &Path,
    options: TokenizerOptions,
) -> Result<Vec<(String, Vec<TokenizedSentence>)>> {
    let mut order: Vec<String> = Vec::new();
    let mut by_client: BTreeMap<String, Vec<TokenizedSentence>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let entry = by_client.entry(record.client_id.clone()).or_insert_with(|| {
            order.push(record.client_id.clone());
            Vec::new()
        });
        entry.push(tokenize_with(&record.text, options));
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let s = by_client.remove(&id).unwrap_or_default();
            (id, s)
        })
        .collect())
}

pub fn load_corpus(path: &Path, split_seed: u64, ratios: PoolRatios) -> Result<FederatedCorpus> {
    load_corpus_with(path, split_seed, ratios, TokenizerOptions::default())
}

pub fn load_corpus_with(
    path: &Path,
    split_seed: u64,
    ratios: PoolRatios,
    options: TokenizerOptions,
) -> Result<FederatedCorpus> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: format!("file is not valid UTF-8: {e}"),
    })?;
    let records = parse_corpus_jsonl(&text, path, options)?;
    let mut corpus = FederatedCorpus::from_client_sentences(records, split_seed, ratios)?;
    corpus
        .provenance
        .insert("source".into(), path.display().to_string());
    Ok(corpus)
}

/// Parameters of the synthetic long-tail generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_clients: usize,
    pub shared_vocab_size: usize,
    pub tail_size_per_client: usize,
    pub zipf_exponent: f64,
    pub sentences_per_client: usize,
    pub sentence_length_range: (usize, usize),
    /// Stationary fraction of tokens drawn from the client's private tail.
    pub private_weight: f64,
    /// Probability that a private token is followed by another private
    /// token. Equal to `private_weight` gives independent draws; larger
    /// values make private words cluster.
    pub private_stickiness: f64,
    /// Probability that a shared token comes from the client's own topic, a
    /// Zipfian over `topic_size` shared words picked per client. Zero gives
    /// every client the same shared-word distribution.
    pub topic_weight: f64,
    pub topic_size: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_clients: 200,
            shared_vocab_size: 5000,
            tail_size_per_client: 200,
            zipf_exponent: 1.1,
            sentences_per_client: 50,
            sentence_length_range: (5, 15),
            private_weight: 0.06,
            private_stickiness: 0.5,
            topic_weight: 0.0,
            topic_size: 20,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.sentence_length_range;
        let bad = self.n_clients == 0
            || self.shared_vocab_size == 0
            || self.sentences_per_client == 0
            || lo == 0
            || hi < lo
            || !(self.zipf_exponent > 0.0)
            || !(0.0..1.0).contains(&self.private_weight)
            || !(0.0..1.0).contains(&self.private_stickiness)
            || !(0.0..=1.0).contains(&self.topic_weight)
            || (self.topic_weight > 0.0 && !(1..=self.shared_vocab_size).contains(&self.topic_size))
            || self.private_weight * (1.0 - self.private_stickiness) > 1.0 - self.private_weight;
        if bad {
            return Err(Error::Config(format!("invalid synthetic corpus config: {self:?}")));
        }
        Ok(())
    }
}

/// A generated corpus together with the words that produced it.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub corpus: FederatedCorpus,
    /// Shared words in rank order (rank 1 first).
    pub shared_words: Vec<String>,
    /// Each client's private tail words in rank order.
    pub private_words: BTreeMap<String, Vec<String>>,
}

impl SyntheticCorpus {
    pub fn all_private_words(&self) -> BTreeSet<&str> {
        self.private_words
            .values()
            .flat_map(|w| w.iter().map(String::as_str))
            .collect()
    }
}

fn zipf_weights(n: usize, exponent: f64) -> Vec<f64> {
    (1..=n).map(|r| (r as f64).powf(-exponent)).collect()
}

fn fresh_word(rng: &mut ChaCha8Rng, len_range: (usize, usize), taken: &mut HashSet<String>) -> String {
    loop {
        let len = rng.random_range(len_range.0..=len_range.1);
        let w: String = (0..len)
            .map(|_| (b'a' + rng.random_range(0..26u8)) as char)
            .collect();
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

pub fn generate_synthetic(
    config: &SyntheticConfig,
    split_seed: u64,
    ratios: PoolRatios,
) -> Result<SyntheticCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut taken = HashSet::new();
    // Shared words are at most 7 bytes and private words at least 8, so a
    // private word can never occur inside a shared one.
    let shared_words: Vec<String> = (0..config.shared_vocab_size)
        .map(|_| fresh_word(&mut rng, (2, 7), &mut taken))
        .collect();
    let shared_dist = WeightedIndex::new(zipf_weights(config.shared_vocab_size, config.zipf_exponent))
        .map_err(|e| Error::Config(e.to_string()))?;
    let tail_dist = if config.tail_size_per_client > 0 {
        Some(
            WeightedIndex::new(zipf_weights(config.tail_size_per_client, config.zipf_exponent))
                .map_err(|e| Error::Config(e.to_string()))?,
        )
    } else {
        None
    };
    let topic_dist = if config.topic_weight > 0.0 {
        Some(
            WeightedIndex::new(zipf_weights(config.topic_size, config.zipf_exponent))
                .map_err(|e| Error::Config(e.to_string()))?,
        )
    } else {
        None
    };
    let w = config.private_weight;
    let stay = config.private_stickiness;
    let enter = if w > 0.0 { w * (1.0 - stay) / (1.0 - w) } else { 0.0 };

    let width = config.n_clients.to_string().len().max(4);
    let mut records = Vec::with_capacity(config.n_clients);
    let mut private_words = BTreeMap::new();
    for c in 0..config.n_clients {
        let id = format!("client_{c:0width$}");
        let tail: Vec<String> = (0..config.tail_size_per_client)
            .map(|_| fresh_word(&mut rng, (8, 11), &mut taken))
            .collect();
        let topic: Vec<usize> = if config.topic_weight > 0.0 {
            rand::seq::index::sample(&mut rng, config.shared_vocab_size, config.topic_size).into_vec()
        } else {
            Vec::new()
        };
        let mut sentences = Vec::with_capacity(config.sentences_per_client);
        for _ in 0..config.sentences_per_client {
            let len = rng.random_range(config.sentence_length_range.0..=config.sentence_length_range.1);
            let mut words = Vec::with_capacity(len);
            let mut private = false;
            for pos in 0..len {
                let p_private = if pos == 0 {
                    w
                } else if private {
                    stay
                } else {
                    enter
                };
                private = tail_dist.is_some() && rng.random::<f64>() < p_private;
                let word = match (&tail_dist, private) {
                    (Some(dist), true) => tail[dist.sample(&mut rng)].clone(),
                    _ => match &topic_dist {
                        Some(dist) if rng.random::<f64>() < config.topic_weight => {
                            shared_words[topic[dist.sample(&mut rng)]].clone()
                        }
                        _ => shared_words[shared_dist.sample(&mut rng)].clone(),
                    },
                };
                words.push(word);
            }
            sentences.push(TokenizedSentence { words });
        }
        private_words.insert(id.clone(), tail);
        records.push((id, sentences));
    }
    let mut corpus = FederatedCorpus::from_client_sentences(records, split_seed, ratios)?;
    corpus.provenance.insert("source".into(), "synthetic".into());
    corpus
        .provenance
        .insert("generator_seed".into(), config.seed.to_string());
    Ok(SyntheticCorpus {
        corpus,
        shared_words,
        private_words,
    })
}
