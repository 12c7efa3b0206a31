//! Closed vocabularies, oracle expansion, per-client OOV lists and tail
//! statistics.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{ClientDataset, FederatedCorpus, Pool, Segment, TokenizedSentence};
use crate::error::{Error, Result};
use crate::util::write_atomic;

pub const UNK: &str = "[UNK]";
pub const BOS: &str = "[BOS]";
pub const PAD: &str = "[PAD]";
/// Special tokens in the order they follow the word block.
pub const SPECIAL_TOKENS: [&str; 3] = [UNK, BOS, PAD];

/// Lines starting with a tab hold special tokens. Words never contain
/// whitespace, so the marker cannot collide with a surface word.
const SPECIAL_MARKER: char = '\t';

/// Word block followed by `[UNK]`, `[BOS]`, `[PAD]`.
///
/// Specials are tracked by index only, so a surface word spelled `[UNK]` is an
/// ordinary word and never aliases the special token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index_of: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_words<S: Into<String>>(words: impl IntoIterator<Item = S>) -> Result<Self> {
        let words: Vec<String> = words.into_iter().map(Into::into).collect();
        let mut index_of = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::InvalidInput(format!("invalid vocabulary word {w:?}")));
            }
            if index_of.insert(w.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self { words, index_of })
    }

    /// Total number of scored entries, specials included.
    pub fn len(&self) -> usize {
        self.words.len() + SPECIAL_TOKENS.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Size of the surface-word block.
    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn unk(&self) -> usize {
        self.words.len()
    }

    pub fn bos(&self) -> usize {
        self.words.len() + 1
    }

    pub fn pad(&self) -> usize {
        self.words.len() + 2
    }

    pub fn is_special(&self, index: usize) -> bool {
        index >= self.words.len()
    }

    pub fn lookup(&self, word: &str) -> Option<usize> {
        self.index_of.get(word).copied()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index_of.contains_key(word)
    }

    /// Index of `word`, or `[UNK]` for out-of-vocabulary words.
    pub fn id(&self, word: &str) -> usize {
        self.lookup(word).unwrap_or_else(|| self.unk())
    }

    /// Surface form for word indices, bracketed name for specials.
    pub fn token(&self, index: usize) -> &str {
        match self.words.get(index) {
            Some(w) => w,
            None => SPECIAL_TOKENS[index - self.words.len()],
        }
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for w in &self.words {
            out.push_str(w);
            out.push('\n');
        }
        for s in SPECIAL_TOKENS {
            let _ = writeln!(out, "{SPECIAL_MARKER}{s}");
        }
        out
    }

    pub fn parse_file_string(text: &str, origin: &Path) -> Result<Self> {
        let mut words = Vec::new();
        let mut specials = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let parse_err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message,
            };
            if let Some(special) = line.strip_prefix(SPECIAL_MARKER) {
                specials.push(special.to_owned());
            } else if !specials.is_empty() {
                return Err(parse_err("word after the special-token section".into()));
            } else {
                words.push(line.to_owned());
            }
        }
        if specials != SPECIAL_TOKENS {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: text.lines().count(),
                message: format!("expected special tokens {SPECIAL_TOKENS:?}, found {specials:?}"),
            });
        }
        Self::from_words(words)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_file_string().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_file_string(&text, path)
    }
}

/// Word counts sorted by descending count, ties by ascending word.
pub fn ranked_counts<'a>(sentences: impl IntoIterator<Item = &'a TokenizedSentence>) -> Vec<(String, u64)> {
    let mut counts: HashMap<&'a str, u64> = HashMap::new();
    for s in sentences {
        for w in &s.words {
            *counts.entry(w.as_str()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().map(|(w, c)| (w.to_owned(), c)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked
}

/// The `size` most frequent train-pool words plus the special tokens.
pub fn build_vocab(corpus: &FederatedCorpus, size: usize) -> Result<Vocabulary> {
    build_vocab_with(corpus, size, 1)
}

/// Like [`build_vocab`], but only words used by at least `min_clients`
/// distinct train clients are eligible.
pub fn build_vocab_with(corpus: &FederatedCorpus, size: usize, min_clients: usize) -> Result<Vocabulary> {
    if size == 0 {
        return Err(Error::Config("vocabulary size must be at least 1".into()));
    }
    let mut ranked = ranked_counts(corpus.pool(Pool::Train).flat_map(|c| c.sentences.iter()));
    if min_clients > 1 {
        let mut users: HashMap<&str, usize> = HashMap::new();
        for client in corpus.pool(Pool::Train) {
            let distinct: HashSet<&str> = client.sentences.iter().flat_map(|s| s.words.iter().map(String::as_str)).collect();
            for w in distinct {
                *users.entry(w).or_default() += 1;
            }
        }
        ranked.retain(|(w, _)| users.get(w.as_str()).copied().unwrap_or(0) >= min_clients);
    }
    if ranked.len() < size {
        log::warn!(
            "requested vocabulary of {size} words but the train pool has only {} eligible words",
            ranked.len()
        );
    }
    Vocabulary::from_words(ranked.into_iter().take(size).map(|(w, _)| w))
}

/// Appends the `n` most frequent out-of-vocabulary words counted over every
/// pool of the corpus.
pub fn expand_vocab_oracle(vocab: &Vocabulary, corpus: &FederatedCorpus, n: usize) -> Result<Vocabulary> {
    let extra = ranked_counts(corpus.all_sentences())
        .into_iter()
        .filter(|(w, _)| !vocab.contains(w))
        .take(n)
        .map(|(w, _)| w);
    Vocabulary::from_words(vocab.words().iter().cloned().chain(extra))
}

/// A client's most frequent out-of-vocabulary words.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OovList {
    pub words: Vec<String>,
    pub counts: Vec<u64>,
}

impl OovList {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn position(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn index_map(&self) -> HashMap<&str, usize> {
        self.words.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect()
    }

    /// `word<TAB>count` per line.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (w, c) in self.words.iter().zip(&self.counts) {
            let _ = writeln!(out, "{w}\t{c}");
        }
        out
    }

    pub fn parse_file_string(text: &str, origin: &Path) -> Result<Self> {
        let mut list = OovList::default();
        for (i, line) in text.lines().enumerate() {
            let (w, c) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: "expected word<TAB>count".into(),
            })?;
            let count = c.parse().map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: format!("bad count: {e}"),
            })?;
            list.words.push(w.to_owned());
            list.counts.push(count);
        }
        Ok(list)
    }
}

/// Top-`n` OOV words of a client's personalization training segment. Only
/// that client's own data is read.
pub fn client_top_oov(client: &ClientDataset, vocab: &Vocabulary, n: usize) -> OovList {
    let train = client.segment(Segment::PersonalizeTrain);
    top_oov(&train, vocab, n)
}

pub fn top_oov(sentences: &[TokenizedSentence], vocab: &Vocabulary, n: usize) -> OovList {
    let (words, counts) = ranked_counts(sentences)
        .into_iter()
        .filter(|(w, _)| !vocab.contains(w))
        .take(n)
        .unzip();
    OovList { words, counts }
}

/// Fraction of tokens covered by neither `vocab` nor `extra`; 0 for no tokens.
pub fn oov_rate(sentences: &[TokenizedSentence], vocab: &Vocabulary, extra: Option<&OovList>) -> f64 {
    let (oov, total) = oov_counts(sentences, vocab, extra);
    if total == 0 {
        0.0
    } else {
        oov as f64 / total as f64
    }
}

/// `(oov tokens, total tokens)`.
pub fn oov_counts(sentences: &[TokenizedSentence], vocab: &Vocabulary, extra: Option<&OovList>) -> (u64, u64) {
    let extra = extra.map(OovList::index_map).unwrap_or_default();
    let mut oov = 0;
    let mut total = 0;
    for w in sentences.iter().flat_map(|s| &s.words) {
        total += 1;
        if !vocab.contains(w) && !extra.contains_key(w.as_str()) {
            oov += 1;
        }
    }
    (oov, total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileRow {
    pub quantile: f64,
    /// 1-based rank bucket boundary, `⌈quantile · top_k⌉` clamped to `[1, top_k]`.
    pub rank: usize,
    pub count: u64,
    /// Count relative to all tokens of the corpus.
    pub frequency: f64,
}

/// Frequencies of the `top_k` most frequent words sampled at rank quantiles.
pub fn word_frequency_quantiles(
    corpus: &FederatedCorpus,
    top_k: usize,
    quantiles: &[f64],
) -> Result<Vec<QuantileRow>> {
    if top_k == 0 {
        return Err(Error::Config("top_k must be at least 1".into()));
    }
    let ranked = ranked_counts(corpus.all_sentences());
    let total: u64 = ranked.iter().map(|(_, c)| c).sum();
    let kept = top_k.min(ranked.len());
    if kept == 0 {
        return Ok(Vec::new());
    }
    quantiles
        .iter()
        .map(|&q| {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::Config(format!("quantile {q} outside [0, 1]")));
            }
            let rank = ((q * kept as f64).ceil() as usize).clamp(1, kept);
            let count = ranked[rank - 1].1;
            Ok(QuantileRow {
                quantile: q,
                rank,
                count,
                frequency: count as f64 / total as f64,
            })
        })
        .collect()
}

/// Least-squares slope of log(count) against log(rank) over the first
/// `top_k` ranks.
pub fn rank_frequency_slope(ranked: &[(String, u64)], top_k: usize) -> f64 {
    let pts: Vec<(f64, f64)> = ranked
        .iter()
        .take(top_k)
        .enumerate()
        .map(|(i, (_, c))| (((i + 1) as f64).ln(), (*c as f64).ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

pub fn quantiles_to_csv(rows: &[QuantileRow]) -> String {
    let mut out = String::from("quantile,rank,count,frequency\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.quantile, r.rank, r.count, r.frequency);
    }
    out
}
