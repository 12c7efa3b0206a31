//! Exact-match rates over top-K suggestions and token-weighted aggregation
//! across clients.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenizedSentence;
use crate::model::Scorer;
use crate::scalar::Scalar;
use crate::vocab::{oov_counts, OovList, Vocabulary};

/// Anything that suggests next words.
pub trait Predictor {
    /// Entry `t` holds the top-`k` suggestions for word `t` of `sentence`
    /// given the words before it.
    fn top_k_rows(&self, sentence: &[String], k: usize) -> Vec<Vec<String>>;
}

/// Adapts a prefix function `(prefix, k) -> suggestions`.
pub struct PrefixPredictor<F>(pub F);

impl<F: Fn(&[String], usize) -> Vec<String>> Predictor for PrefixPredictor<F> {
    fn top_k_rows(&self, sentence: &[String], k: usize) -> Vec<Vec<String>> {
        (0..sentence.len()).map(|t| (self.0)(&sentence[..t], k)).collect()
    }
}

impl<T: Scalar> Predictor for Scorer<'_, T> {
    fn top_k_rows(&self, sentence: &[String], k: usize) -> Vec<Vec<String>> {
        Scorer::top_k_rows(self, sentence, k)
    }
}

/// Hit and position counts behind a rate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub hits: u64,
    pub total: u64,
}

impl Tally {
    /// `hits / total`, 0 when there are no positions.
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.hits as f64 / self.total as f64
        }
    }

    pub fn add(&mut self, other: Tally) {
        self.hits += other.hits;
        self.total += other.total;
    }
}

/// EMR and KEMR tallies for several K from one prediction pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchTallies {
    pub emr: BTreeMap<usize, Tally>,
    pub kemr: BTreeMap<usize, Tally>,
}

pub fn match_tallies(
    dataset: &[TokenizedSentence],
    predictor: &dyn Predictor,
    closed_vocab: Option<&Vocabulary>,
    ks: &[usize],
) -> MatchTallies {
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let mut out = MatchTallies::default();
    for &k in ks {
        out.emr.insert(k, Tally::default());
        out.kemr.insert(k, Tally::default());
    }
    for sentence in dataset {
        if sentence.is_empty() {
            continue;
        }
        let rows = predictor.top_k_rows(&sentence.words, max_k);
        for (target, suggestions) in sentence.words.iter().zip(rows) {
            let known = closed_vocab.is_some_and(|v| v.contains(target));
            let rank = suggestions.iter().position(|s| s == target);
            for &k in ks {
                let hit = rank.is_some_and(|r| r < k) as u64;
                let e = out.emr.get_mut(&k).expect("k registered");
                e.total += 1;
                e.hits += hit;
                if known {
                    let kt = out.kemr.get_mut(&k).expect("k registered");
                    kt.total += 1;
                    kt.hits += hit;
                }
            }
        }
    }
    out
}

/// Share of positions whose true word is among the top-`k` suggestions.
pub fn emr_k(dataset: &[TokenizedSentence], predictor: &dyn Predictor, k: usize) -> f64 {
    match_tallies(dataset, predictor, None, &[k]).emr[&k].rate()
}

/// `emr_k` restricted to positions whose true word is in `vocab`.
pub fn kemr_k(dataset: &[TokenizedSentence], predictor: &dyn Predictor, vocab: &Vocabulary, k: usize) -> f64 {
    match_tallies(dataset, predictor, Some(vocab), &[k]).kemr[&k].rate()
}

/// Token-weighted mean of per-client rates. Clients without tokens are
/// skipped; with no tokens at all the result is 0.
pub fn aggregate(per_client: &[(f64, u64)]) -> f64 {
    let weight: u64 = per_client.iter().map(|&(_, n)| n).sum();
    if weight == 0 {
        if !per_client.is_empty() {
            log::warn!("aggregating {} clients with no tokens", per_client.len());
        }
        return 0.0;
    }
    per_client
        .iter()
        .filter(|&&(_, n)| n > 0)
        .map(|&(r, n)| r * n as f64)
        .sum::<f64>()
        / weight as f64
}

/// The same aggregate computed directly from pooled counts.
pub fn pooled(tallies: &[Tally]) -> f64 {
    let mut sum = Tally::default();
    for t in tallies {
        sum.add(*t);
    }
    sum.rate()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub client_id: String,
    pub emr_k: BTreeMap<usize, f64>,
    pub kemr_k: BTreeMap<usize, f64>,
    pub oov_rate: f64,
    pub total_tokens: u64,
    pub known_tokens: u64,
    pub oov_tokens: u64,
}

/// Scores one client's sentences. `closed_vocab` defines "known" for KEMR;
/// `extra` lists OOV words the predictor can also emit.
pub fn evaluate_client(
    client_id: &str,
    dataset: &[TokenizedSentence],
    predictor: &dyn Predictor,
    closed_vocab: &Vocabulary,
    extra: Option<&OovList>,
    ks: &[usize],
) -> ClientMetrics {
    let t = match_tallies(dataset, predictor, Some(closed_vocab), ks);
    let (oov, total) = oov_counts(dataset, closed_vocab, extra);
    let known = t.kemr.values().next().map(|k| k.total).unwrap_or(0);
    ClientMetrics {
        client_id: client_id.to_owned(),
        emr_k: t.emr.iter().map(|(&k, v)| (k, v.rate())).collect(),
        kemr_k: t.kemr.iter().map(|(&k, v)| (k, v.rate())).collect(),
        oov_rate: if total == 0 { 0.0 } else { oov as f64 / total as f64 },
        total_tokens: total,
        known_tokens: known,
        oov_tokens: oov,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub emr_k: BTreeMap<usize, f64>,
    pub kemr_k: BTreeMap<usize, f64>,
    pub oov_rate: f64,
    pub total_tokens: u64,
    pub known_tokens: u64,
    /// True when no client contributed a token, so every rate is the 0/0
    /// convention.
    pub empty: bool,
    pub per_client: Vec<ClientMetrics>,
}

impl MetricsReport {
    /// Token-weighted aggregate over clients, reduced in client-id order.
    pub fn from_clients(mut clients: Vec<ClientMetrics>) -> Self {
        clients.sort_by(|a, b| a.client_id.cmp(&b.client_id));
        let total_tokens = clients.iter().map(|c| c.total_tokens).sum();
        let known_tokens = clients.iter().map(|c| c.known_tokens).sum();
        let ks: Vec<usize> = clients
            .first()
            .map(|c| c.emr_k.keys().copied().collect())
            .unwrap_or_default();
        let emr_k = ks
            .iter()
            .map(|&k| {
                let pts: Vec<(f64, u64)> = clients.iter().map(|c| (c.emr_k[&k], c.total_tokens)).collect();
                (k, aggregate(&pts))
            })
            .collect();
        let kemr_k = ks
            .iter()
            .map(|&k| {
                let pts: Vec<(f64, u64)> = clients.iter().map(|c| (c.kemr_k[&k], c.known_tokens)).collect();
                (k, aggregate(&pts))
            })
            .collect();
        let oov: Vec<(f64, u64)> = clients.iter().map(|c| (c.oov_rate, c.total_tokens)).collect();
        Self {
            emr_k,
            kemr_k,
            oov_rate: aggregate(&oov),
            total_tokens,
            known_tokens,
            empty: total_tokens == 0,
            per_client: clients,
        }
    }

    pub fn emr(&self, k: usize) -> f64 {
        self.emr_k.get(&k).copied().unwrap_or(0.0)
    }

    pub fn kemr(&self, k: usize) -> f64 {
        self.kemr_k.get(&k).copied().unwrap_or(0.0)
    }

    /// One row per client plus a final `ALL` row.
    pub fn to_csv(&self) -> String {
        let ks: Vec<usize> = self.emr_k.keys().copied().collect();
        let mut out = String::from("client_id");
        for k in &ks {
            let _ = write!(out, ",emr_{k},kemr_{k}");
        }
        out.push_str(",oov_rate,total_tokens,known_tokens\n");
        for c in &self.per_client {
            out.push_str(&c.client_id);
            for k in &ks {
                let _ = write!(out, ",{},{}", c.emr_k[k], c.kemr_k[k]);
            }
            let _ = writeln!(out, ",{},{},{}", c.oov_rate, c.total_tokens, c.known_tokens);
        }
        out.push_str("ALL");
        for k in &ks {
            let _ = write!(out, ",{},{}", self.emr(*k), self.kemr(*k));
        }
        let _ = writeln!(out, ",{},{},{}", self.oov_rate, self.total_tokens, self.known_tokens);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    fn constant(words: &'static [&'static str]) -> PrefixPredictor<impl Fn(&[String], usize) -> Vec<String>> {
        PrefixPredictor(move |_: &[String], k: usize| words.iter().take(k).map(|w| w.to_string()).collect())
    }

    /// Reads the answer off the sentence itself.
    struct Clairvoyant;

    impl Predictor for Clairvoyant {
        fn top_k_rows(&self, sentence: &[String], _k: usize) -> Vec<Vec<String>> {
            sentence.iter().map(|w| vec![w.clone()]).collect()
        }
    }

    #[test]
    fn perfect_predictor_scores_one() {
        let data = vec![tokenize("a b c"), tokenize("c a")];
        assert_eq!(emr_k(&data, &Clairvoyant, 3), 1.0);
    }

    #[test]
    fn constant_predictor_example() {
        let data = vec![tokenize("a b a")];
        assert!((emr_k(&data, &constant(&["a", "c", "d"]), 3) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(emr_k(&[], &constant(&["a"]), 3), 0.0);
    }

    #[test]
    fn kemr_examples() {
        let v = Vocabulary::from_words(["a", "b"]).unwrap();
        let data = vec![tokenize("a zz")];
        let p = constant(&["a"]);
        assert_eq!(kemr_k(&data, &p, &v, 1), 1.0);
        assert_eq!(emr_k(&data, &p, 1), 0.5);
        let none = vec![tokenize("zz yy")];
        assert_eq!(kemr_k(&none, &p, &v, 1), 0.0);
        let all_known = vec![tokenize("a b b a")];
        assert_eq!(kemr_k(&all_known, &p, &v, 1), emr_k(&all_known, &p, 1));
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate(&[(0.5, 10), (1.0, 30)]), 0.875);
        assert_eq!(aggregate(&[(0.2, 5), (0.6, 5)]), 0.4);
        assert_eq!(aggregate(&[(0.3, 7)]), 0.3);
        assert_eq!(aggregate(&[(0.3, 0)]), 0.0);
        assert_eq!(aggregate(&[]), 0.0);
    }

    #[test]
    fn report_aggregates_by_tokens() {
        let mk = |id: &str, emr: f64, n: u64| ClientMetrics {
            client_id: id.into(),
            emr_k: [(3, emr)].into(),
            kemr_k: [(3, emr)].into(),
            total_tokens: n,
            known_tokens: n,
            ..Default::default()
        };
        let r = MetricsReport::from_clients(vec![mk("b", 1.0, 30), mk("a", 0.5, 10)]);
        assert_eq!(r.emr(3), 0.875);
        assert_eq!(r.per_client[0].client_id, "a");
        assert!(r.to_csv().lines().last().unwrap().starts_with("ALL,0.875"));
    }
}
