//! Okapi BM25 over tokenized demonstration texts.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.5, b: 0.75 }
    }
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Document frequencies and length statistics of a corpus.
#[derive(Debug, Clone)]
pub struct CorpusStats {
    docs: Vec<Vec<String>>,
    doc_freq: HashMap<String, usize>,
    avg_len: f64,
    params: Bm25Params,
}

impl CorpusStats {
    pub fn new(docs: Vec<Vec<String>>, params: Bm25Params) -> Self {
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        for doc in &docs {
            let mut uniq: Vec<&String> = doc.iter().collect();
            uniq.sort_unstable();
            uniq.dedup();
            for t in uniq {
                *doc_freq.entry(t.clone()).or_default() += 1;
            }
        }
        let total: usize = docs.iter().map(Vec::len).sum();
        let avg_len = if docs.is_empty() {
            0.0
        } else {
            total as f64 / docs.len() as f64
        };
        Self {
            docs,
            doc_freq,
            avg_len,
            params,
        }
    }

    pub fn from_texts<S: AsRef<str>>(texts: &[S], params: Bm25Params) -> Self {
        Self::new(texts.iter().map(|t| tokenize(t.as_ref())).collect(), params)
    }

    pub fn num_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn docs(&self) -> &[Vec<String>] {
        &self.docs
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.doc_freq.get(term).copied().unwrap_or(0)
    }

    /// `ln((N - df + 0.5) / (df + 0.5) + 1)`, always positive.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = self.doc_freq(term) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }
}

/// BM25 of `doc` for `query`; repeated query terms count once per occurrence.
pub fn bm25_score(doc: &[String], query: &[String], stats: &CorpusStats) -> f64 {
    if doc.is_empty() || query.is_empty() {
        return 0.0;
    }
    let mut tf: HashMap<&str, usize> = HashMap::new();
    for t in doc {
        *tf.entry(t.as_str()).or_default() += 1;
    }
    let Bm25Params { k1, b } = stats.params;
    let len_ratio = if stats.avg_len > 0.0 {
        doc.len() as f64 / stats.avg_len
    } else {
        0.0
    };
    let norm = k1 * (1.0 - b + b * len_ratio);
    query
        .iter()
        .filter_map(|q| tf.get(q.as_str()).map(|&f| (q, f as f64)))
        .map(|(q, f)| stats.idf(q) * f * (k1 + 1.0) / (f + norm))
        .sum()
}

/// Indices of `docs` by descending BM25 against `query`, ties in input order.
pub fn bm25_order<S: AsRef<str>>(docs: &[S], query: &str, params: Bm25Params) -> Vec<usize> {
    let stats = CorpusStats::from_texts(docs, params);
    let q = tokenize(query);
    let scores: Vec<f64> = stats.docs().iter().map(|d| bm25_score(d, &q, &stats)).collect();
    let mut order: Vec<usize> = (0..docs.len()).collect();
    // sort_by is stable
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}
