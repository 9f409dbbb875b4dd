//! Demonstration pools and their orderings.
//!
//! The analogy pool of a query holds the train ∪ valid triples sharing its
//! relation, ordered for entity diversity. The supplement pool holds the
//! triples incident to the query's anchor, ordered by lexical relevance to
//! the query text.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{Direction, EntityId, KnowledgeGraph, Query, RelationId, Triple};
use crate::seed;
use crate::verbalize::Verbalizer;

pub mod bm25;
pub mod diversity;

pub use bm25::{bm25_order, bm25_score, tokenize, Bm25Params, CorpusStats};
pub use diversity::{order_analogy, order_analogy_indices};

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("demonstration cache i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("demonstration cache line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Triples of train ∪ valid with relation `r`, in index order.
pub fn build_analogy_pool(kg: &KnowledgeGraph, r: RelationId) -> Vec<Triple> {
    kg.by_relation(r).iter().map(|&id| kg.triple_by_id(id)).collect()
}

/// Triples of train ∪ valid with `anchor` as head, then those with it as tail.
pub fn build_supplement_pool(kg: &KnowledgeGraph, anchor: EntityId) -> Vec<Triple> {
    kg.by_entity(anchor).map(|id| kg.triple_by_id(id)).collect()
}

/// Sorts `pool` by descending BM25 of each rendered triple against `query_text`.
pub fn order_supplement(
    pool: &[Triple],
    render: impl Fn(&Triple) -> String,
    query_text: &str,
    params: Bm25Params,
) -> Vec<Triple> {
    let docs: Vec<String> = pool.iter().map(render).collect();
    bm25_order(&docs, query_text, params)
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DemonstrationSet {
    pub analogy_pool: Vec<Triple>,
    pub supplement_pool: Vec<Triple>,
    pub analogy_order: Vec<Triple>,
    pub supplement_order: Vec<Triple>,
}

impl DemonstrationSet {
    pub fn empty() -> Self {
        Self::default()
    }
}

/// Key of a query-specific supplement ordering.
pub type SupplementKey = (EntityId, RelationId, Direction);

/// Precomputed orderings as train ∪ valid triple ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DemoCache {
    pub analogy: BTreeMap<RelationId, Vec<u32>>,
    pub supplement: BTreeMap<SupplementKey, Vec<u32>>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum RecordKind {
    Analogy,
    Supplement,
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    kind: RecordKind,
    key: String,
    triples: Vec<u32>,
}

fn direction_from_str(s: &str) -> Option<Direction> {
    match s {
        "tail-missing" => Some(Direction::TailMissing),
        "head-missing" => Some(Direction::HeadMissing),
        _ => None,
    }
}

impl DemoCache {
    /// Diversity order for every relation; each relation draws from its own
    /// seeded stream.
    pub fn build_analogy(kg: &KnowledgeGraph, seed: u64) -> BTreeMap<RelationId, Vec<u32>> {
        (0..kg.num_relations() as u32)
            .map(|r| {
                let r = RelationId(r);
                let ids = kg.by_relation(r);
                let pool: Vec<Triple> = ids.iter().map(|&i| kg.triple_by_id(i)).collect();
                let mut rng = seed::substream_indexed(seed, seed::ORDERING, u64::from(r.0));
                let order = diversity::order_analogy_indices(&pool, &mut rng);
                (r, order.into_iter().map(|i| ids[i]).collect())
            })
            .collect()
    }

    pub fn supplement_order_ids(
        kg: &KnowledgeGraph,
        verbalizer: &Verbalizer<'_>,
        query: &Query,
        params: Bm25Params,
    ) -> Vec<u32> {
        let ids: Vec<u32> = kg.by_entity(query.anchor).collect();
        let docs: Vec<String> = ids
            .iter()
            .map(|&id| verbalizer.demonstration(&kg.triple_by_id(id), query.direction))
            .collect();
        let text = verbalizer.verbalize_query(query);
        bm25_order(&docs, &text, params).into_iter().map(|i| ids[i]).collect()
    }

    /// Analogy orders for all relations plus supplement orders for `queries`.
    pub fn build(
        kg: &KnowledgeGraph,
        verbalizer: &Verbalizer<'_>,
        queries: &[Query],
        seed: u64,
        params: Bm25Params,
    ) -> Self {
        let analogy = Self::build_analogy(kg, seed);
        let mut supplement = BTreeMap::new();
        for q in queries {
            supplement
                .entry((q.anchor, q.relation, q.direction))
                .or_insert_with(|| Self::supplement_order_ids(kg, verbalizer, q, params));
        }
        Self { analogy, supplement }
    }

    /// Demonstrations for a query, computing any missing ordering on the fly.
    pub fn demonstrations(
        &self,
        kg: &KnowledgeGraph,
        verbalizer: &Verbalizer<'_>,
        query: &Query,
        seed: u64,
        params: Bm25Params,
    ) -> DemonstrationSet {
        let to_triples = |ids: &[u32]| ids.iter().map(|&i| kg.triple_by_id(i)).collect::<Vec<_>>();
        let analogy_order = match self.analogy.get(&query.relation) {
            Some(ids) => to_triples(ids),
            None => {
                let pool = build_analogy_pool(kg, query.relation);
                let mut rng = seed::substream_indexed(seed, seed::ORDERING, u64::from(query.relation.0));
                order_analogy(&pool, &mut rng)
            }
        };
        let key = (query.anchor, query.relation, query.direction);
        let supplement_order = match self.supplement.get(&key) {
            Some(ids) => to_triples(ids),
            None => to_triples(&Self::supplement_order_ids(kg, verbalizer, query, params)),
        };
        DemonstrationSet {
            analogy_pool: build_analogy_pool(kg, query.relation),
            supplement_pool: build_supplement_pool(kg, query.anchor),
            analogy_order,
            supplement_order,
        }
    }

    /// JSON lines, analogy records first, each group sorted by key.
    pub fn save(&self, path: &Path, kg: &KnowledgeGraph) -> Result<(), DemoError> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for (r, ids) in &self.analogy {
            let rec = CacheRecord {
                kind: RecordKind::Analogy,
                key: kg.relation_name(*r).to_string(),
                triples: ids.clone(),
            };
            writeln!(out, "{}", serde_json::to_string(&rec).expect("serializable"))?;
        }
        for ((e, r, d), ids) in &self.supplement {
            let rec = CacheRecord {
                kind: RecordKind::Supplement,
                key: format!("{}\t{}\t{d}", kg.entity_name(*e), kg.relation_name(*r)),
                triples: ids.clone(),
            };
            writeln!(out, "{}", serde_json::to_string(&rec).expect("serializable"))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, kg: &KnowledgeGraph) -> Result<Self, DemoError> {
        let text = fs::read_to_string(path)?;
        let mut cache = Self::default();
        let n_known = kg.known_triples().len() as u32;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |reason: String| DemoError::Parse { line: i + 1, reason };
            let rec: CacheRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            if let Some(bad) = rec.triples.iter().find(|&&id| id >= n_known) {
                return Err(err(format!("triple id {bad} out of range")));
            }
            match rec.kind {
                RecordKind::Analogy => {
                    let r = kg
                        .relation(&rec.key)
                        .ok_or_else(|| err(format!("unknown relation `{}`", rec.key)))?;
                    cache.analogy.insert(r, rec.triples);
                }
                RecordKind::Supplement => {
                    let parts: Vec<&str> = rec.key.split('\t').collect();
                    let [e, r, d] = parts.as_slice() else {
                        return Err(err("supplement key must be anchor\\trelation\\tdirection".into()));
                    };
                    let e = kg.entity(e).ok_or_else(|| err(format!("unknown entity `{e}`")))?;
                    let r = kg.relation(r).ok_or_else(|| err(format!("unknown relation `{r}`")))?;
                    let d = direction_from_str(d).ok_or_else(|| err(format!("bad direction `{d}`")))?;
                    cache.supplement.insert((e, r, d), rec.triples);
                }
            }
        }
        Ok(cache)
    }
}

/// Convenience for one-off use without a cache.
pub fn demonstrations_for(
    kg: &KnowledgeGraph,
    verbalizer: &Verbalizer<'_>,
    query: &Query,
    seed: u64,
) -> DemonstrationSet {
    DemoCache::default().demonstrations(kg, verbalizer, query, seed, Bm25Params::default())
}

/// Counts of pools per relation, useful for reports.
pub fn analogy_pool_sizes(kg: &KnowledgeGraph) -> HashMap<RelationId, usize> {
    (0..kg.num_relations() as u32)
        .map(|r| (RelationId(r), kg.by_relation(RelationId(r)).len()))
        .collect()
}
