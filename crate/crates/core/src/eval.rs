//! End-to-end evaluation: retrieve, re-rank the window, merge, and score
//! with filtered ranks.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demo::{Bm25Params, DemoCache, DemonstrationSet};
use crate::gateway::Gateway;
use crate::kg::{Direction, EntityId, KnowledgeGraph, Query, Triple};
use crate::prompt::{Conductor, Conversation, PromptConfig, PromptError, Repairs, Templates};
use crate::retriever::{Ranking, RetrieverModel};
use crate::seed;
use crate::verbalize::Verbalizer;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no ranks to aggregate")]
    Empty,
    #[error("re-ranked list is not a permutation of the {m} leading entities")]
    NotAPermutation { m: usize },
    #[error("ground truth is missing from the ranking")]
    MissingAnswer,
    #[error("query {index}: {source}")]
    Prompt {
        index: usize,
        #[source]
        source: PromptError,
    },
}

/// Replaces the first `m` entries of `retriever` with `r_llm`.
pub fn rerank_merge(retriever: &[EntityId], r_llm: &[EntityId], m: usize) -> Result<Vec<EntityId>, EvalError> {
    let m = m.min(retriever.len());
    let slots: Vec<usize> = (0..m).collect();
    merge_slots(retriever, &slots, r_llm)
}

/// Writes `r_llm` into the positions `slots` of `retriever`, leaving every
/// other position untouched. `r_llm` must permute the entities at `slots`.
pub fn merge_slots(retriever: &[EntityId], slots: &[usize], r_llm: &[EntityId]) -> Result<Vec<EntityId>, EvalError> {
    let err = || EvalError::NotAPermutation { m: slots.len() };
    if r_llm.len() != slots.len() {
        return Err(err());
    }
    let mut expected: Vec<EntityId> = slots.iter().map(|&s| retriever[s]).collect();
    let mut got = r_llm.to_vec();
    expected.sort_unstable();
    got.sort_unstable();
    if expected != got {
        return Err(err());
    }
    let mut out = retriever.to_vec();
    for (&s, &e) in slots.iter().zip(r_llm) {
        out[s] = e;
    }
    Ok(out)
}

/// 1 + the number of entities ahead of the answer that are not other known answers.
///
/// `known` must be sorted.
pub fn filtered_rank(order: &[EntityId], answer: EntityId, known: &[EntityId]) -> Result<usize, EvalError> {
    let mut rank = 1;
    for &e in order {
        if e == answer {
            return Ok(rank);
        }
        if known.binary_search(&e).is_err() {
            rank += 1;
        }
    }
    Err(EvalError::MissingAnswer)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

impl Metrics {
    pub fn hits(&self, k: usize) -> Option<f64> {
        match k {
            1 => Some(self.hits1),
            3 => Some(self.hits3),
            10 => Some(self.hits10),
            _ => None,
        }
    }

    /// `(name, value)` pairs in report order.
    pub fn rows(&self) -> [(&'static str, f64); 4] {
        [
            ("mrr", self.mrr),
            ("hits@1", self.hits1),
            ("hits@3", self.hits3),
            ("hits@10", self.hits10),
        ]
    }
}

pub fn aggregate_metrics(ranks: &[usize]) -> Result<Metrics, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = ranks.len() as f64;
    let frac = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    Ok(Metrics {
        count: ranks.len(),
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        hits1: frac(1),
        hits3: frac(3),
        hits10: frac(10),
    })
}

/// floor(log2(degree + 1)).
pub fn degree_group(degree: usize) -> u32 {
    (degree + 1).ilog2()
}

/// Outcome of one query through the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: Query,
    /// The candidates in retriever order, before prompting.
    pub top_m_before: Vec<EntityId>,
    pub r_llm: Vec<EntityId>,
    pub filtered_rank: usize,
    pub retriever_filtered_rank: usize,
    pub repairs: Repairs,
}

impl QueryResult {
    /// JSON-ready view with entity and relation names.
    pub fn record(&self, kg: &KnowledgeGraph) -> serde_json::Value {
        let names = |v: &[EntityId]| v.iter().map(|&e| kg.entity_name(e).to_string()).collect::<Vec<_>>();
        let q = &self.query;
        serde_json::json!({
            "query": {
                "direction": q.direction,
                "anchor": kg.entity_name(q.anchor),
                "relation": kg.relation_name(q.relation),
                "answer": kg.entity_name(q.answer),
            },
            "top_m_before": names(&self.top_m_before),
            "r_llm": names(&self.r_llm),
            "filtered_rank": self.filtered_rank,
            "retriever_filtered_rank": self.retriever_filtered_rank,
            "repairs": self.repairs,
        })
    }
}

/// Per-group metrics: a query counts toward the group of each endpoint of
/// its triple, once per distinct group.
pub fn longtail_report(results: &[QueryResult], kg: &KnowledgeGraph) -> BTreeMap<u32, Metrics> {
    let mut ranks: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for r in results {
        let t = r.query.triple();
        let groups: BTreeSet<u32> = [t.head, t.tail]
            .into_iter()
            .map(|e| degree_group(kg.degree(e)))
            .collect();
        for g in groups {
            ranks.entry(g).or_default().push(r.filtered_rank);
        }
    }
    ranks
        .into_iter()
        .map(|(g, rs)| (g, aggregate_metrics(&rs).expect("group is non-empty")))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub metrics: Metrics,
    /// The same queries ranked by the retriever alone.
    pub retriever: Metrics,
    pub by_direction: BTreeMap<Direction, Metrics>,
    pub by_group: BTreeMap<u32, Metrics>,
    pub repairs: Repairs,
    /// Queries whose reply could not be used at all.
    pub failed_queries: usize,
}

impl EvalReport {
    pub fn from_results(results: &[QueryResult], kg: &KnowledgeGraph) -> Result<Self, EvalError> {
        let ranks: Vec<usize> = results.iter().map(|r| r.filtered_rank).collect();
        let base: Vec<usize> = results.iter().map(|r| r.retriever_filtered_rank).collect();
        let mut by_direction = BTreeMap::new();
        for d in [Direction::TailMissing, Direction::HeadMissing] {
            let rs: Vec<usize> = results
                .iter()
                .filter(|r| r.query.direction == d)
                .map(|r| r.filtered_rank)
                .collect();
            if !rs.is_empty() {
                by_direction.insert(d, aggregate_metrics(&rs)?);
            }
        }
        let mut repairs = Repairs::default();
        for r in results {
            repairs.add(r.repairs);
        }
        Ok(Self {
            count: results.len(),
            metrics: aggregate_metrics(&ranks)?,
            retriever: aggregate_metrics(&base)?,
            by_direction,
            by_group: longtail_report(results, kg),
            repairs,
            failed_queries: results.iter().filter(|r| r.repairs.hard_failure()).count(),
        })
    }

    /// `scope,group,metric,value` rows: overall, retriever, per direction, per degree group.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scope,group,metric,value\n");
        let mut emit = |scope: &str, group: &str, m: &Metrics| {
            for (name, v) in m.rows() {
                let _ = writeln!(out, "{scope},{group},{name},{v}");
            }
            let _ = writeln!(out, "{scope},{group},count,{}", m.count);
        };
        emit("overall", "all", &self.metrics);
        emit("retriever", "all", &self.retriever);
        for (d, m) in &self.by_direction {
            emit("direction", &d.to_string(), m);
        }
        for (g, m) in &self.by_group {
            emit("degree-group", &g.to_string(), m);
        }
        out
    }
}

/// Experiment switches; each changes exactly one stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    /// Permute the candidates (seeded per query) before prompting.
    pub shuffle_candidates: bool,
    /// Replace both pools with uniformly drawn train ∪ valid triples.
    pub random_demos: bool,
    pub no_icl: bool,
    pub trivial_prompt: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Re-ranking window.
    pub m: usize,
    /// Skip other known answers when taking the window, so it holds the
    /// filtered top-m.
    pub filter_candidates: bool,
    pub seed: u64,
    pub prompt: PromptConfig,
    pub ablations: Ablations,
    pub bm25: Bm25Params,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            m: 10,
            filter_candidates: true,
            seed: 0,
            prompt: PromptConfig::default(),
            ablations: Ablations::default(),
            bm25: Bm25Params::default(),
        }
    }
}

impl PipelineConfig {
    /// Prompt settings with the prompt-shape ablations applied.
    pub fn effective_prompt(&self) -> PromptConfig {
        let mut p = self.prompt.clone();
        p.no_icl |= self.ablations.no_icl;
        p.trivial_prompt |= self.ablations.trivial_prompt;
        p
    }
}

/// Everything a query needs before the model is called.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedQuery {
    pub query: Query,
    pub ranking: Ranking,
    /// Positions of the window inside the full ranking.
    pub slots: Vec<usize>,
    /// Window entities in retriever order.
    pub top_m: Vec<EntityId>,
    /// Window entities in the order shown to the model.
    pub candidates: Vec<EntityId>,
    pub demos: DemonstrationSet,
}

pub struct Pipeline<'a> {
    pub kg: &'a KnowledgeGraph,
    pub model: &'a RetrieverModel,
    pub verbalizer: &'a Verbalizer<'a>,
    pub templates: &'a Templates,
    pub demos: Option<&'a DemoCache>,
    pub config: PipelineConfig,
}

impl<'a> Pipeline<'a> {
    fn window(&self, query: &Query, ranking: &Ranking) -> Vec<usize> {
        let known = self.kg.known_answers_for(query);
        ranking
            .entity_order
            .iter()
            .enumerate()
            .filter(|(_, &e)| !self.config.filter_candidates || e == query.answer || known.binary_search(&e).is_err())
            .map(|(i, _)| i)
            .take(self.config.m)
            .collect()
    }

    fn random_demos(&self, index: usize, like: &DemonstrationSet) -> DemonstrationSet {
        let known = self.kg.known_triples();
        let mut rng = seed::substream_indexed(self.config.seed, seed::RANDOM_DEMOS, index as u64);
        let mut draw = |n: usize| -> Vec<Triple> {
            if known.is_empty() {
                return Vec::new();
            }
            (0..n).map(|_| known[rng.random_range(0..known.len())]).collect()
        };
        let analogy = draw(like.analogy_pool.len());
        let supplement = draw(like.supplement_pool.len());
        DemonstrationSet {
            analogy_order: analogy.clone(),
            supplement_order: supplement.clone(),
            analogy_pool: analogy,
            supplement_pool: supplement,
        }
    }

    /// Ranking, window, candidate order and demonstrations for query `index`.
    pub fn prepare_query(&self, index: usize, query: &Query) -> PreparedQuery {
        let ranking = self.model.rank_all(query);
        let slots = self.window(query, &ranking);
        let top_m: Vec<EntityId> = slots.iter().map(|&s| ranking.entity_order[s]).collect();
        let mut candidates = top_m.clone();
        if self.config.ablations.shuffle_candidates {
            let mut rng = seed::substream_indexed(self.config.seed, seed::SHUFFLE, index as u64);
            candidates.shuffle(&mut rng);
        }
        let empty = DemoCache::default();
        let mut demos = self.demos.unwrap_or(&empty).demonstrations(
            self.kg,
            self.verbalizer,
            query,
            self.config.seed,
            self.config.bm25,
        );
        if self.config.ablations.random_demos {
            demos = self.random_demos(index, &demos);
        }
        PreparedQuery {
            query: *query,
            ranking,
            slots,
            top_m,
            candidates,
            demos,
        }
    }

    /// The conversation query `index` would send.
    pub fn conversation(&self, index: usize, query: &Query) -> Result<Conversation, EvalError> {
        let prepared = self.prepare_query(index, query);
        let prompt = self.config.effective_prompt();
        Conductor::new(self.verbalizer, self.templates, &prompt)
            .build_conversation(query, &prepared.demos, &prepared.candidates)
            .map_err(|source| EvalError::Prompt { index, source })
    }

    pub fn run_query(&self, index: usize, query: &Query, gateway: &Gateway) -> Result<QueryResult, EvalError> {
        let p = self.prepare_query(index, query);
        let known = self.kg.known_answers_for(query);
        let retriever_filtered_rank = filtered_rank(&p.ranking.entity_order, query.answer, known)?;
        let prompt = self.config.effective_prompt();
        let conductor = Conductor::new(self.verbalizer, self.templates, &prompt);
        let (r_llm, repairs) = if p.candidates.is_empty() {
            (Vec::new(), Repairs::default())
        } else {
            let out = conductor
                .rerank_candidates(query, &p.demos, &p.candidates, gateway)
                .map_err(|source| EvalError::Prompt { index, source })?;
            (out.order, out.repairs)
        };
        let merged = merge_slots(&p.ranking.entity_order, &p.slots, &r_llm)?;
        Ok(QueryResult {
            query: *query,
            top_m_before: p.top_m,
            r_llm,
            filtered_rank: filtered_rank(&merged, query.answer, known)?,
            retriever_filtered_rank,
            repairs,
        })
    }

    /// Runs every query (in parallel) and aggregates.
    pub fn run(&self, queries: &[Query], gateway: &Gateway) -> Result<(Vec<QueryResult>, EvalReport), EvalError> {
        let results: Vec<QueryResult> = queries
            .par_iter()
            .enumerate()
            .map(|(i, q)| self.run_query(i, q, gateway))
            .collect::<Result<_, _>>()?;
        let report = EvalReport::from_results(&results, self.kg)?;
        Ok((results, report))
    }
}

/// Filtered metrics of the retriever alone.
pub fn retriever_metrics(kg: &KnowledgeGraph, model: &RetrieverModel, queries: &[Query]) -> Result<Metrics, EvalError> {
    let ranks: Vec<usize> = queries
        .par_iter()
        .map(|q| filtered_rank(&model.rank_all(q).entity_order, q.answer, kg.known_answers_for(q)))
        .collect::<Result<_, _>>()?;
    aggregate_metrics(&ranks)
}
