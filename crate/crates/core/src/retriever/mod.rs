//! Complex-rotation embedding retriever.
//!
//! Entities are complex vectors; each relation is a per-coordinate rotation
//! stored as a phase, so every relation coordinate has modulus one by
//! construction. A triple `(h, r, t)` is scored by `-Σ_k |h_k·e^{iθ_k} - t_k|`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{Direction, EntityId, Query, RelationId, Triple};
use crate::seed;

mod checkpoint;
mod train;

pub use checkpoint::{load_model, save_model, FORMAT_VERSION};
pub use train::{train, Gradient, Sample, TrainConfig, TrainingReport};

#[derive(Debug, Error)]
pub enum RetrieverError {
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training split is empty")]
    NoTrainingData,
    #[error("model shape ({model_entities} entities, {model_relations} relations) does not match graph ({kg_entities}, {kg_relations})")]
    ShapeMismatch {
        model_entities: usize,
        model_relations: usize,
        kg_entities: usize,
        kg_relations: usize,
    },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch; file is truncated or corrupt")]
    Checksum,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrieverModel {
    dim: usize,
    gamma: f64,
    seed: u64,
    num_entities: usize,
    num_relations: usize,
    entity_re: Vec<f64>,
    entity_im: Vec<f64>,
    phase: Vec<f64>,
}

/// Header fields shared by the model and its checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub dim: usize,
    pub num_entities: usize,
    pub num_relations: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl RetrieverModel {
    /// Entity coordinates uniform in `±(gamma + 2) / dim`, phases uniform in `[-π, π)`.
    pub fn init(num_entities: usize, num_relations: usize, dim: usize, gamma: f64, seed: u64) -> Self {
        let mut rng = seed::substream(seed, seed::INIT);
        let range = (gamma + 2.0) / dim as f64;
        let mut uniform =
            |n: usize, lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };
        let entity_re = uniform(num_entities * dim, -range, range);
        let entity_im = uniform(num_entities * dim, -range, range);
        let phase = uniform(num_relations * dim, -PI, PI);
        Self {
            dim,
            gamma,
            seed,
            num_entities,
            num_relations,
            entity_re,
            entity_im,
            phase,
        }
    }

    /// Builds a model from explicit parameters (row-major, `dim` per row).
    pub fn from_parts(dim: usize, gamma: f64, entity_re: Vec<f64>, entity_im: Vec<f64>, phase: Vec<f64>) -> Self {
        assert!(dim > 0, "dim must be positive");
        assert_eq!(entity_re.len(), entity_im.len());
        assert_eq!(entity_re.len() % dim, 0);
        assert_eq!(phase.len() % dim, 0);
        Self {
            dim,
            gamma,
            seed: 0,
            num_entities: entity_re.len() / dim,
            num_relations: phase.len() / dim,
            entity_re,
            entity_im,
            phase,
        }
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            dim: self.dim,
            num_entities: self.num_entities,
            num_relations: self.num_relations,
            gamma: self.gamma,
            seed: self.seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn entity(&self, e: EntityId) -> (&[f64], &[f64]) {
        let s = e.index() * self.dim;
        (&self.entity_re[s..s + self.dim], &self.entity_im[s..s + self.dim])
    }

    pub fn phases(&self, r: RelationId) -> &[f64] {
        let s = r.index() * self.dim;
        &self.phase[s..s + self.dim]
    }

    /// Relation coordinates as explicit complex numbers `(cos θ, sin θ)`.
    pub fn relation_complex(&self, r: RelationId) -> Vec<(f64, f64)> {
        self.phases(r).iter().map(|p| (p.cos(), p.sin())).collect()
    }

    pub fn params(&self) -> (&[f64], &[f64], &[f64]) {
        (&self.entity_re, &self.entity_im, &self.phase)
    }

    pub(crate) fn params_mut(&mut self) -> (&mut [f64], &mut [f64], &mut [f64]) {
        (&mut self.entity_re, &mut self.entity_im, &mut self.phase)
    }

    pub fn all_finite(&self) -> bool {
        self.entity_re
            .iter()
            .chain(&self.entity_im)
            .chain(&self.phase)
            .all(|v| v.is_finite())
    }

    /// Largest `| |e^{iθ}| - 1 |` over all relation coordinates.
    pub fn max_modulus_deviation(&self) -> f64 {
        self.phase
            .iter()
            .map(|p| {
                let (s, c) = p.sin_cos();
                ((c * c + s * s).sqrt() - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// `Σ_k |h_k·r_k - t_k|`.
    pub fn distance(&self, t: Triple) -> f64 {
        let trig = self.trig(t.relation);
        self.distance_with(t.head, &trig, t.tail)
    }

    pub(crate) fn trig(&self, r: RelationId) -> Vec<(f64, f64)> {
        self.phases(r).iter().map(|p| p.sin_cos()).collect()
    }

    pub(crate) fn distance_with(&self, head: EntityId, trig: &[(f64, f64)], tail: EntityId) -> f64 {
        let (hr, hi) = self.entity(head);
        let (tr, ti) = self.entity(tail);
        let mut d = 0.0;
        for k in 0..self.dim {
            let (s, c) = trig[k];
            let zr = hr[k] * c - hi[k] * s - tr[k];
            let zi = hr[k] * s + hi[k] * c - ti[k];
            d += (zr * zr + zi * zi).sqrt();
        }
        d
    }

    pub fn score_triple(&self, t: Triple) -> f64 {
        -self.distance(t)
    }

    /// Plausibility of `candidate` filling the query's missing slot.
    pub fn score(&self, query: &Query, candidate: EntityId) -> f64 {
        self.score_triple(query.complete(candidate))
    }

    /// Every entity by descending score, ties by ascending id.
    pub fn rank_all(&self, query: &Query) -> Ranking {
        let trig = self.trig(query.relation);
        let scores: Vec<f64> = (0..self.num_entities as u32)
            .map(|c| {
                let c = EntityId(c);
                let d = match query.direction {
                    Direction::TailMissing => self.distance_with(query.anchor, &trig, c),
                    Direction::HeadMissing => self.distance_with(c, &trig, query.anchor),
                };
                -d
            })
            .collect();
        Ranking::from_scores(&scores)
    }
}

/// A full ordering of the entity set with aligned scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub entity_order: Vec<EntityId>,
    pub scores: Vec<f64>,
}

impl Ranking {
    /// Sorts entity ids `0..scores.len()` by descending score, ascending id on ties.
    pub fn from_scores(scores: &[f64]) -> Self {
        let mut order: Vec<u32> = (0..scores.len() as u32).collect();
        order.sort_by(|&a, &b| scores[b as usize].total_cmp(&scores[a as usize]).then(a.cmp(&b)));
        Self {
            scores: order.iter().map(|&i| scores[i as usize]).collect(),
            entity_order: order.into_iter().map(EntityId).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entity_order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entity_order.is_empty()
    }

    /// The leading `m` entities, clamped to the ranking length.
    pub fn top(&self, m: usize) -> &[EntityId] {
        &self.entity_order[..m.min(self.entity_order.len())]
    }

    /// 1-based raw position of `e`.
    pub fn rank_of(&self, e: EntityId) -> Option<usize> {
        self.entity_order.iter().position(|&x| x == e).map(|p| p + 1)
    }
}
