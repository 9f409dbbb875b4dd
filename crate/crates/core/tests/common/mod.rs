#![allow(dead_code)]

use kicrank::kg::{RawDataset, Split};
use kicrank::{KnowledgeGraph, Query};

pub const GENRE: &str = "/film/film/genre";
pub const STARRING: &str = "/film/film/starring";

fn row(h: &str, r: &str, t: &str) -> [String; 3] {
    [h.to_string(), r.to_string(), t.to_string()]
}

/// Film "f0" with many genres and actors, plus other films sharing genres.
pub fn film_kg() -> KnowledgeGraph {
    let mut raw = RawDataset::default();
    for g in 0..10 {
        raw.train.push(row("f0", GENRE, &format!("g{g}")));
        raw.train
            .push(row(&format!("f{}", g + 1), GENRE, &format!("g{}", g % 3)));
    }
    for a in 0..6 {
        raw.train.push(row("f0", STARRING, &format!("actor{a}")));
    }
    raw.test.push(row("f0", GENRE, "g10"));
    raw.test.push(row("f3", STARRING, "actor1"));
    raw.entity_text.insert("f0".into(), "Modern Times".into());
    raw.entity_text.insert("actor0".into(), "Charlie Chaplin".into());
    raw.entity_text.insert("actor1".into(), "charlie  chaplin".into());
    for g in 0..11 {
        raw.entity_text.insert(format!("g{g}"), format!("genre number {g}"));
    }
    raw.build()
}

pub fn test_queries(kg: &KnowledgeGraph) -> Vec<Query> {
    kg.make_queries(Split::Test)
}

use kicrank::kg::synthetic;
use kicrank::retriever::{train, RetrieverModel, TrainConfig};
use kicrank::{EntityId, Triple};

/// 50 entities, 5 relations, 100 test triples (200 queries), briefly trained.
pub fn synthetic_setup(seed: u64) -> (KnowledgeGraph, RetrieverModel) {
    let kg = synthetic::random(50, 5, 700, 30, 100, seed).build();
    let cfg = TrainConfig {
        dim: 16,
        batch_size: 64,
        negatives_per_positive: 8,
        steps: 150,
        seed,
        ..TrainConfig::default()
    };
    let mut model = cfg.init_model(&kg);
    train(&mut model, &kg, &cfg).unwrap();
    (kg, model)
}

/// −Σ|h∘r − t| written out coordinate by coordinate.
pub fn straight_line_score(model: &RetrieverModel, t: Triple) -> f64 {
    let (hr, hi) = model.entity(t.head);
    let (tr, ti) = model.entity(t.tail);
    let mut d = 0.0;
    for (k, &p) in model.phases(t.relation).iter().enumerate() {
        let (c, s) = (p.cos(), p.sin());
        let re = hr[k] * c - hi[k] * s - tr[k];
        let im = hr[k] * s + hi[k] * c - ti[k];
        d += (re * re + im * im).sqrt();
    }
    -d
}

/// Every entity completing the query in any split, found by scanning.
pub fn scan_known(kg: &KnowledgeGraph, q: &Query) -> Vec<EntityId> {
    let mut out = Vec::new();
    for split in [Split::Train, Split::Valid, Split::Test] {
        for t in kg.split(split) {
            if t.relation != q.relation {
                continue;
            }
            match q.direction {
                kicrank::Direction::TailMissing if t.head == q.anchor => out.push(t.tail),
                kicrank::Direction::HeadMissing if t.tail == q.anchor => out.push(t.head),
                _ => {}
            }
        }
    }
    out
}

/// Filtered rank by full scan: entities scoring above the answer (or tying
/// with a smaller id) that are not other known answers.
pub fn brute_force_rank(kg: &KnowledgeGraph, model: &RetrieverModel, q: &Query) -> usize {
    let known = scan_known(kg, q);
    let target = straight_line_score(model, q.complete(q.answer));
    let mut rank = 1;
    for e in 0..kg.num_entities() as u32 {
        let e = EntityId(e);
        if e == q.answer || known.contains(&e) {
            continue;
        }
        let s = straight_line_score(model, q.complete(e));
        if s > target || (s == target && e < q.answer) {
            rank += 1;
        }
    }
    rank
}

/// MRR and Hits@{1,3,10} by direct summation.
pub fn brute_force_metrics(ranks: &[usize]) -> [f64; 4] {
    let n = ranks.len() as f64;
    let mut out = [0.0; 4];
    for &r in ranks {
        out[0] += 1.0 / r as f64 / n;
        for (slot, k) in [(1, 1), (2, 3), (3, 10)] {
            if r <= k {
                out[slot] += 1.0 / n;
            }
        }
    }
    out
}
