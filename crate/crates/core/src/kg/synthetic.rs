//! Small generated graphs for tests, demos and the acceptance suite.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;

use super::RawDataset;
use crate::seed;

fn entity_name(i: usize) -> String {
    format!("e{i:04}")
}

fn triple(h: usize, r: &str, t: usize) -> [String; 3] {
    [entity_name(h), r.to_string(), entity_name(t)]
}

/// Entities on a ring with one relation per shift: `shift_k` maps `i` to
/// `(i + k) mod n`. Every relation is a bijection, so each query has a single
/// answer. The first shift stays entirely in train; `test_triples` and
/// `valid_triples` are drawn from the remaining (compositional) shifts.
pub fn ring(n_entities: usize, shifts: &[usize], valid_triples: usize, test_triples: usize, seed: u64) -> RawDataset {
    let mut rng = seed::substream(seed, "synthetic-ring");
    let rel = |k: usize| format!("/ring/step/shift_{k}");
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (pos, &k) in shifts.iter().enumerate() {
        for i in 0..n_entities {
            let t = triple(i, &rel(k), (i + k) % n_entities);
            if pos == 0 {
                train.push(t);
            } else {
                held.push(t);
            }
        }
    }
    held.shuffle(&mut rng);
    assert!(
        valid_triples + test_triples <= held.len(),
        "not enough compositional triples to hold out"
    );
    let test: Vec<_> = held.drain(..test_triples).collect();
    let valid: Vec<_> = held.drain(..valid_triples).collect();
    train.extend(held);
    let mut raw = RawDataset {
        train,
        valid,
        test,
        ..Default::default()
    };
    for i in 0..n_entities {
        raw.entity_text.insert(entity_name(i), format!("station {i}"));
    }
    raw
}

/// Uniformly random distinct triples split into train/valid/test.
pub fn random(
    n_entities: usize,
    n_relations: usize,
    n_triples: usize,
    valid_triples: usize,
    test_triples: usize,
    seed: u64,
) -> RawDataset {
    assert!(n_entities > 0 && n_relations > 0);
    assert!(n_triples <= n_entities * n_entities * n_relations);
    let mut rng = seed::substream(seed, "synthetic-random");
    let rels: Vec<String> = (0..n_relations)
        .map(|r| format!("/synthetic/kind_{r}/link_{r}"))
        .collect();
    let mut seen = HashSet::new();
    let mut all = Vec::with_capacity(n_triples);
    while all.len() < n_triples {
        let h = rng.random_range(0..n_entities);
        let r = rng.random_range(0..n_relations);
        let t = rng.random_range(0..n_entities);
        if seen.insert((h, r, t)) {
            all.push(triple(h, &rels[r], t));
        }
    }
    assert!(valid_triples + test_triples <= all.len());
    let test: Vec<_> = all.drain(..test_triples).collect();
    let valid: Vec<_> = all.drain(..valid_triples).collect();
    let mut raw = RawDataset {
        train: all,
        valid,
        test,
        ..Default::default()
    };
    for i in 0..n_entities {
        raw.entity_text.insert(entity_name(i), format!("item {i}"));
    }
    raw
}
