//! Diversity ordering of an analogy pool.
//!
//! Every entity starts with a zero counter. A uniformly random triple goes
//! first; afterwards the remaining triple with the smallest
//! `counter(head) + counter(tail)` is appended (uniform choice among ties,
//! counted in pool order) and its endpoint counters are incremented.
//!
//! The minimum and its multiplicity are maintained in a segment tree, so a
//! pick costs `O(log n)` plus one leaf update per remaining triple sharing
//! an endpoint with the picked one.

use std::collections::HashMap;

use rand::Rng;

use crate::kg::{EntityId, Triple};

const REMOVED: u32 = u32::MAX;

/// Min-with-multiplicity segment tree over leaf values.
struct MinCountTree {
    size: usize,
    min: Vec<u32>,
    count: Vec<u32>,
}

impl MinCountTree {
    fn new(n: usize) -> Self {
        let size = n.next_power_of_two().max(1);
        let mut tree = Self {
            size,
            min: vec![REMOVED; 2 * size],
            count: vec![0; 2 * size],
        };
        for i in 0..n {
            tree.min[size + i] = 0;
            tree.count[size + i] = 1;
        }
        for node in (1..size).rev() {
            tree.pull(node);
        }
        tree
    }

    fn pull(&mut self, node: usize) {
        let (l, r) = (2 * node, 2 * node + 1);
        let m = self.min[l].min(self.min[r]);
        self.min[node] = m;
        self.count[node] = if m == REMOVED {
            0
        } else {
            (if self.min[l] == m { self.count[l] } else { 0 }) + (if self.min[r] == m { self.count[r] } else { 0 })
        };
    }

    fn set(&mut self, i: usize, value: u32) {
        let mut node = self.size + i;
        self.min[node] = value;
        self.count[node] = u32::from(value != REMOVED);
        while node > 1 {
            node /= 2;
            self.pull(node);
        }
    }

    fn get(&self, i: usize) -> u32 {
        self.min[self.size + i]
    }

    fn root(&self) -> (u32, u32) {
        (self.min[1], self.count[1])
    }

    /// Leaf index of the `k`-th (0-based, left to right) leaf holding the minimum.
    fn kth_min(&self, mut k: u32) -> usize {
        let target = self.min[1];
        let mut node = 1;
        while node < self.size {
            let l = 2 * node;
            if self.min[l] == target {
                if k < self.count[l] {
                    node = l;
                    continue;
                }
                k -= self.count[l];
            }
            node = l + 1;
        }
        node - self.size
    }
}

/// Orders `pool` for entity diversity. Returns a permutation of the pool.
pub fn order_analogy<R: Rng + ?Sized>(pool: &[Triple], rng: &mut R) -> Vec<Triple> {
    order_analogy_indices(pool, rng).into_iter().map(|i| pool[i]).collect()
}

/// As [`order_analogy`], returning pool positions.
pub fn order_analogy_indices<R: Rng + ?Sized>(pool: &[Triple], rng: &mut R) -> Vec<usize> {
    let n = pool.len();
    if n == 0 {
        return Vec::new();
    }
    let mut incident: HashMap<EntityId, Vec<usize>> = HashMap::new();
    for (i, t) in pool.iter().enumerate() {
        incident.entry(t.head).or_default().push(i);
        if t.tail != t.head {
            incident.entry(t.tail).or_default().push(i);
        }
    }
    let mut tree = MinCountTree::new(n);
    let mut out = Vec::with_capacity(n);

    let take = |i: usize, tree: &mut MinCountTree, out: &mut Vec<usize>| {
        tree.set(i, REMOVED);
        out.push(i);
        let t = pool[i];
        // each endpoint counter goes up by one; a self-loop bumps its entity twice
        for e in [t.head, t.tail] {
            for &j in &incident[&e] {
                let v = tree.get(j);
                if v == REMOVED {
                    continue;
                }
                let u = pool[j];
                let hits = u32::from(u.head == e) + u32::from(u.tail == e);
                tree.set(j, v + hits);
            }
        }
    };

    let first = rng.random_range(0..n);
    take(first, &mut tree, &mut out);
    while out.len() < n {
        let (_, ties) = tree.root();
        let k = rng.random_range(0..ties);
        let i = tree.kth_min(k);
        take(i, &mut tree, &mut out);
    }
    out
}
