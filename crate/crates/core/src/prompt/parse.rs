//! Reading model replies back into orders, scores and templates.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::kg::{KnowledgeGraph, RelationId};
use crate::verbalize::{AlignedTemplate, HEAD_SLOT, TAIL_SLOT};

use super::Style;

pub const FINAL_ORDER_MARKER: &str = "The final order:";

/// Score given to a candidate whose reply carried no number.
pub const SCORE_SENTINEL: f64 = -1.0;

/// What had to be fixed to turn a reply into a usable answer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Repairs {
    /// Items that matched no candidate or repeated an earlier one.
    pub dropped: usize,
    /// Candidates the reply left out, appended in retriever order.
    pub appended: usize,
    /// Scores outside 0..=100 pulled back into range.
    pub clamped: usize,
    pub hard_failures: usize,
}

impl Repairs {
    pub fn add(&mut self, other: Repairs) {
        self.dropped += other.dropped;
        self.appended += other.appended;
        self.clamped += other.clamped;
        self.hard_failures += other.hard_failures;
    }

    pub fn hard_failure(&self) -> bool {
        self.hard_failures > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParseOutcome<T> {
    pub value: T,
    pub repairs: Repairs,
}

/// Case-folded with whitespace runs collapsed to one space.
pub fn normalize(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// The instructed reply syntax for an order over `names`.
pub fn format_sort_response<S: AsRef<str>>(names: &[S]) -> String {
    let items: Vec<&str> = names.iter().map(AsRef::as_ref).collect();
    format!("{FINAL_ORDER_MARKER} [{}]", items.join(" | "))
}

fn bracketed(text: &str) -> Option<&str> {
    let lower = text.to_lowercase();
    let marker = FINAL_ORDER_MARKER.to_lowercase();
    // to_lowercase can change byte lengths outside ASCII; fall back to the raw text then.
    let start = match lower.find(&marker) {
        Some(at) if lower.len() == text.len() => at + marker.len(),
        _ => 0,
    };
    let rest = &text[start..];
    let open = rest.find('[')?;
    let body = &rest[open + 1..];
    Some(match body.find(']') {
        Some(close) => &body[..close],
        None => body,
    })
}

/// Indices into `candidates` in the order the reply gives, repaired into a
/// permutation. A reply with no recognizable candidate yields the input order
/// and a hard failure.
pub fn parse_sort_response<S: AsRef<str>>(text: &str, candidates: &[S]) -> ParseOutcome<Vec<usize>> {
    let n = candidates.len();
    let mut lookup: HashMap<String, usize> = HashMap::with_capacity(n);
    for (i, c) in candidates.iter().enumerate() {
        lookup.entry(normalize(c.as_ref())).or_insert(i);
    }
    let mut taken = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut repairs = Repairs::default();
    if let Some(body) = bracketed(text) {
        for item in body.split('|') {
            let key = normalize(item.trim().trim_matches(|c| c == '"' || c == '\''));
            if key.is_empty() {
                continue;
            }
            match lookup.get(&key) {
                Some(&i) if !taken[i] => {
                    taken[i] = true;
                    order.push(i);
                }
                _ => repairs.dropped += 1,
            }
        }
    }
    if order.is_empty() {
        return ParseOutcome {
            value: (0..n).collect(),
            repairs: Repairs {
                hard_failures: 1,
                ..repairs
            },
        };
    }
    for (i, done) in taken.iter().enumerate() {
        if !done {
            order.push(i);
            repairs.appended += 1;
        }
    }
    ParseOutcome { value: order, repairs }
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?\d+(?:\.\d+)?").expect("valid regex"))
}

/// First number in the reply, clamped to 0..=100; the sentinel when there is none.
pub fn parse_score_response(text: &str) -> ParseOutcome<f64> {
    let mut repairs = Repairs::default();
    let parsed = number_re()
        .find(text)
        .and_then(|m| m.as_str().parse::<f64>().ok())
        .filter(|v| v.is_finite());
    let value = match parsed {
        Some(v) if (0.0..=100.0).contains(&v) => v,
        Some(v) => {
            repairs.clamped = 1;
            v.clamp(0.0, 100.0)
        }
        None => {
            repairs.hard_failures = 1;
            SCORE_SENTINEL
        }
    };
    ParseOutcome { value, repairs }
}

/// Orders candidate indices by descending score, keeping input order on ties.
pub fn order_by_scores(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Template recovered from an alignment reply, or the fallback.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentOutcome {
    pub template: AlignedTemplate,
    pub fallback: bool,
}

fn alignment_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)it means A is\s+(.+)").expect("valid regex"))
}

fn b_token_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\bB\b").expect("valid regex"))
}

/// Reads "... it means A is {fill}." into "{A} is {fill}." with B replaced.
///
/// A is the entity the statement form writes first: the tail for Freebase
/// statements ("T is the r of H"), the head for WordNet ones ("H be r of T").
pub fn parse_alignment_response(
    text: &str,
    kg: &KnowledgeGraph,
    relation: RelationId,
    style: Style,
) -> AlignmentOutcome {
    let (a_slot, b_slot) = match style {
        Style::Freebase => (TAIL_SLOT, HEAD_SLOT),
        Style::Wordnet => (HEAD_SLOT, TAIL_SLOT),
    };
    let parsed = alignment_re().captures(text).and_then(|c| {
        let line = c.get(1)?.as_str().lines().next()?.trim();
        let fill = line.trim_end_matches(['.', '"', ' ']).trim();
        if fill.is_empty() || fill.to_lowercase().contains("[mask]") {
            return None;
        }
        if b_token_re().find_iter(fill).count() != 1 || fill.contains(HEAD_SLOT) || fill.contains(TAIL_SLOT) {
            return None;
        }
        let fill = b_token_re().replace(fill, b_slot);
        AlignedTemplate::new(relation, format!("{a_slot} is {fill}.")).ok()
    });
    match parsed {
        Some(template) => AlignmentOutcome {
            template,
            fallback: false,
        },
        None => AlignmentOutcome {
            template: AlignedTemplate::fallback(kg, relation),
            fallback: true,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::RawDataset;
    use proptest::prelude::*;

    #[test]
    fn clean_sort_reply() {
        let out = parse_sort_response("The final order: [b | a | c]", &["a", "b", "c"]);
        assert_eq!(out.value, vec![1, 0, 2]);
        assert_eq!(out.repairs, Repairs::default());
    }

    #[test]
    fn unknown_dropped_missing_appended() {
        let out = parse_sort_response("The final order: [b | z | a]", &["a", "b", "c"]);
        assert_eq!(out.value, vec![1, 0, 2]);
        assert_eq!(out.repairs.dropped, 1);
        assert_eq!(out.repairs.appended, 1);
        assert!(!out.repairs.hard_failure());
    }

    #[test]
    fn refusal_is_hard_failure() {
        let out = parse_sort_response("I cannot answer.", &["a", "b", "c"]);
        assert_eq!(out.value, vec![0, 1, 2]);
        assert!(out.repairs.hard_failure());
    }

    #[test]
    fn matching_ignores_case_spacing_and_duplicates() {
        let cands = ["Domestic partnership", "Civil union", "Marriage"];
        let out = parse_sort_response(
            "the FINAL order: [ marriage |  domestic   PARTNERSHIP | Marriage ].",
            &cands,
        );
        assert_eq!(out.value, vec![2, 0, 1]);
        assert_eq!(out.repairs.dropped, 1);
        assert_eq!(out.repairs.appended, 1);
    }

    #[test]
    fn bracket_without_marker_is_accepted() {
        let out = parse_sort_response("Sure! [c | b | a]", &["a", "b", "c"]);
        assert_eq!(out.value, vec![2, 1, 0]);
    }

    #[test]
    fn sample_reply_parses() {
        let cands = [
            "Marriage",
            "Domestic partnership",
            "Civil union",
            "Official Website",
            "Rang De Basanti",
            "HBO",
            "Male",
            "Television",
            "Judaism-GB",
            "Crusades",
        ];
        let reply = "The final order: [Marriage | Domestic partnership | Civil union | Official Website | HBO | Male | Television | Rang De Basanti | Judaism-GB | Crusades].";
        let out = parse_sort_response(reply, &cands);
        assert_eq!(out.value, vec![0, 1, 2, 3, 5, 6, 7, 4, 8, 9]);
        assert_eq!(out.repairs, Repairs::default());
    }

    #[test]
    fn scores() {
        assert_eq!(parse_score_response("90.").value, 90.0);
        let clamped = parse_score_response("Score: 150");
        assert_eq!(clamped.value, 100.0);
        assert_eq!(clamped.repairs.clamped, 1);
        let none = parse_score_response("no idea");
        assert_eq!(none.value, SCORE_SENTINEL);
        assert!(none.repairs.hard_failure());
        assert_eq!(parse_score_response("-3").value, 0.0);
        assert_eq!(parse_score_response("about 72.5 out of 100").value, 72.5);
    }

    #[test]
    fn score_order_is_stable() {
        assert_eq!(order_by_scores(&[50.0, 90.0, 50.0]), vec![1, 0, 2]);
        assert_eq!(order_by_scores(&[SCORE_SENTINEL, 0.0, SCORE_SENTINEL]), vec![1, 0, 2]);
    }

    fn kg() -> KnowledgeGraph {
        RawDataset {
            train: vec![["m1".into(), "/location/location/partially_contains".into(), "m2".into()]],
            ..Default::default()
        }
        .build()
    }

    #[test]
    fn alignment_table_reply() {
        let kg = kg();
        let reply = "If the example shows something A is partially_contains of location of location of of something B, it means A is located partially within the boundaries of B.";
        let out = parse_alignment_response(reply, &kg, RelationId(0), Style::Freebase);
        assert!(!out.fallback);
        assert_eq!(
            out.template.as_str(),
            "[T] is located partially within the boundaries of [H]."
        );
    }

    #[test]
    fn alignment_worked_example() {
        let kg = kg();
        let reply = "it means A is the country where the TV program B originated from.";
        let out = parse_alignment_response(reply, &kg, RelationId(0), Style::Freebase);
        assert_eq!(
            out.template.as_str(),
            "[T] is the country where the TV program [H] originated from."
        );
        assert_eq!(
            out.template.fill("Friends", "USA"),
            "USA is the country where the TV program Friends originated from."
        );
    }

    #[test]
    fn alignment_wordnet_binds_a_to_head() {
        let kg = kg();
        let reply = "If the example shows something A be member of domain usage of something B, it means A is a term or word that belongs to the category or domain of B's usage.";
        let out = parse_alignment_response(reply, &kg, RelationId(0), Style::Wordnet);
        assert_eq!(
            out.template.as_str(),
            "[H] is a term or word that belongs to the category or domain of [T]'s usage."
        );
    }

    #[test]
    fn alignment_failures_fall_back() {
        let kg = kg();
        for reply in [
            "The final order: [a | b]",
            "it means A is [mask] of B.",
            "it means A is a thing.",
            "it means A is B of B.",
            "",
        ] {
            let out = parse_alignment_response(reply, &kg, RelationId(0), Style::Freebase);
            assert!(out.fallback, "{reply:?}");
            assert_eq!(out.template, AlignedTemplate::fallback(&kg, RelationId(0)));
        }
    }

    fn name() -> impl Strategy<Value = String> {
        "[A-Za-z0-9][A-Za-z0-9 ,.'()-]{0,12}[A-Za-z0-9)]"
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn format_parse_round_trip(set in prop::collection::btree_set(name(), 1..12), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut names: Vec<String> = Vec::new();
            let mut seen = std::collections::HashSet::new();
            for n in set {
                if seen.insert(normalize(&n)) {
                    names.push(n);
                }
            }
            let mut shuffled: Vec<usize> = (0..names.len()).collect();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let reply: Vec<&str> = shuffled.iter().map(|&i| names[i].as_str()).collect();
            let out = parse_sort_response(&format_sort_response(&reply), &names);
            prop_assert_eq!(out.value, shuffled);
            prop_assert_eq!(out.repairs, Repairs::default());
        }

        #[test]
        fn any_reply_yields_permutation(reply in ".{0,80}", n in 1usize..8) {
            let names: Vec<String> = (0..n).map(|i| format!("cand {i}")).collect();
            let mut out = parse_sort_response(&reply, &names).value;
            out.sort_unstable();
            prop_assert_eq!(out, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn score_order_ignores_offsets(scores in prop::collection::vec(0u8..=100, 1..10), shift in -50i32..50) {
            let a: Vec<f64> = scores.iter().map(|&s| f64::from(s)).collect();
            let b: Vec<f64> = a.iter().map(|s| s + f64::from(shift)).collect();
            prop_assert_eq!(order_by_scores(&a), order_by_scores(&b));
        }

        #[test]
        fn score_is_in_range_or_sentinel(reply in ".{0,40}") {
            let v = parse_score_response(&reply).value;
            prop_assert!(v == SCORE_SENTINEL || (0.0..=100.0).contains(&v));
        }
    }
}
