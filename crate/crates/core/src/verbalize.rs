//! Natural-language rendering of relations, triples and queries.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{Direction, EntityId, KnowledgeGraph, Query, RelationId, Triple};

pub const HEAD_SLOT: &str = "[H]";
pub const TAIL_SLOT: &str = "[T]";
pub const MASK: &str = "[MASK]";

#[derive(Debug, Error)]
pub enum VerbalizeError {
    #[error("no aligned template for relation `{0}`")]
    MissingTemplate(String),
    #[error("template must contain [H] and [T] exactly once: {0:?}")]
    InvalidTemplate(String),
    #[error("{path}:{line}: {reason}")]
    TemplateFile { path: String, line: usize, reason: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Path-style relations, segments reversed and joined with "of".
    FreebaseOfJoin,
    /// Underscore relations rendered as "A be <relation> of B".
    WordnetInfix,
    /// Per-relation templates produced by self-alignment.
    Aligned,
}

/// A relation-specific statement pattern with one `[H]` and one `[T]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedTemplate {
    pub relation: RelationId,
    template: String,
}

impl AlignedTemplate {
    pub fn new(relation: RelationId, template: impl Into<String>) -> Result<Self, VerbalizeError> {
        let template = template.into();
        if template.matches(HEAD_SLOT).count() != 1 || template.matches(TAIL_SLOT).count() != 1 {
            return Err(VerbalizeError::InvalidTemplate(template));
        }
        Ok(Self { relation, template })
    }

    /// The default-scheme statement expressed as a template.
    pub fn fallback(kg: &KnowledgeGraph, relation: RelationId) -> Self {
        let raw = kg.relation_text(relation);
        let template = if is_path_style(raw) {
            format!(
                "{TAIL_SLOT} is the {} of {HEAD_SLOT}",
                verbalize_relation(raw, Scheme::FreebaseOfJoin)
            )
        } else {
            format!(
                "{HEAD_SLOT} be {} of {TAIL_SLOT}",
                verbalize_relation(raw, Scheme::WordnetInfix)
            )
        };
        Self { relation, template }
    }

    pub fn as_str(&self) -> &str {
        &self.template
    }

    pub fn fill(&self, head: &str, tail: &str) -> String {
        // [T] first so a head text containing "[T]" cannot be re-substituted
        let (before, after) = self.template.split_once(HEAD_SLOT).expect("validated");
        let fill_tail = |s: &str| s.replace(TAIL_SLOT, tail);
        format!("{}{head}{}", fill_tail(before), fill_tail(after))
    }
}

fn is_path_style(raw: &str) -> bool {
    raw.contains('/')
}

/// Renders a raw relation identifier as a phrase.
pub fn verbalize_relation(raw: &str, scheme: Scheme) -> String {
    match scheme {
        Scheme::FreebaseOfJoin => {
            if !is_path_style(raw) {
                return raw.replace('_', " ").trim().to_string();
            }
            let segments: Vec<String> = raw
                .split('/')
                .map(|s| s.trim_matches('.').replace('_', " ").trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            segments.into_iter().rev().collect::<Vec<_>>().join(" of ")
        }
        Scheme::WordnetInfix => raw
            .strip_prefix('_')
            .unwrap_or(raw)
            .replace('_', " ")
            .trim()
            .to_string(),
        Scheme::Aligned => {
            if is_path_style(raw) {
                verbalize_relation(raw, Scheme::FreebaseOfJoin)
            } else {
                verbalize_relation(raw, Scheme::WordnetInfix)
            }
        }
    }
}

/// Reads a `relation_id<TAB>template` file. Unknown relations are skipped.
pub fn load_templates(
    path: &Path,
    kg: &KnowledgeGraph,
) -> Result<HashMap<RelationId, AlignedTemplate>, VerbalizeError> {
    let text = fs::read_to_string(path)?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (rel, template) = line.split_once('\t').ok_or_else(|| VerbalizeError::TemplateFile {
            path: path.display().to_string(),
            line: i + 1,
            reason: "expected relation_id<TAB>template".into(),
        })?;
        let Some(r) = kg.relation(rel) else {
            log::warn!("{}:{}: unknown relation `{rel}`", path.display(), i + 1);
            continue;
        };
        out.insert(r, AlignedTemplate::new(r, template)?);
    }
    Ok(out)
}

/// Writes templates sorted by relation id.
pub fn save_templates(
    path: &Path,
    kg: &KnowledgeGraph,
    templates: &HashMap<RelationId, AlignedTemplate>,
) -> Result<(), VerbalizeError> {
    let mut rels: Vec<&RelationId> = templates.keys().collect();
    rels.sort();
    let mut out = String::new();
    for r in rels {
        out.push_str(kg.relation_name(*r));
        out.push('\t');
        out.push_str(templates[r].as_str());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Renders graph elements as text under one scheme.
#[derive(Debug, Clone)]
pub struct Verbalizer<'a> {
    kg: &'a KnowledgeGraph,
    scheme: Scheme,
    templates: HashMap<RelationId, AlignedTemplate>,
}

impl<'a> Verbalizer<'a> {
    pub fn new(kg: &'a KnowledgeGraph, scheme: Scheme) -> Self {
        Self {
            kg,
            scheme,
            templates: HashMap::new(),
        }
    }

    pub fn with_templates(mut self, templates: HashMap<RelationId, AlignedTemplate>) -> Self {
        self.templates = templates;
        self
    }

    /// Gives every relation without an aligned template its fallback one.
    pub fn with_fallback_templates(mut self) -> Self {
        for r in 0..self.kg.num_relations() as u32 {
            let r = RelationId(r);
            self.templates
                .entry(r)
                .or_insert_with(|| AlignedTemplate::fallback(self.kg, r));
        }
        self
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn kg(&self) -> &'a KnowledgeGraph {
        self.kg
    }

    pub fn entity(&self, e: EntityId) -> &'a str {
        self.kg.entity_text(e)
    }

    pub fn relation(&self, r: RelationId) -> String {
        verbalize_relation(self.kg.relation_text(r), self.scheme)
    }

    fn template(&self, r: RelationId) -> Option<&AlignedTemplate> {
        match self.scheme {
            Scheme::Aligned => self.templates.get(&r),
            _ => None,
        }
    }

    fn uses_infix(&self, r: RelationId) -> bool {
        match self.scheme {
            Scheme::WordnetInfix => true,
            Scheme::FreebaseOfJoin => false,
            Scheme::Aligned => !is_path_style(self.kg.relation_text(r)),
        }
    }

    /// Declarative statement of a triple.
    pub fn verbalize_triple(&self, t: &Triple) -> Result<String, VerbalizeError> {
        let h = self.entity(t.head);
        let tail = self.entity(t.tail);
        let rel = self.relation(t.relation);
        Ok(match self.scheme {
            Scheme::FreebaseOfJoin => format!("{tail} is the {rel} of {h}"),
            Scheme::WordnetInfix => format!("{h} be {rel} of {tail}"),
            Scheme::Aligned => self
                .templates
                .get(&t.relation)
                .ok_or_else(|| VerbalizeError::MissingTemplate(self.kg.relation_name(t.relation).to_string()))?
                .fill(h, tail),
        })
    }

    /// The question sentence with `what` in the missing slot.
    fn completion_sentence(&self, q: &Query) -> String {
        let anchor = self.entity(q.anchor);
        if let Some(tpl) = self.template(q.relation) {
            let filled = match q.direction {
                Direction::TailMissing => tpl.fill(anchor, "what"),
                Direction::HeadMissing => tpl.fill("what", anchor),
            };
            return filled.trim_end().trim_end_matches('.').to_string();
        }
        let rel = self.relation(q.relation);
        match (self.uses_infix(q.relation), q.direction) {
            (false, Direction::TailMissing) => format!("what is the {rel} of {anchor}"),
            (false, Direction::HeadMissing) => format!("{anchor} is the {rel} of what"),
            (true, Direction::TailMissing) => format!("{anchor} be {rel} of what"),
            (true, Direction::HeadMissing) => format!("what be {rel} of {anchor}"),
        }
    }

    /// Cloze form of a query with `[MASK]` in the missing slot.
    pub fn verbalize_query(&self, q: &Query) -> String {
        let anchor = self.entity(q.anchor);
        let rel = self.relation(q.relation);
        let (slot, tuple) = match q.direction {
            Direction::TailMissing => ("tail", format!("({anchor},{rel}, {MASK})")),
            Direction::HeadMissing => ("head", format!("({MASK},{rel}, {anchor})")),
        };
        format!(
            "predict the {slot} entity {MASK} from the given {tuple} by completing the sentence \"{}? The answer is \".",
            self.completion_sentence(q)
        )
    }

    /// `name : description.` when a description is known.
    pub fn definition(&self, e: EntityId) -> Option<String> {
        self.kg.entity_description(e).map(|d| {
            let d = d.trim();
            let name = self.entity(e);
            if d.ends_with('.') {
                format!("{name} : {d}")
            } else {
                format!("{name} : {d}.")
            }
        })
    }

    /// Statement preceded by the tail and head definitions.
    pub fn statement_with_definitions(&self, t: &Triple) -> String {
        let statement = self.verbalize_triple(t).unwrap_or_else(|_| {
            AlignedTemplate::fallback(self.kg, t.relation).fill(self.entity(t.head), self.entity(t.tail))
        });
        let mut parts: Vec<String> = Vec::new();
        if let Some(d) = self.definition(t.tail) {
            parts.push(d);
        }
        if t.head != t.tail {
            if let Some(d) = self.definition(t.head) {
                parts.push(d);
            }
        }
        parts.push(format!("{statement}."));
        parts.join(" ")
    }

    /// A solved example as shown to the model.
    pub fn demonstration(&self, t: &Triple, direction: Direction) -> String {
        if self.uses_infix(t.relation) && self.scheme != Scheme::Aligned {
            return self.statement_with_definitions(t);
        }
        let q = Query::from_triple(*t, direction);
        let answer = self.entity(q.answer);
        format!(
            "{} The answer is {answer}, so the {MASK} is {answer}.",
            self.verbalize_query(&q)
        )
    }

    /// The statement to be scored for one candidate answer.
    pub fn candidate_statement(&self, q: &Query, candidate: EntityId) -> String {
        self.statement_with_definitions(&q.complete(candidate))
    }

    /// What the scored statements are about, e.g. "member of domain usage of trade name".
    pub fn query_topic(&self, q: &Query) -> String {
        let anchor = self.entity(q.anchor);
        let rel = self.relation(q.relation);
        match (self.uses_infix(q.relation), q.direction) {
            (true, Direction::HeadMissing) => format!("{rel} of {anchor}"),
            (true, Direction::TailMissing) => format!("{anchor} be {rel} of"),
            (false, Direction::TailMissing) => format!("the {rel} of {anchor}"),
            (false, Direction::HeadMissing) => format!("{anchor} being the {rel} of"),
        }
    }
}
