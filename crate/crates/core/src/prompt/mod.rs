//! The four-stage conversation, reply parsing and the re-ranking call.
//!
//! A conversation is a shared prefix (responsibility, description,
//! demonstration batches, each followed by a scripted acknowledgment) plus
//! one or more final user turns. Each final turn is sent after the prefix as
//! its own request: sort mode has a single final turn, score mode one per
//! candidate.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demo::DemonstrationSet;
use crate::gateway::{Expect, Gateway, GatewayError, Hints};
use crate::kg::{EntityId, Query, RelationId, Triple};
use crate::verbalize::{AlignedTemplate, Verbalizer};

pub mod parse;
pub mod templates;

pub use parse::{
    format_sort_response, order_by_scores, parse_alignment_response, parse_score_response, parse_sort_response,
    AlignmentOutcome, ParseOutcome, Repairs, SCORE_SENTINEL,
};
pub use templates::{Stage, Templates};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("token budget {limit} cannot hold the prompt without demonstrations ({needed} tokens)")]
    BudgetTooSmall { needed: usize, limit: usize },
    #[error("no analogy demonstrations for relation {0}")]
    EmptyAnalogyPool(String),
    #[error("no candidates to re-rank")]
    NoCandidates,
    #[error("prompt templates: {0}")]
    Templates(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// How the model is asked to re-rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One request returning the whole order.
    Sort,
    /// One 0-100 score request per candidate.
    Score,
}

/// Wording family, following the dataset the prompts were written for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Freebase,
    Wordnet,
}

impl Mode {
    /// Score mode for WordNet-like datasets, sort mode otherwise.
    pub fn default_for_dataset(name: &str) -> Self {
        match Style::default_for_dataset(name) {
            Style::Wordnet => Mode::Score,
            Style::Freebase => Mode::Sort,
        }
    }
}

impl Style {
    pub fn default_for_dataset(name: &str) -> Self {
        if name.to_lowercase().contains("wn") {
            Style::Wordnet
        } else {
            Style::Freebase
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Sort => "sort",
            Mode::Score => "score",
        })
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Style::Freebase => "freebase",
            Style::Wordnet => "wordnet",
        })
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sort" => Ok(Mode::Sort),
            "score" => Ok(Mode::Score),
            _ => Err(format!("unknown mode {s:?} (expected sort or score)")),
        }
    }
}

impl FromStr for Style {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "freebase" => Ok(Style::Freebase),
            "wordnet" => Ok(Style::Wordnet),
            _ => Err(format!("unknown style {s:?} (expected freebase or wordnet)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

/// Protocol stage a message belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Part {
    Responsibility,
    Description,
    Demonstrations,
    FinalQuery,
    Alignment,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub part: Part,
    pub text: String,
}

impl Message {
    fn user(part: Part, text: String) -> Self {
        Self {
            role: Role::User,
            part,
            text,
        }
    }

    fn assistant(part: Part, text: String) -> Self {
        Self {
            role: Role::Assistant,
            part,
            text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub mode: Mode,
    /// Shared history, ending with an assistant turn when non-empty.
    pub prefix: Vec<Message>,
    /// User turns that each expect a reply, sent one at a time after `prefix`.
    pub finals: Vec<Message>,
    /// Prefix plus the longest final turn.
    pub estimated_tokens: usize,
    pub analogy_used: usize,
    pub supplement_used: usize,
}

impl Conversation {
    /// The messages of the `i`-th request.
    pub fn request(&self, i: usize) -> Vec<Message> {
        let mut msgs = self.prefix.clone();
        msgs.push(self.finals[i].clone());
        msgs
    }

    /// Prefix followed by every final turn.
    pub fn messages(&self) -> impl Iterator<Item = &Message> {
        self.prefix.iter().chain(&self.finals)
    }
}

/// Default estimator: one token per four bytes, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}

fn tokens_of<'a>(msgs: impl IntoIterator<Item = &'a Message>) -> usize {
    msgs.into_iter().map(|m| estimate_tokens(&m.text)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub mode: Mode,
    pub style: Style,
    pub budget: usize,
    /// Tokens kept free for the reply.
    pub reply_reserve: usize,
    /// Triples per demonstration kind in each stage-3 turn.
    pub demo_batch_size: usize,
    /// Skip the demonstration stage.
    pub no_icl: bool,
    /// One flat user message instead of the staged dialogue.
    pub trivial_prompt: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Sort,
            style: Style::Freebase,
            budget: 4096,
            reply_reserve: 512,
            demo_batch_size: 4,
            no_icl: false,
            trivial_prompt: false,
        }
    }
}

impl PromptConfig {
    fn limit(&self) -> usize {
        self.budget.saturating_sub(self.reply_reserve)
    }
}

/// Display names for candidates; names that collide after normalization get
/// the raw entity id appended.
pub fn candidate_names(verbalizer: &Verbalizer<'_>, candidates: &[EntityId]) -> Vec<String> {
    let texts: Vec<&str> = candidates.iter().map(|&c| verbalizer.entity(c)).collect();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for t in &texts {
        *counts.entry(parse::normalize(t)).or_default() += 1;
    }
    candidates
        .iter()
        .zip(&texts)
        .map(|(&c, t)| {
            if counts[&parse::normalize(t)] > 1 {
                format!("{t} ({})", verbalizer.kg().entity_name(c))
            } else {
                t.to_string()
            }
        })
        .collect()
}

/// Renders a prompt for one query.
pub struct Conductor<'a> {
    pub verbalizer: &'a Verbalizer<'a>,
    pub templates: &'a Templates,
    pub config: &'a PromptConfig,
}

impl<'a> Conductor<'a> {
    pub fn new(verbalizer: &'a Verbalizer<'a>, templates: &'a Templates, config: &'a PromptConfig) -> Self {
        Self {
            verbalizer,
            templates,
            config,
        }
    }

    fn text(&self, stage: Stage, vars: &[(&str, &str)]) -> String {
        self.templates.render(stage, self.config.mode, self.config.style, vars)
    }

    fn final_turns(&self, query: &Query, candidates: &[EntityId]) -> Vec<String> {
        match self.config.mode {
            Mode::Sort => {
                let names = candidate_names(self.verbalizer, candidates).join(", ");
                let question = self.verbalizer.verbalize_query(query);
                vec![self.text(Stage::Final, &[("candidates", &names), ("question", &question)])]
            }
            Mode::Score => candidates
                .iter()
                .map(|&c| {
                    let statement = self.verbalizer.candidate_statement(query, c);
                    self.text(Stage::Final, &[("statement", &statement)])
                })
                .collect(),
        }
    }

    fn description(&self, query: &Query) -> String {
        let question = self.verbalizer.verbalize_query(query);
        let topic = self.verbalizer.query_topic(query);
        let definition = self
            .verbalizer
            .definition(query.anchor)
            .map(|d| format!("{d} "))
            .unwrap_or_default();
        self.text(
            Stage::Description,
            &[("question", &question), ("topic", &topic), ("definition", &definition)],
        )
    }

    fn section(&self, stage: Stage, examples: &[String]) -> String {
        if examples.is_empty() {
            return String::new();
        }
        let wrapped: Vec<String> = examples
            .iter()
            .map(|e| self.text(Stage::Example, &[("example", e)]))
            .collect();
        self.text(stage, &[("examples", &wrapped.join("\n"))])
    }

    fn demonstration_turn(&self, analogy: &[String], supplement: &[String]) -> String {
        format!(
            "{}{}{}",
            self.section(Stage::AnalogySection, analogy),
            self.section(Stage::SupplementSection, supplement),
            self.text(Stage::DemonstrationsEnd, &[])
        )
    }

    /// The `i`-th batch of each demonstration stream, rendered.
    fn batch(&self, query: &Query, demos: &DemonstrationSet, i: usize) -> Option<(Vec<String>, Vec<String>)> {
        let b = self.config.demo_batch_size.max(1);
        let slice = |list: &[Triple]| -> Vec<String> {
            list.iter()
                .skip(i * b)
                .take(b)
                .map(|t| self.verbalizer.demonstration(t, query.direction))
                .collect()
        };
        let a = slice(&demos.analogy_order);
        let s = slice(&demos.supplement_order);
        (!a.is_empty() || !s.is_empty()).then_some((a, s))
    }

    /// Assembles the conversation, packing demonstration batches while the
    /// budget allows.
    pub fn build_conversation(
        &self,
        query: &Query,
        demos: &DemonstrationSet,
        candidates: &[EntityId],
    ) -> Result<Conversation, PromptError> {
        if candidates.is_empty() {
            return Err(PromptError::NoCandidates);
        }
        if self.config.trivial_prompt {
            return self.build_trivial(query, demos, candidates);
        }
        let limit = self.config.limit();
        let finals: Vec<Message> = self
            .final_turns(query, candidates)
            .into_iter()
            .map(|t| Message::user(Part::FinalQuery, t))
            .collect();
        let longest_final = finals.iter().map(|m| estimate_tokens(&m.text)).max().unwrap_or(0);
        let mut prefix = vec![
            Message::user(Part::Responsibility, self.text(Stage::Responsibility, &[])),
            Message::assistant(Part::Responsibility, self.text(Stage::ResponsibilityAck, &[])),
            Message::user(Part::Description, self.description(query)),
            Message::assistant(Part::Description, self.text(Stage::DescriptionAck, &[])),
        ];
        let mut used = tokens_of(&prefix) + longest_final;
        if used > limit {
            return Err(PromptError::BudgetTooSmall { needed: used, limit });
        }
        let (mut analogy_used, mut supplement_used) = (0, 0);
        if !self.config.no_icl {
            let ack = self.text(Stage::DemonstrationsAck, &[]);
            let mut i = 0;
            while let Some((a, s)) = self.batch(query, demos, i) {
                let turn = self.demonstration_turn(&a, &s);
                let cost = estimate_tokens(&turn) + estimate_tokens(&ack);
                if used + cost > limit {
                    break;
                }
                used += cost;
                analogy_used += a.len();
                supplement_used += s.len();
                prefix.push(Message::user(Part::Demonstrations, turn));
                prefix.push(Message::assistant(Part::Demonstrations, ack.clone()));
                i += 1;
            }
        }
        Ok(Conversation {
            mode: self.config.mode,
            prefix,
            finals,
            estimated_tokens: used,
            analogy_used,
            supplement_used,
        })
    }

    /// Demonstrations as plain lines followed by the final request, in a
    /// single user message per request.
    fn build_trivial(
        &self,
        query: &Query,
        demos: &DemonstrationSet,
        candidates: &[EntityId],
    ) -> Result<Conversation, PromptError> {
        let limit = self.config.limit();
        let finals = self.final_turns(query, candidates);
        let longest = finals.iter().map(|t| estimate_tokens(t)).max().unwrap_or(0);
        if longest > limit {
            return Err(PromptError::BudgetTooSmall { needed: longest, limit });
        }
        let mut lines: Vec<String> = Vec::new();
        let (mut analogy_used, mut supplement_used) = (0, 0);
        if !self.config.no_icl {
            let mut i = 0;
            while let Some((a, s)) = self.batch(query, demos, i) {
                let mut next = lines.clone();
                next.extend(a.iter().cloned());
                next.extend(s.iter().cloned());
                if estimate_tokens(&with_demos(&next, &finals[0])) > limit
                    || finals.iter().any(|f| estimate_tokens(&with_demos(&next, f)) > limit)
                {
                    break;
                }
                analogy_used += a.len();
                supplement_used += s.len();
                lines = next;
                i += 1;
            }
        }
        let finals: Vec<Message> = finals
            .iter()
            .map(|f| Message::user(Part::FinalQuery, with_demos(&lines, f)))
            .collect();
        let estimated_tokens = finals.iter().map(|m| estimate_tokens(&m.text)).max().unwrap_or(0);
        Ok(Conversation {
            mode: self.config.mode,
            prefix: Vec::new(),
            finals,
            estimated_tokens,
            analogy_used,
            supplement_used,
        })
    }

    /// Asks the model to re-order `candidates` (the retriever's top-m, in
    /// retriever order). The result is always a permutation of the input.
    pub fn rerank_candidates(
        &self,
        query: &Query,
        demos: &DemonstrationSet,
        candidates: &[EntityId],
        gateway: &Gateway,
    ) -> Result<RerankOutcome, PromptError> {
        let conversation = self.build_conversation(query, demos, candidates)?;
        let mut repairs = Repairs::default();
        let order: Vec<usize> = match self.config.mode {
            Mode::Sort => {
                let names = candidate_names(self.verbalizer, candidates);
                let hints = Hints {
                    expect: Expect::Order { names: names.clone() },
                    query: Some(*query),
                    candidates: candidates.to_vec(),
                };
                let reply = gateway.complete(&conversation.request(0), &hints)?;
                let parsed = parse_sort_response(&reply, &names);
                repairs.add(parsed.repairs);
                parsed.value
            }
            Mode::Score => {
                let mut scores = Vec::with_capacity(candidates.len());
                for i in 0..candidates.len() {
                    let hints = Hints {
                        expect: Expect::Score { candidate: i },
                        query: Some(*query),
                        candidates: candidates.to_vec(),
                    };
                    let reply = gateway.complete(&conversation.request(i), &hints)?;
                    let parsed = parse_score_response(&reply);
                    repairs.add(parsed.repairs);
                    scores.push(parsed.value);
                }
                order_by_scores(&scores)
            }
        };
        Ok(RerankOutcome {
            order: order.into_iter().map(|i| candidates[i]).collect(),
            repairs,
            conversation,
        })
    }

    /// One user turn listing the leading analogy demonstrations of
    /// `relation` and asking for a short paraphrase of it.
    pub fn build_alignment_prompt(
        &self,
        relation: RelationId,
        analogy_order: &[Triple],
    ) -> Result<Conversation, PromptError> {
        let kg = self.verbalizer.kg();
        if analogy_order.is_empty() {
            return Err(PromptError::EmptyAnalogyPool(kg.relation_name(relation).to_string()));
        }
        let rel = self.verbalizer.relation(relation);
        let (quoted, statement_relation) = match self.config.style {
            Style::Freebase => (format!("{rel} of"), format!("is the {rel} of")),
            Style::Wordnet => (format!("be {rel} of"), format!("be {rel} of")),
        };
        let intro = self.text(Stage::AlignmentIntro, &[]);
        let instruction = self.text(
            Stage::AlignmentInstruction,
            &[("relation", &quoted), ("statement_relation", &statement_relation)],
        );
        let limit = self.config.limit();
        let render = |lines: &[String]| format!("{intro}\n{}\n{instruction}", lines.join("\n"));
        let mut lines: Vec<String> = Vec::new();
        for t in analogy_order {
            let statement = self.verbalizer.verbalize_triple(t).unwrap_or_else(|_| {
                AlignedTemplate::fallback(kg, relation)
                    .fill(self.verbalizer.entity(t.head), self.verbalizer.entity(t.tail))
            });
            lines.push(statement);
            if estimate_tokens(&render(&lines)) > limit {
                lines.pop();
                break;
            }
        }
        if lines.is_empty() {
            return Err(PromptError::BudgetTooSmall {
                needed: estimate_tokens(&render(&[])),
                limit,
            });
        }
        let text = render(&lines);
        Ok(Conversation {
            mode: self.config.mode,
            prefix: Vec::new(),
            estimated_tokens: estimate_tokens(&text),
            finals: vec![Message::user(Part::Alignment, text)],
            analogy_used: lines.len(),
            supplement_used: 0,
        })
    }

    /// Prompts for and parses an aligned template; falls back on any reply
    /// that does not follow the format.
    pub fn align_relation(
        &self,
        relation: RelationId,
        analogy_order: &[Triple],
        gateway: &Gateway,
    ) -> Result<AlignmentOutcome, PromptError> {
        let conversation = self.build_alignment_prompt(relation, analogy_order)?;
        let hints = Hints {
            expect: Expect::Alignment,
            query: None,
            candidates: Vec::new(),
        };
        let reply = gateway.complete(&conversation.request(0), &hints)?;
        Ok(parse_alignment_response(
            &reply,
            self.verbalizer.kg(),
            relation,
            self.config.style,
        ))
    }
}

fn with_demos(lines: &[String], last: &str) -> String {
    if lines.is_empty() {
        last.to_string()
    } else {
        format!("{}\n{last}", lines.join("\n"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankOutcome {
    pub order: Vec<EntityId>,
    pub repairs: Repairs,
    pub conversation: Conversation,
}
