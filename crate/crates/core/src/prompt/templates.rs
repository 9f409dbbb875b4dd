//! Prompt wording, keyed by mode and dataset style.
//!
//! Placeholders are written `{name}` and replaced verbatim. A user file only
//! needs the entries it changes; lookups fall back from the exact style to
//! `*` and then to the shipped wording.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Mode, PromptError, Style};

/// One wording slot of the protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Responsibility,
    ResponsibilityAck,
    Description,
    DescriptionAck,
    /// Wraps one demonstration inside a section.
    Example,
    AnalogySection,
    SupplementSection,
    DemonstrationsEnd,
    DemonstrationsAck,
    Final,
    AlignmentIntro,
    AlignmentInstruction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    stage: Stage,
    mode: String,
    #[serde(default = "any")]
    style: String,
    text: String,
}

fn any() -> String {
    "*".to_string()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct TemplateFile {
    #[serde(default)]
    template: Vec<Entry>,
}

const SORT_RESPONSIBILITY: &str = "You are a good assistant to perform link prediction and sorting. Given a goal question and a list of candidate answers to this question. You need to order these candidate answers in the list to let candidate answers which are more possible to be the answer to the question prior. If you have known your responsibility, respond \"Yes\". Otherwise, respond \"No\". Do not output anything except \"Yes\" and \"No\".";

const SORT_DESCRIPTION: &str = "The goal question is: {question} To sort the candidate answers, typically you would need to refer to some other examples that may be similar to or related to the question.\n Part of the given examples are similar to the goal question, you should analogy them to understand the potential meaning of the goal question. Another part of the given facts contains supplementary information, keep capturing this extra information and mining potential relationships among them to help the sorting. Please carefully read, realize, and think about these examples. Summarize the way of thinking in these examples and memorize the information you think maybe help your sorting task. During I give examples please keep silent until I let you output.";

const SORT_FINAL: &str = "The list of candidate answers is [{candidates}]. And the question is {question} Now, based on the previous examples and your own knowledge and thinking, sort the list to let the candidate answers which are more possible to be the true answer to the question prior. Output the sorted order of candidate answers using the format \"[most possible answer | second possible answer | ... | least possible answer]\" and please start your response with \"The final order:\". Do not output anything except the final order. Note your output sorted order should contain all the candidates in the list but not add new answers to it.";

const SCORE_RESPONSIBILITY: &str = "Assume you're a linguist of English lexicons. You will be first given some examples. Then use these examples as references and your own knowledge to score for some statements. If you have known your responsibility, respond \"Yes\". Otherwise, respond \"No\". Do not output anything except \"Yes\" and \"No\".";

const SCORE_DESCRIPTION: &str = "The goal statements are about {topic}. {definition}Part of the given examples are similar to the statements, you should analogy them to understand the potential meaning of the statements to be scored. Another part of the given examples contains supplementary information, keep capturing this extra information and mining potential relationships among them to help the scoring. Please carefully read, realize and think about these examples. Summarize the way of thinking in these examples and memorize the information you think maybe help. DO NOT give me any feedback.";

const ALIGNMENT_INSTRUCTION: &str = "In above examples, What do you think \"{relation}\" mean? Summarize and descript its meaning using the format: \"If the example shows something A {statement_relation} something B, it means A is [mask] of B.\" Fill the mask and the statement should be as short as possible.";

fn builtin(stage: Stage, mode: Mode) -> &'static str {
    use Stage::*;
    match (mode, stage) {
        (Mode::Sort, Responsibility) => SORT_RESPONSIBILITY,
        (Mode::Sort, DescriptionAck) => {
            "Okay, I understand. I will wait for your examples and instructions."
        }
        (Mode::Sort, Description) => SORT_DESCRIPTION,
        (Mode::Sort, Example) => "\"{example}\"",
        (Mode::Sort, AnalogySection) => "Examples used to Analogy: {examples}\n\n",
        (Mode::Sort, SupplementSection) => "Examples give supplement information: {examples}",
        (Mode::Sort, DemonstrationsEnd) => "  Keep thinking but not output.",
        (Mode::Sort, DemonstrationsAck) => "Okay, I will keep thinking and analyzing the given examples to identify potential relationships and patterns that can help with the sorting task.",
        (Mode::Sort, Final) => SORT_FINAL,
        (Mode::Score, Responsibility) => SCORE_RESPONSIBILITY,
        (Mode::Score, DescriptionAck) => "Okay.",
        (Mode::Score, Description) => SCORE_DESCRIPTION,
        (Mode::Score, Example) => "{example}",
        (Mode::Score, AnalogySection) => "Examples used to Analogy:\n{examples}\n",
        (Mode::Score, SupplementSection) => "Examples give supplement information:\n{examples}\n",
        (Mode::Score, DemonstrationsEnd) => "Keep thinking but DO NOT give me any feedback.",
        (Mode::Score, DemonstrationsAck) => "Okay.",
        (Mode::Score, Final) => {
            "{statement} Directly give a score out of 100 for the statement and DO NOT output any other thing."
        }
        (_, ResponsibilityAck) => "Yes.",
        (_, AlignmentIntro) => "You are a good assistant to reading, understanding and summarizing.",
        (_, AlignmentInstruction) => ALIGNMENT_INSTRUCTION,
    }
}

/// Prompt wording with optional overrides loaded from TOML.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Templates {
    overrides: Vec<Entry>,
}

impl Templates {
    /// The shipped wording only.
    pub fn builtin() -> Self {
        Self::default()
    }

    /// Parses `[[template]]` entries with `stage`, `mode`, `style` (default `*`) and `text`.
    pub fn from_toml(text: &str) -> Result<Self, PromptError> {
        let file: TemplateFile = toml::from_str(text).map_err(|e| PromptError::Templates(e.to_string()))?;
        for e in &file.template {
            if e.mode != "*" && e.mode.parse::<Mode>().is_err() {
                return Err(PromptError::Templates(format!("unknown mode {:?}", e.mode)));
            }
            if e.style != "*" && e.style.parse::<Style>().is_err() {
                return Err(PromptError::Templates(format!("unknown style {:?}", e.style)));
            }
        }
        Ok(Self {
            overrides: file.template,
        })
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = fs::read_to_string(path).map_err(|e| PromptError::Templates(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Every slot for both modes with the shipped wording, as a starting
    /// point for edits.
    pub fn dump_builtin() -> String {
        let mut file = TemplateFile::default();
        for mode in [Mode::Sort, Mode::Score] {
            for stage in ALL_STAGES {
                file.template.push(Entry {
                    stage,
                    mode: mode.to_string(),
                    style: any(),
                    text: builtin(stage, mode).to_string(),
                });
            }
        }
        toml::to_string(&file).expect("templates serialize")
    }

    pub fn get(&self, stage: Stage, mode: Mode, style: Style) -> &str {
        let mode_s = mode.to_string();
        let style_s = style.to_string();
        let matching = |m: &str, s: &str| {
            self.overrides
                .iter()
                .rev()
                .find(|e| e.stage == stage && e.mode == m && e.style == s)
        };
        matching(&mode_s, &style_s)
            .or_else(|| matching(&mode_s, "*"))
            .or_else(|| matching("*", &style_s))
            .or_else(|| matching("*", "*"))
            .map(|e| e.text.as_str())
            .unwrap_or_else(|| builtin(stage, mode))
    }

    /// `get` with `{name}` placeholders replaced.
    pub fn render(&self, stage: Stage, mode: Mode, style: Style, vars: &[(&str, &str)]) -> String {
        fill(self.get(stage, mode, style), vars)
    }
}

const ALL_STAGES: [Stage; 12] = [
    Stage::Responsibility,
    Stage::ResponsibilityAck,
    Stage::Description,
    Stage::DescriptionAck,
    Stage::Example,
    Stage::AnalogySection,
    Stage::SupplementSection,
    Stage::DemonstrationsEnd,
    Stage::DemonstrationsAck,
    Stage::Final,
    Stage::AlignmentIntro,
    Stage::AlignmentInstruction,
];

/// Single left-to-right pass, so substituted text is never rescanned.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let name = &after[..close];
            vars.iter().find(|(k, _)| *k == name).map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}
