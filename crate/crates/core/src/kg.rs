//! Knowledge graph storage: vocabularies, splits, adjacency and degree indices.
//!
//! The graph is immutable once built. Adjacency, degrees and demonstration
//! pools only see train ∪ valid; the filtered-answer index covers all three
//! splits.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod synthetic;

#[derive(Debug, Error)]
pub enum KgError {
    #[error("required dataset file {0} is missing")]
    MissingFile(PathBuf),
    #[error("{path}:{line}: expected {expected} tab-separated columns, found {found}")]
    Malformed {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("unknown split `{0}` (expected train, valid or test)")]
    UnknownSplit(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self { head, relation, tail }
    }
}

/// Which slot of a triple a query asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// `(h, r, ?)`
    TailMissing,
    /// `(?, r, t)`
    HeadMissing,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::TailMissing => "tail-missing",
            Direction::HeadMissing => "head-missing",
        })
    }
}

/// A link-prediction query with its ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Query {
    pub direction: Direction,
    /// `h` for tail-missing queries, `t` for head-missing ones.
    pub anchor: EntityId,
    pub relation: RelationId,
    pub answer: EntityId,
}

impl Query {
    pub fn from_triple(triple: Triple, direction: Direction) -> Self {
        match direction {
            Direction::TailMissing => Self {
                direction,
                anchor: triple.head,
                relation: triple.relation,
                answer: triple.tail,
            },
            Direction::HeadMissing => Self {
                direction,
                anchor: triple.tail,
                relation: triple.relation,
                answer: triple.head,
            },
        }
    }

    /// The triple obtained by filling the missing slot with `candidate`.
    pub fn complete(&self, candidate: EntityId) -> Triple {
        match self.direction {
            Direction::TailMissing => Triple::new(self.anchor, self.relation, candidate),
            Direction::HeadMissing => Triple::new(candidate, self.relation, self.anchor),
        }
    }

    pub fn triple(&self) -> Triple {
        self.complete(self.answer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl FromStr for Split {
    type Err = KgError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(KgError::UnknownSplit(other.to_string())),
        }
    }
}

/// Interned identifiers in first-seen order.
#[derive(Debug, Clone, Default)]
pub struct Vocabulary {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Raw string triples and text maps, before interning.
#[derive(Debug, Clone, Default)]
pub struct RawDataset {
    pub train: Vec<[String; 3]>,
    pub valid: Vec<[String; 3]>,
    pub test: Vec<[String; 3]>,
    pub entity_text: HashMap<String, String>,
    pub entity_description: HashMap<String, String>,
    pub relation_text: HashMap<String, String>,
}

impl RawDataset {
    pub fn build(&self) -> KnowledgeGraph {
        KnowledgeGraph::from_raw(self)
    }

    /// Writes the dataset in the same layout `load_dataset` reads.
    pub fn write_to(&self, dir: &Path) -> Result<(), KgError> {
        let io = |path: &Path, source| KgError::Io {
            path: path.to_path_buf(),
            source,
        };
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        for (name, triples) in [
            ("train.txt", &self.train),
            ("valid.txt", &self.valid),
            ("test.txt", &self.test),
        ] {
            let mut out = String::new();
            for [h, r, t] in triples {
                out.push_str(&format!("{h}\t{r}\t{t}\n"));
            }
            let path = dir.join(name);
            fs::write(&path, out).map_err(|e| io(&path, e))?;
        }
        for (name, map) in [
            ("entity2text.txt", &self.entity_text),
            ("entity2textlong.txt", &self.entity_description),
            ("relation2text.txt", &self.relation_text),
        ] {
            if map.is_empty() {
                continue;
            }
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let mut out = String::new();
            for k in keys {
                out.push_str(&format!("{k}\t{}\n", map[k]));
            }
            let path = dir.join(name);
            fs::write(&path, out).map_err(|e| io(&path, e))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    entities: Vocabulary,
    relations: Vocabulary,
    train: Vec<Triple>,
    valid: Vec<Triple>,
    test: Vec<Triple>,
    /// train followed by valid; positions here are the stable triple ids.
    known: Vec<Triple>,
    by_relation: Vec<Vec<u32>>,
    as_head: Vec<Vec<u32>>,
    as_tail: Vec<Vec<u32>>,
    degree: Vec<u32>,
    entity_text: Vec<String>,
    entity_description: Vec<Option<String>>,
    relation_text: Vec<String>,
    tail_answers: HashMap<(EntityId, RelationId), Vec<EntityId>>,
    head_answers: HashMap<(EntityId, RelationId), Vec<EntityId>>,
    train_set: HashSet<Triple>,
}

fn dedup_split(name: &str, raw: &[[String; 3]]) -> Vec<[String; 3]> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(raw.len());
    let mut dropped = 0usize;
    for t in raw {
        if seen.insert(t.clone()) {
            out.push(t.clone());
        } else {
            dropped += 1;
        }
    }
    if dropped > 0 {
        log::warn!("{name}: dropped {dropped} duplicate triple(s)");
    }
    out
}

impl KnowledgeGraph {
    pub fn from_raw(raw: &RawDataset) -> Self {
        let mut entities = Vocabulary::default();
        let mut relations = Vocabulary::default();
        let mut intern_split = |name: &str, triples: &[[String; 3]]| -> Vec<Triple> {
            dedup_split(name, triples)
                .iter()
                .map(|[h, r, t]| {
                    let head = EntityId(entities.intern(h));
                    let relation = RelationId(relations.intern(r));
                    let tail = EntityId(entities.intern(t));
                    Triple::new(head, relation, tail)
                })
                .collect()
        };
        let train = intern_split("train", &raw.train);
        let valid = intern_split("valid", &raw.valid);
        let test = intern_split("test", &raw.test);

        let n_e = entities.len();
        let n_r = relations.len();
        let known: Vec<Triple> = train.iter().chain(valid.iter()).copied().collect();

        let mut by_relation = vec![Vec::new(); n_r];
        let mut as_head = vec![Vec::new(); n_e];
        let mut as_tail = vec![Vec::new(); n_e];
        let mut degree = vec![0u32; n_e];
        for (i, t) in known.iter().enumerate() {
            let i = i as u32;
            by_relation[t.relation.index()].push(i);
            as_head[t.head.index()].push(i);
            as_tail[t.tail.index()].push(i);
            degree[t.head.index()] += 1;
            degree[t.tail.index()] += 1;
        }

        let mut tail_answers: HashMap<(EntityId, RelationId), Vec<EntityId>> = HashMap::new();
        let mut head_answers: HashMap<(EntityId, RelationId), Vec<EntityId>> = HashMap::new();
        for t in known.iter().chain(test.iter()) {
            tail_answers.entry((t.head, t.relation)).or_default().push(t.tail);
            head_answers.entry((t.tail, t.relation)).or_default().push(t.head);
        }
        for list in tail_answers.values_mut().chain(head_answers.values_mut()) {
            list.sort_unstable();
            list.dedup();
        }

        let entity_text = entities
            .names()
            .iter()
            .map(|n| raw.entity_text.get(n).cloned().unwrap_or_else(|| n.clone()))
            .collect();
        let entity_description = entities
            .names()
            .iter()
            .map(|n| raw.entity_description.get(n).cloned())
            .collect();
        let relation_text = relations
            .names()
            .iter()
            .map(|n| raw.relation_text.get(n).cloned().unwrap_or_else(|| n.clone()))
            .collect();
        let train_set = train.iter().copied().collect();

        Self {
            entities,
            relations,
            train,
            valid,
            test,
            known,
            by_relation,
            as_head,
            as_tail,
            degree,
            entity_text,
            entity_description,
            relation_text,
            tail_answers,
            head_answers,
            train_set,
        }
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entities(&self) -> &Vocabulary {
        &self.entities
    }

    pub fn relations(&self) -> &Vocabulary {
        &self.relations
    }

    pub fn entity(&self, name: &str) -> Option<EntityId> {
        self.entities.get(name).map(EntityId)
    }

    pub fn relation(&self, name: &str) -> Option<RelationId> {
        self.relations.get(name).map(RelationId)
    }

    pub fn entity_name(&self, e: EntityId) -> &str {
        self.entities.name(e.0)
    }

    pub fn relation_name(&self, r: RelationId) -> &str {
        self.relations.name(r.0)
    }

    /// Surface text of an entity; the raw identifier when no text was given.
    pub fn entity_text(&self, e: EntityId) -> &str {
        &self.entity_text[e.index()]
    }

    pub fn entity_description(&self, e: EntityId) -> Option<&str> {
        self.entity_description[e.index()].as_deref()
    }

    pub fn relation_text(&self, r: RelationId) -> &str {
        &self.relation_text[r.index()]
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// train ∪ valid, indexed by triple id.
    pub fn known_triples(&self) -> &[Triple] {
        &self.known
    }

    pub fn triple_by_id(&self, id: u32) -> Triple {
        self.known[id as usize]
    }

    pub fn is_train_triple(&self, t: &Triple) -> bool {
        self.train_set.contains(t)
    }

    /// Triple ids of train ∪ valid with the given relation, in index order.
    pub fn by_relation(&self, r: RelationId) -> &[u32] {
        self.by_relation.get(r.index()).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn as_head(&self, e: EntityId) -> &[u32] {
        &self.as_head[e.index()]
    }

    pub fn as_tail(&self, e: EntityId) -> &[u32] {
        &self.as_tail[e.index()]
    }

    /// Triple ids incident to `e`: head occurrences first, then tail ones.
    /// A self-loop is listed once.
    pub fn by_entity(&self, e: EntityId) -> impl Iterator<Item = u32> + '_ {
        let heads = self.as_head[e.index()].iter().copied();
        let tails = self.as_tail[e.index()]
            .iter()
            .copied()
            .filter(move |&id| self.known[id as usize].head != e);
        heads.chain(tails)
    }

    pub fn degree(&self, e: EntityId) -> usize {
        self.degree[e.index()] as usize
    }

    /// Every entity completing `(anchor, relation, ?)` or `(?, relation, anchor)`
    /// in any split, sorted by id.
    pub fn known_answers(&self, anchor: EntityId, relation: RelationId, direction: Direction) -> &[EntityId] {
        let map = match direction {
            Direction::TailMissing => &self.tail_answers,
            Direction::HeadMissing => &self.head_answers,
        };
        map.get(&(anchor, relation)).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn known_answers_for(&self, q: &Query) -> &[EntityId] {
        self.known_answers(q.anchor, q.relation, q.direction)
    }

    /// Two queries per triple, tail-missing first, in file order.
    pub fn make_queries(&self, split: Split) -> Vec<Query> {
        self.split(split)
            .iter()
            .flat_map(|&t| {
                [
                    Query::from_triple(t, Direction::TailMissing),
                    Query::from_triple(t, Direction::HeadMissing),
                ]
            })
            .collect()
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, KgError> {
    let text = fs::read_to_string(path).map_err(|source| KgError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r').to_string()))
        .filter(|(_, l)| !l.trim().is_empty())
        .collect())
}

fn read_triples(path: &Path) -> Result<Vec<[String; 3]>, KgError> {
    if !path.exists() {
        return Err(KgError::MissingFile(path.to_path_buf()));
    }
    read_lines(path)?
        .into_iter()
        .map(|(line, l)| {
            let cols: Vec<&str> = l.split('\t').collect();
            match cols.as_slice() {
                [h, r, t] => Ok([h.to_string(), r.to_string(), t.to_string()]),
                _ => Err(KgError::Malformed {
                    path: path.to_path_buf(),
                    line,
                    expected: 3,
                    found: cols.len(),
                }),
            }
        })
        .collect()
}

fn read_text_map(path: &Path) -> Result<HashMap<String, String>, KgError> {
    let mut map = HashMap::new();
    if !path.exists() {
        return Ok(map);
    }
    for (line, l) in read_lines(path)? {
        match l.split_once('\t') {
            Some((id, text)) => {
                map.insert(id.to_string(), text.trim().to_string());
            }
            None => log::warn!("{}:{line}: skipping line without a tab", path.display()),
        }
    }
    Ok(map)
}

/// Reads `train.txt`, `valid.txt`, `test.txt` and the optional text maps
/// (`entity2text.txt`, `entity2textlong.txt`, `relation2text.txt`).
pub fn load_dataset(dir: &Path) -> Result<KnowledgeGraph, KgError> {
    let raw = RawDataset {
        train: read_triples(&dir.join("train.txt"))?,
        valid: read_triples(&dir.join("valid.txt"))?,
        test: read_triples(&dir.join("test.txt"))?,
        entity_text: read_text_map(&dir.join("entity2text.txt"))?,
        entity_description: read_text_map(&dir.join("entity2textlong.txt"))?,
        relation_text: read_text_map(&dir.join("relation2text.txt"))?,
    };
    Ok(raw.build())
}
