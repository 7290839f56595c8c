//! Synthetic knowledge graph with entity-disjoint train/val/test splits,
//! plus the prompt templates for both curriculum stages.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::graphio::{build_star_graph, pagerank, Direction, EntityId, Relation, StarEdge, StarGraph, Triple};
use crate::numerics::seeded_rng;
use crate::toylm::Vocabulary;

pub const FRAME_CTX: &str = "[ctx]";
pub const FRAME_Q: &str = "[q]";
pub const FRAME_A: &str = "[a]";
const TEMPLATE_WORDS: [&str; 8] = ["'s", "is", "what", "the", "of", "?", "it", "."];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Pretrain, Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Base,
    Qa,
}

impl Stage {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Stage::Base),
            "qa" => Ok(Stage::Qa),
            _ => Err(Error::Config(format!("unknown stage `{s}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Qa => "qa",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
}

/// Entities are indexed globally; each belongs to exactly one split pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub entities: Vec<String>,
    pub entity_split: Vec<Split>,
    pub relations: Vec<String>,
    pub facts: Vec<Fact>,
    pub fact_split: Vec<Split>,
    pub max_edges: usize,
}

/// One question with its star graph and gold answer.
#[derive(Debug, Clone, PartialEq)]
pub struct QaInstance {
    pub fact: usize,
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub question: String,
    pub answer: String,
    pub graph: StarGraph,
}

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

fn pseudo_word<R: Rng + ?Sized>(rng: &mut R, syllables: usize) -> String {
    (0..syllables)
        .map(|_| format!("{}{}", ONSETS[rng.random_range(0..ONSETS.len())], VOWELS[rng.random_range(0..VOWELS.len())]))
        .collect()
}

/// Distinct pseudo-word labels of `words` words each, avoiding `taken`.
fn labels<R: Rng + ?Sized>(rng: &mut R, n: usize, words: usize, syllables: usize, taken: &mut BTreeSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let label = (0..words).map(|_| pseudo_word(rng, syllables)).collect::<Vec<_>>().join(" ");
        if TEMPLATE_WORDS.contains(&label.as_str()) {
            continue;
        }
        if taken.insert(label.clone()) {
            out.push(label);
        }
    }
    out
}

impl Corpus {
    /// Facts are random `(subject, relation, object)` triples inside one
    /// entity pool, so no entity is shared between splits. Each subject gets
    /// `facts_per_subject` distinct relations.
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let mut rng = seeded_rng(cfg.seed ^ 0x636f_7270_7573);
        let n = cfg.n_entities;
        let n_test = (n as f64 * cfg.holdout_fraction).round() as usize;
        let n_val = n_test;
        let n_train = n - n_test - n_val;
        let pools = [
            (Split::Pretrain, cfg.pretrain_entities, cfg.pretrain_facts),
            (Split::Train, n_train, cfg.n_facts - 2 * split_facts(cfg.n_facts, cfg.holdout_fraction)),
            (Split::Val, n_val, split_facts(cfg.n_facts, cfg.holdout_fraction)),
            (Split::Test, n_test, split_facts(cfg.n_facts, cfg.holdout_fraction)),
        ];

        let mut taken: BTreeSet<String> = TEMPLATE_WORDS.iter().map(|s| s.to_string()).collect();
        let relations = labels(&mut rng, cfg.n_relations, cfg.relation_words, 2, &mut taken);
        let mut entities = Vec::new();
        let mut entity_split = Vec::new();
        let mut facts = Vec::new();
        let mut fact_split = Vec::new();
        for (split, pool_size, n_facts) in pools {
            let subjects_needed = n_facts.div_ceil(cfg.facts_per_subject);
            if pool_size < 2 || subjects_needed > pool_size {
                return Err(Error::Config(format!(
                    "{} split needs {subjects_needed} subjects but its entity pool has {pool_size}",
                    split.name()
                )));
            }
            let start = entities.len();
            entities.extend(labels(&mut rng, pool_size, cfg.entity_words, 3, &mut taken));
            entity_split.extend(std::iter::repeat_n(split, pool_size));
            let pool: Vec<usize> = (start..start + pool_size).collect();
            let mut subjects = pool.clone();
            subjects.shuffle(&mut rng);
            let mut remaining = n_facts;
            for &s in subjects.iter().take(subjects_needed) {
                let mut rels: Vec<usize> = (0..cfg.n_relations).collect();
                rels.shuffle(&mut rng);
                for &r in rels.iter().take(cfg.facts_per_subject.min(remaining)) {
                    let o = loop {
                        let o = pool[rng.random_range(0..pool.len())];
                        if o != s {
                            break o;
                        }
                    };
                    facts.push(Fact {
                        subject: s,
                        relation: r,
                        object: o,
                    });
                    fact_split.push(split);
                    remaining -= 1;
                }
            }
        }
        Ok(Corpus {
            entities,
            entity_split,
            relations,
            facts,
            fact_split,
            max_edges: cfg.max_edges,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn entity(&self, i: usize) -> EntityId {
        EntityId::new(format!("E{i}"), self.entities[i].clone())
    }

    pub fn triple(&self, f: &Fact) -> Triple {
        Triple {
            subject: self.entity(f.subject),
            relation: Relation::new(format!("R{}", f.relation), self.relations[f.relation].clone()),
            object: self.entity(f.object),
        }
    }

    pub fn facts_in(&self, split: Split) -> Vec<usize> {
        (0..self.facts.len()).filter(|&i| self.fact_split[i] == split).collect()
    }

    pub fn entities_in(&self, split: Split) -> BTreeSet<usize> {
        (0..self.entities.len()).filter(|&i| self.entity_split[i] == split).collect()
    }

    /// Every word any prompt can contain, frame tokens included.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut words: Vec<&str> = vec![FRAME_CTX, FRAME_Q, FRAME_A];
        words.extend(TEMPLATE_WORDS);
        let mut v = Vocabulary::new(words);
        for label in self.relations.iter().chain(&self.entities) {
            for w in label.split_whitespace() {
                v.add(w);
            }
        }
        v
    }

    /// Star graphs for every fact of `split`, centered on the subject. The
    /// queried edge is always kept; the rest of the budget goes to the
    /// highest-PageRank neighbors.
    pub fn instances(&self, split: Split, stage: Stage) -> Vec<QaInstance> {
        let ids = self.facts_in(split);
        let triples: Vec<Triple> = ids.iter().map(|&i| self.triple(&self.facts[i])).collect();
        let edges: Vec<(String, String)> = triples
            .iter()
            .map(|t| (t.subject.id.clone(), t.object.id.clone()))
            .collect();
        let scores = pagerank(&edges, crate::graphio::pagerank::DEFAULT_DAMPING, crate::graphio::pagerank::DEFAULT_ITERATIONS);
        let mut touching: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (k, t) in triples.iter().enumerate() {
            touching.entry(t.subject.id.as_str()).or_default().push(k);
            touching.entry(t.object.id.as_str()).or_default().push(k);
        }
        ids.iter()
            .enumerate()
            .map(|(k, &fi)| {
                let t = &triples[k];
                let others: Vec<Triple> = touching[t.subject.id.as_str()]
                    .iter()
                    .filter(|&&j| j != k)
                    .map(|&j| triples[j].clone())
                    .collect();
                let graph = star_with_answer(t, &others, &scores, self.max_edges);
                let (question, answer) = templates(stage, &t.subject.label, &t.relation.label, &t.object.label);
                QaInstance {
                    fact: fi,
                    subject: t.subject.label.clone(),
                    relation: t.relation.label.clone(),
                    object: t.object.label.clone(),
                    question,
                    answer,
                    graph,
                }
            })
            .collect()
    }
}

fn split_facts(n: usize, h: f64) -> usize {
    ((n as f64 * h).round() as usize).max(1)
}

fn star_with_answer(answer: &Triple, others: &[Triple], scores: &BTreeMap<String, f64>, max_edges: usize) -> StarGraph {
    let center = &answer.subject;
    let mut g = if max_edges > 1 && !others.is_empty() {
        let mut g = build_star_graph(center, others, scores, max_edges - 1);
        g.max_edges = max_edges;
        g
    } else {
        StarGraph::empty(center.clone(), max_edges)
    };
    g.center_missing = false;
    let score = scores.get(&answer.object.id).copied().unwrap_or(0.0);
    let edge = StarEdge {
        triple: answer.clone(),
        direction: Direction::Outgoing,
        score,
    };
    let pos = g.neighbors.iter().position(|e| e.score < score).unwrap_or(g.neighbors.len());
    g.neighbors.insert(pos, edge);
    g
}

/// `(question, answer)` text for a fact under a curriculum stage.
pub fn templates(stage: Stage, subject: &str, relation: &str, object: &str) -> (String, String) {
    match stage {
        Stage::Base => (format!("{subject}'s {relation} is"), format!("{object} <eos>")),
        Stage::Qa => (format!("what is the {relation} of {subject} ?"), format!("it is {object} <eos>")),
    }
}

/// `subject relation object .` per edge, in graph order.
pub fn textualize(graph: &StarGraph) -> String {
    graph
        .neighbors
        .iter()
        .map(|e| format!("{} {} {} .", e.triple.subject.label, e.triple.relation.label, e.triple.object.label))
        .collect::<Vec<_>>()
        .join(" ")
}

/// How the graph reaches the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    Kore,
    Vanilla,
    Textualization,
    LoraOnly,
}

impl PromptMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "kore" => Ok(PromptMode::Kore),
            "vanilla" => Ok(PromptMode::Vanilla),
            "textualization" => Ok(PromptMode::Textualization),
            "lora-only" | "lora_only" => Ok(PromptMode::LoraOnly),
            _ => Err(Error::Config(format!("unknown mode `{s}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PromptMode::Kore => "kore",
            PromptMode::Vanilla => "vanilla",
            PromptMode::Textualization => "textualization",
            PromptMode::LoraOnly => "lora-only",
        }
    }
}

/// `[ctx] <context> [q] <question> [a]`; the context is the placeholder,
/// the serialized triples, or nothing.
pub fn prompt_text(inst: &QaInstance, mode: PromptMode) -> String {
    let ctx = match mode {
        PromptMode::Kore => crate::toylm::vocab::KG_EMBEDDING.to_string(),
        PromptMode::Textualization => textualize(&inst.graph),
        PromptMode::Vanilla | PromptMode::LoraOnly => String::new(),
    };
    let parts: Vec<&str> = [FRAME_CTX, ctx.as_str(), FRAME_Q, inst.question.as_str(), FRAME_A]
        .into_iter()
        .filter(|s| !s.is_empty())
        .collect();
    parts.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            n_entities: 200,
            n_facts: 120,
            pretrain_entities: 60,
            pretrain_facts: 40,
            facts_per_subject: 3,
            max_edges: 4,
            ..RunConfig::default()
        }
    }

    #[test]
    fn templates_tokenize_as_expected() {
        let (q, a) = templates(Stage::Base, "zaku", "color", "miro");
        assert_eq!(crate::toylm::tokenize(&q), ["zaku", "'s", "color", "is"]);
        assert_eq!(a, "miro <eos>");
        let (q, _) = templates(Stage::Qa, "zaku", "color", "miro");
        assert_eq!(crate::toylm::tokenize(&q).last().unwrap(), "?");
    }

    #[test]
    fn generation_is_seeded() {
        let c = small();
        assert_eq!(Corpus::generate(&c).unwrap(), Corpus::generate(&c).unwrap());
        let mut d = c.clone();
        d.seed = 1;
        assert_ne!(Corpus::generate(&c).unwrap().entities, Corpus::generate(&d).unwrap().entities);
    }

    #[test]
    fn infeasible_pools_rejected() {
        let c = RunConfig {
            n_entities: 20,
            n_facts: 200,
            ..small()
        };
        assert!(matches!(Corpus::generate(&c), Err(Error::Config(_))));
    }

    #[test]
    fn prompt_frames() {
        let corpus = Corpus::generate(&small()).unwrap();
        let inst = &corpus.instances(Split::Train, Stage::Base)[0];
        assert!(prompt_text(inst, PromptMode::Kore).starts_with("[ctx] <KG_EMBEDDING> [q] "));
        assert!(prompt_text(inst, PromptMode::Vanilla).starts_with("[ctx] [q] "));
        assert!(prompt_text(inst, PromptMode::Textualization).contains(&format!("{} .", inst.object)));
    }
}
