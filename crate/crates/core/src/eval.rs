//! Teacher-forced Hit@k: per-token vocabulary ranks, the conservative max
//! over object tokens, and min over alternative answers.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toylm::{tokenize, Vocabulary};

pub const DEFAULT_KS: [usize; 4] = [1, 3, 5, 10];

/// `1 + #{v : logit(v) > logit(true)}`; ties never hurt.
pub fn token_rank(logits: &[f64], true_id: usize) -> usize {
    let t = logits[true_id];
    1 + logits.iter().filter(|&&x| x > t).count()
}

/// Max rank over `span` (half-open).
pub fn sequence_rank(ranks: &[usize], span: (usize, usize)) -> usize {
    assert!(span.0 < span.1 && span.1 <= ranks.len(), "object span {span:?} outside {} ranks", ranks.len());
    ranks[span.0..span.1].iter().copied().max().expect("nonempty span")
}

/// Best (smallest) sequence rank across alternative answers.
pub fn multi_answer_rank(alternatives: &[(Vec<usize>, (usize, usize))]) -> usize {
    alternatives
        .iter()
        .map(|(r, s)| sequence_rank(r, *s))
        .min()
        .expect("at least one answer")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSpan {
    pub start: usize,
    pub end: usize,
    /// The label was not found; the whole answer is used.
    pub fallback: bool,
}

/// First contiguous match of the tokenized label inside the answer. The
/// label is tried as given and with a leading space.
pub fn find_object_span(answer: &[usize], object_label: &str, vocab: &Vocabulary) -> ObjectSpan {
    let variants = [object_label.to_string(), format!(" {object_label}")];
    for v in &variants {
        let ids: Vec<usize> = tokenize(v).iter().map(|w| vocab.id(w).unwrap_or(vocab.unk())).collect();
        if ids.is_empty() || ids.len() > answer.len() {
            continue;
        }
        if let Some(start) = (0..=answer.len() - ids.len()).find(|&s| answer[s..s + ids.len()] == ids[..]) {
            return ObjectSpan {
                start,
                end: start + ids.len(),
                fallback: false,
            };
        }
    }
    ObjectSpan {
        start: 0,
        end: answer.len(),
        fallback: true,
    }
}

/// One gold answer: its tokens and the object span inside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerSpan {
    pub tokens: Vec<usize>,
    pub span: ObjectSpan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub query: String,
    pub answer: AnswerSpan,
    pub alternatives: Vec<AnswerSpan>,
    /// Index into the graph list the prompt refers to.
    pub graph: Option<usize>,
}

impl EvalInstance {
    pub fn answers(&self) -> impl Iterator<Item = &AnswerSpan> {
        std::iter::once(&self.answer).chain(&self.alternatives)
    }
}

/// Supplies teacher-forced logits: row `j` predicts `answer[j]` given the
/// prompt and `answer[..j]`.
pub trait TeacherForced {
    fn answer_logits(&self, instance: &EvalInstance, answer: &[usize]) -> Result<Vec<Vec<f64>>>;
    /// Prompt length in tokens as fed to the model.
    fn prompt_tokens(&self, instance: &EvalInstance) -> Result<usize>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub query: String,
    /// Per-position ranks of the primary answer.
    pub ranks: Vec<usize>,
    pub sequence_rank: usize,
    pub hits: BTreeMap<usize, bool>,
    pub token_count: usize,
    pub fallback: bool,
}

pub fn rank_instance<S: TeacherForced + ?Sized>(scorer: &S, inst: &EvalInstance, ks: &[usize]) -> Result<RankReport> {
    let mut per_answer = Vec::new();
    let mut primary = Vec::new();
    for (i, a) in inst.answers().enumerate() {
        let logits = scorer.answer_logits(inst, &a.tokens)?;
        if logits.len() != a.tokens.len() {
            return Err(Error::Shape {
                op: "answer_logits",
                lhs: vec![logits.len()],
                rhs: vec![a.tokens.len()],
            });
        }
        let ranks: Vec<usize> = logits.iter().zip(&a.tokens).map(|(l, &t)| token_rank(l, t)).collect();
        if i == 0 {
            primary = ranks.clone();
        }
        per_answer.push((ranks, (a.span.start, a.span.end)));
    }
    let seq = multi_answer_rank(&per_answer);
    Ok(RankReport {
        query: inst.query.clone(),
        ranks: primary,
        sequence_rank: seq,
        hits: ks.iter().map(|&k| (k, seq <= k)).collect(),
        token_count: scorer.prompt_tokens(inst)?,
        fallback: inst.answer.span.fallback,
    })
}

/// Fraction of sequence ranks ≤ k, per k.
pub fn hit_at_k(sequence_ranks: &[usize], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    if sequence_ranks.is_empty() {
        return Err(Error::EmptyInstances);
    }
    let n = sequence_ranks.len() as f64;
    Ok(ks
        .iter()
        .map(|&k| (k, sequence_ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Injection,
    Textualization,
    Vanilla,
}

/// Length after each placeholder is replaced by `q` rows.
pub fn injected_length(prompt_len: usize, placeholders: usize, q: usize) -> usize {
    prompt_len - placeholders + placeholders * q
}

/// Mean prompt length in tokens as the model sees it under `mode`.
pub fn avg_tokens(prompts: &[Vec<usize>], mode: PromptMode, placeholder_id: usize, q: usize) -> f64 {
    if prompts.is_empty() {
        return 0.0;
    }
    let total: usize = prompts
        .iter()
        .map(|p| match mode {
            PromptMode::Injection => injected_length(p.len(), p.iter().filter(|&&t| t == placeholder_id).count(), q),
            PromptMode::Textualization | PromptMode::Vanilla => p.len(),
        })
        .sum();
    total as f64 / prompts.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub split: String,
    pub instances: Vec<RankReport>,
    pub hit_at_k: BTreeMap<usize, f64>,
    pub avg_tokens: f64,
    /// Queries whose object span fell back to the whole answer.
    pub fallback_queries: Vec<String>,
}

pub fn evaluate<S: TeacherForced + ?Sized>(scorer: &S, instances: &[EvalInstance], mode: &str, split: &str) -> Result<EvalReport> {
    if instances.is_empty() {
        return Err(Error::EmptyInstances);
    }
    let reports = instances
        .iter()
        .map(|i| rank_instance(scorer, i, &DEFAULT_KS))
        .collect::<Result<Vec<_>>>()?;
    let ranks: Vec<usize> = reports.iter().map(|r| r.sequence_rank).collect();
    let avg = reports.iter().map(|r| r.token_count).sum::<usize>() as f64 / reports.len() as f64;
    Ok(EvalReport {
        mode: mode.to_string(),
        split: split.to_string(),
        hit_at_k: hit_at_k(&ranks, &DEFAULT_KS)?,
        avg_tokens: avg,
        fallback_queries: reports.iter().filter(|r| r.fallback).map(|r| r.query.clone()).collect(),
        instances: reports,
    })
}

/// Plain-text comparison table, one row per report.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<18} {:<6} {:>7} {:>7} {:>7} {:>7} {:>10}",
        "Method", "Split", "Hit@1", "Hit@3", "Hit@5", "Hit@10", "AvgTokens"
    );
    for r in reports {
        let h = |k| r.hit_at_k.get(&k).map_or("-".to_string(), |v| format!("{:.1}", v * 100.0));
        let _ = writeln!(
            out,
            "{:<18} {:<6} {:>7} {:>7} {:>7} {:>7} {:>10.1}",
            r.mode,
            r.split,
            h(1),
            h(3),
            h(5),
            h(10),
            r.avg_tokens
        );
    }
    out
}
