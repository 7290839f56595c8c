use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use super::triples::{EntityId, Relation, Triple};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Outgoing,
    Incoming,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StarEdge {
    pub triple: Triple,
    pub direction: Direction,
    pub score: f64,
}

impl StarEdge {
    /// The endpoint that is not the center.
    pub fn neighbor(&self) -> &EntityId {
        match self.direction {
            Direction::Outgoing => &self.triple.object,
            Direction::Incoming => &self.triple.subject,
        }
    }
}

/// Center entity plus its ranked one-hop edges.
#[derive(Debug, Clone, PartialEq)]
pub struct StarGraph {
    pub center: EntityId,
    pub neighbors: Vec<StarEdge>,
    pub max_edges: usize,
    /// Set when the center appeared in no triple at all.
    pub center_missing: bool,
}

impl StarGraph {
    pub fn empty(center: EntityId, max_edges: usize) -> Self {
        StarGraph {
            center,
            neighbors: Vec::new(),
            max_edges,
            center_missing: false,
        }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// Checks the structural invariants: one-sided contact with the center,
    /// descending scores, no duplicates, size within budget.
    pub fn validate(&self) -> Result<()> {
        if self.neighbors.len() > self.max_edges {
            return Err(Error::Format(format!(
                "star graph of {} has {} edges over budget {}",
                self.center.id,
                self.neighbors.len(),
                self.max_edges
            )));
        }
        let mut seen = BTreeSet::new();
        for (i, e) in self.neighbors.iter().enumerate() {
            let s = e.triple.subject.id == self.center.id;
            let o = e.triple.object.id == self.center.id;
            let ok = match e.direction {
                Direction::Outgoing => s && !o,
                Direction::Incoming => o && !s,
            };
            if !ok {
                return Err(Error::Format(format!("edge {i} does not touch the center on exactly one side")));
            }
            if !(e.score >= 0.0) {
                return Err(Error::Format(format!("edge {i} has invalid score {}", e.score)));
            }
            if i > 0 && self.neighbors[i - 1].score < e.score {
                return Err(Error::Format("edges not sorted by score".into()));
            }
            if !seen.insert((e.triple.relation.id.clone(), e.neighbor().id.clone(), e.direction)) {
                return Err(Error::Format(format!("duplicate edge {i}")));
            }
        }
        Ok(())
    }
}

/// Keeps the `max_edges` highest-scoring one-hop edges of `center`, both
/// directions included.
pub fn build_star_graph(center: &EntityId, triples: &[Triple], scores: &BTreeMap<String, f64>, max_edges: usize) -> StarGraph {
    build_star_graph_with(center, triples, scores, max_edges, true)
}

/// Ranking is by the score of the non-center endpoint, descending; ties go
/// to the lexicographically smaller neighbor id, then relation id, then
/// direction, so the result does not depend on triple order.
pub fn build_star_graph_with(
    center: &EntityId,
    triples: &[Triple],
    scores: &BTreeMap<String, f64>,
    max_edges: usize,
    include_incoming: bool,
) -> StarGraph {
    assert!(max_edges >= 1, "max_edges must be positive");
    let mut touched = false;
    let mut unique: BTreeMap<(String, String, Direction), StarEdge> = BTreeMap::new();
    for t in triples {
        let s = t.subject.id == center.id;
        let o = t.object.id == center.id;
        touched |= s || o;
        let direction = match (s, o) {
            (true, false) => Direction::Outgoing,
            (false, true) if include_incoming => Direction::Incoming,
            _ => continue,
        };
        let edge = StarEdge {
            triple: t.clone(),
            direction,
            score: 0.0,
        };
        let key = (edge.neighbor().id.clone(), t.relation.id.clone(), direction);
        let score = scores.get(&key.0).copied().unwrap_or(0.0).max(0.0);
        unique.entry(key).or_insert(StarEdge { score, ..edge });
    }
    let mut edges: Vec<StarEdge> = unique.into_values().collect();
    // BTreeMap order already breaks ties by (neighbor, relation, direction);
    // a stable sort by score keeps it.
    edges.sort_by(|a, b| b.score.total_cmp(&a.score));
    edges.truncate(max_edges);
    if !touched {
        warn!("center {} appears in no triple; star graph is empty", center.id);
    }
    StarGraph {
        center: center.clone(),
        neighbors: edges,
        max_edges,
        center_missing: !touched,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EdgeLine {
    relation_id: String,
    relation_label: String,
    neighbor_id: String,
    neighbor_label: String,
    direction: Direction,
    score: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphLine {
    center: EntityId,
    max_edges: usize,
    edges: Vec<EdgeLine>,
}

impl From<&StarGraph> for GraphLine {
    fn from(g: &StarGraph) -> Self {
        GraphLine {
            center: g.center.clone(),
            max_edges: g.max_edges,
            edges: g
                .neighbors
                .iter()
                .map(|e| EdgeLine {
                    relation_id: e.triple.relation.id.clone(),
                    relation_label: e.triple.relation.label.clone(),
                    neighbor_id: e.neighbor().id.clone(),
                    neighbor_label: e.neighbor().label.clone(),
                    direction: e.direction,
                    score: e.score,
                })
                .collect(),
        }
    }
}

impl GraphLine {
    fn into_graph(self) -> StarGraph {
        let center = self.center;
        let neighbors = self
            .edges
            .into_iter()
            .map(|e| {
                let nb = EntityId::new(e.neighbor_id, e.neighbor_label);
                let rel = Relation::new(e.relation_id, e.relation_label);
                let triple = match e.direction {
                    Direction::Outgoing => Triple { subject: center.clone(), relation: rel, object: nb },
                    Direction::Incoming => Triple { subject: nb, relation: rel, object: center.clone() },
                };
                StarEdge {
                    triple,
                    direction: e.direction,
                    score: e.score,
                }
            })
            .collect();
        StarGraph {
            center,
            neighbors,
            max_edges: self.max_edges,
            center_missing: false,
        }
    }
}

pub fn star_graph_to_json(g: &StarGraph) -> serde_json::Value {
    serde_json::to_value(GraphLine::from(g)).expect("serializable")
}

pub fn write_star_graphs(path: &Path, graphs: &[StarGraph]) -> Result<()> {
    let mut out = Vec::new();
    for g in graphs {
        serde_json::to_writer(&mut out, &GraphLine::from(g))?;
        out.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

pub fn read_star_graphs(path: &Path) -> Result<Vec<StarGraph>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut graphs = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let g = serde_json::from_str::<GraphLine>(line)?.into_graph();
        g.validate()?;
        graphs.push(g);
    }
    Ok(graphs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ent(id: &str) -> EntityId {
        EntityId::new(id, format!("label {id}"))
    }

    fn triple(s: &str, r: &str, o: &str) -> Triple {
        Triple {
            subject: ent(s),
            relation: Relation::new(r, r),
            object: ent(o),
        }
    }

    #[test]
    fn small_star_keeps_everything() {
        let ts = vec![triple("c", "r1", "a"), triple("c", "r2", "b"), triple("d", "r3", "c")];
        let g = build_star_graph(&ent("c"), &ts, &BTreeMap::new(), 100);
        assert_eq!(g.len(), 3);
        g.validate().unwrap();
        assert_eq!(g.neighbors.iter().filter(|e| e.direction == Direction::Incoming).count(), 1);
    }

    #[test]
    fn top_scores_survive_the_budget() {
        let ts: Vec<_> = (1..=5).map(|i| triple("c", "r", &format!("n{i}"))).collect();
        let scores: BTreeMap<String, f64> = (1..=5).map(|i| (format!("n{i}"), i as f64)).collect();
        let g = build_star_graph(&ent("c"), &ts, &scores, 2);
        let kept: Vec<&str> = g.neighbors.iter().map(|e| e.neighbor().id.as_str()).collect();
        // brute-force oracle: sort all candidates by score, take two
        let mut oracle: Vec<(f64, String)> = scores.iter().map(|(k, v)| (*v, k.clone())).collect();
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0));
        let want: Vec<&str> = oracle.iter().take(2).map(|(_, k)| k.as_str()).collect();
        assert_eq!(kept, want);
    }

    #[test]
    fn missing_center_gives_flagged_empty_graph() {
        let g = build_star_graph(&ent("z"), &[triple("a", "r", "b")], &BTreeMap::new(), 10);
        assert!(g.is_empty() && g.center_missing);
        let g = build_star_graph(&ent("z"), &[], &BTreeMap::new(), 10);
        assert!(g.is_empty());
    }

    #[test]
    fn self_loops_and_duplicates_dropped() {
        let ts = vec![triple("c", "r", "c"), triple("c", "r", "a"), triple("c", "r", "a")];
        let g = build_star_graph(&ent("c"), &ts, &BTreeMap::new(), 10);
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn outgoing_only_mode() {
        let ts = vec![triple("c", "r1", "a"), triple("d", "r3", "c")];
        let g = build_star_graph_with(&ent("c"), &ts, &BTreeMap::new(), 10, false);
        assert_eq!(g.len(), 1);
        assert_eq!(g.neighbors[0].direction, Direction::Outgoing);
    }

    #[test]
    fn jsonl_round_trip() {
        let ts = vec![triple("c", "r1", "a"), triple("d", "r3", "c")];
        let scores: BTreeMap<String, f64> = [("a".to_string(), 0.3), ("d".to_string(), 0.1)].into();
        let g = build_star_graph(&ent("c"), &ts, &scores, 10);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.jsonl");
        write_star_graphs(&p, std::slice::from_ref(&g)).unwrap();
        assert_eq!(read_star_graphs(&p).unwrap(), vec![g]);
    }
}
