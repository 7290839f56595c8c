use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId {
    pub id: String,
    pub label: String,
}

impl EntityId {
    /// An empty label falls back to the id.
    pub fn new(id: impl Into<String>, label: impl Into<String>) -> Self {
        let id = id.into();
        let mut label = label.into();
        if label.trim().is_empty() {
            label = id.clone();
        }
        EntityId { id, label }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Relation {
    pub id: String,
    pub label: String,
}

impl Relation {
    pub fn new(id: impl Into<String>, label: impl Into<String>) -> Self {
        let id = id.into();
        let mut label = label.into();
        if label.trim().is_empty() {
            label = id.clone();
        }
        Relation { id, label }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub subject: EntityId,
    pub relation: Relation,
    pub object: EntityId,
}

/// One JSONL line.
#[derive(Debug, Serialize, Deserialize)]
struct TripleLine {
    subject_id: String,
    #[serde(default)]
    subject_label: String,
    relation_id: String,
    #[serde(default)]
    relation_label: String,
    object_id: String,
    #[serde(default)]
    object_label: String,
}

impl TripleLine {
    fn into_triple(self) -> Option<Triple> {
        if [&self.subject_id, &self.relation_id, &self.object_id]
            .iter()
            .any(|s| s.trim().is_empty())
        {
            return None;
        }
        Some(Triple {
            subject: EntityId::new(self.subject_id, self.subject_label),
            relation: Relation::new(self.relation_id, self.relation_label),
            object: EntityId::new(self.object_id, self.object_label),
        })
    }
}

impl From<&Triple> for TripleLine {
    fn from(t: &Triple) -> Self {
        TripleLine {
            subject_id: t.subject.id.clone(),
            subject_label: t.subject.label.clone(),
            relation_id: t.relation.id.clone(),
            relation_label: t.relation.label.clone(),
            object_id: t.object.id.clone(),
            object_label: t.object.label.clone(),
        }
    }
}

/// Malformed lines seen while loading, as `(1-based line number, reason)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub malformed: Vec<(usize, String)>,
    pub total_lines: usize,
}

/// Share of malformed lines above which a corpus is rejected outright.
pub const MAX_MALFORMED_FRACTION: f64 = 0.10;

pub fn load_triples_jsonl(path: &Path) -> Result<(Vec<Triple>, LoadReport)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut triples = Vec::new();
    let mut report = LoadReport::default();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        report.total_lines += 1;
        match serde_json::from_str::<TripleLine>(line) {
            Ok(raw) => match raw.into_triple() {
                Some(t) => triples.push(t),
                None => report.malformed.push((no + 1, "empty id field".into())),
            },
            Err(e) => report.malformed.push((no + 1, e.to_string())),
        }
    }
    if report.total_lines > 0
        && report.malformed.len() as f64 > MAX_MALFORMED_FRACTION * report.total_lines as f64
    {
        return Err(Error::CorpusCorrupt {
            path: path.to_path_buf(),
            malformed: report.malformed.len(),
            total: report.total_lines,
        });
    }
    Ok((triples, report))
}

pub fn write_triples_jsonl(path: &Path, triples: &[Triple]) -> Result<()> {
    let mut out = Vec::new();
    for t in triples {
        serde_json::to_writer(&mut out, &TripleLine::from(t))?;
        out.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, body: &str) -> std::path::PathBuf {
        let p = dir.path().join("t.jsonl");
        fs::write(&p, body).unwrap();
        p
    }

    const GOOD: &str = r#"{"subject_id":"Q1","subject_label":"Nile","relation_id":"P30","relation_label":"continent","object_id":"Q15","object_label":"Africa"}"#;

    #[test]
    fn empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let (t, r) = load_triples_jsonl(&write(&dir, "")).unwrap();
        assert!(t.is_empty() && r.malformed.is_empty());
    }

    #[test]
    fn one_line() {
        let dir = tempfile::tempdir().unwrap();
        let (t, _) = load_triples_jsonl(&write(&dir, GOOD)).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].object.label, "Africa");
    }

    #[test]
    fn malformed_lines_are_reported_then_rejected_in_bulk() {
        let dir = tempfile::tempdir().unwrap();
        // 1 of 2 malformed is far past the 10% limit.
        let err = load_triples_jsonl(&write(&dir, &format!("{GOOD}\n{{not json\n"))).unwrap_err();
        assert!(matches!(err, Error::CorpusCorrupt { malformed: 1, total: 2, .. }));

        let mut body = String::new();
        for _ in 0..10 {
            body.push_str(GOOD);
            body.push('\n');
        }
        body.push_str("{\"subject_id\":\"\"}\n");
        let (t, r) = load_triples_jsonl(&write(&dir, &body)).unwrap();
        assert_eq!(t.len(), 10);
        assert_eq!(r.malformed.len(), 1);
        assert_eq!(r.malformed[0].0, 11);
    }

    #[test]
    fn label_falls_back_to_id() {
        let dir = tempfile::tempdir().unwrap();
        let line = r#"{"subject_id":"Q1","relation_id":"P1","object_id":"Q2","object_label":""}"#;
        let (t, _) = load_triples_jsonl(&write(&dir, line)).unwrap();
        assert_eq!(t[0].subject.label, "Q1");
        assert_eq!(t[0].object.label, "Q2");
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_triples_jsonl(Path::new("/nonexistent/triples.jsonl")),
            Err(Error::Io { .. })
        ));
    }
}
