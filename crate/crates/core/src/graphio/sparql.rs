use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::triples::{EntityId, Relation, Triple};
use crate::error::{Error, Result};

pub const DEFAULT_ENDPOINT: &str = "https://query.wikidata.org/sparql";

/// One-hop fetcher with a per-entity JSON cache.
#[derive(Debug)]
pub struct SparqlClient {
    endpoint: String,
    cache_dir: PathBuf,
    allow_network: bool,
    attempts: u32,
    base_delay: Duration,
    timeout: Duration,
    network_calls: AtomicUsize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CachedTriple {
    subject: EntityId,
    relation: Relation,
    object: EntityId,
}

#[derive(Deserialize)]
struct SparqlResponse {
    results: SparqlResults,
}

#[derive(Deserialize)]
struct SparqlResults {
    bindings: Vec<serde_json::Map<String, serde_json::Value>>,
}

impl SparqlClient {
    pub fn new(endpoint: impl Into<String>, cache_dir: impl Into<PathBuf>) -> Self {
        SparqlClient {
            endpoint: endpoint.into(),
            cache_dir: cache_dir.into(),
            allow_network: true,
            attempts: 3,
            base_delay: Duration::from_millis(500),
            timeout: Duration::from_secs(30),
            network_calls: AtomicUsize::new(0),
        }
    }

    pub fn allow_network(mut self, allow: bool) -> Self {
        self.allow_network = allow;
        self
    }

    /// Retry policy: `attempts` tries, sleeping base·2^i between them.
    pub fn retry(mut self, attempts: u32, base_delay: Duration) -> Self {
        self.attempts = attempts.max(1);
        self.base_delay = base_delay;
        self
    }

    pub fn timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::SeqCst)
    }

    pub fn cache_path(&self, center_id: &str, budget: usize) -> PathBuf {
        let safe: String = center_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        self.cache_dir.join(format!("{safe}__{budget}.json"))
    }

    pub fn query_text(center_id: &str, budget: usize) -> String {
        format!(
            "SELECT ?s ?sLabel ?p ?pLabel ?o ?oLabel WHERE {{ \
             {{ BIND(wd:{c} AS ?s) ?s ?p ?o . FILTER(isIRI(?o)) }} UNION \
             {{ BIND(wd:{c} AS ?o) ?s ?p ?o . }} \
             SERVICE wikibase:label {{ bd:serviceParam wikibase:language \"en\". }} \
             }} LIMIT {budget}",
            c = center_id
        )
    }

    /// Cache first; network only on a miss.
    pub fn fetch_star(&self, center_id: &str, budget: usize) -> Result<Vec<Triple>> {
        if budget == 0 {
            return Err(Error::Config("fetch budget must be positive".into()));
        }
        fs::create_dir_all(&self.cache_dir).map_err(|e| Error::io(&self.cache_dir, e))?;
        let path = self.cache_path(center_id, budget);
        let lock_path = path.with_extension("lock");
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(|e| Error::io(&lock_path, e))?;
        lock.lock().map_err(|e| Error::io(&lock_path, e))?;

        if path.exists() {
            debug!("cache hit for {center_id}");
            return read_cache(&path);
        }
        if !self.allow_network {
            return Err(Error::Fetch {
                entity: center_id.to_string(),
                attempts: 0,
                reason: "not cached and network access is disabled".into(),
            });
        }
        let body = self.get_with_retry(center_id, budget)?;
        let triples = parse_results(&body)?;
        write_cache(&path, &triples)?;
        Ok(triples)
    }

    fn get_with_retry(&self, center_id: &str, budget: usize) -> Result<String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let query = Self::query_text(center_id, budget);
        let mut last = String::new();
        for attempt in 0..self.attempts {
            if attempt > 0 {
                thread::sleep(self.base_delay * 2u32.pow(attempt - 1));
            }
            self.network_calls.fetch_add(1, Ordering::SeqCst);
            let result = agent
                .get(&self.endpoint)
                .query("query", &query)
                .query("format", "json")
                .header("Accept", "application/sparql-results+json")
                .header("User-Agent", "kgtok/0.1")
                .call()
                .and_then(|mut r| r.body_mut().read_to_string());
            match result {
                Ok(body) => return Ok(body),
                Err(e) => {
                    warn!("fetch of {center_id} attempt {} failed: {e}", attempt + 1);
                    last = e.to_string();
                }
            }
        }
        Err(Error::Fetch {
            entity: center_id.to_string(),
            attempts: self.attempts,
            reason: last,
        })
    }
}

fn local_name(v: &serde_json::Value) -> Option<String> {
    let s = v.get("value")?.as_str()?;
    Some(s.rsplit(['/', '#']).next().unwrap_or(s).to_string())
}

fn label(binding: &serde_json::Map<String, serde_json::Value>, key: &str) -> String {
    binding
        .get(key)
        .and_then(|v| v.get("value"))
        .and_then(|v| v.as_str())
        .unwrap_or("")
        .to_string()
}

/// SPARQL JSON results to triples. Bindings missing s, p or o are skipped.
pub fn parse_results(body: &str) -> Result<Vec<Triple>> {
    let resp: SparqlResponse = serde_json::from_str(body)?;
    let mut out = Vec::new();
    for b in &resp.results.bindings {
        let (Some(s), Some(p), Some(o)) = (
            b.get("s").and_then(local_name),
            b.get("p").and_then(local_name),
            b.get("o").and_then(local_name),
        ) else {
            continue;
        };
        out.push(Triple {
            subject: EntityId::new(s, label(b, "sLabel")),
            relation: Relation::new(p, label(b, "pLabel")),
            object: EntityId::new(o, label(b, "oLabel")),
        });
    }
    Ok(out)
}

fn read_cache(path: &Path) -> Result<Vec<Triple>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows: Vec<CachedTriple> = serde_json::from_str(&text)?;
    Ok(rows
        .into_iter()
        .map(|c| Triple {
            subject: c.subject,
            relation: c.relation,
            object: c.object,
        })
        .collect())
}

fn write_cache(path: &Path, triples: &[Triple]) -> Result<()> {
    let rows: Vec<CachedTriple> = triples
        .iter()
        .map(|t| CachedTriple {
            subject: t.subject.clone(),
            relation: t.relation.clone(),
            object: t.object.clone(),
        })
        .collect();
    let tmp = path.with_extension("json.tmp");
    let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&serde_json::to_vec(&rows)?).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
