use std::collections::BTreeMap;
use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

use super::star::{Direction, StarGraph};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const TABLE_MAGIC: &[u8; 4] = b"KGEM";

/// Buckets each word is spread over in the hash fallback.
pub const DEFAULT_HASHES_PER_WORD: usize = 8;

/// Label text to a fixed-width vector.
#[derive(Debug, Clone)]
pub struct EmbeddingProvider {
    dim: usize,
    hashes_per_word: usize,
    table: Option<BTreeMap<String, Vec<f64>>>,
}

impl EmbeddingProvider {
    pub fn hash(dim: usize) -> Self {
        Self::hash_with(dim, DEFAULT_HASHES_PER_WORD)
    }

    pub fn hash_with(dim: usize, hashes_per_word: usize) -> Self {
        assert!(dim > 0 && hashes_per_word > 0);
        EmbeddingProvider {
            dim,
            hashes_per_word,
            table: None,
        }
    }

    /// Table-backed provider; labels not in the table use the hash vector.
    pub fn from_table(dim: usize, table: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        if let Some((label, v)) = table.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::Format(format!("table entry {label:?} has width {} not {dim}", v.len())));
        }
        Ok(EmbeddingProvider {
            dim,
            hashes_per_word: DEFAULT_HASHES_PER_WORD,
            table: Some(table),
        })
    }

    pub fn load_table(path: &Path) -> Result<Self> {
        let (dim, table) = read_embedding_table(path)?;
        Self::from_table(dim, table)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_table(&self) -> bool {
        self.table.is_some()
    }

    pub fn embed(&self, text: &str) -> Vec<f64> {
        self.lookup(text).0
    }

    /// Vector plus whether it came from the table.
    pub fn lookup(&self, text: &str) -> (Vec<f64>, bool) {
        if let Some(v) = self.table.as_ref().and_then(|t| t.get(text)) {
            return (v.clone(), true);
        }
        (hash_embed(text, self.dim, self.hashes_per_word), false)
    }
}

pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'' && c != '_')
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

fn word_hash(word: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(word.as_bytes());
    h.finish()
}

/// splitmix64 finalizer; FNV alone leaves the low bits nearly linear in the salt.
fn mix(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn bucket(word_hash: u64, salt: usize, dim: usize) -> (usize, f64) {
    let x = mix(word_hash.wrapping_add((salt as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15)));
    let sign = if x >> 63 == 1 { -1.0 } else { 1.0 };
    ((x % dim as u64) as usize, sign)
}

/// Signed feature hashing over lowercase words, L2-normalized. Text with no
/// words (or whose buckets cancel) maps to the first basis vector.
pub fn hash_embed(text: &str, dim: usize, hashes_per_word: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for w in words(text) {
        let wh = word_hash(&w);
        for salt in 0..hashes_per_word {
            let (b, s) = bucket(wh, salt, dim);
            v[b] += s;
        }
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v[0] = 1.0;
    } else {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

pub fn write_embedding_table(path: &Path, dim: usize, table: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(TABLE_MAGIC);
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(table.len() as u32).to_le_bytes());
    for (label, v) in table {
        if v.len() != dim {
            return Err(Error::Format(format!("entry {label:?} has width {}", v.len())));
        }
        out.extend_from_slice(&(label.len() as u32).to_le_bytes());
        out.extend_from_slice(label.as_bytes());
        for x in v {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_embedding_table(path: &Path) -> Result<(usize, BTreeMap<String, Vec<f64>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::Format(format!("embedding table truncated at byte {pos}")))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != TABLE_MAGIC {
        return Err(Error::Format("bad embedding table magic".into()));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
    let dim = u32_at(take(4)?);
    let count = u32_at(take(4)?);
    if dim == 0 {
        return Err(Error::Format("embedding table has zero width".into()));
    }
    let mut table = BTreeMap::new();
    for _ in 0..count {
        let len = u32_at(take(4)?);
        let label = String::from_utf8(take(len)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
        let raw = take(4 * dim)?;
        let v = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        table.insert(label, v);
    }
    Ok((dim, table))
}

/// Which labels missed the table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Coverage {
    pub lookups: usize,
    pub misses: Vec<String>,
}

impl Coverage {
    pub fn hit_rate(&self) -> f64 {
        if self.lookups == 0 {
            return 1.0;
        }
        1.0 - self.misses.len() as f64 / self.lookups as f64
    }
}

/// Dense inputs for the encoder. Node 0 is the center; every edge points at it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturizedGraph {
    pub node_features: Tensor,
    pub edge_features: Tensor,
    /// (source, destination) node indices.
    pub edge_index: Vec<(usize, usize)>,
    pub center_index: usize,
    pub coverage: Coverage,
    pub empty: bool,
}

impl FeaturizedGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_features.rows()
    }

    pub fn num_edges(&self) -> usize {
        self.edge_index.len()
    }
}

pub fn featurize(graph: &StarGraph, provider: &EmbeddingProvider) -> FeaturizedGraph {
    let d = provider.dim();
    let mut coverage = Coverage::default();
    let mut embed = |label: &str| {
        let (v, hit) = provider.lookup(label);
        coverage.lookups += 1;
        if !hit && provider.is_table() {
            coverage.misses.push(label.to_string());
        }
        v
    };

    let mut neighbors: BTreeMap<&str, &str> = BTreeMap::new();
    for e in &graph.neighbors {
        let n = e.neighbor();
        neighbors.entry(n.id.as_str()).or_insert(n.label.as_str());
    }
    let index: BTreeMap<&str, usize> = neighbors.keys().enumerate().map(|(i, id)| (*id, i + 1)).collect();

    let mut node_data = embed(&graph.center.label);
    for label in neighbors.values() {
        node_data.extend(embed(label));
    }

    let mut edges: Vec<(&str, &str, Direction, &str)> = graph
        .neighbors
        .iter()
        .map(|e| (e.neighbor().id.as_str(), e.triple.relation.id.as_str(), e.direction, e.triple.relation.label.as_str()))
        .collect();
    edges.sort();
    let mut edge_data = Vec::with_capacity(edges.len() * d);
    let mut edge_index = Vec::with_capacity(edges.len());
    for (nid, _, _, rlabel) in &edges {
        edge_data.extend(embed(rlabel));
        edge_index.push((index[nid], 0));
    }

    let n = neighbors.len() + 1;
    FeaturizedGraph {
        node_features: Tensor::new(vec![n, d], node_data).expect("node block"),
        edge_features: Tensor::new(vec![edges.len(), d], edge_data).expect("edge block"),
        edge_index,
        center_index: 0,
        coverage,
        empty: graph.neighbors.is_empty(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_vectors_are_unit_and_stable() {
        for text in ["Nile", "the river Nile", "", "?!"] {
            let a = hash_embed(text, 16, 8);
            let n: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
            assert_eq!(a, hash_embed(text, 16, 8));
        }
        assert_eq!(hash_embed("Nile", 16, 8), hash_embed("nile", 16, 8));
    }

    #[test]
    fn buckets_spread_over_the_width() {
        let mut hit = vec![false; 16];
        for w in ["alpha", "beta", "gamma", "delta", "pad"] {
            for (i, x) in hash_embed(w, 16, 8).iter().enumerate() {
                hit[i] |= *x != 0.0;
            }
        }
        assert!(hit.iter().filter(|h| **h).count() >= 14);
    }

    #[test]
    fn shared_words_overlap() {
        let a = hash_embed("river nile", 64, 8);
        let b = hash_embed("nile delta", 64, 8);
        let c = hash_embed("mount fuji", 64, 8);
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
        assert!(dot(&a, &b) > dot(&a, &c));
    }

    #[test]
    fn table_round_trip_and_fallback() {
        let mut t = BTreeMap::new();
        t.insert("alpha".to_string(), vec![0.5, -0.25, 1.0]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        write_embedding_table(&p, 3, &t).unwrap();
        let prov = EmbeddingProvider::load_table(&p).unwrap();
        assert_eq!(prov.embed("alpha"), vec![0.5, -0.25, 1.0]);
        let (v, hit) = prov.lookup("beta");
        assert!(!hit);
        assert_eq!(v, hash_embed("beta", 3, DEFAULT_HASHES_PER_WORD));
    }

    #[test]
    fn truncated_table_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        fs::write(&p, b"KGEM\x04\x00\x00\x00\x01\x00\x00\x00").unwrap();
        assert!(read_embedding_table(&p).is_err());
    }
}
