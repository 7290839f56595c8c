//! Triples in, PageRank-pruned star graphs and label features out.

pub mod embed;
pub mod pagerank;
pub mod sparql;
pub mod star;
pub mod triples;

pub use embed::{featurize, Coverage, EmbeddingProvider, FeaturizedGraph};
pub use pagerank::pagerank;
pub use sparql::SparqlClient;
pub use star::{build_star_graph, build_star_graph_with, read_star_graphs, write_star_graphs, Direction, StarEdge, StarGraph};
pub use triples::{load_triples_jsonl, write_triples_jsonl, EntityId, LoadReport, Relation, Triple};
