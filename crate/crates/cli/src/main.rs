use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kgtok::eval::{render_table, EvalReport};
use kgtok::graphio::{
    build_star_graph, featurize, load_triples_jsonl, pagerank, read_star_graphs, write_star_graphs, write_triples_jsonl,
    EntityId, SparqlClient, StarGraph, Triple,
};
use kgtok::pipeline::{evaluate_split, pretrain_lm, train_stage, Corpus, PromptMode, RunConfig, Split, Stage, System};
use kgtok::rvq::codebook_stats;
use kgtok::{Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "kgtok", version, about = "Knowledge-graph tokens for a small language model")]
struct Cli {
    /// Flat JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set codebook_size=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for every generator; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic entity-disjoint corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Build PageRank-pruned star graphs from a triple file or SPARQL.
    Extract {
        /// JSONL triples; omit to query the SPARQL endpoint.
        #[arg(long)]
        triples: Option<PathBuf>,
        /// Center entity ids.
        #[arg(long = "center", required = true)]
        centers: Vec<String>,
        #[arg(long, default_value_t = 32)]
        budget: usize,
        #[arg(long)]
        endpoint: Option<String>,
        /// Only use cached SPARQL responses.
        #[arg(long)]
        offline: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one curriculum stage and write a checkpoint.
    Train {
        #[arg(long, value_parser = ["base", "qa"])]
        stage: String,
        #[arg(long, default_value = "kore", value_parser = ["kore", "lora-only"])]
        mode: String,
        #[arg(long)]
        data: PathBuf,
        /// Starting checkpoint; required for the qa stage.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Teacher-forced Hit@k report as JSON.
    Eval {
        #[arg(long, value_parser = ["kore", "vanilla", "textualization", "lora-only"])]
        mode: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
        #[arg(long, default_value = "base", value_parser = ["base", "qa"])]
        stage: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Codebook indices for each graph of a star-graph file.
    Quantize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        graphs: PathBuf,
    },
    /// Per-stage usage statistics of a checkpoint's codebook.
    InspectCodebook {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Merge evaluation reports into one comparison table.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.set(o)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    Corpus::load(&dir.join("corpus.json"))
}

fn stars_for(centers: &[String], triples: &[Triple], budget: usize) -> Vec<StarGraph> {
    let edges: Vec<(String, String)> = triples
        .iter()
        .map(|t| (t.subject.id.clone(), t.object.id.clone()))
        .collect();
    let scores = pagerank(&edges, 0.85, 100);
    centers
        .iter()
        .map(|c| {
            let label = triples
                .iter()
                .find_map(|t| {
                    if &t.subject.id == c {
                        Some(t.subject.label.clone())
                    } else if &t.object.id == c {
                        Some(t.object.label.clone())
                    } else {
                        None
                    }
                })
                .unwrap_or_default();
            build_star_graph(&EntityId::new(c.clone(), label), triples, &scores, budget)
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { out } => {
            let cfg = load_config(&cli)?;
            mkdir(out)?;
            let corpus = Corpus::generate(&cfg)?;
            corpus.save(&out.join("corpus.json"))?;
            corpus.vocabulary().save_json(&out.join("vocab.json"))?;
            let triples: Vec<Triple> = corpus.facts.iter().map(|f| corpus.triple(f)).collect();
            write_triples_jsonl(&out.join("triples.jsonl"), &triples)?;
            cfg.save(&out.join("config.json"))?;
            let counts: BTreeMap<&str, usize> = Split::ALL.iter().map(|s| (s.name(), corpus.facts_in(*s).len())).collect();
            println!("{}", json!({ "out": out, "facts": counts, "entities": corpus.entities.len() }));
        }
        Command::Extract {
            triples,
            centers,
            budget,
            endpoint,
            offline,
            out,
        } => {
            let graphs = match triples {
                Some(path) => {
                    let (triples, report) = load_triples_jsonl(path)?;
                    if !report.malformed.is_empty() {
                        eprintln!("skipped {} malformed lines", report.malformed.len());
                    }
                    stars_for(centers, &triples, *budget)
                }
                None => {
                    let cfg = load_config(&cli)?;
                    let cache = std::env::var("KGTOK_CACHE_DIR").unwrap_or(cfg.cache_dir);
                    let client = SparqlClient::new(
                        endpoint.clone().unwrap_or_else(|| kgtok::graphio::sparql::DEFAULT_ENDPOINT.to_string()),
                        cache,
                    )
                    .allow_network(!offline);
                    let mut graphs = Vec::new();
                    for c in centers {
                        let triples = client.fetch_star(c, *budget)?;
                        graphs.extend(stars_for(std::slice::from_ref(c), &triples, *budget));
                    }
                    graphs
                }
            };
            write_star_graphs(out, &graphs)?;
            let sizes: Vec<usize> = graphs.iter().map(StarGraph::len).collect();
            println!("{}", json!({ "out": out, "edges": sizes }));
        }
        Command::Train {
            stage,
            mode,
            data,
            init,
            out,
        } => {
            let stage = Stage::parse(stage)?;
            let mode = PromptMode::parse(mode)?;
            let corpus = load_corpus(data)?;
            let mut sys = match init {
                Some(path) => System::load(path)?,
                None if stage == Stage::Qa => {
                    return Err(Error::Config("the qa stage needs --init with a base-stage checkpoint".into()))
                }
                None => {
                    let cfg = load_config(&cli)?;
                    let mut sys = System::init(&cfg, corpus.vocabulary())?;
                    pretrain_lm(&mut sys, &corpus)?;
                    sys
                }
            };
            if sys.vocab != corpus.vocabulary() {
                return Err(Error::Config("checkpoint vocabulary does not match the corpus".into()));
            }
            let outcome = train_stage(&mut sys, &corpus, stage, mode)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                mkdir(parent)?;
            }
            let hash = sys.save(out)?;
            println!(
                "{}",
                json!({
                    "checkpoint": out,
                    "hash": hash,
                    "best_step": outcome.best_step,
                    "best_metric": outcome.best_metric,
                    "epochs": outcome.epochs,
                    "stopped_early": outcome.stopped_early,
                })
            );
        }
        Command::Eval {
            mode,
            checkpoint,
            data,
            split,
            stage,
            out,
        } => {
            let mode = PromptMode::parse(mode)?;
            let mut sys = System::load(checkpoint)?;
            if matches!(mode, PromptMode::Vanilla | PromptMode::Textualization) {
                sys.disable_lora();
            }
            let corpus = load_corpus(data)?;
            let report = evaluate_split(&sys, &corpus, Split::parse(split)?, Stage::parse(stage)?, mode)?;
            let value = serde_json::to_value(&report)?;
            match out {
                Some(path) => write_json(path, &value)?,
                None => println!("{}", serde_json::to_string_pretty(&value)?),
            }
        }
        Command::Quantize { checkpoint, graphs } => {
            let sys = System::load(checkpoint)?;
            let mut rows = Vec::new();
            for g in read_star_graphs(graphs)? {
                let q = sys.quantize_graph(&featurize(&g, &sys.provider))?;
                rows.push(json!({ "center": g.center.id, "indices": q.indices }));
            }
            println!("{}", serde_json::to_string_pretty(&rows)?);
        }
        Command::InspectCodebook { checkpoint } => {
            let sys = System::load(checkpoint)?;
            let stages: Vec<_> = sys
                .codebook
                .stages
                .iter()
                .enumerate()
                .map(|(t, s)| {
                    let st = codebook_stats(&s.usage);
                    json!({
                        "stage": t,
                        "perplexity": st.perplexity,
                        "entropy": st.entropy,
                        "dead_fraction": st.dead_fraction,
                        "selections": s.usage.iter().sum::<u64>(),
                    })
                })
                .collect();
            println!("{}", serde_json::to_string_pretty(&json!({ "k": sys.codebook.k, "stages": stages }))?);
        }
        Command::Report { reports } => {
            let mut all = Vec::new();
            for p in reports {
                let text = fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?;
                let r: EvalReport = serde_json::from_str(&text)?;
                all.push(r);
            }
            print!("{}", render_table(&all));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
