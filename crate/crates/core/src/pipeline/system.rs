//! The assembled model: encoder, codebook, aligner and toy LM over one
//! parameter store, plus checkpoint I/O.

use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::corpus::{prompt_text, PromptMode, QaInstance};
use crate::align::{align, inject, placeholder_positions, AlignParams};
use crate::error::{Error, Result};
use crate::eval::{find_object_span, AnswerSpan, EvalInstance, ObjectSpan, TeacherForced};
use crate::gnn::GnnEncoder;
use crate::graphio::{featurize, EmbeddingProvider, FeaturizedGraph};
use crate::numerics::{seeded_rng, AdamW, Container, ParamStore, Rng64, Tape, Tensor, Var};
use crate::rvq::{rvq_loss_on_tape, Codebook, Geometry, QuantizationResult};
use crate::toylm::{ToyLm, Vocabulary};

/// One metric-history row, written after each validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub mode: String,
    pub epoch: usize,
    /// Optimizer steps taken in this stage when the validation ran.
    pub step: usize,
    pub train_loss: f64,
    pub train_lm_loss: f64,
    pub val_hit: std::collections::BTreeMap<usize, f64>,
    pub lr_lora: f64,
    pub lr_encoder: f64,
    pub dead_resets: usize,
}

#[derive(Debug, Clone)]
pub struct System {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub lm: ToyLm,
    pub gnn: GnnEncoder,
    pub align: AlignParams,
    pub codebook: Codebook,
    pub provider: EmbeddingProvider,
    pub optimizer: AdamW,
    pub rng: Rng64,
    pub history: Vec<EpochRecord>,
    /// Set once the backbone has been pretrained and frozen.
    pub pretrained: bool,
}

/// Token-level view of an instance under one prompt mode.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub query: String,
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
    pub span: ObjectSpan,
    pub graph: Option<FeaturizedGraph>,
}

pub struct Forward {
    /// `m×V` logits, row `j` predicting answer token `j`.
    pub logits: Var,
    pub lm_loss: Var,
    pub rvq_loss: Option<Var>,
    pub quant: Option<QuantizationResult>,
}

impl System {
    pub fn init(config: &RunConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(config.seed);
        let mut store = ParamStore::new();
        let lm = ToyLm::init(config.lm(vocab.len()), &vocab, &mut store, &mut rng)?;
        let gnn = GnnEncoder::init(config.gnn(), &mut store, &mut rng)?;
        let table = lm.token_table(&store).clone();
        let align = AlignParams::init(config.align(), &table, &mut store, &mut rng)?;
        let codebook = Codebook::new(config.gnn_dim, &config.rvq(), Geometry::Directional, &mut rng)?;
        Ok(System {
            config: config.clone(),
            vocab,
            store,
            lm,
            gnn,
            align,
            codebook,
            provider: EmbeddingProvider::hash(config.feature_dim),
            optimizer: AdamW::default(),
            rng: seeded_rng(config.seed ^ 0x7472_6169_6e),
            history: Vec::new(),
            pretrained: false,
        })
    }

    /// Encodes `instances` for `mode`.
    pub fn prepare(&self, instances: &[QaInstance], mode: PromptMode) -> Vec<Prepared> {
        instances
            .iter()
            .map(|inst| {
                let answer = self.vocab.encode(&inst.answer);
                let span = find_object_span(&answer, &inst.object, &self.vocab);
                Prepared {
                    query: inst.question.clone(),
                    prompt: self.vocab.encode(&prompt_text(inst, mode)),
                    answer,
                    span,
                    graph: (mode == PromptMode::Kore).then(|| featurize(&inst.graph, &self.provider)),
                }
            })
            .collect()
    }

    /// Zeroes every LoRA B factor, leaving the frozen backbone.
    pub fn disable_lora(&mut self) {
        for b in &self.lm.blocks {
            for l in &b.lora {
                self.store.get_mut(l.b).data_mut().fill(0.0);
            }
        }
    }

    /// Prompt length as the LM sees it.
    pub fn prompt_len(&self, p: &Prepared) -> usize {
        let holes = p.prompt.iter().filter(|&&t| t == self.vocab.placeholder()).count();
        p.prompt.len() - holes + holes * self.config.num_quantizers
    }

    /// Teacher-forced forward over `p.prompt ++ answer[..m-1]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Prepared,
        answer: &[usize],
        dropout: Option<&mut dyn rand::RngCore>,
    ) -> Result<Forward> {
        if answer.is_empty() {
            return Err(Error::EmptyAnswer);
        }
        let mut ids = p.prompt.clone();
        ids.extend_from_slice(&answer[..answer.len() - 1]);
        let mut x = self.lm.embed_tokens(tape, &self.store, &ids)?;
        let holes = placeholder_positions(&p.prompt, self.vocab.placeholder());
        let (mut rvq_loss, mut quant) = (None, None);
        if let Some(graph) = &p.graph {
            let g = self.gnn.encode(tape, &self.store, graph)?;
            let result = self.codebook.quantize(tape.value(g), &self.config.rvq());
            let tokens = tape.straight_through(g, &result.tokens_tensor())?;
            rvq_loss = Some(rvq_loss_on_tape(tape, g, &result, &self.codebook, self.config.commitment_beta)?);
            let z = align(tape, &self.store, &self.align, tokens)?.tokens;
            let blocks = vec![z; holes.len()];
            x = inject(tape, x, &holes, &blocks)?;
            quant = Some(result);
        } else if !holes.is_empty() {
            return Err(Error::InjectionArity {
                placeholders: holes.len(),
                graphs: 0,
            });
        }
        let h = self.lm.hidden(tape, &self.store, x, dropout)?;
        let start = self.prompt_len(p) - 1;
        let rows: Vec<usize> = (start..start + answer.len()).collect();
        let logits = self.lm.logits_at(tape, &self.store, h, &rows)?;
        let lm_loss = tape.cross_entropy(logits, answer)?;
        Ok(Forward {
            logits,
            lm_loss,
            rvq_loss,
            quant,
        })
    }

    /// Greedy answer for a prepared prompt.
    pub fn generate(&self, p: &Prepared, max_new: usize) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let mut x = self.lm.embed_tokens(&mut tape, &self.store, &p.prompt)?;
        if let Some(graph) = &p.graph {
            let g = self.gnn.encode(&mut tape, &self.store, graph)?;
            let result = self.codebook.quantize(tape.value(g), &self.config.rvq());
            let tokens = tape.leaf(&result.tokens_tensor());
            let z = align(&mut tape, &self.store, &self.align, tokens)?.tokens;
            let holes = placeholder_positions(&p.prompt, self.vocab.placeholder());
            let blocks = vec![z; holes.len()];
            x = inject(&mut tape, x, &holes, &blocks)?;
        }
        let prompt = tape.to_tensor(x);
        self.lm.generate(&self.store, &prompt, max_new, self.vocab.eos())
    }

    /// Q codebook indices for a graph.
    pub fn quantize_graph(&self, graph: &FeaturizedGraph) -> Result<QuantizationResult> {
        let s = self.gnn.summarize(&self.store, graph)?;
        Ok(self.codebook.quantize(&s.g, &self.config.rvq()))
    }

    pub fn scorer<'a>(&'a self, prepared: &'a [Prepared]) -> Scorer<'a> {
        Scorer { sys: self, prepared }
    }

    pub fn eval_instances(&self, prepared: &[Prepared]) -> Vec<EvalInstance> {
        prepared
            .iter()
            .enumerate()
            .map(|(i, p)| EvalInstance {
                query: p.query.clone(),
                answer: AnswerSpan {
                    tokens: p.answer.clone(),
                    span: p.span,
                },
                alternatives: Vec::new(),
                graph: Some(i),
            })
            .collect()
    }

    /// Parameters, codebook, optimizer moments and run metadata.
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.push_store(&self.store);
        self.codebook.write_to(&mut c);
        for (id, name, t) in self.store.iter() {
            if let Some(m) = self.optimizer.state.get(&id) {
                c.push(format!("opt.m.{name}"), Tensor::new(t.shape().to_vec(), m.m.clone()).expect("moment shape"));
                c.push(format!("opt.v.{name}"), Tensor::new(t.shape().to_vec(), m.v.clone()).expect("moment shape"));
            }
        }
        c.metadata = serde_json::json!({
            "config": self.config,
            "config_hash": self.config.hash(),
            "vocab": self.vocab.to_json(),
            "history": self.history,
            "pretrained": self.pretrained,
            "optimizer_steps": self.optimizer.step_count,
            "rng": {
                "seed": hex::encode(self.rng.get_seed()),
                "stream": self.rng.get_stream().to_string(),
                "word_pos": self.rng.get_word_pos().to_string(),
            },
        });
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = &c.metadata;
        let config: RunConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad config in checkpoint: {e}")))?;
        if meta["config_hash"].as_str() != Some(config.hash().as_str()) {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        let vocab = Vocabulary::from_json(&meta["vocab"])?;
        let mut sys = System::init(&config, vocab)?;
        c.load_into_store(&mut sys.store)?;
        sys.lm = ToyLm::from_store(sys.lm.config.clone(), &sys.store)?;
        sys.codebook = Codebook::read_from(c, config.gnn_dim, &config.rvq(), Geometry::Directional)?;
        sys.pretrained = meta["pretrained"].as_bool().unwrap_or(false);
        if sys.pretrained {
            sys.lm.freeze_base(&mut sys.store);
        }
        sys.history = serde_json::from_value(meta["history"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad history: {e}")))?;
        sys.optimizer.step_count = meta["optimizer_steps"].as_u64().unwrap_or(0);
        let ids: Vec<_> = sys.store.iter().map(|(id, name, _)| (id, name.to_string())).collect();
        for (id, name) in ids {
            if let (Some(m), Some(v)) = (c.get(&format!("opt.m.{name}")), c.get(&format!("opt.v.{name}"))) {
                sys.optimizer.state.insert(
                    id,
                    crate::numerics::optim::Moments {
                        m: m.data().to_vec(),
                        v: v.data().to_vec(),
                    },
                );
            }
        }
        let rng = &meta["rng"];
        let parse = |k: &str| rng[k].as_str().ok_or_else(|| Error::Checkpoint(format!("missing rng {k}")));
        let seed: [u8; 32] = hex::decode(parse("seed")?)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::Checkpoint("bad rng seed".into()))?;
        let mut r = Rng64::from_seed(seed);
        r.set_stream(parse("stream")?.parse().map_err(|_| Error::Checkpoint("bad rng stream".into()))?);
        r.set_word_pos(parse("word_pos")?.parse().map_err(|_| Error::Checkpoint("bad rng position".into()))?);
        sys.rng = r;
        Ok(sys)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let c = self.to_container();
        c.save(path)?;
        Ok(c.hash())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Teacher-forced logits for prepared instances.
pub struct Scorer<'a> {
    sys: &'a System,
    prepared: &'a [Prepared],
}

impl Scorer<'_> {
    fn prepared(&self, inst: &EvalInstance) -> Result<&Prepared> {
        inst.graph
            .and_then(|i| self.prepared.get(i))
            .ok_or_else(|| Error::Config(format!("instance `{}` has no prepared prompt", inst.query)))
    }
}

impl TeacherForced for Scorer<'_> {
    fn answer_logits(&self, inst: &EvalInstance, answer: &[usize]) -> Result<Vec<Vec<f64>>> {
        let p = self.prepared(inst)?;
        let mut tape = Tape::new();
        let f = self.sys.forward(&mut tape, p, answer, None)?;
        let v = tape.dims(f.logits).1;
        Ok(tape.value(f.logits).chunks(v).map(<[f64]>::to_vec).collect())
    }

    fn prompt_tokens(&self, inst: &EvalInstance) -> Result<usize> {
        Ok(self.sys.prompt_len(self.prepared(inst)?))
    }
}
