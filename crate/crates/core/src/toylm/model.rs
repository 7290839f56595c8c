use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::graphio::embed::hash_embed;
use crate::numerics::{ParamGroup, ParamId, ParamStore, Tape, Tensor, Var, validate_groups};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            alpha: 8.0,
            dropout: 0.2,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyLmConfig {
    pub vocab_size: usize,
    pub d_llm: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub context_length: usize,
    pub placeholder_token_id: usize,
    /// Width of the hashed word features the frozen token table is built from.
    pub d_feature: usize,
    pub lora: LoraConfig,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        ToyLmConfig {
            vocab_size: 512,
            d_llm: 64,
            layers: 2,
            heads: 4,
            d_ff: 256,
            context_length: 256,
            placeholder_token_id: 4,
            d_feature: 64,
            lora: LoraConfig::default(),
        }
    }
}

impl ToyLmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_llm == 0 || self.layers == 0 || self.heads == 0 || self.context_length == 0 {
            return Err(Error::Config("toy LM sizes must be positive".into()));
        }
        if self.d_llm % self.heads != 0 {
            return Err(Error::Config(format!("d_llm {} not divisible by {} heads", self.d_llm, self.heads)));
        }
        if self.placeholder_token_id >= self.vocab_size {
            return Err(Error::Config("placeholder id outside the vocabulary".into()));
        }
        if self.lora.rank == 0 || !(0.0..1.0).contains(&self.lora.dropout) {
            return Err(Error::Config("LoRA rank must be positive and dropout in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Lora {
    pub a: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    /// q, k, v, o.
    pub lora: [Lora; 4],
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub ff1: ParamId,
    pub ff1_b: ParamId,
    pub ff2: ParamId,
    pub ff2_b: ParamId,
}

/// Small pre-LN causal transformer with a tied output head.
#[derive(Debug, Clone)]
pub struct ToyLm {
    pub config: ToyLmConfig,
    pub embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
    table: SharedTable,
}

/// Snapshot of the frozen token table, shared with tapes instead of copied.
#[derive(Clone)]
struct SharedTable(Arc<[f64]>);

impl std::fmt::Debug for SharedTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SharedTable({} values)", self.0.len())
    }
}

/// The frozen token table: each token's hashed word features pushed through
/// a fixed random projection. Tokens sharing words get related rows; entries
/// have unit variance so tied-head logits can separate.
pub fn token_table<R: Rng + ?Sized>(vocab: &Vocabulary, d_llm: usize, d_feature: usize, rng: &mut R) -> Tensor {
    let proj: Vec<f64> = (0..d_feature * d_llm)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let mut data = Vec::with_capacity(vocab.len() * d_llm);
    for tok in vocab.tokens() {
        let f = hash_embed(tok, d_feature, crate::graphio::embed::DEFAULT_HASHES_PER_WORD);
        for j in 0..d_llm {
            data.push((0..d_feature).map(|i| f[i] * proj[i * d_llm + j]).sum::<f64>());
        }
    }
    Tensor::matrix(vocab.len(), d_llm, data).expect("table shape")
}

fn block_layout(c: &ToyLmConfig) -> Vec<(&'static str, [usize; 2])> {
    let (d, f, r) = (c.d_llm, c.d_ff, c.lora.rank);
    vec![
        ("ln1_g", [1, d]),
        ("ln1_b", [1, d]),
        ("wq", [d, d]),
        ("wk", [d, d]),
        ("wv", [d, d]),
        ("wo", [d, d]),
        ("lora_q_a", [d, r]),
        ("lora_q_b", [r, d]),
        ("lora_k_a", [d, r]),
        ("lora_k_b", [r, d]),
        ("lora_v_a", [d, r]),
        ("lora_v_b", [r, d]),
        ("lora_o_a", [d, r]),
        ("lora_o_b", [r, d]),
        ("ln2_g", [1, d]),
        ("ln2_b", [1, d]),
        ("ff1", [d, f]),
        ("ff1_b", [1, f]),
        ("ff2", [f, d]),
        ("ff2_b", [1, d]),
    ]
}

impl ToyLm {
    /// Fresh model under `lm.`. Base weights are trainable until
    /// [`freeze_base`](Self::freeze_base); the token table is always frozen.
    pub fn init<R: Rng + ?Sized>(config: ToyLmConfig, vocab: &Vocabulary, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens but config says {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let d = config.d_llm;
        store.insert("lm.embed", token_table(vocab, d, config.d_feature, rng));
        store.insert(
            "lm.pos",
            Tensor::uniform(&[config.context_length, d], 0.1, rng).with_requires_grad(true),
        );
        for l in 0..config.layers {
            for (name, [r, c]) in block_layout(&config) {
                let t = match name {
                    "ln1_g" | "ln2_g" => Tensor::full(&[r, c], 1.0),
                    n if n.ends_with("_b") && !n.starts_with("lora") => Tensor::zeros(&[r, c]),
                    n if n.starts_with("lora") && n.ends_with("_b") => Tensor::zeros(&[r, c]),
                    _ => Tensor::glorot(r, c, rng),
                };
                store.insert(format!("lm.l{l}.{name}"), t.with_requires_grad(true));
            }
        }
        store.insert("lm.lnf_g", Tensor::full(&[1, d], 1.0).with_requires_grad(true));
        store.insert("lm.lnf_b", Tensor::zeros(&[1, d]).with_requires_grad(true));
        Self::from_store(config, store)
    }

    pub fn from_store(config: ToyLmConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let find = |name: &str, shape: [usize; 2]| -> Result<ParamId> {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            let t = store.get(id);
            if [t.rows(), t.cols()] != shape {
                return Err(Error::Shape {
                    op: "lm parameter",
                    lhs: vec![t.rows(), t.cols()],
                    rhs: shape.to_vec(),
                });
            }
            Ok(id)
        };
        let d = config.d_llm;
        let embed = find("lm.embed", [config.vocab_size, d])?;
        let pos = find("lm.pos", [config.context_length, d])?;
        let mut blocks = Vec::new();
        for l in 0..config.layers {
            let ids = block_layout(&config)
                .into_iter()
                .map(|(n, s)| find(&format!("lm.l{l}.{n}"), s))
                .collect::<Result<Vec<_>>>()?;
            let lora = |i: usize| Lora {
                a: ids[i],
                b: ids[i + 1],
            };
            blocks.push(Block {
                ln1_g: ids[0],
                ln1_b: ids[1],
                wq: ids[2],
                wk: ids[3],
                wv: ids[4],
                wo: ids[5],
                lora: [lora(6), lora(8), lora(10), lora(12)],
                ln2_g: ids[14],
                ln2_b: ids[15],
                ff1: ids[16],
                ff1_b: ids[17],
                ff2: ids[18],
                ff2_b: ids[19],
            });
        }
        Ok(ToyLm {
            table: SharedTable(store.get(embed).data().into()),
            embed,
            pos,
            blocks,
            lnf_g: find("lm.lnf_g", [1, d])?,
            lnf_b: find("lm.lnf_b", [1, d])?,
            config,
        })
    }

    pub fn lora_ids(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| b.lora.iter().flat_map(|l| [l.a, l.b]))
            .collect()
    }

    /// Everything except LoRA and the (always frozen) token table.
    pub fn base_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.pos, self.lnf_g, self.lnf_b];
        for b in &self.blocks {
            ids.extend([b.ln1_g, b.ln1_b, b.wq, b.wk, b.wv, b.wo, b.ln2_g, b.ln2_b, b.ff1, b.ff1_b, b.ff2, b.ff2_b]);
        }
        ids
    }

    /// Freezes the backbone; LoRA stays trainable.
    pub fn freeze_base(&self, store: &mut ParamStore) {
        for id in self.base_ids() {
            store.get_mut(id).set_requires_grad(false);
        }
        for id in self.lora_ids() {
            store.get_mut(id).set_requires_grad(true);
        }
    }

    /// Fresh LoRA: A re-drawn, B zeroed.
    pub fn reset_lora<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for b in &self.blocks {
            for l in &b.lora {
                let (r, c) = (store.get(l.a).rows(), store.get(l.a).cols());
                let a = Tensor::glorot(r, c, rng);
                store.get_mut(l.a).data_mut().copy_from_slice(a.data());
                store.get_mut(l.b).data_mut().fill(0.0);
            }
        }
    }

    pub fn token_table<'a>(&self, store: &'a ParamStore) -> &'a Tensor {
        store.get(self.embed)
    }

    /// Token embeddings (no positions) for `ids`.
    pub fn embed_tokens(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        if store.get(self.embed).requires_grad() {
            let table = tape.param(store, self.embed);
            return tape.gather_rows(table, ids);
        }
        let (v, d) = (self.config.vocab_size, self.config.d_llm);
        let mut rows = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(Error::Shape {
                    op: "embed_tokens",
                    lhs: vec![v, d],
                    rhs: vec![i, d],
                });
            }
            rows.extend_from_slice(&self.table.0[i * d..(i + 1) * d]);
        }
        Ok(tape.constant(ids.len(), d, rows))
    }

    /// Runs the transformer over a `T×d` embedding sequence and returns the
    /// final-normed hidden states. `dropout` enables LoRA input dropout.
    pub fn hidden(&self, tape: &mut Tape, store: &ParamStore, x: Var, mut dropout: Option<&mut dyn rand::RngCore>) -> Result<Var> {
        let (t, d) = tape.dims(x);
        if t > self.config.context_length {
            return Err(Error::ContextOverflow {
                len: t,
                context: self.config.context_length,
            });
        }
        if d != self.config.d_llm {
            return Err(Error::Shape {
                op: "lm forward",
                lhs: vec![t, d],
                rhs: vec![t, self.config.d_llm],
            });
        }
        let pos = tape.param(store, self.pos);
        let idx: Vec<usize> = (0..t).collect();
        let pos = tape.gather_rows(pos, &idx)?;
        let mut h = tape.add(x, pos)?;
        let heads = self.config.heads;
        let dh = d / heads;
        let lora_scale = self.config.lora.scale();
        let p_drop = self.config.lora.dropout;

        for b in &self.blocks {
            let g = tape.param(store, b.ln1_g);
            let bb = tape.param(store, b.ln1_b);
            let a_in = tape.layer_norm(h, g, bb, LN_EPS)?;
            let mut proj = |tape: &mut Tape, input: Var, w: ParamId, lora: &Lora| -> Result<Var> {
                let wv = tape.param(store, w);
                let base = tape.matmul(input, wv)?;
                let lora_in = match dropout.as_deref_mut() {
                    Some(rng) if p_drop > 0.0 => {
                        let (r, c) = tape.dims(input);
                        let keep = 1.0 / (1.0 - p_drop);
                        let mask = (0..r * c).map(|_| if rng.random::<f64>() < p_drop { 0.0 } else { keep }).collect();
                        let m = tape.constant(r, c, mask);
                        tape.mul(input, m)?
                    }
                    _ => input,
                };
                let la = tape.param(store, lora.a);
                let lb = tape.param(store, lora.b);
                let down = tape.matmul(lora_in, la)?;
                let up = tape.matmul(down, lb)?;
                let up = tape.scale(up, lora_scale);
                tape.add(base, up)
            };
            let q = proj(tape, a_in, b.wq, &b.lora[0])?;
            let k = proj(tape, a_in, b.wk, &b.lora[1])?;
            let v = proj(tape, a_in, b.wv, &b.lora[2])?;
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = tape.slice_cols(q, hd * dh, dh)?;
                let kh = tape.slice_cols(k, hd * dh, dh)?;
                let vh = tape.slice_cols(v, hd * dh, dh)?;
                let s = tape.matmul_nt(qh, kh)?;
                let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
                let p = tape.causal_softmax(s);
                outs.push(tape.matmul(p, vh)?);
            }
            let att = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
            let o = proj(tape, att, b.wo, &b.lora[3])?;
            h = tape.add(h, o)?;

            let g = tape.param(store, b.ln2_g);
            let bb = tape.param(store, b.ln2_b);
            let f_in = tape.layer_norm(h, g, bb, LN_EPS)?;
            let w1 = tape.param(store, b.ff1);
            let b1 = tape.param(store, b.ff1_b);
            let w2 = tape.param(store, b.ff2);
            let b2 = tape.param(store, b.ff2_b);
            let f = tape.matmul(f_in, w1)?;
            let f = tape.add_row(f, b1)?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, w2)?;
            let f = tape.add_row(f, b2)?;
            h = tape.add(h, f)?;
        }
        let g = tape.param(store, self.lnf_g);
        let bb = tape.param(store, self.lnf_b);
        tape.layer_norm(h, g, bb, LN_EPS)
    }

    /// Logits (`|rows|×V`) for the selected hidden rows, via the tied table.
    pub fn logits_at(&self, tape: &mut Tape, store: &ParamStore, hidden: Var, rows: &[usize]) -> Result<Var> {
        let sel = tape.gather_rows(hidden, rows)?;
        if store.get(self.embed).requires_grad() {
            let table = tape.param(store, self.embed);
            return tape.matmul_nt(sel, table);
        }
        tape.matmul_nt_shared(sel, self.table.0.clone(), self.config.vocab_size)
    }

    /// Full `T×V` logits.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden(tape, store, x, None)?;
        let t = tape.dims(h).0;
        let rows: Vec<usize> = (0..t).collect();
        self.logits_at(tape, store, h, &rows)
    }

    /// Greedy decoding from an already injected prompt (`T×d`). Stops after
    /// `eos` or `max_new_tokens`.
    pub fn generate(&self, store: &ParamStore, prompt: &Tensor, max_new_tokens: usize, eos: usize) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        let table = store.get(self.embed);
        let mut seq = prompt.data().to_vec();
        let d = self.config.d_llm;
        for _ in 0..max_new_tokens {
            let t = seq.len() / d;
            let mut tape = Tape::new();
            let x = tape.constant(t, d, seq.clone());
            let h = self.hidden(&mut tape, store, x, None)?;
            let logits = self.logits_at(&mut tape, store, h, &[t - 1])?;
            let next = argmax(tape.value(logits));
            out.push(next);
            if next == eos {
                break;
            }
            seq.extend_from_slice(table.row(next));
        }
        Ok(out)
    }
}

/// First index of the largest entry.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy over rows whose mask bit is set.
pub fn lm_loss(tape: &mut Tape, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    let rows: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    if rows.is_empty() {
        return Err(Error::EmptyAnswer);
    }
    if targets.len() != mask.len() || tape.dims(logits).0 != mask.len() {
        return Err(Error::Shape {
            op: "lm_loss",
            lhs: vec![tape.dims(logits).0, tape.dims(logits).1],
            rhs: vec![mask.len(), targets.len()],
        });
    }
    let sel = tape.gather_rows(logits, &rows)?;
    let t: Vec<usize> = rows.iter().map(|&i| targets[i]).collect();
    tape.cross_entropy(sel, &t)
}

/// LoRA factors in one group, encoder-side trainables (`gnn.`, `align.`) in
/// the other.
pub fn trainable_parameters(
    model: &ToyLm,
    store: &ParamStore,
    lora_lr: f64,
    encoder_lr: f64,
    weight_decay: f64,
) -> Result<Vec<ParamGroup>> {
    let lora: Vec<ParamId> = model.lora_ids();
    let mut encoder: Vec<ParamId> = store.ids_with_prefix("gnn.");
    encoder.extend(store.ids_with_prefix("align."));
    encoder.retain(|&id| store.get(id).requires_grad());
    let groups = vec![
        ParamGroup::new("lora", lora, lora_lr, weight_decay),
        ParamGroup::new("encoder", encoder, encoder_lr, weight_decay),
    ];
    validate_groups(&groups, store)?;
    Ok(groups)
}
