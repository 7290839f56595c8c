//! Maps quantized tokens into the LM embedding space and splices them into a
//! prompt at placeholder positions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
pub const STD_MATCH_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_llm: usize,
}

impl AlignConfig {
    pub fn new(d_in: usize, d_llm: usize) -> Self {
        AlignConfig {
            d_in,
            d_hidden: 4 * d_llm,
            d_llm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_hidden == 0 || self.d_llm == 0 {
            return Err(Error::Config("align widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AlignParams {
    pub config: AlignConfig,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub skip: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub mu: ParamId,
    /// Frozen 1×1.
    pub sigma_text: ParamId,
}

/// Population standard deviation over every entry of the table.
pub fn compute_sigma_text(table: &[f64]) -> Result<f64> {
    if table.is_empty() {
        return Err(Error::Init("empty embedding table".into()));
    }
    let n = table.len() as f64;
    let mean = table.iter().sum::<f64>() / n;
    let var = table.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sigma = var.sqrt();
    if !(sigma > 0.0) {
        return Err(Error::Init("text embedding table has zero spread".into()));
    }
    Ok(sigma)
}

fn shapes(c: &AlignConfig) -> [(&'static str, [usize; 2]); 9] {
    [
        ("w1", [c.d_in, c.d_hidden]),
        ("b1", [1, c.d_hidden]),
        ("w2", [c.d_hidden, c.d_llm]),
        ("b2", [1, c.d_llm]),
        ("skip", [c.d_in, c.d_llm]),
        ("ln_gain", [1, c.d_llm]),
        ("ln_bias", [1, c.d_llm]),
        ("mu", [1, c.d_llm]),
        ("sigma_text", [1, 1]),
    ]
}

impl AlignParams {
    /// `embedding_table` is the LM's `vocab×d_llm` token table; it fixes
    /// σ_text and the initial mean shift.
    pub fn init<R: Rng + ?Sized>(config: AlignConfig, embedding_table: &Tensor, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if embedding_table.cols() != config.d_llm {
            return Err(Error::Shape {
                op: "align init",
                lhs: embedding_table.shape().to_vec(),
                rhs: vec![embedding_table.rows(), config.d_llm],
            });
        }
        let sigma = compute_sigma_text(embedding_table.data())?;
        let rows = embedding_table.rows() as f64;
        let mut mean_row = vec![0.0; config.d_llm];
        for i in 0..embedding_table.rows() {
            mean_row.iter_mut().zip(embedding_table.row(i)).for_each(|(m, x)| *m += x / rows);
        }
        let mut ids = Vec::new();
        for (name, [r, c]) in shapes(&config) {
            let t = match name {
                "w1" | "w2" | "skip" => Tensor::glorot(r, c, rng),
                "ln_gain" => Tensor::full(&[r, c], 1.0),
                "mu" => Tensor::matrix(1, c, mean_row.clone())?,
                "sigma_text" => Tensor::matrix(1, 1, vec![sigma])?,
                _ => Tensor::zeros(&[r, c]),
            };
            ids.push(store.insert(format!("align.{name}"), t.with_requires_grad(name != "sigma_text")));
        }
        Ok(Self::from_ids(config, &ids))
    }

    pub fn from_store(config: AlignConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let mut ids = Vec::new();
        for (name, shape) in shapes(&config) {
            let full = format!("align.{name}");
            let id = store
                .id(&full)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {full}")))?;
            let t = store.get(id);
            if [t.rows(), t.cols()] != shape {
                return Err(Error::Shape {
                    op: "align parameter",
                    lhs: vec![t.rows(), t.cols()],
                    rhs: shape.to_vec(),
                });
            }
            ids.push(id);
        }
        Ok(Self::from_ids(config, &ids))
    }

    fn from_ids(config: AlignConfig, ids: &[ParamId]) -> Self {
        AlignParams {
            config,
            w1: ids[0],
            b1: ids[1],
            w2: ids[2],
            b2: ids[3],
            skip: ids[4],
            ln_gain: ids[5],
            ln_bias: ids[6],
            mu: ids[7],
            sigma_text: ids[8],
        }
    }

    pub fn sigma_text(&self, store: &ParamStore) -> f64 {
        store.get(self.sigma_text).data()[0]
    }
}

pub struct AlignOutput {
    /// Q×d_llm tokens ready for injection.
    pub tokens: Var,
    /// StdMatch output before the mean shift.
    pub pre_shift: Var,
    /// Block standard deviation before StdMatch; near zero means the
    /// eps guard dominated.
    pub block_std: f64,
}

/// `StdMatch(LN(f_out(Z) + skip(Z))) + μ_llm` on a Q×d block.
pub fn align(tape: &mut Tape, store: &ParamStore, p: &AlignParams, z: Var) -> Result<AlignOutput> {
    let c = &p.config;
    if tape.dims(z).1 != c.d_in {
        let (r, cols) = tape.dims(z);
        return Err(Error::Shape {
            op: "align",
            lhs: vec![r, cols],
            rhs: vec![r, c.d_in],
        });
    }
    let w1 = tape.param(store, p.w1);
    let b1 = tape.param(store, p.b1);
    let w2 = tape.param(store, p.w2);
    let b2 = tape.param(store, p.b2);
    let h = tape.matmul(z, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.gelu(h);
    let f = tape.matmul(h, w2)?;
    let mut f = tape.add_row(f, b2)?;
    if c.d_in == c.d_llm {
        f = tape.add(f, z)?;
    }
    let skip = tape.param(store, p.skip);
    let s = tape.matmul(z, skip)?;
    let sum = tape.add(f, s)?;
    let gain = tape.param(store, p.ln_gain);
    let bias = tape.param(store, p.ln_bias);
    let ln = tape.layer_norm(sum, gain, bias, LN_EPS)?;
    let (standardized, block_std) = tape.block_standardize(ln, STD_MATCH_EPS);
    let pre_shift = tape.scale(standardized, p.sigma_text(store));
    let mu = tape.param(store, p.mu);
    let tokens = tape.add_row(pre_shift, mu)?;
    Ok(AlignOutput {
        tokens,
        pre_shift,
        block_std,
    })
}

/// Output row `i` comes from prompt row or from row `j` of block `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSource {
    Prompt(usize),
    Block(usize, usize),
}

/// Row layout after replacing each placeholder with its block, left to right.
pub fn splice_plan(len: usize, placeholders: &[usize], block_rows: &[usize]) -> Result<Vec<RowSource>> {
    if placeholders.len() != block_rows.len() {
        return Err(Error::InjectionArity {
            placeholders: placeholders.len(),
            graphs: block_rows.len(),
        });
    }
    let mut sorted = placeholders.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != placeholders.len() || sorted.last().is_some_and(|&p| p >= len) {
        return Err(Error::Config(format!("invalid placeholder positions {placeholders:?} for length {len}")));
    }
    let mut plan = Vec::with_capacity(len + block_rows.iter().sum::<usize>());
    let mut next = 0;
    for i in 0..len {
        if next < sorted.len() && sorted[next] == i {
            plan.extend((0..block_rows[next]).map(|j| RowSource::Block(next, j)));
            next += 1;
        } else {
            plan.push(RowSource::Prompt(i));
        }
    }
    Ok(plan)
}

/// Positions of `placeholder_id` in `ids`.
pub fn placeholder_positions(ids: &[usize], placeholder_id: usize) -> Vec<usize> {
    ids.iter()
        .enumerate()
        .filter(|(_, &t)| t == placeholder_id)
        .map(|(i, _)| i)
        .collect()
}

/// Splices `blocks` (each `Q×d`) into `prompt` (`T×d`) on the tape.
pub fn inject(tape: &mut Tape, prompt: Var, placeholders: &[usize], blocks: &[Var]) -> Result<Var> {
    let (t, d) = tape.dims(prompt);
    let rows: Vec<usize> = blocks.iter().map(|b| tape.dims(*b).0).collect();
    for b in blocks {
        if tape.dims(*b).1 != d {
            return Err(Error::Shape {
                op: "inject",
                lhs: vec![t, d],
                rhs: vec![tape.dims(*b).0, tape.dims(*b).1],
            });
        }
    }
    let plan = splice_plan(t, placeholders, &rows)?;
    if placeholders.is_empty() {
        return Ok(prompt);
    }
    let mut parts = Vec::new();
    let mut run: Vec<usize> = Vec::new();
    let mut last_block = None;
    for src in plan {
        match src {
            RowSource::Prompt(i) => run.push(i),
            RowSource::Block(b, _) => {
                if !run.is_empty() {
                    parts.push(tape.gather_rows(prompt, &run)?);
                    run.clear();
                }
                if last_block != Some(b) {
                    parts.push(blocks[b]);
                    last_block = Some(b);
                }
            }
        }
    }
    if !run.is_empty() {
        parts.push(tape.gather_rows(prompt, &run)?);
    }
    tape.concat_rows(&parts)
}

/// Carries a per-position mask through the splice; injected rows get `fill`.
pub fn reindex<T: Clone>(values: &[T], placeholders: &[usize], q: usize, fill: T) -> Result<Vec<T>> {
    let plan = splice_plan(values.len(), placeholders, &vec![q; placeholders.len()])?;
    Ok(plan
        .into_iter()
        .map(|s| match s {
            RowSource::Prompt(i) => values[i].clone(),
            RowSource::Block(..) => fill.clone(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_examples() {
        assert_eq!(compute_sigma_text(&[1.0, -1.0, -1.0, 1.0]).unwrap(), 1.0);
        assert!(matches!(compute_sigma_text(&[0.0; 8]), Err(Error::Init(_))));
    }

    #[test]
    fn plan_for_single_placeholder() {
        let plan = splice_plan(5, &[2], &[20]).unwrap();
        assert_eq!(plan.len(), 24);
        assert_eq!(&plan[..2], &[RowSource::Prompt(0), RowSource::Prompt(1)]);
        assert_eq!(plan[2], RowSource::Block(0, 0));
        assert_eq!(&plan[22..], &[RowSource::Prompt(3), RowSource::Prompt(4)]);
    }

    #[test]
    fn arity_mismatch() {
        assert!(matches!(
            splice_plan(5, &[1, 3], &[4]),
            Err(Error::InjectionArity { placeholders: 2, graphs: 1 })
        ));
    }

    #[test]
    fn mask_reindex() {
        let m = reindex(&[false, true, false, true], &[2], 3, false).unwrap();
        assert_eq!(m, vec![false, true, false, false, false, true]);
    }
}
