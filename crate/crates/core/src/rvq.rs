//! Residual vector quantization. The directional variant removes only the
//! component of the residual along the chosen unit code; the subtractive
//! variant is the classic `r − e` baseline.

use std::collections::VecDeque;

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Container, Tape, Tensor, Var};

/// Residual norms below this count as exhausted.
pub const ZERO_RESIDUAL: f64 = 1e-12;
pub const DEFAULT_POOL_SIZE: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RvqConfig {
    pub q: usize,
    pub k: usize,
    pub beta: f64,
    pub n_dead: usize,
    pub ema_decay: f64,
    pub pool_size: usize,
}

impl Default for RvqConfig {
    fn default() -> Self {
        RvqConfig {
            q: 20,
            k: 128,
            beta: 0.25,
            n_dead: 4,
            ema_decay: 0.99,
            pool_size: DEFAULT_POOL_SIZE,
        }
    }
}

impl RvqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q == 0 || self.k < 2 {
            return Err(Error::Config("rvq needs q ≥ 1 and k ≥ 2".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config("rvq beta must be non-negative".into()));
        }
        if self.n_dead == 0 {
            return Err(Error::Config("n_dead must be at least 1".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config("ema_decay must lie in (0, 1)".into()));
        }
        if self.pool_size == 0 {
            return Err(Error::Config("residual pool size must be positive".into()));
        }
        Ok(())
    }

    /// Graphs of unuse after which a code is reset.
    pub fn dead_threshold(&self) -> u64 {
        (self.n_dead * self.k) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Geometry {
    /// Unit codes, cosine selection, component removal.
    Directional,
    /// Free codes, Euclidean selection, full subtraction.
    Subtractive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    /// K×d, row-major.
    pub codes: Vec<f64>,
    pub acc: Vec<f64>,
    pub count: Vec<f64>,
    pub steps_since_use: Vec<u64>,
    /// Lifetime selection counts.
    pub usage: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub dim: usize,
    pub k: usize,
    pub geometry: Geometry,
    pub stages: Vec<Stage>,
}

fn random_unit<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            return v;
        }
    }
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = norm(v);
    (n > ZERO_RESIDUAL).then(|| v.iter().map(|x| x / n).collect())
}

impl Codebook {
    /// Q stages of K random unit codes.
    pub fn new<R: Rng + ?Sized>(dim: usize, config: &RvqConfig, geometry: Geometry, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if dim == 0 {
            return Err(Error::Config("codebook dimension must be positive".into()));
        }
        let stages = (0..config.q)
            .map(|_| {
                let codes: Vec<f64> = (0..config.k).flat_map(|_| random_unit(dim, rng)).collect();
                Stage {
                    acc: codes.clone(),
                    codes,
                    count: vec![1.0; config.k],
                    steps_since_use: vec![0; config.k],
                    usage: vec![0; config.k],
                }
            })
            .collect();
        Ok(Codebook {
            dim,
            k: config.k,
            geometry,
            stages,
        })
    }

    pub fn q(&self) -> usize {
        self.stages.len()
    }

    pub fn code(&self, stage: usize, index: usize) -> &[f64] {
        &self.stages[stage].codes[index * self.dim..(index + 1) * self.dim]
    }

    /// Largest deviation of any code norm from 1.
    pub fn max_norm_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for s in 0..self.q() {
            for i in 0..self.k {
                worst = worst.max((norm(self.code(s, i)) - 1.0).abs());
            }
        }
        worst
    }

    pub fn quantize(&self, g: &[f64], config: &RvqConfig) -> QuantizationResult {
        match self.geometry {
            Geometry::Directional => quantize(g, self, config),
            Geometry::Subtractive => subtractive_quantize(g, self, config),
        }
    }

    pub fn write_to(&self, c: &mut Container) {
        for (t, s) in self.stages.iter().enumerate() {
            let m = |data: Vec<f64>, cols| Tensor::matrix(self.k, cols, data).expect("codebook shape");
            c.push(format!("rvq.s{t}.codes"), m(s.codes.clone(), self.dim));
            c.push(format!("rvq.s{t}.acc"), m(s.acc.clone(), self.dim));
            c.push(format!("rvq.s{t}.count"), m(s.count.clone(), 1));
            c.push(format!("rvq.s{t}.steps"), m(s.steps_since_use.iter().map(|&x| x as f64).collect(), 1));
            c.push(format!("rvq.s{t}.usage"), m(s.usage.iter().map(|&x| x as f64).collect(), 1));
        }
    }

    pub fn read_from(c: &Container, dim: usize, config: &RvqConfig, geometry: Geometry) -> Result<Self> {
        let get = |name: String, cols: usize| -> Result<Vec<f64>> {
            let t = c
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.rows() != config.k || t.cols() != cols {
                return Err(Error::Shape {
                    op: "codebook",
                    lhs: t.shape().to_vec(),
                    rhs: vec![config.k, cols],
                });
            }
            Ok(t.data().to_vec())
        };
        let stages = (0..config.q)
            .map(|t| {
                Ok(Stage {
                    codes: get(format!("rvq.s{t}.codes"), dim)?,
                    acc: get(format!("rvq.s{t}.acc"), dim)?,
                    count: get(format!("rvq.s{t}.count"), 1)?,
                    steps_since_use: get(format!("rvq.s{t}.steps"), 1)?.iter().map(|&x| x as u64).collect(),
                    usage: get(format!("rvq.s{t}.usage"), 1)?.iter().map(|&x| x as u64).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Codebook {
            dim,
            k: config.k,
            geometry,
            stages,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult {
    pub indices: Vec<usize>,
    /// Q×d tokens.
    pub tokens: Vec<Vec<f64>>,
    /// r_0 … r_Q.
    pub residuals: Vec<Vec<f64>>,
    pub cosines: Vec<f64>,
    /// Stages that saw an exhausted residual.
    pub degenerate: Vec<bool>,
    pub loss: f64,
}

impl QuantizationResult {
    pub fn tokens_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.tokens).expect("tokens are rectangular")
    }

    pub fn reconstruction(&self) -> Vec<f64> {
        let d = self.residuals[0].len();
        let mut out = vec![0.0; d];
        for t in &self.tokens {
            out.iter_mut().zip(t).for_each(|(o, x)| *o += x);
        }
        out
    }
}

/// Directional quantization against unit codes. Ties go to the lowest index.
pub fn quantize(g: &[f64], codebook: &Codebook, config: &RvqConfig) -> QuantizationResult {
    let d = codebook.dim;
    assert_eq!(g.len(), d, "summary width");
    let mut r = g.to_vec();
    let mut res = QuantizationResult {
        indices: Vec::new(),
        tokens: Vec::new(),
        residuals: vec![r.clone()],
        cosines: Vec::new(),
        degenerate: Vec::new(),
        loss: 0.0,
    };
    for t in 0..codebook.q() {
        let n = norm(&r);
        if n < ZERO_RESIDUAL {
            res.indices.push(0);
            res.tokens.push(vec![0.0; d]);
            res.cosines.push(0.0);
            res.degenerate.push(true);
            res.residuals.push(r.clone());
            continue;
        }
        let mut best = (0usize, f64::NEG_INFINITY);
        for i in 0..codebook.k {
            let c = dot(&r, codebook.code(t, i)) / n;
            if c > best.1 {
                best = (i, c);
            }
        }
        let code = codebook.code(t, best.0);
        let s = dot(&r, code);
        let token: Vec<f64> = code.iter().map(|c| s * c).collect();
        r.iter_mut().zip(&token).for_each(|(x, k)| *x -= k);
        res.indices.push(best.0);
        res.tokens.push(token);
        res.cosines.push(best.1.clamp(-1.0, 1.0));
        res.degenerate.push(false);
        res.residuals.push(r.clone());
    }
    res.loss = rvq_loss(&res, config.beta);
    res
}

/// Euclidean nearest code, full subtraction.
pub fn subtractive_quantize(g: &[f64], codebook: &Codebook, config: &RvqConfig) -> QuantizationResult {
    let d = codebook.dim;
    assert_eq!(g.len(), d, "summary width");
    let mut r = g.to_vec();
    let mut res = QuantizationResult {
        indices: Vec::new(),
        tokens: Vec::new(),
        residuals: vec![r.clone()],
        cosines: Vec::new(),
        degenerate: Vec::new(),
        loss: 0.0,
    };
    for t in 0..codebook.q() {
        let n = norm(&r);
        if n < ZERO_RESIDUAL {
            res.indices.push(0);
            res.tokens.push(vec![0.0; d]);
            res.cosines.push(0.0);
            res.degenerate.push(true);
            res.residuals.push(r.clone());
            continue;
        }
        let mut best = (0usize, f64::INFINITY);
        for i in 0..codebook.k {
            let dist: f64 = r.iter().zip(codebook.code(t, i)).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best.1 {
                best = (i, dist);
            }
        }
        let code = codebook.code(t, best.0).to_vec();
        let cn = norm(&code);
        let cos = if cn > 0.0 { (dot(&r, &code) / (n * cn)).clamp(-1.0, 1.0) } else { 0.0 };
        r.iter_mut().zip(&code).for_each(|(x, c)| *x -= c);
        res.indices.push(best.0);
        res.tokens.push(code);
        res.cosines.push(cos);
        res.degenerate.push(false);
        res.residuals.push(r.clone());
    }
    res.loss = rvq_loss(&res, config.beta);
    res
}

/// `β·Σ_t (1 − cos(r_t, c_t)) + ‖r_Q‖²`; exhausted stages count as cos 0.
pub fn rvq_loss(result: &QuantizationResult, beta: f64) -> f64 {
    let commit: f64 = result.cosines.iter().map(|c| 1.0 - c).sum();
    let last = result.residuals.last().expect("r_0 present");
    beta * commit + dot(last, last)
}

/// Records the directional residual recursion and loss on the tape with the
/// code choices of `result` held fixed. Returns the `1×1` loss.
pub fn rvq_loss_on_tape(tape: &mut Tape, g: Var, result: &QuantizationResult, codebook: &Codebook, beta: f64) -> Result<Var> {
    let d = codebook.dim;
    if tape.dims(g) != (1, d) {
        return Err(Error::Shape {
            op: "rvq_loss",
            lhs: vec![tape.dims(g).0, tape.dims(g).1],
            rhs: vec![1, d],
        });
    }
    let mut r = g;
    let mut commit_terms = Vec::new();
    let mut constant = 0.0;
    for (t, &i) in result.indices.iter().enumerate() {
        if result.degenerate[t] {
            constant += 1.0;
            continue;
        }
        let c = tape.constant(1, d, codebook.code(t, i).to_vec());
        let rc = tape.mul(r, c)?;
        let s = tape.sum(rc);
        let rr = tape.mul(r, r)?;
        let n2 = tape.sum(rr);
        let n = tape.sqrt(n2);
        let cos = tape.div(s, n)?;
        commit_terms.push(cos);
        let proj = tape.scale_by(c, s)?;
        r = tape.sub(r, proj)?;
    }
    let rr = tape.mul(r, r)?;
    let mut loss = tape.sum(rr);
    let n_terms = commit_terms.len() as f64;
    for cos in commit_terms {
        let neg = tape.scale(cos, -beta);
        loss = tape.add(loss, neg)?;
    }
    Ok(tape.add_scalar(loss, beta * (n_terms + constant)))
}

/// Gradient w.r.t. g of `Σ_t ⟨δ_t, k̂_t⟩ + L_RVQ` with tokens passed straight
/// through and selection pinned, written out as the explicit backward
/// recursion over stages.
pub fn ste_backward(result: &QuantizationResult, codebook: &Codebook, beta: f64, downstream: &[Vec<f64>]) -> Vec<f64> {
    let d = codebook.dim;
    let q = result.indices.len();
    let mut grad: Vec<f64> = result.residuals[q].iter().map(|x| 2.0 * x).collect();
    for t in (0..q).rev() {
        if result.degenerate[t] {
            continue;
        }
        let c = codebook.code(t, result.indices[t]);
        let r = &result.residuals[t];
        // (I − c cᵀ) grad
        let gc = dot(&grad, c);
        grad.iter_mut().zip(c).for_each(|(g, ci)| *g -= gc * ci);
        let n = norm(r);
        let s = dot(r, c);
        for j in 0..d {
            grad[j] -= beta * (c[j] / n - s * r[j] / (n * n * n));
        }
    }
    for delta in downstream {
        grad.iter_mut().zip(delta).for_each(|(g, x)| *g += x);
    }
    grad
}

/// Fixed-capacity FIFO of recent residuals for dead-code resets.
#[derive(Debug, Clone, Default)]
pub struct ResidualPool {
    cap: usize,
    buf: VecDeque<Vec<f64>>,
}

impl ResidualPool {
    pub fn new(cap: usize) -> Self {
        ResidualPool {
            cap,
            buf: VecDeque::with_capacity(cap.min(4096)),
        }
    }

    pub fn push(&mut self, r: &[f64]) {
        if norm(r) < ZERO_RESIDUAL {
            return;
        }
        if self.buf.len() == self.cap {
            self.buf.pop_front();
        }
        self.buf.push_back(r.to_vec());
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &[f64] {
        &self.buf[rng.random_range(0..self.buf.len())]
    }
}

/// One quantizer decision to feed into [`ema_update`].
#[derive(Debug, Clone)]
pub struct Assignment {
    pub stage: usize,
    pub index: usize,
    pub residual: Vec<f64>,
}

impl QuantizationResult {
    pub fn assignments(&self) -> impl Iterator<Item = Assignment> + '_ {
        self.indices
            .iter()
            .enumerate()
            .filter(|(t, _)| !self.degenerate[*t])
            .map(|(t, &i)| Assignment {
                stage: t,
                index: i,
                residual: self.residuals[t].clone(),
            })
    }
}

/// EMA re-estimation from one batch covering `graphs` inputs. Batch sums are
/// aggregated per code before the moving-average step.
pub fn ema_update(codebook: &mut Codebook, batch: &[Assignment], graphs: usize, decay: f64) {
    let (k, d) = (codebook.k, codebook.dim);
    let directional = codebook.geometry == Geometry::Directional;
    for (t, stage) in codebook.stages.iter_mut().enumerate() {
        let mut sum = vec![0.0; k * d];
        let mut hits = vec![0.0; k];
        for a in batch.iter().filter(|a| a.stage == t) {
            let r = if directional {
                match unit(&a.residual) {
                    Some(u) => u,
                    None => continue,
                }
            } else {
                a.residual.clone()
            };
            sum[a.index * d..(a.index + 1) * d].iter_mut().zip(&r).for_each(|(s, x)| *s += x);
            hits[a.index] += 1.0;
        }
        for i in 0..k {
            if hits[i] == 0.0 {
                stage.steps_since_use[i] += graphs as u64;
                continue;
            }
            stage.steps_since_use[i] = 0;
            stage.usage[i] += hits[i] as u64;
            stage.count[i] = decay * stage.count[i] + (1.0 - decay) * hits[i];
            let row = i * d..(i + 1) * d;
            for j in row.clone() {
                stage.acc[j] = decay * stage.acc[j] + (1.0 - decay) * sum[j];
            }
            let mean: Vec<f64> = stage.acc[row.clone()].iter().map(|a| a / stage.count[i]).collect();
            let new = if directional { unit(&mean) } else { Some(mean) };
            if let Some(v) = new {
                stage.codes[row].copy_from_slice(&v);
            }
        }
    }
}

/// Replaces every code unused for `n_dead·K` graphs with a pool sample.
pub fn dead_code_reset<R: Rng + ?Sized>(codebook: &mut Codebook, config: &RvqConfig, pool: &ResidualPool, rng: &mut R) -> usize {
    let threshold = config.dead_threshold();
    let d = codebook.dim;
    let directional = codebook.geometry == Geometry::Directional;
    let mut resets = 0;
    let mut deferred = 0;
    for stage in codebook.stages.iter_mut() {
        for i in 0..codebook.k {
            if stage.steps_since_use[i] < threshold {
                continue;
            }
            if pool.is_empty() {
                deferred += 1;
                continue;
            }
            let sample = pool.sample(rng);
            let v = if directional {
                unit(sample).expect("pool holds nonzero residuals")
            } else {
                sample.to_vec()
            };
            stage.codes[i * d..(i + 1) * d].copy_from_slice(&v);
            stage.acc[i * d..(i + 1) * d].copy_from_slice(&v);
            stage.count[i] = 1.0;
            stage.steps_since_use[i] = 0;
            resets += 1;
        }
    }
    if deferred > 0 {
        warn!("{deferred} dead codes pending but the residual pool is empty");
    }
    resets
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodebookStats {
    pub perplexity: f64,
    pub entropy: f64,
    pub dead_fraction: f64,
}

pub fn codebook_stats(histogram: &[u64]) -> CodebookStats {
    let total: u64 = histogram.iter().sum();
    if histogram.is_empty() || total == 0 {
        return CodebookStats {
            perplexity: 0.0,
            entropy: 0.0,
            dead_fraction: 0.0,
        };
    }
    let entropy: f64 = histogram
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    CodebookStats {
        perplexity: entropy.exp(),
        entropy,
        dead_fraction: histogram.iter().filter(|&&c| c == 0).count() as f64 / histogram.len() as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;

    fn cfg() -> RvqConfig {
        RvqConfig {
            q: 2,
            k: 2,
            ..RvqConfig::default()
        }
    }

    fn two_code_book() -> Codebook {
        let mut cb = Codebook::new(2, &cfg(), Geometry::Directional, &mut seeded_rng(0)).unwrap();
        for s in cb.stages.iter_mut() {
            s.codes = vec![1.0, 0.0, 0.0, 1.0];
            s.acc = s.codes.clone();
        }
        cb
    }

    #[test]
    fn worked_example() {
        let cb = two_code_book();
        let r = quantize(&[3.0, 4.0], &cb, &cfg());
        assert_eq!(r.indices, vec![1, 0]);
        assert_eq!(r.residuals[1], vec![3.0, 0.0]);
        assert_eq!(r.residuals[2], vec![0.0, 0.0]);
        assert_eq!(r.reconstruction(), vec![3.0, 4.0]);
        assert!((rvq_loss(&r, 0.25) - 0.05).abs() < 1e-15);
        assert_eq!(r.loss, rvq_loss(&r, 0.25));
    }

    #[test]
    fn subtractive_worked_example() {
        let mut cb = two_code_book();
        cb.geometry = Geometry::Subtractive;
        let r = subtractive_quantize(&[3.0, 4.0], &cb, &cfg());
        assert_eq!(r.indices[0], 1);
        assert_eq!(r.residuals[1], vec![3.0, 3.0]);
    }

    #[test]
    fn zero_input_convention() {
        let cb = two_code_book();
        let r = quantize(&[0.0, 0.0], &cb, &cfg());
        assert_eq!(r.indices, vec![0, 0]);
        assert_eq!(r.cosines, vec![0.0, 0.0]);
        assert!((rvq_loss(&r, 0.25) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bad_configs() {
        for cfg in [
            RvqConfig { k: 1, ..RvqConfig::default() },
            RvqConfig { n_dead: 0, ..RvqConfig::default() },
            RvqConfig { ema_decay: 1.0, ..RvqConfig::default() },
            RvqConfig { beta: -0.1, ..RvqConfig::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
        assert_eq!(RvqConfig::default().dead_threshold(), 512);
    }

    #[test]
    fn stats_boundaries() {
        let s = codebook_stats(&[5; 128]);
        assert!((s.perplexity - 128.0).abs() < 1e-9);
        let mut one = vec![0u64; 128];
        one[3] = 9;
        let s = codebook_stats(&one);
        assert!((s.perplexity - 1.0).abs() < 1e-12);
        assert!((s.dead_fraction - 127.0 / 128.0).abs() < 1e-15);
        assert_eq!(codebook_stats(&[]).perplexity, 0.0);
    }
}
