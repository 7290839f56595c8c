//! Backbone pretraining, the two-stage curriculum, and baselines.

use std::collections::BTreeMap;

use log::info;
use rand::seq::SliceRandom;

use super::corpus::{Corpus, PromptMode, Split, Stage};
use super::system::{EpochRecord, Prepared, System};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::numerics::{clip_grad_norm, AdamW, ParamGroup, Tape};
use crate::rvq::{dead_code_reset, ema_update, Assignment, ResidualPool};
use crate::toylm::trainable_parameters;

/// Reduce-on-plateau: after more than `patience` consecutive validations
/// without strict improvement, multiply the learning rates by `factor`
/// and start counting again.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    best: Option<f64>,
    bad: usize,
}

impl Plateau {
    pub fn new(factor: f64, patience: usize) -> Self {
        Plateau {
            factor,
            patience,
            best: None,
            bad: 0,
        }
    }

    /// True when the learning rates should be reduced now.
    pub fn observe(&mut self, metric: f64) -> bool {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.bad = 0;
            return false;
        }
        self.bad += 1;
        if self.bad > self.patience {
            self.bad = 0;
            return true;
        }
        false
    }
}

/// Stops once more than `patience` consecutive validations fail to improve.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<f64>,
    bad: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            bad: 0,
        }
    }

    /// Returns `(improved, stop)`.
    pub fn observe(&mut self, metric: f64) -> (bool, bool) {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.bad = 0;
            return (true, false);
        }
        self.bad += 1;
        (false, self.bad > self.patience)
    }
}

fn ensure_grads(sys: &mut System, groups: &[ParamGroup]) {
    for g in groups {
        for &p in &g.params {
            let t = sys.store.get_mut(p);
            if t.grad().is_none() {
                let n = t.len();
                t.accumulate_grad(&vec![0.0; n]);
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct StepStats {
    pub loss: f64,
    pub lm_loss: f64,
    pub assignments: Vec<Assignment>,
    pub residuals: Vec<Vec<f64>>,
}

/// Accumulates gradients for one optimizer step over `micro_batches`. Each
/// instance loss is scaled by `1 / (|micro batch| · #micro batches)`, so the
/// result equals the gradient of the mean micro-batch loss averaged over
/// micro-batches.
pub fn accumulate_gradients(
    sys: &mut System,
    prepared: &[Prepared],
    micro_batches: &[Vec<usize>],
    dropout: bool,
    step: usize,
) -> Result<StepStats> {
    let mut stats = StepStats::default();
    let n_mb = micro_batches.len() as f64;
    let mut rng = sys.rng.clone();
    for mb in micro_batches {
        let scale = 1.0 / (mb.len() as f64 * n_mb);
        for &i in mb {
            let p = &prepared[i];
            let mut tape = Tape::new();
            let drop: Option<&mut dyn rand::RngCore> = if dropout { Some(&mut rng) } else { None };
            let f = sys.forward(&mut tape, p, &p.answer, drop)?;
            let mut loss = f.lm_loss;
            if let Some(r) = f.rvq_loss {
                loss = tape.add(loss, r)?;
            }
            let value = tape.scalar(loss);
            if !value.is_finite() {
                let batch: Vec<&str> = mb.iter().map(|&j| prepared[j].query.as_str()).collect();
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!(
                        "loss {value} on `{}` (lm {}, batch {batch:?})",
                        p.query,
                        tape.scalar(f.lm_loss)
                    ),
                });
            }
            stats.loss += value * scale;
            stats.lm_loss += tape.scalar(f.lm_loss) * scale;
            let scaled = tape.scale(loss, scale);
            let grads = tape.backward(scaled);
            tape.accumulate_param_grads(&grads, &mut sys.store);
            if let Some(q) = f.quant {
                stats.residuals.extend(q.residuals[..q.residuals.len() - 1].iter().cloned());
                stats.assignments.extend(q.assignments());
            }
        }
    }
    sys.rng = rng;
    Ok(stats)
}

/// Trains the backbone on textualized-context prompts from the pretraining
/// split, then freezes it. LoRA stays at its zero-B initialization.
pub fn pretrain_lm(sys: &mut System, corpus: &Corpus) -> Result<Vec<f64>> {
    let mut prepared = sys.prepare(&corpus.instances(Split::Pretrain, Stage::Base), PromptMode::Textualization);
    prepared.extend(sys.prepare(&corpus.instances(Split::Pretrain, Stage::Qa), PromptMode::Textualization));
    for id in sys.lm.lora_ids() {
        sys.store.get_mut(id).set_requires_grad(false);
    }
    let groups = vec![ParamGroup::new("backbone", sys.lm.base_ids(), sys.config.pretrain_lr, 0.0)];
    let mut opt = AdamW::default();
    let mut losses = Vec::new();
    let b = sys.config.pretrain_batch;
    let mut order: Vec<usize> = Vec::new();
    for step in 0..sys.config.pretrain_steps {
        if order.len() < b {
            let mut fresh: Vec<usize> = (0..prepared.len()).collect();
            fresh.shuffle(&mut sys.rng);
            order.extend(fresh);
        }
        let batch: Vec<usize> = order.drain(..b).collect();
        sys.store.zero_grads();
        let stats = accumulate_gradients(sys, &prepared, &[batch], false, step)?;
        ensure_grads(sys, &groups);
        clip_grad_norm(&mut sys.store, &groups, sys.config.clip_norm);
        opt.step(&mut sys.store, &groups)?;
        losses.push(stats.loss);
        if step % 500 == 0 {
            info!("pretrain step {step}: loss {:.4}", stats.loss);
        }
    }
    sys.store.zero_grads();
    sys.lm.freeze_base(&mut sys.store);
    sys.pretrained = true;
    Ok(losses)
}

/// Hit@k report for one split under a prompt mode.
pub fn evaluate_split(sys: &System, corpus: &Corpus, split: Split, stage: Stage, mode: PromptMode) -> Result<EvalReport> {
    let prepared = sys.prepare(&corpus.instances(split, stage), mode);
    let instances = sys.eval_instances(&prepared);
    evaluate(&sys.scorer(&prepared), &instances, mode.name(), split.name())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Optimizer step of the restored best validation.
    pub best_step: usize,
    pub best_metric: f64,
    pub stopped_early: bool,
    pub epochs: usize,
}

/// One curriculum stage. `mode` is `Kore` (graph injected, both parameter
/// groups) or `LoraOnly` (no graph, LoRA group only). The best-by-monitor
/// parameters are restored at the end.
pub fn train_stage(sys: &mut System, corpus: &Corpus, stage: Stage, mode: PromptMode) -> Result<TrainOutcome> {
    if !sys.pretrained {
        return Err(Error::Config("backbone must be pretrained before a training stage".into()));
    }
    if stage == Stage::Qa && !sys.history.iter().any(|r| r.stage == "base") {
        return Err(Error::Config("qa stage needs a base-stage checkpoint".into()));
    }
    if !matches!(mode, PromptMode::Kore | PromptMode::LoraOnly) {
        return Err(Error::Config(format!("mode `{}` is not trainable", mode.name())));
    }
    let cfg = sys.config.clone();
    let k = cfg.monitored_k().expect("validated");
    let train = sys.prepare(&corpus.instances(Split::Train, stage), mode);
    let val = sys.prepare(&corpus.instances(Split::Val, stage), mode);
    let val_instances = sys.eval_instances(&val);

    let mut groups = trainable_parameters(&sys.lm, &sys.store, cfg.lr_lora, cfg.lr_encoder, cfg.weight_decay)?;
    if mode == PromptMode::LoraOnly {
        groups.retain(|g| g.name == "lora");
    }
    sys.optimizer = AdamW::default();
    let mut plateau = Plateau::new(cfg.plateau_factor, cfg.plateau_patience);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut pool = ResidualPool::new(cfg.residual_pool_size);
    let rvq = cfg.rvq();
    let mut best: Option<(usize, f64, System)> = None;
    let mut stopped_early = false;
    let mut epochs = 0;
    let mut step = 0;
    let (mut loss_sum, mut lm_sum, mut seen, mut resets) = (0.0, 0.0, 0usize, 0usize);
    let per_step = cfg.batch_size * cfg.grad_accumulation;
    'training: for epoch in 0..cfg.max_epochs {
        epochs = epoch + 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut sys.rng);
        let chunks: Vec<&[usize]> = order.chunks(per_step).collect();
        for (c, chunk) in chunks.iter().enumerate() {
            let micro: Vec<Vec<usize>> = chunk.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect();
            sys.store.zero_grads();
            let stats = accumulate_gradients(sys, &train, &micro, true, step)?;
            ensure_grads(sys, &groups);
            clip_grad_norm(&mut sys.store, &groups, cfg.clip_norm);
            sys.optimizer.step(&mut sys.store, &groups)?;
            if mode == PromptMode::Kore {
                ema_update(&mut sys.codebook, &stats.assignments, chunk.len(), cfg.ema_decay);
                for r in &stats.residuals {
                    pool.push(r);
                }
                resets += dead_code_reset(&mut sys.codebook, &rvq, &pool, &mut sys.rng);
            }
            loss_sum += stats.loss * chunk.len() as f64;
            lm_sum += stats.lm_loss * chunk.len() as f64;
            seen += chunk.len();
            step += 1;
            let due = match cfg.val_every {
                0 => c + 1 == chunks.len(),
                n => step % n == 0,
            };
            if !due {
                continue;
            }
            sys.store.zero_grads();
            let report = evaluate(&sys.scorer(&val), &val_instances, mode.name(), "val")?;
            let metric = report.hit_at_k[&k];
            sys.history.push(EpochRecord {
                stage: stage.name().into(),
                mode: mode.name().into(),
                epoch,
                step,
                train_loss: loss_sum / seen as f64,
                train_lm_loss: lm_sum / seen as f64,
                val_hit: report.hit_at_k.clone(),
                lr_lora: groups.iter().find(|g| g.name == "lora").map_or(0.0, |g| g.learning_rate),
                lr_encoder: groups.iter().find(|g| g.name == "encoder").map_or(0.0, |g| g.learning_rate),
                dead_resets: resets,
            });
            info!(
                "{} {} epoch {epoch} step {step}: loss {:.4}, val {} {:.3}",
                stage.name(),
                mode.name(),
                loss_sum / seen as f64,
                cfg.monitor,
                metric
            );
            (loss_sum, lm_sum, seen, resets) = (0.0, 0.0, 0, 0);
            let (improved, stop) = stopper.observe(metric);
            if improved {
                best = Some((step, metric, sys.clone()));
            }
            if plateau.observe(metric) {
                for g in &mut groups {
                    g.learning_rate *= cfg.plateau_factor;
                }
            }
            if stop {
                stopped_early = true;
                break 'training;
            }
        }
    }
    if best.is_none() {
        // Fewer steps than one validation interval: judge the final state.
        let report = evaluate(&sys.scorer(&val), &val_instances, mode.name(), "val")?;
        best = Some((step, report.hit_at_k[&k], sys.clone()));
    }
    let (best_step, best_metric, snapshot) = best.expect("set above");
    let history = std::mem::take(&mut sys.history);
    let (optimizer, rng) = (sys.optimizer.clone(), sys.rng.clone());
    *sys = snapshot;
    sys.history = history;
    sys.optimizer = optimizer;
    sys.rng = rng;
    Ok(TrainOutcome {
        best_step,
        best_metric,
        stopped_early,
        epochs,
    })
}

/// Evaluation reports for every baseline and the trained model, all on one
/// split. `frozen` is the pretrained system before any stage training.
pub fn compare(
    frozen: &System,
    kore: &System,
    lora_only: &System,
    corpus: &Corpus,
    split: Split,
    stage: Stage,
) -> Result<Vec<EvalReport>> {
    Ok(vec![
        evaluate_split(frozen, corpus, split, stage, PromptMode::Vanilla)?,
        evaluate_split(frozen, corpus, split, stage, PromptMode::Textualization)?,
        evaluate_split(lora_only, corpus, split, stage, PromptMode::LoraOnly)?,
        evaluate_split(kore, corpus, split, stage, PromptMode::Kore)?,
    ])
}

/// Mean prompt tokens per mode over a split, from the same accounting the
/// evaluator uses.
pub fn token_table(sys: &System, corpus: &Corpus, split: Split, stage: Stage) -> BTreeMap<String, f64> {
    let inst = corpus.instances(split, stage);
    [PromptMode::Kore, PromptMode::Textualization, PromptMode::Vanilla]
        .into_iter()
        .map(|m| {
            let prompts: Vec<Vec<usize>> = sys.prepare(&inst, m).into_iter().map(|p| p.prompt).collect();
            let mode = match m {
                PromptMode::Kore => crate::eval::PromptMode::Injection,
                PromptMode::Textualization => crate::eval::PromptMode::Textualization,
                _ => crate::eval::PromptMode::Vanilla,
            };
            (
                m.name().to_string(),
                crate::eval::avg_tokens(&prompts, mode, sys.vocab.placeholder(), sys.config.num_quantizers),
            )
        })
        .collect()
}

