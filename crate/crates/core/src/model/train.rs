use std::collections::HashMap;
use std::f64::consts::PI;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{lm_loss_with_grad, LossReport};
use super::network::{AttentionMode, AttentionPlan, Model};
use super::params::Params;
use crate::error::{Error, Result};
use crate::layout::AugmentedSequence;
use crate::visibility::{build_chunk_mask, ChunkBaselineSpec};

/// Optimizer and schedule settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Peak learning rate.
    pub lr: f64,
    pub warmup_steps: usize,
    /// Floor of the cosine decay as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clipping threshold; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 4,
            lr: 3e-3,
            warmup_steps: 10,
            min_lr_ratio: 0.5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            grad_clip: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.lr > 0.0
            && (0.0..=1.0).contains(&self.min_lr_ratio)
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.grad_clip >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("bad training config {self:?}")))
        }
    }

    /// Linear warmup to `lr`, then cosine decay to `lr * min_lr_ratio` at `steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let floor = self.lr * self.min_lr_ratio;
        floor + (self.lr - floor) * 0.5 * (1.0 + (PI * progress).cos())
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    m: Params,
    v: Params,
    t: u64,
}

impl AdamW {
    pub fn new(params: &Params) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            let wd = if p.decay { cfg.weight_decay } else { 0.0 };
            for (((pv, &gv), mv), vv) in p.data.iter_mut().zip(g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                let update = (*mv / bc1) / ((*vv / bc2).sqrt() + cfg.eps);
                *pv -= lr * (update + wd * *pv);
            }
        }
    }
}

/// Visibility used for training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainLayout {
    /// One pass under the unified rule.
    Unified(AttentionMode),
    /// Chunk-wise baseline, run as one dense masked pass (requires no sinks).
    Chunk(ChunkBaselineSpec),
}

impl TrainLayout {
    fn check(&self, model: &Model) -> Result<()> {
        if let Self::Chunk(spec) = self {
            if model.compression.sink_count != 0 || model.compression.ratio != spec.ratio {
                return Err(Error::InvalidConfig(
                    "chunk layout needs a model with no sinks and the same ratio".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn sequence(&self, model: &Model, raw: &[u32]) -> Result<AugmentedSequence> {
        match self {
            Self::Unified(_) => model.augment(raw),
            Self::Chunk(spec) => spec.sequence(raw, model.config.vocab),
        }
    }

    pub fn plan(&self, model: &Model, raw_len: usize) -> Result<AttentionPlan> {
        match self {
            Self::Unified(mode) => AttentionPlan::unified(&model.compression, raw_len, *mode),
            Self::Chunk(spec) => Ok(AttentionPlan::Dense(build_chunk_mask(raw_len, spec)?)),
        }
    }
}

/// Loss of `model` on one raw sequence under `layout`.
pub fn evaluate(model: &Model, layout: &TrainLayout, raw: &[u32]) -> Result<LossReport> {
    layout.check(model)?;
    let seq = layout.sequence(model, raw)?;
    let plan = layout.plan(model, raw.len())?;
    let trace = model.forward_trace(&seq, &plan)?;
    Ok(lm_loss_with_grad(&trace.logits, &seq, None).0)
}

/// One row of a boundary-loss profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundaryBucket {
    pub rel_pos: usize,
    pub mean_ce: f64,
    pub count: usize,
}

/// Mean cross-entropy bucketed by raw position modulo `chunk_len`, skipping the first chunk.
pub fn boundary_loss_profile(
    model: &Model,
    layout: &TrainLayout,
    data: &[Vec<u32>],
    chunk_len: usize,
) -> Result<Vec<BoundaryBucket>> {
    if chunk_len == 0 {
        return Err(Error::InvalidConfig("chunk_len must be positive".into()));
    }
    let reports = data
        .par_iter()
        .map(|raw| {
            if raw.len() % chunk_len != 0 {
                return Err(Error::NonDivisibleLength {
                    len: raw.len(),
                    divisor: chunk_len,
                });
            }
            evaluate(model, layout, raw)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sums = vec![(0.0, 0usize); chunk_len];
    for rep in &reports {
        for (j, ce) in rep.per_position_ce.iter().enumerate().skip(chunk_len) {
            if let Some(ce) = ce {
                let b = &mut sums[j % chunk_len];
                b.0 += ce;
                b.1 += 1;
            }
        }
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(rel_pos, (sum, count))| BoundaryBucket {
            rel_pos,
            mean_ce: if count > 0 { sum / count as f64 } else { 0.0 },
            count,
        })
        .collect())
}

/// Model plus optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub layout: TrainLayout,
    opt: AdamW,
    step: usize,
    plans: HashMap<usize, AttentionPlan>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, layout: TrainLayout) -> Result<Self> {
        config.validate()?;
        layout.check(&model)?;
        let opt = AdamW::new(&model.params);
        Ok(Self {
            model,
            config,
            layout,
            opt,
            step: 0,
            plans: HashMap::new(),
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    fn plan(&mut self, raw_len: usize) -> Result<AttentionPlan> {
        if let Some(p) = self.plans.get(&raw_len) {
            return Ok(p.clone());
        }
        let plan = self.layout.plan(&self.model, raw_len)?;
        self.plans.insert(raw_len, plan.clone());
        Ok(plan)
    }

    /// Mean-loss gradients over a batch, without touching the parameters.
    pub fn gradients(&mut self, batch: &[Vec<u32>]) -> Result<(Params, LossReport)> {
        let r = self.model.compression.ratio;
        if batch.is_empty() {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        for raw in batch {
            if raw.is_empty() || raw.len() % r != 0 {
                return Err(Error::NonDivisibleLength { len: raw.len(), divisor: r });
            }
        }
        let mut plans = HashMap::new();
        for raw in batch {
            if !plans.contains_key(&raw.len()) {
                plans.insert(raw.len(), self.plan(raw.len())?);
            }
        }
        let model = &self.model;
        let layout = &self.layout;
        let per_seq = batch
            .par_iter()
            .map(|raw| {
                let seq = layout.sequence(model, raw)?;
                let plan = &plans[&raw.len()];
                let trace = model.forward_trace(&seq, plan)?;
                let (report, d_logits, total) = lm_loss_with_grad(&trace.logits, &seq, Some(1.0));
                let d_logits: Array2<f64> = d_logits.expect("gradient requested");
                let (grads, _) = model.backward(&trace, &d_logits, plan)?;
                Ok((grads, report, total))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut iter = per_seq.into_iter();
        let (mut grads, first, mut total) = iter.next().expect("non-empty batch");
        let mut count = first.predicting_positions;
        let max_len = batch.iter().map(Vec::len).max().unwrap_or(0);
        let mut per_pos = vec![(0.0, 0usize); max_len];
        let mut accumulate = |rep: &LossReport| {
            for (slot, ce) in per_pos.iter_mut().zip(&rep.per_position_ce) {
                if let Some(ce) = ce {
                    slot.0 += ce;
                    slot.1 += 1;
                }
            }
        };
        accumulate(&first);
        for (g, rep, t) in iter {
            grads.add_assign(&g);
            total += t;
            count += rep.predicting_positions;
            accumulate(&rep);
        }
        if count > 0 {
            grads.scale(1.0 / count as f64);
        }
        let report = LossReport {
            mean_ce: if count > 0 { total / count as f64 } else { 0.0 },
            predicting_positions: count,
            per_position_ce: per_pos
                .into_iter()
                .map(|(s, n)| (n > 0).then(|| s / n as f64))
                .collect(),
            grad_norm: grads.l2_norm(),
        };
        Ok((grads, report))
    }

    /// Forward, backward, optional clipping and one optimizer update.
    pub fn train_step(&mut self, batch: &[Vec<u32>]) -> Result<LossReport> {
        let (mut grads, report) = self.gradients(batch)?;
        if self.config.grad_clip > 0.0 && report.grad_norm > self.config.grad_clip {
            grads.scale(self.config.grad_clip / report.grad_norm);
        }
        let lr = self.config.lr_at(self.step);
        self.opt.step(&mut self.model.params, &grads, lr, &self.config);
        self.step += 1;
        Ok(report)
    }
}
