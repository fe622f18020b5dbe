//! Adam with per-epoch learning-rate decay and global gradient clipping,
//! class-balanced batches, per-epoch validation and best-checkpoint
//! selection by validation FRR at 1 FA/hr.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::FeatureExtractor;
use crate::data::{assemble_batch, sample_seed, AugmentationBank, BatchSampler, Clip, FeatureStore};
use crate::error::{KwsError, Result};
use crate::eval;
use crate::model::{self, Architecture, Gradients, ModelParameters, CE_FLOOR};
use crate::regularization::{self, LossBreakdown, RegularizationConfig};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    /// Positive : negative counts within a batch.
    pub pos_neg_ratio: [usize; 2],
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub selective: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr: 2e-4,
            lr_decay: 0.98,
            clip_norm: 1.0,
            batch_size: 128,
            pos_neg_ratio: [1, 3],
            lambda1: 0.1,
            lambda2: 0.1,
            lambda3: 0.1,
            selective: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KwsError::InvalidArgument(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) || !(self.clip_norm > 0.0) {
            return bad(format!(
                "lr {}, lr_decay {}, clip_norm {} must be positive",
                self.lr, self.lr_decay, self.clip_norm
            ));
        }
        let [p, n] = self.pos_neg_ratio;
        if p == 0 || n == 0 || self.batch_size % (p + n) != 0 {
            return bad(format!(
                "batch_size {} is not a multiple of the {p}:{n} ratio",
                self.batch_size
            ));
        }
        self.regularization().validate()
    }

    pub fn regularization(&self) -> RegularizationConfig {
        RegularizationConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            selective: self.selective,
            ..RegularizationConfig::default()
        }
    }

    /// Positives and negatives per batch.
    pub fn batch_split(&self) -> (usize, usize) {
        let [p, n] = self.pos_neg_ratio;
        let unit = self.batch_size / (p + n);
        (unit * p, unit * n)
    }

    /// Learning rate in effect after `completed` epochs.
    pub fn lr_at(&self, completed: usize) -> f64 {
        self.lr * self.lr_decay.powi(completed as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(p: &ModelParameters, lr: f64) -> Self {
        let zeros: Vec<Tensor> = p.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        OptimizerState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Scales all gradients by `max_norm / norm` when their global L2 norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(g: &mut Gradients, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(KwsError::InvalidArgument(format!("max_norm must be positive, got {max_norm}")));
    }
    if let Some((name, _)) = g.names().iter().zip(g.tensors()).find(|(_, t)| !t.is_finite()) {
        return Err(KwsError::NonFiniteGradient(name.clone()));
    }
    let norm = g.global_norm();
    if norm > max_norm {
        g.scale(max_norm / norm);
    }
    Ok(norm)
}

/// One bias-corrected Adam update.
pub fn adam_step(p: &mut ModelParameters, g: &Gradients, s: &mut OptimizerState) -> Result<()> {
    if g.tensors().len() != p.len() || s.m.len() != p.len() {
        return Err(KwsError::Shape("optimizer state does not match parameters".into()));
    }
    s.step += 1;
    let c1 = 1.0 - s.beta1.powi(s.step as i32);
    let c2 = 1.0 - s.beta2.powi(s.step as i32);
    for (i, theta) in p.tensors_mut().iter_mut().enumerate() {
        let grad = g.tensors()[i].data();
        if grad.len() != theta.len() {
            return Err(KwsError::Shape(format!("gradient {i} has {} values, parameter {}", grad.len(), theta.len())));
        }
        let (m, v) = (s.m[i].data_mut(), s.v[i].data_mut());
        for (j, th) in theta.data_mut().iter_mut().enumerate() {
            m[j] = s.beta1 * m[j] + (1.0 - s.beta1) * grad[j];
            v[j] = s.beta2 * v[j] + (1.0 - s.beta2) * grad[j] * grad[j];
            *th -= s.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + s.eps);
        }
    }
    Ok(())
}

struct SampleGraph {
    tape: Tape,
    ce: NodeId,
    contexts: NodeId,
    scores: NodeId,
}

/// Objective and parameter gradients for one batch.
///
/// Each sample gets its own tape; a small batch-level tape combines their
/// cross-entropies, contexts and scores into the objective, and its
/// gradients seed the per-sample sweeps. Summation follows sample order.
pub fn batch_gradients(p: &ModelParameters, features: &[Tensor], labels: &[u8], reg: &RegularizationConfig) -> Result<(LossBreakdown, Gradients)> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(KwsError::Shape(format!("{} feature matrices, {} labels", features.len(), labels.len())));
    }
    let mut graphs = features
        .par_iter()
        .zip(labels)
        .map(|(f, y)| {
            let mut tape = Tape::new();
            let fwd = model::forward_on_tape(&mut tape, p, f)?;
            let ce = tape.neg_log_pick(fwd.posterior, *y as usize, CE_FLOOR);
            Ok(SampleGraph {
                ce,
                contexts: fwd.attention.contexts,
                scores: fwd.attention.scores,
                tape,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut bt = Tape::new();
    let mut leaf = |g: &SampleGraph, id: NodeId| bt.var(g.tape.value(id).clone());
    let ce: Vec<NodeId> = graphs.iter().map(|g| leaf(g, g.ce)).collect();
    let ctx: Vec<NodeId> = graphs.iter().map(|g| leaf(g, g.contexts)).collect();
    let sc: Vec<NodeId> = graphs.iter().map(|g| leaf(g, g.scores)).collect();
    let obj = regularization::objective_on_tape(&mut bt, &ce, &ctx, &sc, labels, reg);
    let losses = obj.breakdown(&bt, labels.iter().filter(|y| **y == 1).count());
    if !losses.total.is_finite() {
        return Err(KwsError::NonFinite("objective"));
    }
    bt.backward(obj.total)?;
    graphs.par_iter_mut().enumerate().try_for_each(|(n, g)| {
        let seeds: Vec<(NodeId, Tensor)> = [(g.ce, ce[n]), (g.contexts, ctx[n]), (g.scores, sc[n])]
            .into_iter()
            .map(|(node, l)| (node, bt.grad(l)))
            .filter(|(_, t)| t.data().iter().any(|v| *v != 0.0))
            .collect();
        if seeds.is_empty() {
            return Ok(());
        }
        g.tape.backward_seeded(&seeds)
    })?;
    let mut grads = Gradients::zeros_like(p);
    for g in &graphs {
        grads.accumulate(&g.tape);
    }
    Ok((losses, grads))
}

/// Objective value of a batch through the inference path (no gradients).
pub fn batch_loss(p: &ModelParameters, features: &[Tensor], labels: &[u8], reg: &RegularizationConfig) -> Result<LossBreakdown> {
    eval::score_features(p, features, labels)?.losses(reg)
}

/// Training and validation data held in memory.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a [Clip],
    pub valid: &'a [Clip],
    pub bank: &'a AugmentationBank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over the epoch's batches.
    pub train: LossBreakdown,
    pub valid: LossBreakdown,
    pub valid_frr_at_1fa: f64,
    pub valid_auc: f64,
    pub valid_head_overlap: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: ModelParameters,
    /// 0 when no epoch finished.
    pub best_epoch: usize,
    pub last: ModelParameters,
    pub epochs: Vec<EpochRecord>,
    /// `(epoch, batch)` at which the objective or a gradient stopped being finite.
    pub diverged: Option<(usize, usize)>,
}

impl TrainOutcome {
    /// `epoch,ce,inter_context,intra_context,inter_score,total,split`
    pub fn write_trace_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "epoch,ce,inter_context,intra_context,inter_score,total,split")?;
        for r in &self.epochs {
            for (split, l) in [("train", &r.train), ("valid", &r.valid)] {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{split}",
                    r.epoch, l.ce, l.inter_context, l.intra_context, l.inter_score, l.total
                )?;
            }
        }
        Ok(())
    }

    pub fn sidecar(&self, cfg: &TrainConfig) -> serde_json::Value {
        serde_json::json!({
            "train": cfg,
            "architecture": self.best.arch(),
            "best_epoch": self.best_epoch,
            "best_valid_frr_at_1fa": self.epochs.iter().find(|e| e.epoch == self.best_epoch).map(|e| e.valid_frr_at_1fa),
            "diverged": self.diverged.map(|(e, b)| serde_json::json!({"epoch": e, "batch": b})),
            "epochs": self.epochs,
        })
    }
}

const BATCH_SALT: u64 = 0x6261_7463_6865_73;
const SAMPLER_SALT: u64 = 0x7361_6d70_6c65;

fn mean_breakdown(parts: &[LossBreakdown], reg: &RegularizationConfig) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    let avg = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    let mut out = LossBreakdown::assemble(
        avg(|l| l.ce),
        avg(|l| l.inter_context),
        avg(|l| l.intra_context),
        avg(|l| l.inter_score),
        reg,
        parts.iter().map(|l| l.n_positive).sum(),
    );
    out.total = avg(|l| l.total);
    out
}

/// Trains from a seeded random initialization. Divergence stops training
/// early and is reported in the outcome, which still holds the best
/// checkpoint seen so far.
pub fn train(cfg: &TrainConfig, arch: Architecture, extractor: &FeatureExtractor, data: TrainData<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    arch.validate()?;
    let reg = cfg.regularization();
    let (n_pos, n_neg) = cfg.batch_split();
    let store = FeatureStore::build(data.train, extractor)?;
    let valid_store = FeatureStore::build(data.valid, extractor)?;
    let valid_features: Vec<Tensor> = (0..valid_store.len()).map(|i| valid_store.get(i).clone()).collect();
    let valid_labels: Vec<u8> = data.valid.iter().map(|c| c.label).collect();
    if !valid_labels.contains(&0) || !valid_labels.contains(&1) {
        return Err(KwsError::InvalidArgument("validation split needs positives and negatives".into()));
    }
    let train_labels: Vec<u8> = data.train.iter().map(|c| c.label).collect();
    let mut sampler = BatchSampler::new(&train_labels, n_pos, n_neg, cfg.seed ^ SAMPLER_SALT)?;
    let batches = sampler.batches_per_epoch();

    let mut params = ModelParameters::init(arch, cfg.seed);
    let mut opt = OptimizerState::new(&params, cfg.lr);
    let mut outcome = TrainOutcome {
        best: params.clone(),
        best_epoch: 0,
        last: params.clone(),
        epochs: Vec::new(),
        diverged: None,
    };
    let mut best_frr = f64::INFINITY;
    for epoch in 1..=cfg.epochs {
        opt.lr = cfg.lr_at(epoch - 1);
        let mut parts = Vec::with_capacity(batches);
        for b in 0..batches {
            let indices = sampler.next_indices();
            let seed = sample_seed(cfg.seed ^ BATCH_SALT, (epoch - 1) * batches + b);
            let batch = assemble_batch(data.train, &store, data.bank, extractor, &indices, seed)?;
            let step = batch_gradients(&params, &batch.features, &batch.labels, &reg)
                .and_then(|(l, mut g)| clip_grad_norm(&mut g, cfg.clip_norm).map(|_| (l, g)));
            let (losses, grads) = match step {
                Ok(v) => v,
                Err(KwsError::NonFinite(_) | KwsError::NonFiniteGradient(_)) => {
                    log::error!("training diverged at epoch {epoch}, batch {b}");
                    outcome.diverged = Some((epoch, b));
                    outcome.last = params;
                    return Ok(outcome);
                }
                Err(e) => return Err(e),
            };
            adam_step(&mut params, &grads, &mut opt)?;
            params.round_to_f32();
            parts.push(losses);
        }
        let scored = eval::score_features(&params, &valid_features, &valid_labels)?;
        let samples = scored.samples();
        let frr = eval::roc_curve(&samples)?.frr_at(1.0);
        let record = EpochRecord {
            epoch,
            lr: opt.lr,
            train: mean_breakdown(&parts, &reg),
            valid: scored.losses(&reg)?,
            valid_frr_at_1fa: frr,
            valid_auc: eval::auc(&samples),
            valid_head_overlap: scored.head_overlap(),
        };
        log::info!(
            "epoch {epoch}: train total {:.4} ce {:.4} | valid ce {:.4} inter_c {:.4} intra_c {:.4} inter_s {:.4} frr@1 {:.4} auc {:.4}",
            record.train.total,
            record.train.ce,
            record.valid.ce,
            record.valid.inter_context,
            record.valid.intra_context,
            record.valid.inter_score,
            frr,
            record.valid_auc
        );
        // later epochs win ties
        if frr <= best_frr {
            best_frr = frr;
            outcome.best = params.clone();
            outcome.best_epoch = epoch;
        }
        outcome.epochs.push(record);
    }
    outcome.last = params;
    Ok(outcome)
}
