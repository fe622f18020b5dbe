//! Inter-head orthogonality and intra-head non-orthogonality penalties on
//! attention contexts and scores, and the combined training objective.
//!
//! Every term is a mean of squared cosine similarities, so it lies in
//! `[0, 1]`. Selective variants only look at positive (keyword) samples.
//! The functions taking a [`Tape`] record the computation so the terms can
//! be differentiated; the plain functions evaluate the same graph.

use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{transpose, Tensor};

pub const DEFAULT_NORM_FLOOR: f64 = 1e-8;

/// Attention outputs of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchAttention {
    /// Per sample, `H × d` (row `i` is `cᵢ⁽ⁿ⁾`).
    pub contexts: Vec<Tensor>,
    /// Per sample, `H × T'` (row `i` is `eᵢ⁽ⁿ⁾`).
    pub scores: Vec<Tensor>,
    pub labels: Vec<u8>,
}

impl BatchAttention {
    pub fn new(contexts: Vec<Tensor>, scores: Vec<Tensor>, labels: Vec<u8>) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(KwsError::InvalidArgument("empty batch".into()));
        }
        if contexts.len() != n || scores.len() != n {
            return Err(KwsError::Shape(format!(
                "{} contexts, {} scores, {n} labels",
                contexts.len(),
                scores.len()
            )));
        }
        if labels.iter().any(|y| *y > 1) {
            return Err(KwsError::InvalidArgument("labels must be 0 or 1".into()));
        }
        let (cs, ss) = (contexts[0].shape().to_vec(), scores[0].shape().to_vec());
        if cs.len() != 2 || ss.len() != 2 || cs[0] != ss[0] {
            return Err(KwsError::Shape(format!("contexts {cs:?} vs scores {ss:?}")));
        }
        if contexts.iter().any(|c| c.shape() != cs.as_slice()) || scores.iter().any(|s| s.shape() != ss.as_slice()) {
            return Err(KwsError::Shape("inconsistent per-sample shapes".into()));
        }
        Ok(BatchAttention {
            contexts,
            scores,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn heads(&self) -> usize {
        self.contexts[0].rows()
    }

    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|y| **y == 1).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizationConfig {
    /// Inter-head context orthogonality weight.
    pub lambda1: f64,
    /// Intra-head context similarity weight (subtracted).
    pub lambda2: f64,
    /// Inter-head score orthogonality weight.
    pub lambda3: f64,
    pub norm_floor: f64,
    pub selective: bool,
}

impl Default for RegularizationConfig {
    fn default() -> Self {
        RegularizationConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            norm_floor: DEFAULT_NORM_FLOOR,
            selective: true,
        }
    }
}

impl RegularizationConfig {
    pub fn tied(lambda: f64) -> Self {
        RegularizationConfig {
            lambda1: lambda,
            lambda2: lambda,
            lambda3: lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.lambda1, self.lambda2, self.lambda3]
            .iter()
            .all(|l| l.is_finite() && *l >= 0.0)
            && self.norm_floor > 0.0;
        if ok {
            Ok(())
        } else {
            Err(KwsError::InvalidArgument(format!("invalid regularization config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub inter_context: f64,
    pub intra_context: f64,
    pub inter_score: f64,
    pub total: f64,
    pub n_positive: usize,
}

impl LossBreakdown {
    pub fn assemble(ce: f64, inter_context: f64, intra_context: f64, inter_score: f64, cfg: &RegularizationConfig, n_positive: usize) -> Self {
        LossBreakdown {
            ce,
            inter_context,
            intra_context,
            inter_score,
            total: ce + cfg.lambda1 * inter_context - cfg.lambda2 * intra_context + cfg.lambda3 * inter_score,
            n_positive,
        }
    }
}

/// `‖MMᵀ − I‖²_F / (k(k−1))` for the `k` rows of `m`, which the caller has
/// normalized.
pub fn gram_offdiag_on_tape(tape: &mut Tape, m: NodeId) -> NodeId {
    let k = tape.value(m).rows();
    debug_assert!(k >= 2);
    let g = tape.matmul_nt(m, m);
    let g = tape.sub_identity(g);
    let s = tape.sum_squares(g);
    tape.scale(s, 1.0 / (k * (k - 1)) as f64)
}

fn selected(labels: &[u8], selective: bool) -> Vec<usize> {
    (0..labels.len()).filter(|n| !selective || labels[*n] == 1).collect()
}

/// Inter-head penalty over per-sample `H × d` matrices (contexts or scores).
/// Returns `None` when no sample is selected; the term is then exactly zero.
pub fn inter_head_on_tape(tape: &mut Tape, per_sample: &[NodeId], labels: &[u8], selective: bool, floor: f64) -> Option<NodeId> {
    let picked = selected(labels, selective);
    if picked.is_empty() {
        return None;
    }
    let weight = 1.0 / picked.len() as f64;
    let terms: Vec<(NodeId, f64)> = picked
        .iter()
        .map(|n| {
            let m = tape.normalize_rows(per_sample[*n], floor);
            (gram_offdiag_on_tape(tape, m), weight)
        })
        .collect();
    Some(tape.weighted_sum(&terms))
}

/// Intra-head similarity of one head's contexts across selected samples,
/// averaged over heads. `None` when fewer than two samples are selected.
pub fn intra_head_on_tape(tape: &mut Tape, contexts: &[NodeId], labels: &[u8], selective: bool, floor: f64) -> Option<NodeId> {
    let picked = selected(labels, selective);
    if picked.len() < 2 {
        return None;
    }
    let heads = tape.value(contexts[0]).rows();
    let terms: Vec<(NodeId, f64)> = (0..heads)
        .map(|i| {
            let rows: Vec<NodeId> = picked.iter().map(|n| tape.row(contexts[*n], i)).collect();
            let m = tape.stack_rows(&rows);
            let m = tape.normalize_rows(m, floor);
            (gram_offdiag_on_tape(tape, m), 1.0 / heads as f64)
        })
        .collect();
    Some(tape.weighted_sum(&terms))
}

/// Node handles of the combined objective; regularization handles are
/// `None` where the term is identically zero.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveNodes {
    pub ce: NodeId,
    pub inter_context: Option<NodeId>,
    pub intra_context: Option<NodeId>,
    pub inter_score: Option<NodeId>,
    pub total: NodeId,
}

impl ObjectiveNodes {
    pub fn breakdown(&self, tape: &Tape, n_positive: usize) -> LossBreakdown {
        let v = |n: Option<NodeId>| n.map_or(0.0, |n| tape.value(n).item());
        LossBreakdown {
            ce: tape.value(self.ce).item(),
            inter_context: v(self.inter_context),
            intra_context: v(self.intra_context),
            inter_score: v(self.inter_score),
            total: tape.value(self.total).item(),
            n_positive,
        }
    }
}

/// `mean(CE) + λ₁·inter_context − λ₂·intra_context + λ₃·inter_score`.
///
/// `ce` holds one scalar node per sample. Inter-head terms need at least two
/// heads and are zero otherwise.
pub fn objective_on_tape(
    tape: &mut Tape,
    ce: &[NodeId],
    contexts: &[NodeId],
    scores: &[NodeId],
    labels: &[u8],
    cfg: &RegularizationConfig,
) -> ObjectiveNodes {
    let n = ce.len() as f64;
    let ce_terms: Vec<(NodeId, f64)> = ce.iter().map(|c| (*c, 1.0 / n)).collect();
    let ce_mean = tape.weighted_sum(&ce_terms);
    let multi_head = tape.value(contexts[0]).rows() >= 2;
    let (inter_c, inter_s) = if multi_head {
        (
            inter_head_on_tape(tape, contexts, labels, cfg.selective, cfg.norm_floor),
            inter_head_on_tape(tape, scores, labels, cfg.selective, cfg.norm_floor),
        )
    } else {
        (None, None)
    };
    let intra = intra_head_on_tape(tape, contexts, labels, cfg.selective, cfg.norm_floor);
    let mut terms = vec![(ce_mean, 1.0)];
    for (node, w) in [(inter_c, cfg.lambda1), (intra, -cfg.lambda2), (inter_s, cfg.lambda3)] {
        if let Some(node) = node {
            terms.push((node, w));
        }
    }
    let total = tape.weighted_sum(&terms);
    ObjectiveNodes {
        ce: ce_mean,
        inter_context: inter_c,
        intra_context: intra,
        inter_score: inter_s,
        total,
    }
}

/// Divides each column of the `d × k` matrix by `max(‖column‖₂, floor)`.
pub fn normalize_columns(m: &Tensor, floor: f64) -> Tensor {
    let (d, k) = (m.rows(), m.cols());
    let mut tape = Tape::new();
    let rows = tape.constant(Tensor::new(&[k, d], transpose(m.data(), d, k)).unwrap());
    let n = tape.normalize_rows(rows, floor);
    Tensor::new(&[d, k], transpose(tape.value(n).data(), k, d)).unwrap()
}

/// `‖MᵀM − I_k‖²_F / (k(k−1))` for a `d × k` matrix with normalized columns.
pub fn gram_offdiag_loss(m: &Tensor) -> Result<f64> {
    let (d, k) = (m.rows(), m.cols());
    if k < 2 {
        return Err(KwsError::InvalidArgument(format!("need at least 2 columns, got {k}")));
    }
    let mut tape = Tape::new();
    let rows = tape.constant(Tensor::new(&[k, d], transpose(m.data(), d, k)).unwrap());
    let l = gram_offdiag_on_tape(&mut tape, rows);
    Ok(tape.value(l).item())
}

fn need_heads(b: &BatchAttention) -> Result<()> {
    if b.heads() < 2 {
        return Err(KwsError::InvalidArgument("inter-head losses need H >= 2".into()));
    }
    Ok(())
}

fn eval_inter(mats: &[Tensor], labels: &[u8], selective: bool) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = mats.iter().map(|m| tape.constant(m.clone())).collect();
    inter_head_on_tape(&mut tape, &ids, labels, selective, DEFAULT_NORM_FLOOR).map_or(0.0, |n| tape.value(n).item())
}

pub fn inter_context_loss(b: &BatchAttention, selective: bool) -> Result<f64> {
    need_heads(b)?;
    Ok(eval_inter(&b.contexts, &b.labels, selective))
}

pub fn inter_score_loss(b: &BatchAttention, selective: bool) -> Result<f64> {
    need_heads(b)?;
    Ok(eval_inter(&b.scores, &b.labels, selective))
}

pub fn intra_context_loss(b: &BatchAttention, selective: bool) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = b.contexts.iter().map(|m| tape.constant(m.clone())).collect();
    Ok(intra_head_on_tape(&mut tape, &ids, &b.labels, selective, DEFAULT_NORM_FLOOR)
        .map_or(0.0, |n| tape.value(n).item()))
}

/// Evaluates all terms for a batch with a known mean cross-entropy.
pub fn total_objective(ce: f64, b: &BatchAttention, cfg: &RegularizationConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let c: Vec<NodeId> = b.contexts.iter().map(|m| tape.constant(m.clone())).collect();
    let s: Vec<NodeId> = b.scores.iter().map(|m| tape.constant(m.clone())).collect();
    let ce_node = tape.constant(Tensor::scalar(ce));
    let ce_nodes = vec![ce_node; b.len()];
    let nodes = objective_on_tape(&mut tape, &ce_nodes, &c, &s, &b.labels, cfg);
    Ok(nodes.breakdown(&tape, b.n_positive()))
}
