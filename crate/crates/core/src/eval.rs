//! Detection metrics: ROC over data-driven thresholds, FRR at a false-alarm
//! rate, held-out regularization losses, head overlap, and sliding-window
//! detection on long recordings.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{FeatureExtractor, Waveform, SAMPLE_RATE, SEGMENT_SECONDS};
use crate::data::Clip;
use crate::error::{KwsError, Result};
use crate::model::{self, ModelParameters, Prediction};
use crate::regularization::{self, BatchAttention, LossBreakdown, RegularizationConfig};
use crate::tensor::Tensor;

/// FA/hr targets reported in every summary.
pub const OPERATING_POINTS: [f64; 3] = [1.0, 2.0, 4.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    /// `p(keyword | x)`
    pub confidence: f64,
    pub label: u8,
    pub duration_s: f64,
}

impl ScoredSample {
    pub fn new(confidence: f64, label: u8, duration_s: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(KwsError::InvalidArgument(format!("confidence {confidence} outside [0, 1]")));
        }
        if label > 1 || !(duration_s >= 0.0) {
            return Err(KwsError::InvalidArgument(format!("label {label}, duration {duration_s}")));
        }
        Ok(ScoredSample {
            confidence,
            label,
            duration_s,
        })
    }
}

/// A sample is accepted when `confidence >= threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub far_per_hour: f64,
    pub frr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub target_fa_per_hour: f64,
    /// `None` means every sample is rejected.
    pub threshold: Option<f64>,
    pub far_per_hour: f64,
    pub frr: f64,
    /// FRR linearly interpolated in FA/hr between the neighbouring ROC points.
    pub frr_interpolated: f64,
}

/// ROC points in ascending threshold order. The last point rejects
/// everything (infinite threshold).
#[derive(Debug, Clone, PartialEq)]
pub struct Roc {
    pub points: Vec<RocPoint>,
    pub n_positive: usize,
    pub n_negative: usize,
    pub negative_hours: f64,
}

pub fn roc_curve(samples: &[ScoredSample]) -> Result<Roc> {
    let n_pos = samples.iter().filter(|s| s.label == 1).count();
    let n_neg = samples.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(KwsError::InvalidArgument("ROC needs positives and negatives".into()));
    }
    let hours = samples.iter().filter(|s| s.label == 0).map(|s| s.duration_s).sum::<f64>() / 3600.0;
    if hours <= 0.0 {
        return Err(KwsError::InvalidArgument("negative audio has zero duration".into()));
    }
    let mut sorted: Vec<(f64, u8)> = samples.iter().map(|s| (s.confidence, s.label)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points = Vec::new();
    // counts of samples strictly below the current threshold
    let (mut pos_below, mut neg_below) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let thr = sorted[i].0;
        points.push(RocPoint {
            threshold: thr,
            far_per_hour: (n_neg - neg_below) as f64 / hours,
            frr: pos_below as f64 / n_pos as f64,
        });
        while i < sorted.len() && sorted[i].0 == thr {
            if sorted[i].1 == 1 {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            i += 1;
        }
    }
    points.push(RocPoint {
        threshold: f64::INFINITY,
        far_per_hour: 0.0,
        frr: 1.0,
    });
    Ok(Roc {
        points,
        n_positive: n_pos,
        n_negative: n_neg,
        negative_hours: hours,
    })
}

impl Roc {
    /// Smallest threshold whose FA/hr does not exceed `target`.
    pub fn operating_point(&self, target: f64) -> OperatingPoint {
        let i = self
            .points
            .iter()
            .position(|p| p.far_per_hour <= target)
            .expect("reject-all point has zero false alarms");
        let p = self.points[i];
        let frr_interpolated = if i == 0 || p.far_per_hour == target {
            p.frr
        } else {
            let q = self.points[i - 1];
            let t = (q.far_per_hour - target) / (q.far_per_hour - p.far_per_hour);
            q.frr + t * (p.frr - q.frr)
        };
        OperatingPoint {
            target_fa_per_hour: target,
            threshold: p.threshold.is_finite().then_some(p.threshold),
            far_per_hour: p.far_per_hour,
            frr: p.frr,
            frr_interpolated,
        }
    }

    pub fn frr_at(&self, target: f64) -> f64 {
        self.operating_point(target).frr
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "threshold,far_per_hour,frr")?;
        for p in &self.points {
            writeln!(w, "{},{},{}", p.threshold, p.far_per_hour, p.frr)?;
        }
        Ok(())
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counted half.
pub fn auc(samples: &[ScoredSample]) -> f64 {
    let mut pos: Vec<f64> = samples.iter().filter(|s| s.label == 1).map(|s| s.confidence).collect();
    let mut neg: Vec<f64> = samples.iter().filter(|s| s.label == 0).map(|s| s.confidence).collect();
    if pos.is_empty() || neg.is_empty() {
        return f64::NAN;
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let (mut below, mut equal_end, mut wins) = (0usize, 0usize, 0.0);
    for p in &pos {
        while below < neg.len() && neg[below] < *p {
            below += 1;
        }
        equal_end = equal_end.max(below);
        while equal_end < neg.len() && neg[equal_end] == *p {
            equal_end += 1;
        }
        wins += below as f64 + 0.5 * (equal_end - below) as f64;
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Model outputs over a set of feature matrices.
#[derive(Debug, Clone)]
pub struct Scored {
    pub predictions: Vec<Prediction>,
    pub labels: Vec<u8>,
}

impl Scored {
    pub fn samples(&self) -> Vec<ScoredSample> {
        self.predictions
            .iter()
            .zip(&self.labels)
            .map(|(p, y)| ScoredSample {
                confidence: p.confidence().clamp(0.0, 1.0),
                label: *y,
                duration_s: SEGMENT_SECONDS,
            })
            .collect()
    }

    pub fn mean_ce(&self) -> f64 {
        let n = self.labels.len().max(1) as f64;
        self.predictions
            .iter()
            .zip(&self.labels)
            .map(|(p, y)| model::cross_entropy(&p.posterior, *y))
            .sum::<f64>()
            / n
    }

    pub fn attention(&self) -> Result<BatchAttention> {
        BatchAttention::new(
            self.predictions.iter().map(|p| p.bundle.contexts.clone()).collect(),
            self.predictions.iter().map(|p| p.bundle.scores.clone()).collect(),
            self.labels.clone(),
        )
    }

    /// Objective terms over the whole set as one batch.
    pub fn losses(&self, cfg: &RegularizationConfig) -> Result<LossBreakdown> {
        regularization::total_objective(self.mean_ce(), &self.attention()?, cfg)
    }

    /// Head overlap over the positives; `None` for a single head or no positives.
    pub fn head_overlap(&self) -> Option<f64> {
        let scores: Vec<Tensor> = self
            .predictions
            .iter()
            .zip(&self.labels)
            .filter(|(_, y)| **y == 1)
            .map(|(p, _)| p.bundle.scores.clone())
            .collect();
        head_overlap_of(&scores).ok()
    }
}

/// Runs the model on precomputed features.
pub fn score_features(p: &ModelParameters, features: &[Tensor], labels: &[u8]) -> Result<Scored> {
    if features.len() != labels.len() {
        return Err(KwsError::Shape(format!("{} feature matrices, {} labels", features.len(), labels.len())));
    }
    let predictions = features.par_iter().map(|f| model::predict(p, f)).collect::<Result<Vec<_>>>()?;
    Ok(Scored {
        predictions,
        labels: labels.to_vec(),
    })
}

/// Featurizes and scores clips. Clips whose features cannot be computed are
/// skipped and counted in the second return value.
pub fn score_dataset(p: &ModelParameters, clips: &[Clip], extractor: &FeatureExtractor) -> Result<(Scored, usize)> {
    let feats: Vec<Option<Tensor>> = clips
        .par_iter()
        .map(|c| match extractor.extract_segment(&c.wave) {
            Ok(f) => Some(f.values().clone()),
            Err(e) => {
                log::warn!("skipping {}: {e}", c.id);
                None
            }
        })
        .collect();
    let failures = feats.iter().filter(|f| f.is_none()).count();
    let (features, labels): (Vec<Tensor>, Vec<u8>) = feats
        .into_iter()
        .zip(clips)
        .filter_map(|(f, c)| f.map(|f| (f, c.label)))
        .unzip();
    Ok((score_features(p, &features, &labels)?, failures))
}

/// Mean over samples of the mean squared pairwise cosine between the
/// per-head score vectors (`H × T'` each).
pub fn head_overlap_of(scores: &[Tensor]) -> Result<f64> {
    if scores.is_empty() {
        return Err(KwsError::InvalidArgument("no samples".into()));
    }
    let mut sum = 0.0;
    for s in scores {
        let cols = Tensor::new(&[s.cols(), s.rows()], crate::tensor::transpose(s.data(), s.rows(), s.cols()))?;
        let cols = regularization::normalize_columns(&cols, regularization::DEFAULT_NORM_FLOOR);
        sum += regularization::gram_offdiag_loss(&cols)?;
    }
    Ok(sum / scores.len() as f64)
}

/// Head overlap of a model over positive feature matrices.
pub fn head_overlap(p: &ModelParameters, positives: &[Tensor]) -> Result<f64> {
    if p.arch().heads < 2 {
        return Err(KwsError::InvalidArgument("head overlap needs at least two heads".into()));
    }
    let scored = score_features(p, positives, &vec![1; positives.len()])?;
    let scores: Vec<Tensor> = scored.predictions.into_iter().map(|p| p.bundle.scores).collect();
    head_overlap_of(&scores)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub roc: Vec<RocPoint>,
    pub operating_points: Vec<OperatingPoint>,
    pub reg_losses: LossBreakdown,
    pub head_overlap: Option<f64>,
    pub auc: f64,
    pub n_positive: usize,
    pub n_negative: usize,
    pub negative_hours: f64,
    pub skipped: usize,
}

impl EvalReport {
    pub fn from_scored(scored: &Scored, cfg: &RegularizationConfig, skipped: usize) -> Result<Self> {
        let samples = scored.samples();
        let roc = roc_curve(&samples)?;
        Ok(EvalReport {
            operating_points: OPERATING_POINTS.iter().map(|k| roc.operating_point(*k)).collect(),
            reg_losses: scored.losses(cfg)?,
            head_overlap: scored.head_overlap(),
            auc: auc(&samples),
            n_positive: roc.n_positive,
            n_negative: roc.n_negative,
            negative_hours: roc.negative_hours,
            skipped,
            roc: roc.points,
        })
    }

    pub fn frr_at(&self, target: f64) -> Option<f64> {
        self.operating_points
            .iter()
            .find(|o| o.target_fa_per_hour == target)
            .map(|o| o.frr)
    }

    pub fn write_roc_csv(&self, w: impl Write) -> std::io::Result<()> {
        Roc {
            points: self.roc.clone(),
            n_positive: self.n_positive,
            n_negative: self.n_negative,
            negative_hours: self.negative_hours,
        }
        .write_csv(w)
    }

    /// Everything except the ROC points, which go to the CSV.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "operating_points": self.operating_points,
            "reg_losses": self.reg_losses,
            "head_overlap": self.head_overlap,
            "auc": self.auc,
            "n_positive": self.n_positive,
            "n_negative": self.n_negative,
            "negative_hours": self.negative_hours,
            "skipped": self.skipped,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub hop_s: f64,
    pub threshold: f64,
    pub refractory_s: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            hop_s: 0.1,
            threshold: 0.5,
            refractory_s: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// End of the firing window, in seconds from the stream start.
    pub time_s: f64,
    pub confidence: f64,
}

/// Window confidences of a sliding 1.8 s window: `(end time, confidence)`.
pub fn stream_confidences(p: &ModelParameters, extractor: &FeatureExtractor, w: &Waveform, hop_s: f64) -> Result<Vec<(f64, f64)>> {
    if !(hop_s > 0.0) {
        return Err(KwsError::InvalidArgument(format!("hop_s must be positive, got {hop_s}")));
    }
    let sr = SAMPLE_RATE as f64;
    let win = (SEGMENT_SECONDS * sr).round() as usize;
    let hop = ((hop_s * sr).round() as usize).max(1);
    if w.len() < win {
        return Ok(Vec::new());
    }
    let starts: Vec<usize> = (0..=(w.len() - win) / hop).map(|k| k * hop).collect();
    starts
        .par_iter()
        .map(|&s| {
            let seg = Waveform::new(w.samples()[s..s + win].to_vec())?;
            let f = extractor.extract(&seg)?;
            let conf = model::predict(p, f.values())?.confidence();
            Ok(((s + win) as f64 / sr, conf))
        })
        .collect()
}

/// Fires when a window's confidence exceeds the threshold, then ignores
/// windows ending within `refractory_s` of the firing.
pub fn detections_from_confidences(conf: &[(f64, f64)], threshold: f64, refractory_s: f64) -> Vec<Detection> {
    let mut out: Vec<Detection> = Vec::new();
    for &(time_s, confidence) in conf {
        if confidence <= threshold {
            continue;
        }
        if let Some(last) = out.last() {
            if time_s < last.time_s + refractory_s {
                continue;
            }
        }
        out.push(Detection { time_s, confidence });
    }
    out
}

pub fn stream_detect(p: &ModelParameters, extractor: &FeatureExtractor, w: &Waveform, cfg: &StreamConfig) -> Result<Vec<Detection>> {
    let conf = stream_confidences(p, extractor, w, cfg.hop_s)?;
    Ok(detections_from_confidences(&conf, cfg.threshold, cfg.refractory_s))
}
