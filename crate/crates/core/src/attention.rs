//! Additive soft attention, one scoring network per head, contexts taken
//! directly from the encoder states (no value projection).

use std::io::Write;

use crate::error::{KwsError, Result};
use crate::model::{slot, ModelParameters};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AttentionNodes {
    /// `H × T'`
    pub scores: NodeId,
    /// `H × T'`
    pub weights: NodeId,
    /// `H × hidden`
    pub contexts: NodeId,
    pub concat: NodeId,
}

/// Per-head scores, weights and contexts of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBundle {
    pub scores: Tensor,
    pub weights: Tensor,
    pub contexts: Tensor,
    pub concat: Vec<f64>,
}

impl AttentionBundle {
    pub fn from_tape(tape: &Tape, n: &AttentionNodes) -> Self {
        AttentionBundle {
            scores: tape.value(n.scores).clone(),
            weights: tape.value(n.weights).clone(),
            contexts: tape.value(n.contexts).clone(),
            concat: tape.value(n.concat).data().to_vec(),
        }
    }

    pub fn heads(&self) -> usize {
        self.weights.rows()
    }

    /// Writes `frame_index,head_index,weight` rows; `scale` multiplies the
    /// exported weight only.
    pub fn write_csv(&self, mut w: impl Write, scale: f64) -> std::io::Result<()> {
        writeln!(w, "frame_index,head_index,weight")?;
        for t in 0..self.weights.cols() {
            for h in 0..self.weights.rows() {
                writeln!(w, "{t},{h},{}", self.weights.at2(h, t) * scale)?;
            }
        }
        Ok(())
    }
}

/// Attention for all heads over encoder states `enc` (`T' × hidden`).
pub fn attend_on_tape(tape: &mut Tape, params: &[NodeId], heads: usize, enc: NodeId) -> AttentionNodes {
    let mut scores = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    let mut contexts = Vec::with_capacity(heads);
    for i in 0..heads {
        let e = head_scores_on_tape(tape, params[slot::head(i, 0)], params[slot::head(i, 1)], params[slot::head(i, 2)], enc);
        let a = tape.softmax(e);
        let c = tape.vecmat(a, enc);
        scores.push(e);
        weights.push(a);
        contexts.push(c);
    }
    AttentionNodes {
        scores: tape.stack_rows(&scores),
        weights: tape.stack_rows(&weights),
        concat: tape.concat(&contexts),
        contexts: tape.stack_rows(&contexts),
    }
}

/// `e[t] = vᵀ tanh(W h[t] + b)` for every row `h[t]` of `enc`.
pub fn head_scores_on_tape(tape: &mut Tape, w: NodeId, b: NodeId, v: NodeId, enc: NodeId) -> NodeId {
    let proj = tape.matmul_nt(enc, w);
    let proj = tape.add_bias(proj, b);
    let act = tape.tanh(proj);
    tape.matvec(act, v)
}

fn check_encoder(h: &Tensor, p: &ModelParameters) -> Result<()> {
    if h.shape().len() != 2 || h.cols() != p.arch().hidden || h.rows() == 0 {
        return Err(KwsError::Shape(format!(
            "encoder output {:?}, expected [T' > 0, {}]",
            h.shape(),
            p.arch().hidden
        )));
    }
    Ok(())
}

pub fn head_scores(h: &Tensor, p: &ModelParameters, head: usize) -> Result<Vec<f64>> {
    check_encoder(h, p)?;
    if head >= p.arch().heads {
        return Err(KwsError::InvalidArgument(format!("head {head} of {}", p.arch().heads)));
    }
    let mut tape = Tape::new();
    let t = p.tensors();
    let w = tape.constant(t[slot::head(head, 0)].clone());
    let b = tape.constant(t[slot::head(head, 1)].clone());
    let v = tape.constant(t[slot::head(head, 2)].clone());
    let enc = tape.constant(h.clone());
    let e = head_scores_on_tape(&mut tape, w, b, v, enc);
    Ok(tape.value(e).data().to_vec())
}

/// Softmax over time.
pub fn head_weights(scores: &[f64]) -> Vec<f64> {
    let mut out = scores.to_vec();
    crate::tape::softmax_in_place(&mut out);
    out
}

/// `Σ_t α[t]·h[t]`.
pub fn head_context(weights: &[f64], h: &Tensor) -> Result<Vec<f64>> {
    if weights.len() != h.rows() {
        return Err(KwsError::Shape(format!("{} weights for {} frames", weights.len(), h.rows())));
    }
    let mut c = vec![0.0; h.cols()];
    for (t, a) in weights.iter().enumerate() {
        crate::tensor::axpy(*a, h.row(t), &mut c);
    }
    Ok(c)
}

pub fn run_attention(h: &Tensor, p: &ModelParameters) -> Result<AttentionBundle> {
    check_encoder(h, p)?;
    let mut tape = Tape::new();
    let params: Vec<NodeId> = p.tensors().iter().map(|t| tape.constant(t.clone())).collect();
    let enc = tape.constant(h.clone());
    let nodes = attend_on_tape(&mut tape, &params, p.arch().heads, enc);
    Ok(AttentionBundle::from_tape(&tape, &nodes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn arch(heads: usize) -> Architecture {
        Architecture {
            heads,
            channels: 2,
            ..Architecture::default()
        }
    }

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_model(heads: usize, seed: u64) -> ModelParameters {
        let mut p = ModelParameters::init(arch(heads), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        p
    }

    fn score_oracle(h: &Tensor, p: &ModelParameters, head: usize) -> Vec<f64> {
        let w = &p.tensors()[slot::head(head, 0)];
        let b = &p.tensors()[slot::head(head, 1)];
        let v = &p.tensors()[slot::head(head, 2)];
        (0..h.rows())
            .map(|t| {
                (0..64)
                    .map(|j| {
                        let mut s = b.data()[j];
                        for k in 0..64 {
                            s += w.at2(j, k) * h.at2(t, k);
                        }
                        v.data()[j] * s.tanh()
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn zero_v_gives_zero_scores() {
        let mut p = random_model(2, 1);
        p.get_mut("attn.0.v").unwrap().data_mut().fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = rand_tensor(&[7, 64], &mut rng);
        assert!(head_scores(&h, &p, 0).unwrap().iter().all(|s| *s == 0.0));
    }

    #[test]
    fn zero_w_gives_constant_scores() {
        let mut p = random_model(1, 3);
        p.get_mut("attn.0.w").unwrap().data_mut().fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = rand_tensor(&[7, 64], &mut rng);
        let b = p.get("attn.0.b").unwrap().data().to_vec();
        let v = p.get("attn.0.v").unwrap().data().to_vec();
        let want: f64 = b.iter().zip(&v).map(|(b, v)| v * b.tanh()).sum();
        for s in head_scores(&h, &p, 0).unwrap() {
            assert!((s - want).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_match_loop_oracle() {
        let p = random_model(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = rand_tensor(&[9, 64], &mut rng);
        for head in 0..3 {
            let got = head_scores(&h, &p, head).unwrap();
            for (a, b) in got.iter().zip(score_oracle(&h, &p, head)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        assert!(head_scores(&h, &p, 3).is_err());
    }

    #[test]
    fn weights_cases() {
        let w = head_weights(&[2.0; 5]);
        assert!(w.iter().all(|v| (v - 0.2).abs() < 1e-15));
        let w = head_weights(&[0.0, 1e4, 0.0]);
        assert!((w[1] - 1.0).abs() < 1e-12);
        let s = [0.3, -1.2, 2.5, 0.0];
        let z: f64 = s.iter().map(|v: &f64| v.exp()).sum();
        for (a, v) in head_weights(&s).iter().zip(s) {
            assert!((a - v.exp() / z).abs() < 1e-9);
        }
    }

    #[test]
    fn context_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = rand_tensor(&[1, 64], &mut rng);
        assert_eq!(head_context(&[1.0], &h).unwrap(), h.row(0).to_vec());
        let h = rand_tensor(&[4, 64], &mut rng);
        let c = head_context(&[0.25; 4], &h).unwrap();
        for k in 0..64 {
            let mean = (0..4).map(|t| h.at2(t, k)).sum::<f64>() / 4.0;
            assert!((c[k] - mean).abs() < 1e-12);
        }
        let a = head_weights(&[0.1, 0.7, -0.4, 1.1]);
        let c = head_context(&a, &h).unwrap();
        for k in 0..64 {
            let want: f64 = (0..4).map(|t| a[t] * h.at2(t, k)).sum();
            assert!((c[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn bundle_matches_per_head_oracles() {
        let p = random_model(3, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = rand_tensor(&[6, 64], &mut rng);
        let bundle = run_attention(&h, &p).unwrap();
        for head in 0..3 {
            let e = score_oracle(&h, &p, head);
            let a = head_weights(&e);
            let c = head_context(&a, &h).unwrap();
            for t in 0..6 {
                assert!((bundle.scores.at2(head, t) - e[t]).abs() < 1e-9);
                assert!((bundle.weights.at2(head, t) - a[t]).abs() < 1e-9);
            }
            for k in 0..64 {
                assert!((bundle.contexts.at2(head, k) - c[k]).abs() < 1e-9);
                assert_eq!(bundle.concat[head * 64 + k], bundle.contexts.at2(head, k));
            }
            let sum: f64 = bundle.weights.row(head).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_heads_identical_rows() {
        let mut p = random_model(2, 9);
        for k in 0..3 {
            let t = p.tensors()[slot::head(0, k)].clone();
            p.tensors_mut()[slot::head(1, k)] = t;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = rand_tensor(&[5, 64], &mut rng);
        let b = run_attention(&h, &p).unwrap();
        assert_eq!(b.scores.row(0), b.scores.row(1));
        assert_eq!(b.contexts.row(0), b.contexts.row(1));
    }

    #[test]
    fn single_head_is_base_attention() {
        let p = random_model(1, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = rand_tensor(&[5, 64], &mut rng);
        let b = run_attention(&h, &p).unwrap();
        let e = head_scores(&h, &p, 0).unwrap();
        let c = head_context(&head_weights(&e), &h).unwrap();
        assert_eq!(b.concat, c);
    }

    #[test]
    fn csv_export_scales_only_output() {
        let p = random_model(2, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = rand_tensor(&[3, 64], &mut rng);
        let b = run_attention(&h, &p).unwrap();
        let mut out = Vec::new();
        b.write_csv(&mut out, 320.0).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "frame_index,head_index,weight");
        assert_eq!(lines.len(), 1 + 6);
        let w: f64 = lines[1].split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(w, b.weights.at2(0, 0) * 320.0);
    }
}
