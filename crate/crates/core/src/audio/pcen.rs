use serde::{Deserialize, Serialize};

use super::FeatureMatrix;
use crate::error::{KwsError, Result};
use crate::tensor::Tensor;

/// Per-channel energy normalization constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcenParams {
    /// Smoother coefficient.
    pub s: f64,
    /// Gain exponent.
    pub alpha: f64,
    pub delta: f64,
    /// Root compression.
    pub r: f64,
    pub eps: f64,
}

impl Default for PcenParams {
    fn default() -> Self {
        PcenParams {
            s: 0.025,
            alpha: 0.98,
            delta: 2.0,
            r: 0.5,
            eps: 1e-6,
        }
    }
}

impl PcenParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.s > 0.0
            && self.s < 1.0
            && self.alpha > 0.0
            && self.alpha <= 1.0
            && self.delta > 0.0
            && self.r > 0.0
            && self.r <= 1.0
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(KwsError::InvalidArgument(format!("invalid PCEN parameters {self:?}")))
        }
    }
}

/// Smoother state for one utterance.
#[derive(Debug, Clone)]
pub struct PcenState {
    pub smoother: Vec<f64>,
    pub params: PcenParams,
}

impl PcenState {
    /// Seeds the smoother with the first frame so there is no start-up transient.
    pub fn new(first_frame: &[f64], params: PcenParams) -> Self {
        PcenState {
            smoother: first_frame.to_vec(),
            params,
        }
    }

    pub fn step(&mut self, frame: &[f64], out: &mut [f64]) {
        let PcenParams {
            s,
            alpha,
            delta,
            r,
            eps,
        } = self.params;
        let floor = delta.powf(r);
        for ((m, &e), o) in self.smoother.iter_mut().zip(frame).zip(out.iter_mut()) {
            *m = (1.0 - s) * *m + s * e;
            *o = (e / (eps + *m).powf(alpha) + delta).powf(r) - floor;
        }
    }
}

pub fn pcen(mel: &Tensor, params: PcenParams) -> Result<FeatureMatrix> {
    params.validate()?;
    if mel.data().iter().any(|v| v.is_nan()) {
        return Err(KwsError::NonFinite("mel energies"));
    }
    if mel.data().iter().any(|v| *v < 0.0) {
        return Err(KwsError::InvalidArgument("negative mel energy".into()));
    }
    let (t, bands) = (mel.rows(), mel.cols());
    let mut out = vec![0.0; t * bands];
    if t > 0 {
        let mut state = PcenState::new(mel.row(0), params);
        for (f, chunk) in out.chunks_exact_mut(bands.max(1)).enumerate().take(t) {
            state.step(mel.row(f), chunk);
        }
    }
    FeatureMatrix::new(Tensor::new(&[t, bands], out)?)
}
