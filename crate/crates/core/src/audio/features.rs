use std::io::{Read, Write};

use super::{pcen, segment, MelFilterbank, PcenParams, StftPlan, Waveform, N_MELS, SEGMENT_SECONDS};
use crate::error::{KwsError, Result};
use crate::tensor::Tensor;

const DUMP_MAGIC: &[u8; 4] = b"KWSF";
const DUMP_VERSION: u32 = 1;

/// `T × 40` PCEN-normalized Mel features, 30 ms frames every 10 ms.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Tensor,
}

impl FeatureMatrix {
    pub const FRAME_HOP_S: f64 = 0.010;
    pub const FRAME_LEN_S: f64 = 0.030;

    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(KwsError::Shape(format!("features must be 2-D, got {:?}", values.shape())));
        }
        if !values.is_finite() {
            return Err(KwsError::NonFinite("features"));
        }
        Ok(FeatureMatrix { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn bands(&self) -> usize {
        self.values.cols()
    }

    /// Header (`KWSF`, version, T, bands as little-endian u32) then row-major
    /// little-endian f32 values.
    pub fn write_dump(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&DUMP_VERSION.to_le_bytes())?;
        w.write_all(&(self.frames() as u32).to_le_bytes())?;
        w.write_all(&(self.bands() as u32).to_le_bytes())?;
        for v in self.values.data() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump(mut r: impl Read) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)
            .map_err(|e| KwsError::InvalidArgument(format!("feature dump header: {e}")))?;
        if &header[..4] != DUMP_MAGIC {
            return Err(KwsError::InvalidArgument("bad feature dump magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
        if word(4) != DUMP_VERSION {
            return Err(KwsError::InvalidArgument(format!("feature dump version {}", word(4))));
        }
        let (t, b) = (word(8) as usize, word(12) as usize);
        let mut bytes = vec![0u8; t * b * 4];
        r.read_exact(&mut bytes)
            .map_err(|e| KwsError::InvalidArgument(format!("feature dump payload: {e}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        FeatureMatrix::new(Tensor::new(&[t, b], data)?)
    }
}

/// STFT → Mel → PCEN with plans built once.
#[derive(Clone)]
pub struct FeatureExtractor {
    stft: StftPlan,
    filterbank: MelFilterbank,
    pcen: PcenParams,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new(PcenParams::default())
    }
}

impl FeatureExtractor {
    pub fn new(pcen: PcenParams) -> Self {
        FeatureExtractor {
            stft: StftPlan::new(),
            filterbank: MelFilterbank::default(),
            pcen,
        }
    }

    pub fn pcen_params(&self) -> PcenParams {
        self.pcen
    }

    pub fn extract(&self, w: &Waveform) -> Result<FeatureMatrix> {
        let power = self.stft.power(w)?;
        let mel = self.filterbank.apply(&power)?;
        debug_assert_eq!(mel.cols(), N_MELS);
        pcen(&mel, self.pcen)
    }

    /// Fixes the waveform to the model segment length, then extracts.
    pub fn extract_segment(&self, w: &Waveform) -> Result<FeatureMatrix> {
        self.extract(&segment(w, SEGMENT_SECONDS)?)
    }
}
