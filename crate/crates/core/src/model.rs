//! Encoder (conv + GRU), attention heads and classifier parameters, the
//! forward graph, and the binary checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionNodes};
use crate::error::{io_err, KwsError, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const CE_FLOOR: f64 = 1e-12;
const CHECKPOINT_MAGIC: &[u8; 4] = b"KWSM";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub heads: usize,
    /// Conv output channels.
    pub channels: usize,
    pub hidden: usize,
    pub n_mels: usize,
    pub kernel_time: usize,
    pub kernel_freq: usize,
    pub stride_time: usize,
    pub conv_relu: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            heads: 4,
            channels: 15,
            hidden: 64,
            n_mels: 40,
            kernel_time: 5,
            kernel_freq: 20,
            stride_time: 2,
            conv_relu: true,
        }
    }
}

impl Architecture {
    pub fn with_heads(self, heads: usize) -> Self {
        Architecture { heads, ..self }
    }

    pub fn freq_positions(&self) -> usize {
        (self.n_mels + 1).saturating_sub(self.kernel_freq)
    }

    /// GRU input width.
    pub fn gru_input(&self) -> usize {
        self.channels * self.freq_positions()
    }

    pub fn encoder_frames(&self, frames: usize) -> usize {
        if frames < self.kernel_time {
            0
        } else {
            (frames - self.kernel_time) / self.stride_time + 1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0
            || self.channels == 0
            || self.hidden == 0
            || self.kernel_time == 0
            || self.stride_time == 0
            || self.kernel_freq == 0
            || self.kernel_freq > self.n_mels
        {
            return Err(KwsError::InvalidArgument(format!("invalid architecture {self:?}")));
        }
        Ok(())
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (c, hid, din) = (self.channels, self.hidden, self.gru_input());
        let mut v = vec![
            ("conv.kernel".to_string(), vec![c, 1, self.kernel_time, self.kernel_freq]),
            ("conv.bias".to_string(), vec![c]),
        ];
        for gate in ["z", "r", "h"] {
            v.push((format!("gru.w_{gate}"), vec![din, hid]));
            v.push((format!("gru.u_{gate}"), vec![hid, hid]));
            v.push((format!("gru.b_{gate}"), vec![hid]));
        }
        for i in 0..self.heads {
            v.push((format!("attn.{i}.w"), vec![hid, hid]));
            v.push((format!("attn.{i}.b"), vec![hid]));
            v.push((format!("attn.{i}.v"), vec![hid]));
        }
        v.push(("cls.w".to_string(), vec![hid * self.heads, 2]));
        v.push(("cls.b".to_string(), vec![2]));
        v
    }

    /// Exact number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Indices into the parameter list.
pub(crate) mod slot {
    pub const CONV_K: usize = 0;
    pub const CONV_B: usize = 1;
    pub const GRU: usize = 2;
    pub const ATTN: usize = 11;

    pub fn gru(gate: usize, which: usize) -> usize {
        GRU + gate * 3 + which
    }

    pub fn head(i: usize, which: usize) -> usize {
        ATTN + i * 3 + which
    }

    pub fn cls_w(heads: usize) -> usize {
        ATTN + 3 * heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    arch: Architecture,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParameters {
    pub fn zeros(arch: Architecture) -> Self {
        let (names, tensors) = arch
            .layout()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(&s)))
            .unzip();
        ModelParameters {
            arch,
            names,
            tensors,
        }
    }

    /// Matrices (and score vectors) uniform in ±√(1/fan_in); biases zero.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut p = Self::zeros(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in p.names.iter().zip(p.tensors.iter_mut()) {
            let fan_in = match name.as_str() {
                "conv.kernel" => arch.kernel_time * arch.kernel_freq,
                n if n.ends_with(".b") || n.starts_with("gru.b") || n == "conv.bias" => 0,
                n if n.ends_with(".v") => arch.hidden,
                _ => t.shape()[0],
            };
            if fan_in == 0 {
                continue;
            }
            let bound = (1.0 / fan_in as f64).sqrt();
            for v in t.data_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
        p.round_to_f32();
        p
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Keeps every value exactly representable as f32 so checkpoints are lossless.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Registers every parameter on the tape.
    pub fn bind(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(i, t.clone()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(io_err(format!("creating {}", path.display())))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(io_err(format!("writing {}", path.display())))
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for d in t.shape() {
                w.write_all(&(*d as u32).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path, arch: Architecture) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(io_err(format!("opening {}", path.display())))?;
        Self::read_from(std::io::BufReader::new(file), arch)
    }

    /// Reads a checkpoint and checks every tensor against `arch`.
    pub fn read_from(mut r: impl Read, arch: Architecture) -> Result<Self> {
        let bad = |m: String| KwsError::Checkpoint(m);
        let u32_at = |r: &mut dyn Read| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|e| bad(format!("truncated: {e}")))?;
            Ok(u32::from_le_bytes(b))
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| bad(format!("truncated: {e}")))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = u32_at(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let layout = arch.layout();
        let count = u32_at(&mut r)? as usize;
        if count != layout.len() {
            return Err(bad(format!(
                "{count} tensors, architecture expects {}",
                layout.len()
            )));
        }
        let mut p = Self::zeros(arch);
        for (i, (want_name, want_shape)) in layout.iter().enumerate() {
            let name_len = u32_at(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|e| bad(format!("truncated: {e}")))?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8".into()))?;
            let rank = u32_at(&mut r)? as usize;
            let dims = (0..rank)
                .map(|_| u32_at(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if &name != want_name || &dims != want_shape {
                return Err(bad(format!(
                    "tensor {i} is {name} {dims:?}, expected {want_name} {want_shape:?}"
                )));
            }
            let n: usize = dims.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes).map_err(|e| bad(format!("truncated: {e}")))?;
            let data = p.tensors[i].data_mut();
            for (v, c) in data.iter_mut().zip(bytes.chunks_exact(4)) {
                *v = f32::from_le_bytes(c.try_into().unwrap()) as f64;
            }
        }
        Ok(p)
    }
}

/// Per-parameter gradients aligned with [`ModelParameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(p: &ModelParameters) -> Self {
        Gradients {
            names: p.names.clone(),
            tensors: p.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn from_tensors(p: &ModelParameters, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != p.len() || tensors.iter().zip(&p.tensors).any(|(a, b)| a.shape() != b.shape()) {
            return Err(KwsError::Shape("gradients do not match parameters".into()));
        }
        Ok(Gradients {
            names: p.names.clone(),
            tensors,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Adds the parameter gradients held by a swept tape.
    pub fn accumulate(&mut self, tape: &Tape) {
        for (i, g) in tape.param_grads() {
            crate::tensor::add_into(self.tensors[i].data_mut(), g);
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::sum_squares).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.tensors.iter_mut().for_each(|t| t.scale_in_place(factor));
    }
}

/// Node handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    pub params: Vec<NodeId>,
    /// `T' × hidden` encoder output.
    pub encoder: NodeId,
    pub attention: AttentionNodes,
    /// Concatenated contexts, length `hidden · H`.
    pub concat: NodeId,
    pub posterior: NodeId,
}

pub fn check_features(arch: &Architecture, features: &Tensor) -> Result<()> {
    if features.shape().len() != 2 || features.cols() != arch.n_mels {
        return Err(KwsError::Shape(format!(
            "features {:?}, expected [T, {}]",
            features.shape(),
            arch.n_mels
        )));
    }
    if features.rows() < arch.kernel_time {
        return Err(KwsError::TooShort {
            len: features.rows(),
            needed: arch.kernel_time,
        });
    }
    Ok(())
}

/// Conv → (ReLU) → GRU on the tape; returns the `T' × hidden` states.
pub fn encoder_on_tape(tape: &mut Tape, p: &ModelParameters, params: &[NodeId], x: NodeId) -> NodeId {
    let arch = p.arch;
    let mut y = tape.conv2d(x, params[slot::CONV_K], params[slot::CONV_B], arch.stride_time);
    if arch.conv_relu {
        y = tape.relu(y);
    }
    let seq = tape.channels_to_features(y);
    gru_on_tape(tape, arch.hidden, params, seq)
}

pub(crate) fn gru_on_tape(tape: &mut Tape, hidden: usize, params: &[NodeId], seq: NodeId) -> NodeId {
    let steps = tape.value(seq).rows();
    let proj = |tape: &mut Tape, gate: usize| {
        let m = tape.matmul(seq, params[slot::gru(gate, 0)]);
        tape.add_bias(m, params[slot::gru(gate, 2)])
    };
    let (xz, xr, xh) = (proj(tape, 0), proj(tape, 1), proj(tape, 2));
    let (uz, ur, uh) = (
        params[slot::gru(0, 1)],
        params[slot::gru(1, 1)],
        params[slot::gru(2, 1)],
    );
    let mut h = tape.constant(Tensor::zeros(&[hidden]));
    let mut outs = Vec::with_capacity(steps);
    for t in 0..steps {
        let (rz, rr, rh_in) = (tape.row(xz, t), tape.row(xr, t), tape.row(xh, t));
        let hz = tape.vecmat(h, uz);
        let z = tape.add(rz, hz);
        let z = tape.sigmoid(z);
        let hr = tape.vecmat(h, ur);
        let r = tape.add(rr, hr);
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h);
        let hh = tape.vecmat(rh, uh);
        let cand = tape.add(rh_in, hh);
        let cand = tape.tanh(cand);
        h = tape.gru_blend(z, h, cand);
        outs.push(h);
    }
    tape.stack_rows(&outs)
}

/// Full forward pass: features `[T, n_mels]` → posterior `[2]`.
pub fn forward_on_tape(tape: &mut Tape, p: &ModelParameters, features: &Tensor) -> Result<ForwardNodes> {
    check_features(&p.arch, features)?;
    let params = p.bind(tape);
    let x = tape.constant(features.clone());
    let encoder = encoder_on_tape(tape, p, &params, x);
    let att = attention::attend_on_tape(tape, &params, p.arch.heads, encoder);
    let logits = tape.vecmat(att.concat, params[slot::cls_w(p.arch.heads)]);
    let logits = tape.add_bias(logits, params[slot::cls_w(p.arch.heads) + 1]);
    let posterior = tape.softmax(logits);
    Ok(ForwardNodes {
        params,
        encoder,
        concat: att.concat,
        attention: att,
        posterior,
    })
}

/// Inference results for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub posterior: [f64; 2],
    pub bundle: attention::AttentionBundle,
}

impl Prediction {
    /// `p(keyword | x)`.
    pub fn confidence(&self) -> f64 {
        self.posterior[1]
    }
}

/// Runs the model on one feature matrix without keeping the tape.
pub fn predict(p: &ModelParameters, features: &Tensor) -> Result<Prediction> {
    let mut tape = Tape::new();
    let nodes = forward_on_tape(&mut tape, p, features)?;
    let post = tape.value(nodes.posterior).data();
    Ok(Prediction {
        posterior: [post[0], post[1]],
        bundle: attention::AttentionBundle::from_tape(&tape, &nodes.attention),
    })
}

/// Valid conv with time stride, followed by the configured nonlinearity.
/// Input `[T, n_mels]`, output `[C, T', n_mels − KF + 1]`.
pub fn conv2d_valid(x: &Tensor, p: &ModelParameters) -> Result<Tensor> {
    check_features(&p.arch, x)?;
    let mut tape = Tape::new();
    let x = tape.constant(x.clone());
    let k = tape.constant(p.tensors[slot::CONV_K].clone());
    let b = tape.constant(p.tensors[slot::CONV_B].clone());
    let mut y = tape.conv2d(x, k, b, p.arch.stride_time);
    if p.arch.conv_relu {
        y = tape.relu(y);
    }
    Ok(tape.value(y).clone())
}

/// GRU over a `T' × D_in` sequence, `h₀ = 0`.
pub fn gru_forward(seq: &Tensor, p: &ModelParameters) -> Result<Tensor> {
    if seq.shape().len() != 2 || seq.cols() != p.arch.gru_input() {
        return Err(KwsError::Shape(format!(
            "GRU input {:?}, expected [T', {}]",
            seq.shape(),
            p.arch.gru_input()
        )));
    }
    let mut tape = Tape::new();
    let params: Vec<NodeId> = p.tensors.iter().map(|t| tape.constant(t.clone())).collect();
    let s = tape.constant(seq.clone());
    let h = gru_on_tape(&mut tape, p.arch.hidden, &params, s);
    Ok(tape.value(h).clone())
}

/// `softmax(c·W + b)`.
pub fn classify(c: &[f64], p: &ModelParameters) -> Result<[f64; 2]> {
    let w = &p.tensors[slot::cls_w(p.arch.heads)];
    if c.len() != w.rows() {
        return Err(KwsError::Shape(format!("context length {}, expected {}", c.len(), w.rows())));
    }
    let mut tape = Tape::new();
    let cn = tape.constant(Tensor::vector(c.to_vec()));
    let wn = tape.constant(w.clone());
    let bn = tape.constant(p.tensors[slot::cls_w(p.arch.heads) + 1].clone());
    let l = tape.vecmat(cn, wn);
    let l = tape.add_bias(l, bn);
    let post = tape.softmax(l);
    let v = tape.value(post).data();
    Ok([v[0], v[1]])
}

/// `−ln max(posterior[label], 1e-12)`.
pub fn cross_entropy(posterior: &[f64; 2], label: u8) -> f64 {
    -posterior[label as usize].max(CE_FLOOR).ln()
}
