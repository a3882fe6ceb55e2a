//! Noise-prediction network.
//!
//! Dataflow for one sample, all row vectors:
//!
//! ```text
//! e    = tanh(([y_t, y_prior] W_f + b_f) W_e + b_e)        label embedding
//! tp   = time_embed(t) W_t + b_t                           time projection
//! kv   = e + tp
//! att  = softmax((cond W_Q)(kv W_K)^T / sqrt(d_att)) (kv W_V) W_O
//! out  = tanh((cond + att + tp) W_d1 + b_d1) W_d2 + b_d2
//! ```
//!
//! The query comes from the conditioning features, the single key/value
//! token from the label embedding. The conditioning stream is carried past
//! the attention block as a residual.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, xavier, Parameters};
use crate::numkernel::{NodeId, Tape, Tensor2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub hidden: usize,
    pub att_dim: usize,
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            att_dim: 32,
            time_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    pub w_f: Tensor2,
    pub b_f: Tensor2,
    pub w_e: Tensor2,
    pub b_e: Tensor2,
    pub w_q: Tensor2,
    pub w_k: Tensor2,
    pub w_v: Tensor2,
    pub w_o: Tensor2,
    pub w_t: Tensor2,
    pub b_t: Tensor2,
    pub w_d1: Tensor2,
    pub b_d1: Tensor2,
    pub w_d2: Tensor2,
    pub b_d2: Tensor2,
}

impl Parameters for DenoiserParams {
    fn blocks(&self) -> Vec<(&'static str, &Tensor2)> {
        vec![
            ("w_f", &self.w_f),
            ("b_f", &self.b_f),
            ("w_e", &self.w_e),
            ("b_e", &self.b_e),
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("w_t", &self.w_t),
            ("b_t", &self.b_t),
            ("w_d1", &self.w_d1),
            ("b_d1", &self.b_d1),
            ("w_d2", &self.w_d2),
            ("b_d2", &self.b_d2),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<&mut Tensor2> {
        vec![
            &mut self.w_f,
            &mut self.b_f,
            &mut self.w_e,
            &mut self.b_e,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.w_t,
            &mut self.b_t,
            &mut self.w_d1,
            &mut self.b_d1,
            &mut self.w_d2,
            &mut self.b_d2,
        ]
    }
}

// Positions of the blocks in `bind` order.
const W_F: usize = 0;
const B_F: usize = 1;
const W_E: usize = 2;
const B_E: usize = 3;
const W_Q: usize = 4;
const W_K: usize = 5;
const W_V: usize = 6;
const W_O: usize = 7;
const W_T: usize = 8;
const B_T: usize = 9;
const W_D1: usize = 10;
const B_D1: usize = 11;
const W_D2: usize = 12;
const B_D2: usize = 13;

impl DenoiserParams {
    /// `k` classes, conditioning features of width `cfg.hidden`.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, k: usize, cfg: &DenoiserConfig) -> Result<Self> {
        if !cfg.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("time embedding dim must be even, got {}", cfg.time_dim)));
        }
        let (h, a, td) = (cfg.hidden, cfg.att_dim, cfg.time_dim);
        Ok(Self {
            w_f: xavier(rng, 2 * k, h),
            b_f: Tensor2::zeros(1, h),
            w_e: xavier(rng, h, h),
            b_e: Tensor2::zeros(1, h),
            w_q: xavier(rng, h, a),
            w_k: xavier(rng, h, a),
            w_v: xavier(rng, h, a),
            w_o: xavier(rng, a, h),
            w_t: xavier(rng, td, h),
            b_t: Tensor2::zeros(1, h),
            w_d1: xavier(rng, h, h),
            b_d1: Tensor2::zeros(1, h),
            w_d2: xavier(rng, h, k),
            b_d2: Tensor2::zeros(1, k),
        })
    }

    pub fn zeros(k: usize, cfg: &DenoiserConfig) -> Self {
        let (h, a, td) = (cfg.hidden, cfg.att_dim, cfg.time_dim);
        Self {
            w_f: Tensor2::zeros(2 * k, h),
            b_f: Tensor2::zeros(1, h),
            w_e: Tensor2::zeros(h, h),
            b_e: Tensor2::zeros(1, h),
            w_q: Tensor2::zeros(h, a),
            w_k: Tensor2::zeros(h, a),
            w_v: Tensor2::zeros(h, a),
            w_o: Tensor2::zeros(a, h),
            w_t: Tensor2::zeros(td, h),
            b_t: Tensor2::zeros(1, h),
            w_d1: Tensor2::zeros(h, h),
            b_d1: Tensor2::zeros(1, h),
            w_d2: Tensor2::zeros(h, k),
            b_d2: Tensor2::zeros(1, k),
        }
    }

    pub fn classes(&self) -> usize {
        self.w_d2.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w_e.rows()
    }

    pub fn att_dim(&self) -> usize {
        self.w_q.cols()
    }

    pub fn time_dim(&self) -> usize {
        self.w_t.rows()
    }
}

/// Sinusoidal embedding: `[sin(t w_0), cos(t w_0), sin(t w_1), ...]` with
/// `w_i = 10000^(-2i / dim)`.
pub fn time_embed(t: usize, horizon: usize, dim: usize) -> Result<Vec<f64>> {
    if !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("time embedding dim must be even, got {dim}")));
    }
    if t > horizon {
        return Err(Error::Usage(format!("step {t} outside 0..={horizon}")));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-((2 * i) as f64) / dim as f64);
        let angle = t as f64 * freq;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    Ok(out)
}

/// `softmax(q k^T / sqrt(d)) v` for a single query row.
pub fn attend_on(tape: &mut Tape, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
    let d = tape.value(q).cols();
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let weights = tape.softmax_rows(scaled)?;
    tape.matmul(weights, v)
}

fn cross_attention_on(
    tape: &mut Tape,
    ids: &[NodeId],
    q_src: NodeId,
    kv_src: NodeId,
) -> Result<NodeId> {
    let q = tape.matmul(q_src, ids[W_Q])?;
    let k = tape.matmul(kv_src, ids[W_K])?;
    let v = tape.matmul(kv_src, ids[W_V])?;
    let att = attend_on(tape, q, k, v)?;
    tape.matmul(att, ids[W_O])
}

/// Attention of one query row against the rows of `kv_src`, projected back
/// to the hidden width.
pub fn cross_attention(params: &DenoiserParams, q_src: &[f64], kv_src: &Tensor2) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let ids = params.bind(&mut tape);
    let q = tape.leaf(Tensor2::row_vector(q_src));
    let kv = tape.leaf(kv_src.clone());
    let out = cross_attention_on(&mut tape, &ids, q, kv)?;
    Ok(tape.value(out).as_slice().to_vec())
}

/// Records the noise prediction on `tape` and returns the 1×k output node.
pub fn predict_noise_on(
    tape: &mut Tape,
    ids: &[NodeId],
    cond: NodeId,
    y_noisy: NodeId,
    y_prior: NodeId,
    t: usize,
    horizon: usize,
) -> Result<NodeId> {
    let time_dim = tape.value(ids[W_T]).rows();
    let input = tape.concat_cols(y_noisy, y_prior)?;
    let fused = nn::linear(tape, input, ids[W_F], ids[B_F])?;
    let pre = nn::linear(tape, fused, ids[W_E], ids[B_E])?;
    let embed = tape.tanh(pre)?;

    let temb = tape.leaf(Tensor2::row_vector(&time_embed(t, horizon, time_dim)?));
    let tp = nn::linear(tape, temb, ids[W_T], ids[B_T])?;

    let kv = tape.add(embed, tp)?;
    let att = cross_attention_on(tape, ids, cond, kv)?;

    let resid = tape.add(cond, att)?;
    let dec_in = tape.add(resid, tp)?;
    let hid = nn::linear(tape, dec_in, ids[W_D1], ids[B_D1])?;
    let hid = tape.tanh(hid)?;
    nn::linear(tape, hid, ids[W_D2], ids[B_D2])
}

pub fn predict_noise(
    params: &DenoiserParams,
    cond: &[f64],
    y_noisy: &[f64],
    y_prior: &[f64],
    t: usize,
    horizon: usize,
) -> Result<Vec<f64>> {
    let k = params.classes();
    if y_noisy.len() != k || y_prior.len() != k {
        return Err(Error::shape("predict_noise", (1, y_noisy.len()), (1, k)));
    }
    if cond.len() != params.hidden() {
        return Err(Error::shape("predict_noise cond", (1, cond.len()), (1, params.hidden())));
    }
    let mut tape = Tape::new();
    let ids = params.bind(&mut tape);
    let c = tape.leaf(Tensor2::row_vector(cond));
    let y = tape.leaf(Tensor2::row_vector(y_noisy));
    let p = tape.leaf(Tensor2::row_vector(y_prior));
    let out = predict_noise_on(&mut tape, &ids, c, y, p, t, horizon)?;
    Ok(tape.value(out).as_slice().to_vec())
}
