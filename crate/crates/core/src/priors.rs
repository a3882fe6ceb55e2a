//! Prior network and conditioning encoder.
//!
//! The prior network is a one-hidden-layer classifier. Its global prior is
//! the softmax over the full feature vector; its local prior is the same
//! classifier applied to the `mask_size` most salient coordinates only,
//! where the salience of coordinate `i` is `sum_h |W1[i, h]| * |x_i|`.
//! The fused prior is the mean of the two.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetTable;
use crate::error::{Error, Result};
use crate::nn::{self, xavier, Parameters};
use crate::numkernel::{softmax_rows, NodeId, Tape, Tensor2};
use crate::optim::OptimizerConfig;
use crate::registry;
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorNetParams {
    pub w1: Tensor2,
    pub b1: Tensor2,
    pub w2: Tensor2,
    pub b2: Tensor2,
    pub mask_size: usize,
}

impl Parameters for PriorNetParams {
    fn blocks(&self) -> Vec<(&'static str, &Tensor2)> {
        vec![("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    fn blocks_mut(&mut self) -> Vec<&mut Tensor2> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

impl PriorNetParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d: usize, hidden: usize, k: usize, mask_size: usize) -> Result<Self> {
        if mask_size == 0 || mask_size > d {
            return Err(Error::Config(format!("mask size must lie in 1..={d}, got {mask_size}")));
        }
        Ok(Self {
            w1: xavier(rng, d, hidden),
            b1: Tensor2::zeros(1, hidden),
            w2: xavier(rng, hidden, k),
            b2: Tensor2::zeros(1, k),
            mask_size,
        })
    }

    pub fn zeros(d: usize, hidden: usize, k: usize, mask_size: usize) -> Self {
        Self {
            w1: Tensor2::zeros(d, hidden),
            b1: Tensor2::zeros(1, hidden),
            w2: Tensor2::zeros(hidden, k),
            b2: Tensor2::zeros(1, k),
            mask_size,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn classes(&self) -> usize {
        self.w2.cols()
    }

    /// Indices of the retained coordinates, in ascending order.
    pub fn salient_coordinates(&self, x: &[f64]) -> Vec<usize> {
        let mut scored: Vec<(f64, usize)> = (0..x.len())
            .map(|i| {
                let mut weight = 0.0;
                for &w in self.w1.row(i) {
                    weight += w.abs();
                }
                (weight * x[i].abs(), i)
            })
            .collect();
        // descending salience, lower index first on ties
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut keep: Vec<usize> = scored[..self.mask_size].iter().map(|&(_, i)| i).collect();
        keep.sort_unstable();
        keep
    }

    pub fn masked_input(&self, x: &[f64]) -> Vec<f64> {
        if self.mask_size >= x.len() {
            return x.to_vec();
        }
        let mut out = vec![0.0; x.len()];
        for i in self.salient_coordinates(x) {
            out[i] = x[i];
        }
        out
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let ids = self.bind(&mut tape);
        let xn = tape.leaf(Tensor2::row_vector(x));
        let out = logits_on(&mut tape, &ids, xn)?;
        Ok(tape.value(out).as_slice().to_vec())
    }

    pub fn local_logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.logits(&self.masked_input(x))
    }
}

/// Classifier logits on the tape. `ids` come from [`Parameters::bind`].
pub fn logits_on(tape: &mut Tape, ids: &[NodeId], x: NodeId) -> Result<NodeId> {
    let h = nn::linear(tape, x, ids[0], ids[1])?;
    let h = tape.tanh(h)?;
    nn::linear(tape, h, ids[2], ids[3])
}

fn check_dim(params: &PriorNetParams, x: &[f64]) -> Result<()> {
    if x.len() != params.input_dim() {
        return Err(Error::shape("prior input", (1, x.len()), (1, params.input_dim())));
    }
    Ok(())
}

fn probabilities(logits: &[f64]) -> Vec<f64> {
    softmax_rows(&Tensor2::row_vector(logits)).into_vec()
}

pub fn global_prior(params: &PriorNetParams, x: &[f64]) -> Result<Vec<f64>> {
    check_dim(params, x)?;
    Ok(probabilities(&params.logits(x)?))
}

pub fn local_prior(params: &PriorNetParams, x: &[f64]) -> Result<Vec<f64>> {
    check_dim(params, x)?;
    Ok(probabilities(&params.local_logits(x)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorBundle {
    pub global: Vec<f64>,
    pub local: Vec<f64>,
    pub fused: Vec<f64>,
}

impl PriorBundle {
    /// All-zero priors, which turn the prior shift off.
    pub fn zeros(k: usize) -> Self {
        Self {
            global: vec![0.0; k],
            local: vec![0.0; k],
            fused: vec![0.0; k],
        }
    }
}

pub fn fuse(global: Vec<f64>, local: Vec<f64>) -> Result<PriorBundle> {
    if global.len() != local.len() {
        return Err(Error::shape("fuse", (1, global.len()), (1, local.len())));
    }
    let fused = global
        .iter()
        .zip(&local)
        .map(|(g, l)| 0.5 * (g + l))
        .collect();
    Ok(PriorBundle {
        global,
        local,
        fused,
    })
}

pub fn prior_bundle(params: &PriorNetParams, x: &[f64]) -> Result<PriorBundle> {
    fuse(global_prior(params, x)?, local_prior(params, x)?)
}

/// Conditioning encoder: `tanh(x W + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub w: Tensor2,
    pub b: Tensor2,
}

impl Parameters for EncoderParams {
    fn blocks(&self) -> Vec<(&'static str, &Tensor2)> {
        vec![("w", &self.w), ("b", &self.b)]
    }

    fn blocks_mut(&mut self) -> Vec<&mut Tensor2> {
        vec![&mut self.w, &mut self.b]
    }
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d: usize, hidden: usize) -> Self {
        Self {
            w: xavier(rng, d, hidden),
            b: Tensor2::zeros(1, hidden),
        }
    }

    pub fn zeros(d: usize, hidden: usize) -> Self {
        Self {
            w: Tensor2::zeros(d, hidden),
            b: Tensor2::zeros(1, hidden),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.w.cols()
    }
}

pub fn encode_on(tape: &mut Tape, ids: &[NodeId], x: NodeId) -> Result<NodeId> {
    let h = nn::linear(tape, x, ids[0], ids[1])?;
    tape.tanh(h)
}

pub fn encode_features(enc: &EncoderParams, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != enc.w.rows() {
        return Err(Error::shape("encoder input", (1, x.len()), (1, enc.w.rows())));
    }
    let mut tape = Tape::new();
    let ids = enc.bind(&mut tape);
    let xn = tape.leaf(Tensor2::row_vector(x));
    let out = encode_on(&mut tape, &ids, xn)?;
    Ok(tape.value(out).as_slice().to_vec())
}

/// Cross-entropy of the global and local branches for one sample, and its
/// gradient with respect to every block.
pub fn cross_entropy_gradients(
    params: &PriorNetParams,
    x: &[f64],
    label: usize,
) -> Result<(f64, Vec<Tensor2>)> {
    check_dim(params, x)?;
    let k = params.classes();
    let mut target = Tensor2::zeros(1, k);
    target.set(0, label, 1.0);

    let mut tape = Tape::new();
    let ids = params.bind(&mut tape);
    let target = tape.leaf(target);
    let mut terms = Vec::with_capacity(2);
    let inputs = if params.mask_size >= x.len() {
        vec![x.to_vec(), x.to_vec()]
    } else {
        vec![x.to_vec(), params.masked_input(x)]
    };
    for input in inputs {
        let xn = tape.leaf(Tensor2::row_vector(&input));
        let logits = logits_on(&mut tape, &ids, xn)?;
        let logp = tape.log_softmax_rows(logits)?;
        let picked = tape.mul(logp, target)?;
        let s = tape.sum(picked)?;
        terms.push(tape.scale(s, -1.0)?);
    }
    let loss = tape.add(terms[0], terms[1])?;
    let grads = tape.backward(loss)?;
    let blocks = ids
        .iter()
        .zip(params.blocks())
        .map(|(&id, (_, t))| grads.get_or_zeros(id, t.shape()))
        .collect();
    Ok((tape.value(loss).as_slice()[0], blocks))
}

/// Mean cross-entropy over a set of rows plus the mean gradient.
pub fn batch_cross_entropy(
    params: &PriorNetParams,
    table: &DatasetTable,
    rows: &[usize],
) -> Result<(f64, Vec<Tensor2>)> {
    let mut total = 0.0;
    let mut grads = params.zeros_like();
    for &i in rows {
        let (loss, g) = cross_entropy_gradients(params, table.feature_row(i), table.labels()[i])?;
        total += loss;
        nn::accumulate(&mut grads, &g);
    }
    let inv = 1.0 / rows.len().max(1) as f64;
    nn::scale_all(&mut grads, inv);
    Ok((total * inv, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: String,
    pub optimizer_config: OptimizerConfig,
    pub seed: u64,
}

impl Default for WarmupSettings {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: "adam".into(),
            optimizer_config: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

/// Trains the prior network alone. Returns the parameters and the mean
/// training loss measured after every epoch.
pub fn warmup_train_logged(
    params: &PriorNetParams,
    table: &DatasetTable,
    settings: &WarmupSettings,
) -> Result<(PriorNetParams, Vec<f64>)> {
    let mut params = params.clone();
    let mut losses = Vec::with_capacity(settings.epochs);
    if settings.epochs == 0 || table.is_empty() {
        return Ok((params, losses));
    }
    let mut opt = registry::optimizers().create(&settings.optimizer, &settings.optimizer_config)?;
    let all: Vec<usize> = (0..table.len()).collect();
    let batch = settings.batch_size.max(1);
    for epoch in 0..settings.epochs {
        let mut order = all.clone();
        order.shuffle(&mut stream(settings.seed, &[0x3A, epoch as u64]));
        for chunk in order.chunks(batch) {
            let (_, grads) = batch_cross_entropy(&params, table, chunk)?;
            opt.step(&mut params.blocks_mut(), &grads, settings.learning_rate)?;
        }
        losses.push(batch_cross_entropy(&params, table, &all)?.0);
    }
    Ok((params, losses))
}

pub fn warmup_train(
    params: &PriorNetParams,
    table: &DatasetTable,
    settings: &WarmupSettings,
) -> Result<PriorNetParams> {
    Ok(warmup_train_logged(params, table, settings)?.0)
}
