//! Shared building blocks for the small networks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{NodeId, Tape, Tensor2};

/// Glorot-uniform initialisation.
pub fn xavier<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor2 {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor2::new(fan_in, fan_out, data).expect("consistent shape")
}

/// `x W + b` for a single row `x`.
pub fn linear(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

/// Named parameter blocks in a fixed order.
pub trait Parameters {
    fn blocks(&self) -> Vec<(&'static str, &Tensor2)>;

    fn blocks_mut(&mut self) -> Vec<&mut Tensor2>;

    fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|(_, t)| t.len()).sum()
    }

    fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, t)| t.is_finite())
    }

    /// Pushes every block onto the tape as a leaf, in block order.
    fn bind(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.blocks()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect()
    }

    fn zeros_like(&self) -> Vec<Tensor2> {
        self.blocks()
            .iter()
            .map(|(_, t)| Tensor2::zeros(t.rows(), t.cols()))
            .collect()
    }
}

/// Serialized block: shape plus row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockData {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl From<&Tensor2> for BlockData {
    fn from(t: &Tensor2) -> Self {
        Self {
            shape: [t.rows(), t.cols()],
            data: t.as_slice().to_vec(),
        }
    }
}

impl BlockData {
    pub fn to_tensor(&self) -> Result<Tensor2> {
        Tensor2::new(self.shape[0], self.shape[1], self.data.clone())
    }
}

/// Copies serialized blocks into `params`, checking names and shapes.
pub fn load_blocks<P: Parameters>(
    params: &mut P,
    prefix: &str,
    blocks: &std::collections::BTreeMap<String, BlockData>,
) -> Result<()> {
    let names: Vec<&'static str> = params.blocks().iter().map(|(n, _)| *n).collect();
    for (name, slot) in names.into_iter().zip(params.blocks_mut()) {
        let key = format!("{prefix}.{name}");
        let block = blocks
            .get(&key)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks block {key}")))?;
        let t = block.to_tensor()?;
        if t.shape() != slot.shape() {
            return Err(Error::shape("checkpoint block", slot.shape(), t.shape()));
        }
        if !t.is_finite() {
            return Err(Error::Config(format!("block {key} has non-finite values")));
        }
        *slot = t;
    }
    Ok(())
}

/// Adds `src` into `dst` block by block.
pub fn accumulate(dst: &mut [Tensor2], src: &[Tensor2]) {
    for (d, s) in dst.iter_mut().zip(src) {
        for (a, b) in d.as_mut_slice().iter_mut().zip(s.as_slice()) {
            *a += b;
        }
    }
}

pub fn scale_all(blocks: &mut [Tensor2], s: f64) {
    for b in blocks {
        for v in b.as_mut_slice() {
            *v *= s;
        }
    }
}
