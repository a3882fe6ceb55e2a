//! MMD regularisers, noise reconstruction loss and the total objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{self, sq_dist, NodeId, Tape, Tensor2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandwidthMode {
    Fixed,
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub bandwidth: f64,
    pub mode: BandwidthMode,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            bandwidth: 1.0,
            mode: BandwidthMode::Fixed,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode == BandwidthMode::Fixed && !(self.bandwidth.is_finite() && self.bandwidth > 0.0) {
            return Err(Error::Config(format!(
                "kernel bandwidth must be positive, got {}",
                self.bandwidth
            )));
        }
        Ok(())
    }

    /// Bandwidth for the pair `(a, b)`. In median mode this is the median
    /// pairwise distance over the union of rows, or 1 when that is zero.
    pub fn resolve(&self, a: &Tensor2, b: &Tensor2) -> f64 {
        match self.mode {
            BandwidthMode::Fixed => self.bandwidth,
            BandwidthMode::Median => {
                let rows: Vec<&[f64]> = (0..a.rows()).map(|i| a.row(i)).chain((0..b.rows()).map(|i| b.row(i))).collect();
                let mut d = Vec::with_capacity(rows.len() * rows.len() / 2);
                for i in 0..rows.len() {
                    for j in i + 1..rows.len() {
                        d.push(sq_dist(rows[i], rows[j]).sqrt());
                    }
                }
                if d.is_empty() {
                    return 1.0;
                }
                d.sort_by(f64::total_cmp);
                let n = d.len();
                let med = if n % 2 == 1 {
                    d[n / 2]
                } else {
                    0.5 * (d[n / 2 - 1] + d[n / 2])
                };
                if med > 0.0 {
                    med
                } else {
                    1.0
                }
            }
        }
    }
}

/// Mean of `exp(-|a_i - b_j|^2 / (2 s^2))` over all row pairs.
pub fn rbf_kernel_mean(a: &Tensor2, b: &Tensor2, cfg: &KernelConfig) -> Result<f64> {
    cfg.validate()?;
    numkernel::rbf_mean(a, b, cfg.resolve(a, b))
}

/// Biased MMD estimate `K(e, e) - 2 K(p, e) + K(p, p)`.
pub fn mmd_loss(eps_true: &Tensor2, eps_pred: &Tensor2, cfg: &KernelConfig) -> Result<f64> {
    cfg.validate()?;
    let bw = cfg.resolve(eps_true, eps_pred);
    let tt = numkernel::rbf_mean(eps_true, eps_true, bw)?;
    let pt = numkernel::rbf_mean(eps_pred, eps_true, bw)?;
    let pp = numkernel::rbf_mean(eps_pred, eps_pred, bw)?;
    Ok(tt - 2.0 * pt + pp)
}

/// Tape version of [`mmd_loss`]. The bandwidth is resolved from current
/// values and treated as a constant.
pub fn mmd_on(tape: &mut Tape, eps_true: NodeId, eps_pred: NodeId, cfg: &KernelConfig) -> Result<NodeId> {
    cfg.validate()?;
    let bw = cfg.resolve(tape.value(eps_true), tape.value(eps_pred));
    let tt = tape.rbf_mean(eps_true, eps_true, bw)?;
    let pt = tape.rbf_mean(eps_pred, eps_true, bw)?;
    let pp = tape.rbf_mean(eps_pred, eps_pred, bw)?;
    let cross = tape.scale(pt, 2.0)?;
    let a = tape.sub(tt, cross)?;
    tape.add(a, pp)
}

/// Mean over rows of the squared distance between matching rows.
pub fn eps_loss(eps_true: &Tensor2, eps_pred: &Tensor2) -> Result<f64> {
    if eps_true.shape() != eps_pred.shape() {
        return Err(Error::shape("eps_loss", eps_true.shape(), eps_pred.shape()));
    }
    if eps_true.rows() == 0 {
        return Err(Error::Usage("eps_loss needs a non-empty batch".into()));
    }
    let diff = numkernel::binary(numkernel::BinaryOp::Sub, eps_true, eps_pred)?;
    Ok(numkernel::sum_sq(&diff) / eps_true.rows() as f64)
}

pub fn eps_loss_on(tape: &mut Tape, eps_true: NodeId, eps_pred: NodeId) -> Result<NodeId> {
    let rows = tape.value(eps_true).rows();
    if rows == 0 {
        return Err(Error::Usage("eps_loss needs a non-empty batch".into()));
    }
    let diff = tape.sub(eps_true, eps_pred)?;
    let sq = tape.sum_sq(diff)?;
    tape.scale(sq, 1.0 / rows as f64)
}

fn check_weight(w: f64) -> Result<()> {
    if !(w > 0.0 && w.is_finite()) {
        return Err(Error::Config(format!("loss weight w must be positive, got {w}")));
    }
    Ok(())
}

/// `w (l_g + l_l) + l_eps`.
pub fn total_loss(l_g: f64, l_l: f64, l_eps: f64, w: f64) -> Result<f64> {
    check_weight(w)?;
    Ok(w * (l_g + l_l) + l_eps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_g: f64,
    pub l_l: f64,
    pub l_eps: f64,
    pub l_total: f64,
    pub w: f64,
}

/// Stacked per-branch noise batches, true and predicted.
pub struct BranchBatches {
    pub eps_g: NodeId,
    pub pred_g: NodeId,
    pub eps_l: NodeId,
    pub pred_l: NodeId,
    pub eps_f: NodeId,
    pub pred_f: NodeId,
}

/// Records the total objective and returns its node with the report.
pub fn objective_on(
    tape: &mut Tape,
    b: &BranchBatches,
    w: f64,
    kernel: &KernelConfig,
) -> Result<(NodeId, LossReport)> {
    check_weight(w)?;
    let l_g = mmd_on(tape, b.eps_g, b.pred_g, kernel)?;
    let l_l = mmd_on(tape, b.eps_l, b.pred_l, kernel)?;
    let l_eps = eps_loss_on(tape, b.eps_f, b.pred_f)?;
    let reg = tape.add(l_g, l_l)?;
    let reg = tape.scale(reg, w)?;
    let total = tape.add(reg, l_eps)?;
    let report = LossReport {
        l_g: tape.value(l_g).as_slice()[0],
        l_l: tape.value(l_l).as_slice()[0],
        l_eps: tape.value(l_eps).as_slice()[0],
        l_total: tape.value(total).as_slice()[0],
        w,
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor2 {
        Tensor2::new(r, c, (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn kernel_cases() {
        let cfg = KernelConfig::default();
        let a = Tensor2::row_vector(&[0.4, -1.0]);
        assert_eq!(rbf_kernel_mean(&a, &a, &cfg).unwrap(), 1.0);
        let z = Tensor2::row_vector(&[0.0]);
        let o = Tensor2::row_vector(&[1.0]);
        assert!((rbf_kernel_mean(&z, &o, &cfg).unwrap() - 0.606_530_659_712_633_4).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, y) = (random(&mut rng, 4, 3), random(&mut rng, 6, 3));
        let d = rbf_kernel_mean(&x, &y, &cfg).unwrap() - rbf_kernel_mean(&y, &x, &cfg).unwrap();
        assert!(d.abs() < 1e-15);
        assert!(rbf_kernel_mean(&Tensor2::zeros(0, 3), &y, &cfg).is_err());
        let bad = KernelConfig {
            bandwidth: 0.0,
            ..cfg
        };
        assert!(matches!(rbf_kernel_mean(&x, &y, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn median_bandwidth() {
        let cfg = KernelConfig {
            bandwidth: 0.0,
            mode: BandwidthMode::Median,
        };
        // distances 1, 2, 3 -> median 2
        let a = Tensor2::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let b = Tensor2::row_vector(&[3.0]);
        assert_eq!(cfg.resolve(&a, &b), 2.0);
        let same = Tensor2::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(cfg.resolve(&same, &same), 1.0);
        assert!(rbf_kernel_mean(&a, &b, &cfg).is_ok());
    }

    #[test]
    fn mmd_cases() {
        let cfg = KernelConfig::default();
        let z = Tensor2::row_vector(&[0.0]);
        let o = Tensor2::row_vector(&[1.0]);
        assert!((mmd_loss(&z, &o, &cfg).unwrap() - 0.786_938_680_574_733_2).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 8, 3);
        assert!(mmd_loss(&x, &x, &cfg).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn eps_loss_cases() {
        let a = Tensor2::row_vector(&[0.0, 0.0]);
        let b = Tensor2::row_vector(&[1.0, 1.0]);
        assert_eq!(eps_loss(&a, &b).unwrap(), 2.0);
        assert_eq!(eps_loss(&a, &a).unwrap(), 0.0);
        assert!(eps_loss(&a, &Tensor2::row_vector(&[1.0])).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, y) = (random(&mut rng, 5, 4), random(&mut rng, 5, 4));
        let mut naive = 0.0;
        for i in 0..5 {
            for j in 0..4 {
                naive += (x.get(i, j) - y.get(i, j)).powi(2);
            }
        }
        assert!((eps_loss(&x, &y).unwrap() - naive / 5.0).abs() < 1e-13);
        let xx = numkernel::concat_rows(&[&x, &x]).unwrap();
        let yy = numkernel::concat_rows(&[&y, &y]).unwrap();
        assert!((eps_loss(&xx, &yy).unwrap() - eps_loss(&x, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn total_loss_cases() {
        assert!((total_loss(0.2, 0.2, 1.0, 0.5).unwrap() - 1.2).abs() < 1e-15);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.5).unwrap(), 0.0);
        assert_eq!(total_loss(0.3, 0.7, 2.0, 2.0).unwrap(), 2.0 * (0.3 + 0.7) + 2.0);
        assert!(matches!(total_loss(1.0, 1.0, 1.0, 0.0), Err(Error::Config(_))));
        assert!(total_loss(1.0, 1.0, 1.0, -0.5).is_err());
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = KernelConfig::default();
        let blocks: Vec<Tensor2> = (0..6).map(|_| random(&mut rng, 5, 3)).collect();
        let eval = |bs: &[Tensor2]| -> (f64, Vec<Tensor2>) {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = bs.iter().map(|b| tape.leaf(b.clone())).collect();
            let batches = BranchBatches {
                eps_g: ids[0],
                pred_g: ids[1],
                eps_l: ids[2],
                pred_l: ids[3],
                eps_f: ids[4],
                pred_f: ids[5],
            };
            let (root, rep) = objective_on(&mut tape, &batches, 0.5, &cfg).unwrap();
            let direct = total_loss(
                mmd_loss(&bs[0], &bs[1], &cfg).unwrap(),
                mmd_loss(&bs[2], &bs[3], &cfg).unwrap(),
                eps_loss(&bs[4], &bs[5]).unwrap(),
                0.5,
            )
            .unwrap();
            assert!((rep.l_total - direct).abs() < 1e-13);
            let g = tape.backward(root).unwrap();
            (rep.l_total, ids.iter().map(|&i| g.get_or_zeros(i, (5, 3))).collect())
        };
        let (_, grads) = eval(&blocks);
        let h = 1e-5;
        for b in [1usize, 3, 5] {
            for e in 0..15 {
                let mut p = blocks.clone();
                p[b].as_mut_slice()[e] += h;
                let mut m = blocks.clone();
                m[b].as_mut_slice()[e] -= h;
                let fd = (eval(&p).0 - eval(&m).0) / (2.0 * h);
                let an = grads[b].as_slice()[e];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "block {b} entry {e}: {an} vs {fd}");
            }
        }
    }

    proptest! {
        #[test]
        fn mmd_axioms(seed in any::<u64>(), m in 1usize..6, p in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = KernelConfig::default();
            let (x, y) = (random(&mut rng, m, 3), random(&mut rng, p, 3));
            let xy = mmd_loss(&x, &y, &cfg).unwrap();
            let yx = mmd_loss(&y, &x, &cfg).unwrap();
            prop_assert!(xy >= -1e-12);
            prop_assert!((xy - yx).abs() <= 1e-12);
            prop_assert!(mmd_loss(&x, &x, &cfg).unwrap().abs() <= 1e-12);
        }
    }
}
