//! Optimizers and the learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Serializable optimizer internals, stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub name: String,
    pub step: u64,
    /// Named per-parameter buffers, e.g. Adam's first and second moments.
    pub buffers: Vec<Vec<Vec<f64>>>,
}

pub trait Optimizer: Send {
    fn name(&self) -> &'static str;

    /// Applies one update. `params` and `grads` are aligned block by block.
    fn step(&mut self, params: &mut [&mut Tensor2], grads: &[Tensor2], lr: f64) -> Result<()>;

    fn state(&self) -> OptimizerState;

    fn load_state(&mut self, state: &OptimizerState) -> Result<()>;
}

fn check_aligned(params: &[&mut Tensor2], grads: &[Tensor2]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Usage(format!(
            "{} parameter blocks but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("optimizer", p.shape(), g.shape()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct Sgd {
    step: u64,
}

impl Optimizer for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn step(&mut self, params: &mut [&mut Tensor2], grads: &[Tensor2], lr: f64) -> Result<()> {
        check_aligned(params, grads)?;
        for (p, g) in params.iter_mut().zip(grads) {
            for (w, d) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *w -= lr * d;
            }
        }
        self.step += 1;
        Ok(())
    }

    fn state(&self) -> OptimizerState {
        OptimizerState {
            name: "sgd".into(),
            step: self.step,
            buffers: Vec::new(),
        }
    }

    fn load_state(&mut self, state: &OptimizerState) -> Result<()> {
        if state.name != "sgd" {
            return Err(Error::Config(format!("cannot load {} state into sgd", state.name)));
        }
        self.step = state.step;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: OptimizerConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &OptimizerConfig) -> Self {
        Self {
            cfg: *cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for Adam {
    fn name(&self) -> &'static str {
        "adam"
    }

    fn step(&mut self, params: &mut [&mut Tensor2], grads: &[Tensor2], lr: f64) -> Result<()> {
        check_aligned(params, grads)?;
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        self.step += 1;
        let OptimizerConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (b, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[b], &mut self.v[b]);
            for (i, (w, &d)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * d;
                v[i] = beta2 * v[i] + (1.0 - beta2) * d * d;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    fn state(&self) -> OptimizerState {
        OptimizerState {
            name: "adam".into(),
            step: self.step,
            buffers: vec![self.m.clone(), self.v.clone()],
        }
    }

    fn load_state(&mut self, state: &OptimizerState) -> Result<()> {
        if state.name != "adam" {
            return Err(Error::Config(format!("cannot load {} state into adam", state.name)));
        }
        self.step = state.step;
        match state.buffers.as_slice() {
            [] => {
                self.m.clear();
                self.v.clear();
            }
            [m, v] => {
                self.m = m.clone();
                self.v = v.clone();
            }
            _ => return Err(Error::Config("adam state needs two moment buffers".into())),
        }
        Ok(())
    }
}

/// Linear warmup from `start_lr` to `base_lr`, then a half-cycle cosine
/// decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub start_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return self.start_lr + (self.base_lr - self.start_lr) * frac;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.base_lr;
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor2::row_vector(&[0.3, -1.2, 4.0]);
        let before = p.clone();
        let g = vec![Tensor2::zeros(1, 3)];
        let mut adam = Adam::new(&OptimizerConfig::default());
        for _ in 0..5 {
            adam.step(&mut [&mut p], &g, 0.01).unwrap();
        }
        assert_eq!(p, before);
        let mut sgd = Sgd::default();
        sgd.step(&mut [&mut p], &g, 0.5).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor2::row_vector(&[1.0, 1.0]);
        let g = vec![Tensor2::row_vector(&[2.0, -0.5])];
        let mut adam = Adam::new(&OptimizerConfig::default());
        adam.step(&mut [&mut p], &g, 0.1).unwrap();
        assert!((p.as_slice()[0] - 0.9).abs() < 1e-6);
        assert!((p.as_slice()[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn adam_state_round_trips() {
        let mut p = Tensor2::row_vector(&[1.0, 2.0]);
        let g = vec![Tensor2::row_vector(&[0.2, -0.1])];
        let mut a = Adam::new(&OptimizerConfig::default());
        a.step(&mut [&mut p], &g, 0.1).unwrap();
        let mut b = Adam::new(&OptimizerConfig::default());
        b.load_state(&a.state()).unwrap();
        let mut pa = p.clone();
        let mut pb = p.clone();
        a.step(&mut [&mut pa], &g, 0.1).unwrap();
        b.step(&mut [&mut pb], &g, 0.1).unwrap();
        assert_eq!(pa, pb);
        assert!(Sgd::default().load_state(&a.state()).is_err());
    }

    #[test]
    fn lr_schedule_endpoints() {
        let s = LrSchedule {
            base_lr: 1e-3,
            start_lr: 1e-4,
            warmup_steps: 10,
            total_steps: 100,
        };
        assert_eq!(s.at(0), 1e-4);
        assert_eq!(s.at(10), 1e-3);
        assert!(s.at(100) >= 0.0 && s.at(100) < 1e-12);
        let max = (0..=100).map(|i| s.at(i)).fold(0.0, f64::max);
        assert_eq!(max, 1e-3);
        for i in 10..100 {
            assert!(s.at(i + 1) <= s.at(i));
        }
    }
}
