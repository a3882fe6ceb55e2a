//! Anisotropic forward corruption and the reverse sampler.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{predict_noise, DenoiserParams};
use crate::error::{Error, Result};
use crate::rng::normal_vec;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Global,
    Local,
    Fused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardDraw {
    pub t: usize,
    pub branch: Branch,
    pub y_t: Vec<f64>,
    pub eps: Vec<f64>,
}

fn check_step(schedule: &NoiseSchedule, class: usize, t: usize) -> Result<()> {
    if t > schedule.horizon() {
        return Err(Error::Usage(format!("step {t} outside 0..={}", schedule.horizon())));
    }
    if class >= schedule.classes() {
        return Err(Error::Usage(format!(
            "class {class} outside 0..{}",
            schedule.classes()
        )));
    }
    Ok(())
}

/// `sqrt(g) y0 + sqrt(1 - g) eps + (1 - sqrt(g)) prior` with `g = gamma_class^t`.
pub fn forward_with_eps(
    schedule: &NoiseSchedule,
    class: usize,
    y0: &[f64],
    prior: &[f64],
    t: usize,
    eps: &[f64],
) -> Result<Vec<f64>> {
    check_step(schedule, class, t)?;
    let k = y0.len();
    if prior.len() != k || eps.len() != k {
        return Err(Error::shape("forward_sample", (1, k), (1, prior.len().min(eps.len()))));
    }
    let g = schedule.gamma(class, t);
    let sg = g.sqrt();
    let sn = (1.0 - g).sqrt();
    Ok((0..k)
        .map(|i| sg * y0[i] + sn * eps[i] + (1.0 - sg) * prior[i])
        .collect())
}

pub fn forward_sample<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    class: usize,
    y0: &[f64],
    prior: &[f64],
    t: usize,
    branch: Branch,
    rng: &mut R,
) -> Result<ForwardDraw> {
    let eps = normal_vec(rng, y0.len());
    let y_t = forward_with_eps(schedule, class, y0, prior, t, &eps)?;
    Ok(ForwardDraw { t, branch, y_t, eps })
}

/// Scalars of one reverse transition from `t` to `t_prev`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub t: usize,
    /// `lambda * beta` of the transition.
    pub lambda_beta: f64,
    pub gamma_t: f64,
    pub gamma_prev: f64,
}

impl StepCoefficients {
    /// Single step `t -> t-1`.
    pub fn exact(schedule: &NoiseSchedule, class: usize, t: usize) -> Result<Self> {
        check_step(schedule, class, t)?;
        if t == 0 {
            return Err(Error::Usage("reverse step needs t >= 1".into()));
        }
        Ok(Self {
            t,
            lambda_beta: schedule.lambda(class) * schedule.beta(t),
            gamma_t: schedule.gamma(class, t),
            gamma_prev: schedule.gamma(class, t - 1),
        })
    }

    /// Jump `t -> t_prev`; the effective `lambda * beta` is `1 - gamma_t / gamma_prev`.
    pub fn strided(schedule: &NoiseSchedule, class: usize, t: usize, t_prev: usize) -> Result<Self> {
        if t_prev + 1 == t {
            return Self::exact(schedule, class, t);
        }
        check_step(schedule, class, t)?;
        if t_prev >= t {
            return Err(Error::Usage(format!("stride must descend, got {t} -> {t_prev}")));
        }
        let gamma_t = schedule.gamma(class, t);
        let gamma_prev = schedule.gamma(class, t_prev);
        Ok(Self {
            t,
            lambda_beta: 1.0 - gamma_t / gamma_prev,
            gamma_t,
            gamma_prev,
        })
    }

    pub fn sigma(&self) -> f64 {
        let xi = 1.0 - self.gamma_t;
        (self.lambda_beta * (1.0 - self.gamma_prev) / xi).max(0.0).sqrt()
    }
}

/// `(1/zeta)(y_t - ((xi - zeta)/xi) y_f - (lambda beta / sqrt(xi)) eps_hat) + sigma z`
/// with `zeta = sqrt(1 - lambda beta)` and `xi = 1 - gamma_t`.
pub fn reverse_update(
    c: &StepCoefficients,
    y_t: &[f64],
    y_f: &[f64],
    eps_hat: &[f64],
    z: &[f64],
) -> Result<Vec<f64>> {
    let k = y_t.len();
    if y_f.len() != k || eps_hat.len() != k || z.len() != k {
        return Err(Error::shape("reverse_step", (1, k), (1, y_f.len())));
    }
    let xi = 1.0 - c.gamma_t;
    if !(xi > 0.0) {
        return Err(Error::Singular(c.t));
    }
    let zeta = (1.0 - c.lambda_beta).sqrt();
    let shift = (xi - zeta) / xi;
    let noise = c.lambda_beta / xi.sqrt();
    let sigma = c.sigma();
    Ok((0..k)
        .map(|i| (y_t[i] - shift * y_f[i] - noise * eps_hat[i]) / zeta + sigma * z[i])
        .collect())
}

pub fn reverse_step(
    schedule: &NoiseSchedule,
    class: usize,
    t: usize,
    y_t: &[f64],
    y_f: &[f64],
    eps_hat: &[f64],
    z: &[f64],
) -> Result<Vec<f64>> {
    reverse_update(&StepCoefficients::exact(schedule, class, t)?, y_t, y_f, eps_hat, z)
}

/// Evenly spaced steps `T = t_0 > t_1 > ... > t_{n-1} = 1`.
pub fn timesteps(horizon: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > horizon {
        return Err(Error::Usage(format!(
            "sampling steps must lie in 1..={horizon}, got {steps}"
        )));
    }
    if steps == 1 {
        return Ok(vec![horizon]);
    }
    let span = (horizon - 1) as f64;
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| (1.0 + span * i as f64 / (steps - 1) as f64).round() as usize)
        .collect();
    ts.reverse();
    Ok(ts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: usize,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub y0: Vec<f64>,
    pub class: usize,
    pub lambda: f64,
    pub trace: Option<Vec<Snapshot>>,
}

/// Index of the largest entry, ties toward the lower index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Runs the reverse chain for the noise levels of `class`, asking
/// `predict(y, t)` for the noise estimate at every visited step.
///
/// Draw order on `rng`: the initial `k` normals, then one `k`-vector `z`
/// per step.
pub fn sample_with<R, F>(
    schedule: &NoiseSchedule,
    class: usize,
    y_f: &[f64],
    steps: usize,
    trace: bool,
    rng: &mut R,
    mut predict: F,
) -> Result<SampleOutcome>
where
    R: Rng + ?Sized,
    F: FnMut(&[f64], usize) -> Result<Vec<f64>>,
{
    let ts = timesteps(schedule.horizon(), steps)?;
    check_step(schedule, class, 0)?;
    let k = y_f.len();
    let mut y: Vec<f64> = normal_vec(rng, k)
        .into_iter()
        .zip(y_f)
        .map(|(n, f)| f + n)
        .collect();
    let mut snaps = trace.then(|| {
        vec![Snapshot {
            t: ts[0],
            y: y.clone(),
        }]
    });
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let coeffs = StepCoefficients::strided(schedule, class, t, t_prev)?;
        let eps_hat = predict(&y, t)?;
        let z = normal_vec(rng, k);
        y = reverse_update(&coeffs, &y, y_f, &eps_hat, &z)?;
        if let Some(s) = snaps.as_mut() {
            s.push(Snapshot { t: t_prev, y: y.clone() });
        }
    }
    Ok(SampleOutcome {
        class: argmax(&y),
        lambda: schedule.lambda(class),
        y0: y,
        trace: snaps,
    })
}

/// Samples a label vector for one input. The noise level is that of the
/// class `lambda_class`, normally the argmax of the prior network.
#[allow(clippy::too_many_arguments)]
pub fn sample<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    denoiser: &DenoiserParams,
    cond: &[f64],
    y_f: &[f64],
    lambda_class: usize,
    steps: usize,
    trace: bool,
    rng: &mut R,
) -> Result<SampleOutcome> {
    let horizon = schedule.horizon();
    sample_with(schedule, lambda_class, y_f, steps, trace, rng, |y, t| {
        predict_noise(denoiser, cond, y, y_f, t, horizon)
    })
}
