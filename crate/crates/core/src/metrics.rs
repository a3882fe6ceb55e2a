//! Classification metrics, empirical Rademacher complexity and a Monte Carlo
//! check of the class-weighted generalization bound.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetTable, GaussianMixture};
use crate::error::{Error, Result};
use crate::numkernel::Tensor2;
use crate::rng::stream;
use crate::schedule::{class_proportions, ClassCensus, NoiseLevelConfig};

pub const MAX_HYPOTHESES: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    /// One row per class: `class,precision,recall,f1,support`.
    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("class,precision,recall,f1,support\n");
        for j in 0..self.f1.len() {
            let support: u64 = self.confusion[j].iter().sum();
            out.push_str(&format!(
                "{j},{:?},{:?},{:?},{support}\n",
                self.precision[j], self.recall[j], self.f1[j]
            ));
        }
        out
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn classification_metrics(truth: &[usize], predicted: &[usize], k: usize) -> Result<MetricsReport> {
    if truth.len() != predicted.len() {
        return Err(Error::Usage(format!(
            "{} labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut confusion = vec![vec![0u64; k]; k];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= k || p >= k {
            return Err(Error::Usage(format!("label {} outside 0..{k}", t.max(p))));
        }
        confusion[t][p] += 1;
    }
    let mut precision = Vec::with_capacity(k);
    let mut recall = Vec::with_capacity(k);
    let mut f1 = Vec::with_capacity(k);
    for j in 0..k {
        let tp = confusion[j][j];
        let predicted_j: u64 = (0..k).map(|i| confusion[i][j]).sum();
        let actual_j: u64 = confusion[j].iter().sum();
        let p = ratio(tp, predicted_j);
        let r = ratio(tp, actual_j);
        precision.push(p);
        recall.push(r);
        f1.push(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 });
    }
    let correct: u64 = (0..k).map(|j| confusion[j][j]).sum();
    let macro_f1 = if k == 0 { 0.0 } else { f1.iter().sum::<f64>() / k as f64 };
    Ok(MetricsReport {
        accuracy: ratio(correct, truth.len() as u64),
        precision,
        recall,
        f1,
        macro_f1,
        confusion,
    })
}

/// A `{-1, +1}`-valued classifier on feature vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Hypothesis {
    Constant(i8),
    /// `sign * sgn(x[feature] - threshold)`, with `sgn(0) = +1`.
    Threshold { feature: usize, threshold: f64, sign: i8 },
}

impl Hypothesis {
    pub fn eval(&self, x: &[f64]) -> i8 {
        match *self {
            Hypothesis::Constant(s) => s,
            Hypothesis::Threshold {
                feature,
                threshold,
                sign,
            } => {
                if x[feature] >= threshold {
                    sign
                } else {
                    -sign
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisGrid {
    hypotheses: Vec<Hypothesis>,
}

impl HypothesisGrid {
    pub fn new(hypotheses: Vec<Hypothesis>) -> Result<Self> {
        if hypotheses.is_empty() || hypotheses.len() > MAX_HYPOTHESES {
            return Err(Error::Config(format!(
                "grid size must lie in 1..={MAX_HYPOTHESES}, got {}",
                hypotheses.len()
            )));
        }
        Ok(Self { hypotheses })
    }

    /// The two constant classifiers.
    pub fn constants() -> Self {
        Self {
            hypotheses: vec![Hypothesis::Constant(1), Hypothesis::Constant(-1)],
        }
    }

    /// Constants plus both orientations of `per_feature` evenly spaced
    /// thresholds in `[lo, hi]` on each of `dim` features.
    pub fn thresholds(dim: usize, per_feature: usize, lo: f64, hi: f64) -> Result<Self> {
        let mut h = Self::constants().hypotheses;
        for feature in 0..dim {
            for i in 0..per_feature {
                let threshold = if per_feature == 1 {
                    0.5 * (lo + hi)
                } else {
                    lo + (hi - lo) * i as f64 / (per_feature - 1) as f64
                };
                for sign in [1, -1] {
                    h.push(Hypothesis::Threshold {
                        feature,
                        threshold,
                        sign,
                    });
                }
            }
        }
        Self::new(h)
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    pub fn hypotheses(&self) -> &[Hypothesis] {
        &self.hypotheses
    }

    /// `out[h][i] = f_h(x_i)`.
    fn outputs(&self, features: &Tensor2) -> Vec<Vec<i8>> {
        self.hypotheses
            .iter()
            .map(|h| (0..features.rows()).map(|i| h.eval(features.row(i))).collect())
            .collect()
    }
}

fn rademacher_from_outputs(
    outputs: &[Vec<i8>],
    n: usize,
    class_indices: &[Vec<usize>],
    p: &[f64],
    draws: usize,
    seed: u64,
) -> Result<f64> {
    if draws == 0 {
        return Err(Error::Usage("need at least one Rademacher draw".into()));
    }
    if p.len() != class_indices.len() {
        return Err(Error::Usage("one weight per class required".into()));
    }
    if let Some(j) = class_indices.iter().position(Vec::is_empty) {
        return Err(Error::Usage(format!("class {j} has no samples")));
    }
    let per_draw: Vec<f64> = (0..draws)
        .into_par_iter()
        .map(|d| {
            let mut rng = stream(seed, &[0x5161, d as u64]);
            let sigma: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            let mut total = 0.0;
            for (idx, &pj) in class_indices.iter().zip(p) {
                let mut best = f64::NEG_INFINITY;
                for out in outputs {
                    let s: f64 = idx.iter().map(|&i| sigma[i] * out[i] as f64).sum();
                    best = best.max(s);
                }
                total += pj * best / idx.len() as f64;
            }
            total
        })
        .collect();
    Ok(per_draw.iter().sum::<f64>() / draws as f64)
}

/// Monte Carlo estimate of
/// `E_sigma[ sum_j p_j sup_f (1/n_j) sum_{i in class j} sigma_i f(x_i) ]`.
pub fn empirical_rademacher(
    features: &Tensor2,
    class_indices: &[Vec<usize>],
    p: &[f64],
    grid: &HypothesisGrid,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    if class_indices.iter().flatten().any(|&i| i >= features.rows()) {
        return Err(Error::Usage("sample index out of range".into()));
    }
    let outputs = grid.outputs(features);
    rademacher_from_outputs(&outputs, features.rows(), class_indices, p, draws, seed)
}

/// `c * sqrt(ln(1/delta) / (2 n))`.
pub fn deviation_term(c_loss: f64, delta: f64, n: u64) -> f64 {
    c_loss * ((1.0 / delta).ln() / (2.0 * n as f64)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundSettings {
    /// Training samples per class.
    pub counts: Vec<u64>,
    pub c_loss: f64,
    pub lipschitz: f64,
    pub delta: f64,
    pub weights: NoiseLevelConfig,
    pub rademacher_draws: usize,
    pub trials: usize,
    /// Held-out draw size, split evenly across classes.
    pub population: usize,
    pub seed: u64,
}

impl Default for BoundSettings {
    fn default() -> Self {
        Self {
            counts: vec![60, 20],
            c_loss: 1.0,
            lipschitz: 1.0,
            delta: 0.05,
            weights: NoiseLevelConfig::default(),
            rademacher_draws: 100,
            trials: 200,
            population: 100_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisMargin {
    pub hypothesis: Hypothesis,
    pub population_loss: f64,
    /// Smallest `rhs - population_loss` over trials.
    pub min_margin: f64,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub trials: usize,
    /// Trials in which some hypothesis exceeded its bound.
    pub violations: usize,
    pub violation_rate: f64,
    pub min_margin: f64,
    pub mean_margin: f64,
    pub weights: Vec<f64>,
    /// Per-class complexity averaged over trials.
    pub rademacher: Vec<f64>,
    pub hypotheses: Vec<HypothesisMargin>,
}

/// Labels in `{-1, +1}` from binary class labels.
fn signed_labels(labels: &[usize]) -> Vec<i8> {
    labels.iter().map(|&l| if l == 0 { -1 } else { 1 }).collect()
}

/// Per-class 0-1 loss of every hypothesis on `table`.
fn class_losses(grid: &HypothesisGrid, table: &DatasetTable) -> Vec<Vec<f64>> {
    let y = signed_labels(table.labels());
    let counts = table.class_counts();
    grid.outputs(table.features())
        .iter()
        .map(|out| {
            let mut wrong = vec![0u64; counts.len()];
            for (i, (&o, &yi)) in out.iter().zip(&y).enumerate() {
                if o != yi {
                    wrong[table.labels()[i]] += 1;
                }
            }
            wrong.iter().zip(&counts).map(|(&w, &c)| ratio(w, c)).collect()
        })
        .collect()
}

fn class_index_sets(table: &DatasetTable) -> Vec<Vec<usize>> {
    let mut sets = vec![Vec::new(); table.classes()];
    for (i, &l) in table.labels().iter().enumerate() {
        sets[l].push(i);
    }
    sets
}

/// Checks, over independent training draws from `mixture`, that every grid
/// hypothesis satisfies
/// `sum_j p_j L_j(f) <= sum_j p_j (Lhat_j(f) + 2 L R_j + c sqrt(ln(1/delta) / (2 n_j)))`
/// with `L_j` measured on one large held-out draw.
pub fn bound_check(mixture: &GaussianMixture, grid: &HypothesisGrid, s: &BoundSettings) -> Result<BoundReport> {
    if mixture.classes() != 2 || s.counts.len() != 2 {
        return Err(Error::Config("the bound check needs exactly two classes".into()));
    }
    if !(s.delta > 0.0 && s.delta < 1.0) {
        return Err(Error::Config(format!("delta must lie in (0, 1), got {}", s.delta)));
    }
    if s.trials == 0 || s.population < 2 {
        return Err(Error::Config("need trials >= 1 and population >= 2".into()));
    }
    let census = ClassCensus::new(s.counts.clone())?;
    let p = class_proportions(&census, &s.weights)?;
    let half = (s.population / 2) as u64;
    let held_out = mixture.draw(&[half, s.population as u64 - half], &mut stream(s.seed, &[0x9090]));
    let pop = class_losses(grid, &held_out);
    let pop_weighted: Vec<f64> = pop.iter().map(|l| l.iter().zip(&p).map(|(a, b)| a * b).sum()).collect();

    let per_trial: Vec<(Vec<f64>, Vec<f64>)> = (0..s.trials)
        .into_par_iter()
        .map(|trial| {
            let train = mixture.draw(&s.counts, &mut stream(s.seed, &[0x7121, trial as u64]));
            let emp = class_losses(grid, &train);
            let sets = class_index_sets(&train);
            let outputs = grid.outputs(train.features());
            let mut r = Vec::with_capacity(2);
            for (j, set) in sets.iter().enumerate() {
                r.push(rademacher_from_outputs(
                    &outputs,
                    train.len(),
                    std::slice::from_ref(set),
                    &[1.0],
                    s.rademacher_draws,
                    crate::rng::stream(s.seed, &[0x7122, trial as u64, j as u64]).random(),
                )?);
            }
            let slack: f64 = (0..2)
                .map(|j| p[j] * (2.0 * s.lipschitz * r[j] + deviation_term(s.c_loss, s.delta, s.counts[j])))
                .sum();
            let margins = emp
                .iter()
                .zip(&pop_weighted)
                .map(|(l, pw)| l.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>() + slack - pw)
                .collect();
            Ok((margins, r))
        })
        .collect::<Result<_>>()?;

    let mut hypotheses: Vec<HypothesisMargin> = grid
        .hypotheses()
        .iter()
        .zip(&pop_weighted)
        .map(|(&h, &pw)| HypothesisMargin {
            hypothesis: h,
            population_loss: pw,
            min_margin: f64::INFINITY,
            violations: 0,
        })
        .collect();
    let mut violations = 0;
    let mut min_margin = f64::INFINITY;
    let mut margin_sum = 0.0;
    let mut rademacher = vec![0.0; 2];
    for (margins, r) in &per_trial {
        let mut violated = false;
        for (hm, &m) in hypotheses.iter_mut().zip(margins) {
            hm.min_margin = hm.min_margin.min(m);
            if m < 0.0 {
                hm.violations += 1;
                violated = true;
            }
            margin_sum += m;
        }
        violations += violated as usize;
        min_margin = min_margin.min(margins.iter().copied().fold(f64::INFINITY, f64::min));
        for (acc, v) in rademacher.iter_mut().zip(r) {
            *acc += v / s.trials as f64;
        }
    }
    Ok(BoundReport {
        trials: s.trials,
        violations,
        violation_rate: violations as f64 / s.trials as f64,
        min_margin,
        mean_margin: margin_sum / (s.trials * grid.len()) as f64,
        weights: p,
        rademacher,
        hypotheses,
    })
}
