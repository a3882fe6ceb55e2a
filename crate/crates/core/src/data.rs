//! Tabular datasets: synthetic long-tailed Gaussian mixtures, CSV I/O and
//! stratified splits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Tensor2;
use crate::rng::{normal_vec, stream};
use crate::schedule::ClassCensus;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetTable {
    features: Tensor2,
    labels: Vec<usize>,
    classes: usize,
}

impl DatasetTable {
    pub fn new(features: Tensor2, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape(
                "dataset",
                features.shape(),
                (labels.len(), 1),
            ));
        }
        if let Some(i) = labels.iter().position(|&l| l >= classes) {
            return Err(Error::Ingest {
                row: i + 1,
                message: format!("label {} >= class count {}", labels[i], classes),
            });
        }
        if !features.is_finite() {
            return Err(Error::Config("features contain NaN or infinite values".into()));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &Tensor2 {
        &self.features
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn onehot(&self) -> Tensor2 {
        let mut t = Tensor2::zeros(self.len(), self.classes);
        for (i, &l) in self.labels.iter().enumerate() {
            t.set(i, l, 1.0);
        }
        t
    }

    /// Per-class counts, including empty classes.
    pub fn class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Fails if any class is empty.
    pub fn census(&self) -> Result<ClassCensus> {
        ClassCensus::new(self.class_counts())
    }

    pub fn subset(&self, indices: &[usize]) -> DatasetTable {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.feature_row(i));
            labels.push(self.labels[i]);
        }
        DatasetTable {
            features: Tensor2::new(indices.len(), d, data).expect("consistent shape"),
            labels,
            classes: self.classes,
        }
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        for j in 0..self.dim() {
            out.push_str(&format!("f{j},"));
        }
        out.push_str("label\n");
        for i in 0..self.len() {
            for v in self.feature_row(i) {
                out.push_str(&format!("{v:?},"));
            }
            out.push_str(&format!("{}\n", self.labels[i]));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }
}

/// Geometric long-tail mixture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LongTailSpec {
    pub k: usize,
    pub head_count: usize,
    pub decay: f64,
    pub d: usize,
    pub separation: f64,
    pub spread: f64,
    pub seed: u64,
}

impl Default for LongTailSpec {
    fn default() -> Self {
        Self {
            k: 6,
            head_count: 100,
            decay: 0.57,
            d: 8,
            separation: 6.0,
            spread: 1.0,
            seed: 0,
        }
    }
}

impl LongTailSpec {
    /// `round(head_count * decay^j)`, at least one per class.
    pub fn class_counts(&self) -> Vec<u64> {
        (0..self.k)
            .map(|j| {
                let n = (self.head_count as f64 * self.decay.powi(j as i32)).round();
                (n as u64).max(1)
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 || self.head_count == 0 || self.d == 0 {
            return Err(Error::Config("k, head_count and d must be positive".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay must lie in (0, 1], got {}", self.decay)));
        }
        if !(self.separation >= 0.0 && self.spread >= 0.0) {
            return Err(Error::Config("separation and spread must be >= 0".into()));
        }
        Ok(())
    }
}

/// Isotropic Gaussian class-conditional distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub means: Vec<Vec<f64>>,
    pub spread: f64,
}

impl GaussianMixture {
    /// Places `k` means in `d` dimensions with pairwise distance at least
    /// `separation`. Uses scaled regular-simplex vertices when `d >= k - 1`
    /// and seeded random directions otherwise.
    pub fn place(k: usize, d: usize, separation: f64, spread: f64, seed: u64) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::Config("mixture needs k >= 1 and d >= 1".into()));
        }
        let means = if d + 1 >= k {
            simplex_means(k, d, separation)
        } else {
            random_means(k, d, separation, seed)?
        };
        Ok(Self { means, spread })
    }

    pub fn classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Vec<f64> {
        let z = normal_vec(rng, self.dim());
        self.means[class]
            .iter()
            .zip(z)
            .map(|(m, e)| m + self.spread * e)
            .collect()
    }

    /// Draws `counts[j]` samples of class `j`, class by class.
    pub fn draw<R: Rng + ?Sized>(&self, counts: &[u64], rng: &mut R) -> DatasetTable {
        let n: u64 = counts.iter().sum();
        let mut data = Vec::with_capacity(n as usize * self.dim());
        let mut labels = Vec::with_capacity(n as usize);
        for (j, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                data.extend(self.sample(j, rng));
                labels.push(j);
            }
        }
        DatasetTable {
            features: Tensor2::new(labels.len(), self.dim(), data).expect("consistent shape"),
            labels,
            classes: self.classes(),
        }
    }
}

fn simplex_means(k: usize, d: usize, separation: f64) -> Vec<Vec<f64>> {
    // Standard basis vectors e_j of R^k expressed in the Helmert basis of the
    // hyperplane orthogonal to (1, ..., 1); pairwise distance sqrt(2).
    let scale = separation / std::f64::consts::SQRT_2;
    (0..k)
        .map(|j| {
            let mut v = vec![0.0; d];
            for m in 1..k {
                let norm = ((m * (m + 1)) as f64).sqrt();
                let coord = if j < m {
                    1.0 / norm
                } else if j == m {
                    -(m as f64) / norm
                } else {
                    0.0
                };
                v[m - 1] = scale * coord;
            }
            v
        })
        .collect()
}

fn random_means(k: usize, d: usize, separation: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    for attempt in 0..64 {
        let mut rng = stream(seed, &[0xD1, attempt]);
        let dirs: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                let v = normal_vec(&mut rng, d);
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        let mut min_dist = f64::INFINITY;
        for i in 0..k {
            for j in i + 1..k {
                let dist = crate::numkernel::sq_dist(&dirs[i], &dirs[j]).sqrt();
                min_dist = min_dist.min(dist);
            }
        }
        if best.as_ref().is_none_or(|(b, _)| min_dist > *b) {
            best = Some((min_dist, dirs));
        }
    }
    let (min_dist, dirs) = best.expect("at least one attempt");
    if min_dist < 1e-3 {
        return Err(Error::Config(format!(
            "cannot separate {k} class means in {d} dimensions"
        )));
    }
    let radius = separation / min_dist;
    Ok(dirs
        .into_iter()
        .map(|v| v.into_iter().map(|x| x * radius).collect())
        .collect())
}

pub fn generate_longtail(spec: &LongTailSpec) -> Result<DatasetTable> {
    spec.validate()?;
    let mixture = GaussianMixture::place(spec.k, spec.d, spec.separation, spec.spread, spec.seed)?;
    let mut rng = stream(spec.seed, &[0xDA7A]);
    Ok(mixture.draw(&spec.class_counts(), &mut rng))
}

/// Reads `f0,...,f{d-1},label`. Rows are numbered from 1 after the header.
pub fn load_csv(path: &Path, classes: Option<usize>) -> Result<DatasetTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, classes)
}

pub fn read_csv<R: std::io::Read>(input: R, classes: Option<usize>) -> Result<DatasetTable> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = reader.headers()?.clone();
    let header_err = |message: String| Error::Ingest { row: 0, message };
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| header_err("missing column 'label'".into()))?;
    let mut feature_cols = Vec::new();
    for j in 0.. {
        let name = format!("f{j}");
        match headers.iter().position(|h| h.trim() == name) {
            Some(c) => feature_cols.push(c),
            None => break,
        }
    }
    let extra = headers.len() - 1 - feature_cols.len();
    if extra > 0 {
        return Err(header_err(format!(
            "expected columns f0..f{} and label, found {} unrecognized",
            feature_cols.len().saturating_sub(1),
            extra
        )));
    }
    if feature_cols.is_empty() {
        return Err(header_err("missing column 'f0'".into()));
    }

    let d = feature_cols.len();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Ingest {
            row,
            message: e.to_string(),
        })?;
        for (j, &c) in feature_cols.iter().enumerate() {
            let cell = record.get(c).unwrap_or("").trim();
            let v: f64 = cell.parse().map_err(|_| Error::Ingest {
                row,
                message: format!("column f{j}: cannot parse '{cell}' as a float"),
            })?;
            if !v.is_finite() {
                return Err(Error::Ingest {
                    row,
                    message: format!("column f{j}: non-finite value"),
                });
            }
            data.push(v);
        }
        let cell = record.get(label_col).unwrap_or("").trim();
        let label: usize = cell.parse().map_err(|_| Error::Ingest {
            row,
            message: format!("label: cannot parse '{cell}' as a class index"),
        })?;
        if let Some(k) = classes {
            if label >= k {
                return Err(Error::Ingest {
                    row,
                    message: format!("label {label} >= declared class count {k}"),
                });
            }
        }
        labels.push(label);
    }
    let k = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let table = DatasetTable {
        features: Tensor2::new(labels.len(), d, data)?,
        labels,
        classes: k,
    };
    for (j, &n) in table.class_counts().iter().enumerate() {
        if n == 0 {
            log::warn!("class {j} has no samples");
        }
    }
    Ok(table)
}

/// Members of each class, shuffled, concatenated in class order.
fn stratified_order(table: &DatasetTable, seed: u64) -> Vec<usize> {
    let mut rng = stream(seed, &[0x5B17]);
    let mut order = Vec::with_capacity(table.len());
    for c in 0..table.classes {
        let mut members: Vec<usize> = (0..table.len()).filter(|&i| table.labels[i] == c).collect();
        members.shuffle(&mut rng);
        order.extend(members);
    }
    order
}

/// Splits `order` so that every contiguous run receives `floor` or `ceil`
/// of `frac` times its length, and the whole list `round(frac * n)`.
fn balanced_two_way(order: &[usize], frac: f64) -> (Vec<usize>, Vec<usize>) {
    let (mut first, mut rest) = (Vec::new(), Vec::new());
    for (i, &idx) in order.iter().enumerate() {
        let lo = (i as f64 * frac + 0.5).floor();
        let hi = ((i + 1) as f64 * frac + 0.5).floor();
        if hi > lo {
            first.push(idx);
        } else {
            rest.push(idx);
        }
    }
    (first, rest)
}

/// Stratified partition into parts of the given fractions. Returns sample
/// indices per part, deterministic in `seed`.
pub fn split_fractions(table: &DatasetTable, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    let total: f64 = fractions.iter().sum();
    if fractions.is_empty() || fractions.iter().any(|&f| !(f >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be non-negative and sum to 1, got {fractions:?}"
        )));
    }
    let mut remaining = stratified_order(table, seed);
    let mut left = 1.0;
    let mut parts = Vec::with_capacity(fractions.len());
    for (p, &f) in fractions.iter().enumerate() {
        if p + 1 == fractions.len() {
            parts.push(std::mem::take(&mut remaining));
            break;
        }
        let share = if left > 0.0 { (f / left).min(1.0) } else { 0.0 };
        let (part, rest) = balanced_two_way(&remaining, share);
        parts.push(part);
        remaining = rest;
        left -= f;
    }
    Ok(parts)
}

/// Stratified train/test split.
pub fn train_test_split(
    table: &DatasetTable,
    train_frac: f64,
    seed: u64,
) -> Result<(DatasetTable, DatasetTable)> {
    let parts = split_fractions(table, &[train_frac, 1.0 - train_frac], seed)?;
    let train = table.subset(&parts[0]);
    for (j, &n) in train.class_counts().iter().enumerate() {
        if n == 0 {
            log::warn!("class {j} has no training samples after the split");
        }
    }
    Ok((train, table.subset(&parts[1])))
}

/// Stratified k-fold assignment: sample indices per fold.
pub fn kfold(table: &DatasetTable, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds == 0 {
        return Err(Error::Config("folds must be >= 1".into()));
    }
    let mut out = vec![Vec::new(); folds];
    for (i, idx) in stratified_order(table, seed).into_iter().enumerate() {
        out[i % folds].push(idx);
    }
    Ok(out)
}
