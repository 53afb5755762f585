//! Desk-scale federated learning: datasets, local updates, evaluation and naive averaging.
//!
//! Two model families are supported. `Quadratic` is a consensus task whose per-sample loss
//! is `0.5 * |w - x|^2`, so the optimum is the data mean. `Logistic` is multinomial softmax
//! regression with parameters laid out as the `C x d` weight matrix (row-major) followed by
//! `C` biases.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dataset must contain at least one sample")]
    EmptyDataset,
    #[error("label {label} at row {row} is outside [0, {classes})")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("cannot average an empty list of models")]
    NoModels,
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("csv header must be f0..f{{d-1}} followed by label, got {0:?}")]
    BadHeader(Vec<String>),
    #[error("csv line {line}: cannot parse {what:?}")]
    BadRow { line: u64, what: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    owner: usize,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, owner: usize) -> Result<Self, FlError> {
        if features.is_empty() {
            return Err(FlError::EmptyDataset);
        }
        if labels.len() != features.len() {
            return Err(FlError::DimensionMismatch {
                expected: features.len(),
                got: labels.len(),
            });
        }
        let d = features[0].len();
        if let Some(row) = features.iter().find(|r| r.len() != d) {
            return Err(FlError::DimensionMismatch {
                expected: d,
                got: row.len(),
            });
        }
        Ok(Dataset {
            features,
            labels,
            owner,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn owner(&self) -> usize {
        self.owner
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self, FlError> {
        Dataset::new(self.features.clone(), labels, self.owner)
    }

    pub fn with_owner(mut self, owner: usize) -> Self {
        self.owner = owner;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Quadratic { target: Vec<f64> },
    Logistic { dim: usize, classes: usize },
}

impl ModelSpec {
    /// Flattened parameter count.
    pub fn dimension(&self) -> usize {
        match self {
            ModelSpec::Quadratic { target } => target.len(),
            ModelSpec::Logistic { dim, classes } => classes * (dim + 1),
        }
    }

    fn feature_dim(&self) -> usize {
        match self {
            ModelSpec::Quadratic { target } => target.len(),
            ModelSpec::Logistic { dim, .. } => *dim,
        }
    }

    fn check(&self, w: &[f64], data: &Dataset) -> Result<(), FlError> {
        if w.len() != self.dimension() {
            return Err(FlError::DimensionMismatch {
                expected: self.dimension(),
                got: w.len(),
            });
        }
        if data.dim() != self.feature_dim() {
            return Err(FlError::DimensionMismatch {
                expected: self.feature_dim(),
                got: data.dim(),
            });
        }
        if let ModelSpec::Logistic { classes, .. } = self {
            if let Some((row, &label)) = data.labels.iter().enumerate().find(|(_, &y)| y >= *classes) {
                return Err(FlError::LabelOutOfRange {
                    row,
                    label,
                    classes: *classes,
                });
            }
        }
        Ok(())
    }
}

/// Class scores `W x + b`.
fn logits(w: &[f64], x: &[f64], dim: usize, classes: usize) -> Vec<f64> {
    (0..classes)
        .map(|c| {
            let row = &w[c * dim..(c + 1) * dim];
            row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[classes * dim + c]
        })
        .collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean training loss over `rows` of `data`.
pub fn loss_on(w: &[f64], data: &Dataset, rows: std::ops::Range<usize>, spec: &ModelSpec) -> f64 {
    let n = rows.len() as f64;
    match spec {
        ModelSpec::Quadratic { .. } => {
            rows.map(|i| 0.5 * sq_dist(w, &data.features[i])).sum::<f64>() / n
        }
        ModelSpec::Logistic { dim, classes } => {
            rows.map(|i| {
                let z = logits(w, &data.features[i], *dim, *classes);
                log_sum_exp(&z) - z[data.labels[i]]
            })
            .sum::<f64>()
                / n
        }
    }
}

/// Gradient of [`loss_on`] with respect to `w`.
pub fn gradient_on(
    w: &[f64],
    data: &Dataset,
    rows: std::ops::Range<usize>,
    spec: &ModelSpec,
) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut g = vec![0.0; w.len()];
    match spec {
        ModelSpec::Quadratic { .. } => {
            for i in rows {
                for (gk, (wk, xk)) in g.iter_mut().zip(w.iter().zip(&data.features[i])) {
                    *gk += wk - xk;
                }
            }
        }
        ModelSpec::Logistic { dim, classes } => {
            let (dim, classes) = (*dim, *classes);
            for i in rows {
                let x = &data.features[i];
                let p = softmax(&logits(w, x, dim, classes));
                for c in 0..classes {
                    let err = p[c] - if data.labels[i] == c { 1.0 } else { 0.0 };
                    for (gk, xk) in g[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                        *gk += err * xk;
                    }
                    g[classes * dim + c] += err;
                }
            }
        }
    }
    for gk in &mut g {
        *gk /= n;
    }
    g
}

/// Mean training loss over the whole dataset.
pub fn loss(w: &[f64], data: &Dataset, spec: &ModelSpec) -> Result<f64, FlError> {
    spec.check(w, data)?;
    Ok(loss_on(w, data, 0..data.len(), spec))
}

/// Full-dataset gradient of [`loss`].
pub fn gradient(w: &[f64], data: &Dataset, spec: &ModelSpec) -> Result<Vec<f64>, FlError> {
    spec.check(w, data)?;
    Ok(gradient_on(w, data, 0..data.len(), spec))
}

/// One local training step from `w_global`.
///
/// `Quadratic` takes a single full-batch step. `Logistic` makes one pass of mini-batch SGD
/// over the dataset in stored order, with batches of `batch_size` rows.
pub fn local_update(
    w_global: &[f64],
    data: &Dataset,
    spec: &ModelSpec,
    lr: f64,
    batch_size: usize,
) -> Result<Vec<f64>, FlError> {
    spec.check(w_global, data)?;
    if batch_size == 0 {
        return Err(FlError::InvalidParameter("batch_size must be positive"));
    }
    let mut w = w_global.to_vec();
    let step = |w: &mut Vec<f64>, rows| {
        let g = gradient_on(w, data, rows, spec);
        for (wk, gk) in w.iter_mut().zip(g) {
            *wk -= lr * gk;
        }
    };
    match spec {
        ModelSpec::Quadratic { .. } => step(&mut w, 0..data.len()),
        ModelSpec::Logistic { .. } => {
            let mut start = 0;
            while start < data.len() {
                let end = (start + batch_size).min(data.len());
                step(&mut w, start..end);
                start = end;
            }
        }
    }
    Ok(w)
}

/// Coordinate-wise mean.
pub fn naive_average(models: &[Vec<f64>]) -> Result<Vec<f64>, FlError> {
    let first = models.first().ok_or(FlError::NoModels)?;
    let m = first.len();
    let mut acc = vec![0.0; m];
    for w in models {
        if w.len() != m {
            return Err(FlError::DimensionMismatch {
                expected: m,
                got: w.len(),
            });
        }
        for (a, x) in acc.iter_mut().zip(w) {
            *a += x;
        }
    }
    let n = models.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Test loss and accuracy.
///
/// For `Quadratic` the loss is `0.5 * |w - target|^2` and accuracy is reported as 0.
pub fn evaluate(w: &[f64], data: &Dataset, spec: &ModelSpec) -> Result<Evaluation, FlError> {
    spec.check(w, data)?;
    match spec {
        ModelSpec::Quadratic { target } => Ok(Evaluation {
            loss: 0.5 * sq_dist(w, target),
            accuracy: 0.0,
        }),
        ModelSpec::Logistic { dim, classes } => {
            let correct = data
                .features
                .iter()
                .zip(&data.labels)
                .filter(|(x, &y)| argmax(&logits(w, x, *dim, *classes)) == y)
                .count();
            Ok(Evaluation {
                loss: loss_on(w, data, 0..data.len(), spec),
                accuracy: correct as f64 / data.len() as f64,
            })
        }
    }
}

fn argmax(z: &[f64]) -> usize {
    // first maximum wins
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Federation {
    pub train: Vec<Dataset>,
    pub test: Dataset,
}

/// Two Gaussian blobs with identity covariance: class 0 centred at the origin, class 1 at
/// `separation` in every coordinate. Labels are drawn uniformly and samples i.i.d.
pub fn make_synthetic(
    seed: u64,
    participants: usize,
    per_participant: usize,
    dim: usize,
    separation: f64,
    test_size: usize,
) -> Result<Federation, FlError> {
    if participants == 0 || per_participant == 0 || dim == 0 || test_size == 0 {
        return Err(FlError::InvalidParameter("sizes must be positive"));
    }
    if !(separation.is_finite() && separation > 0.0) {
        return Err(FlError::InvalidParameter("separation must be positive"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut draw = |n: usize, owner: usize| {
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let y = rng.random_range(0..2usize);
            let x: Vec<f64> = (0..dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    y as f64 * separation + z
                })
                .collect();
            xs.push(x);
            ys.push(y);
        }
        Dataset::new(xs, ys, owner)
    };
    let train = (0..participants)
        .map(|i| draw(per_participant, i))
        .collect::<Result<Vec<_>, _>>()?;
    let test = draw(test_size, usize::MAX)?;
    Ok(Federation { train, test })
}

/// Samples `x = target + noise * z` for the quadratic task; labels are all 0.
pub fn make_quadratic(
    seed: u64,
    participants: usize,
    per_participant: usize,
    target: &[f64],
    noise: f64,
) -> Result<Federation, FlError> {
    if participants == 0 || per_participant == 0 || target.is_empty() {
        return Err(FlError::InvalidParameter("sizes must be positive"));
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(FlError::InvalidParameter("noise must be non-negative"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut draw = |n: usize, owner: usize| {
        let xs = (0..n)
            .map(|_| {
                target
                    .iter()
                    .map(|t| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        t + noise * z
                    })
                    .collect()
            })
            .collect();
        Dataset::new(xs, vec![0; n], owner)
    };
    let train = (0..participants)
        .map(|i| draw(per_participant, i))
        .collect::<Result<Vec<_>, _>>()?;
    let test = draw(1, usize::MAX)?;
    Ok(Federation { train, test })
}

/// Reads a CSV with header `f0,...,f{d-1},label`.
pub fn load_csv(path: &Path, owner: usize) -> Result<Dataset, FlError> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let d = header.len().saturating_sub(1);
    let expected = (0..d).map(|i| format!("f{i}")).chain(["label".to_owned()]);
    if d == 0 || !header.iter().cloned().eq(expected) {
        return Err(FlError::BadHeader(header));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for record in reader.records() {
        let record = record?;
        let bad = |what: &str| FlError::BadRow {
            line: record.position().map_or(0, |p| p.line()),
            what: what.to_owned(),
        };
        let row = (0..d)
            .map(|i| record[i].trim().parse::<f64>().map_err(|_| bad(&record[i])))
            .collect::<Result<Vec<_>, _>>()?;
        let label = record[d].trim().parse::<usize>().map_err(|_| bad(&record[d]))?;
        xs.push(row);
        ys.push(label);
    }
    Dataset::new(xs, ys, owner)
}

/// Deals the rows of `data` round-robin after a seeded shuffle.
pub fn split_iid(data: &Dataset, parts: usize, seed: u64) -> Result<Vec<Dataset>, FlError> {
    if parts == 0 || data.len() < parts {
        return Err(FlError::InvalidParameter("need at least one row per part"));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for i in (1..idx.len()).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    (0..parts)
        .map(|p| {
            let rows: Vec<usize> = idx.iter().skip(p).step_by(parts).copied().collect();
            Dataset::new(
                rows.iter().map(|&r| data.features[r].clone()).collect(),
                rows.iter().map(|&r| data.labels[r]).collect(),
                p,
            )
        })
        .collect()
}
