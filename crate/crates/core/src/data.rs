//! Datasets, non-iid Dirichlet partitioning and per-client train/validation
//! splits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Batch, NnError};
use crate::rng::{self, Purpose};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("degenerate dataset: {0}")]
    Degenerate(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("no partition gave every client at least {min} samples after {attempts} attempts")]
    RetriesExhausted { attempts: usize, min: usize },
    #[error("shard of {0} samples is too small to split")]
    ShardTooSmall(usize),
    #[error("malformed IDX file: {0}")]
    Idx(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Partition draws before giving up.
pub const MAX_PARTITION_ATTEMPTS: usize = 200;

/// Feature matrix (row-major) with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(DataError::Degenerate(format!("{classes} classes")));
        }
        if labels.len() < classes {
            return Err(DataError::Degenerate(format!(
                "{} samples for {classes} classes",
                labels.len()
            )));
        }
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(DataError::Degenerate(format!(
                "{} features for {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        let mut seen = vec![false; classes];
        for &y in &labels {
            if y >= classes {
                return Err(DataError::Degenerate(format!("label {y} >= {classes}")));
            }
            seen[y] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(DataError::Degenerate(format!("class {c} has no samples")));
        }
        Ok(Self {
            dim,
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
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows `idx` as a batch.
    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        let mut inputs = Vec::with_capacity(idx.len() * self.dim);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Ok(Batch::new(inputs, self.dim, labels)?)
    }

    pub fn class_histogram(&self, idx: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &i in idx {
            h[self.labels[i]] += 1;
        }
        h
    }
}

/// Gaussian blobs: class `c` is `N(s * u_c, I)` with `u_c` a random unit
/// direction.
pub fn gen_synthetic(
    classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 || dim < 2 || per_class < 10 {
        return Err(DataError::Degenerate(format!(
            "need classes >= 2, dim >= 2, per_class >= 10; got {classes}, {dim}, {per_class}"
        )));
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(DataError::InvalidParameter(format!("separation {separation}")));
    }
    let mut stream = rng::stream(seed, Purpose::Synthetic, &[]);
    let mut features = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let mut dir: Vec<f64> = (0..dim).map(|_| stream.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut dir {
            *v *= separation / norm;
        }
        for _ in 0..per_class {
            for &m in &dir {
                let noise: f64 = stream.sample(StandardNormal);
                features.push(m + noise);
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(features, dim, labels, classes)
}

/// Sample indices of each client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub alpha: f64,
    pub seed: u64,
    pub clients: Vec<Vec<usize>>,
}

fn dirichlet(stream: &mut rng::Stream, alpha: f64, n: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(stream)).collect();
        let total: f64 = draws.iter().sum();
        // Tiny alphas can underflow every draw to zero.
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

/// Per class, draw proportions `q ~ Dirichlet(alpha * 1_N)` and send each of
/// the class's samples to a client drawn from `q`. Draws where some client
/// ends up with fewer than `2 * classes` samples are rejected and redrawn.
pub fn dirichlet_partition(
    labels: &[usize],
    classes: usize,
    alpha: f64,
    clients: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    if clients < 2 {
        return Err(DataError::InvalidParameter(format!("{clients} clients")));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(DataError::InvalidParameter(format!("alpha {alpha}")));
    }
    let min = 2 * classes;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for attempt in 0..MAX_PARTITION_ATTEMPTS {
        let mut stream = rng::stream(seed, Purpose::Partition, &[attempt as u64]);
        let mut plan = vec![Vec::new(); clients];
        for members in &by_class {
            if members.is_empty() {
                continue;
            }
            let q = dirichlet(&mut stream, alpha, clients);
            let pick = WeightedIndex::new(&q).expect("normalized proportions");
            for &i in members {
                plan[pick.sample(&mut stream)].push(i);
            }
        }
        if plan.iter().all(|p| p.len() >= min) {
            for p in &mut plan {
                p.sort_unstable();
            }
            return Ok(PartitionPlan {
                alpha,
                seed,
                clients: plan,
            });
        }
    }
    Err(DataError::RetriesExhausted {
        attempts: MAX_PARTITION_ATTEMPTS,
        min,
    })
}

/// Stratified split of one client's samples into `round(lambda * n)` training
/// and the rest validation samples. Both sides keep at least one sample.
pub fn train_test_split(
    entry: &[usize],
    labels: &[usize],
    lambda: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(DataError::InvalidParameter(format!("lambda {lambda}")));
    }
    let n = entry.len();
    if n < 2 {
        return Err(DataError::ShardTooSmall(n));
    }
    let n_train = ((lambda * n as f64 + 0.5).floor() as usize).clamp(1, n - 1);

    let mut stream = rng::stream(seed, Purpose::Split, &[]);
    let classes = entry.iter().map(|&i| labels[i]).max().unwrap() + 1;
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for &i in entry {
        groups[labels[i]].push(i);
    }
    // Largest-remainder allocation of the training quota across classes.
    let exact: Vec<f64> = groups
        .iter()
        .map(|g| n_train as f64 * g.len() as f64 / n as f64)
        .collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut short = n_train - quota.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..classes).filter(|&c| !groups[c].is_empty()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &c in order.iter().cycle() {
        if short == 0 {
            break;
        }
        if quota[c] < groups[c].len() {
            quota[c] += 1;
            short -= 1;
        }
    }

    let mut train = Vec::with_capacity(n_train);
    let mut val = Vec::with_capacity(n - n_train);
    for (group, &q) in groups.iter_mut().zip(&quota) {
        group.shuffle(&mut stream);
        train.extend_from_slice(&group[..q]);
        val.extend_from_slice(&group[q..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| DataError::Idx(format!("truncated header at byte {at}")))
}

/// Parse an IDX3 image file into `(rows, features per row, values in [0, 1])`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES {
        return Err(DataError::Idx(format!("image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let dim = rows * cols;
    let body = &bytes[16..];
    if body.len() != n * dim {
        return Err(DataError::Idx(format!(
            "expected {} pixel bytes, found {}",
            n * dim,
            body.len()
        )));
    }
    Ok((n, dim, body.iter().map(|&b| b as f64 / 255.0).collect()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS {
        return Err(DataError::Idx(format!("label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(DataError::Idx(format!(
            "expected {n} labels, found {}",
            body.len()
        )));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Load an MNIST-style image/label pair.
pub fn load_idx(images: &Path, labels: &Path) -> Result<LabeledDataset> {
    let (n, dim, features) = parse_idx_images(&std::fs::read(images)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels)?)?;
    if labels.len() != n {
        return Err(DataError::Idx(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new(features, dim, labels, classes)
}
