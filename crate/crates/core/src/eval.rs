//! Unsupervised evaluation: matched part metrics, a k-means baseline,
//! normalized-cut saliency and saliency metrics.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tree::row_mass;

/// Label value for cells excluded from evaluation.
pub const IGNORE: i64 = -1;
pub const DEFAULT_BETA2: f64 = 0.3;
pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_TAU_AFFINITY: f64 = 0.2;
/// Affinity given to token pairs below the cosine threshold.
pub const WEAK_AFFINITY: f64 = 1e-5;
pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_TOL: f64 = 1e-6;
pub const NCUT_MAX_ITERS: usize = 10_000;
pub const NCUT_RESIDUAL: f64 = 1e-8;

/// Integer labels on a patch grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelGrid {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<i64>,
}

impl LabelGrid {
    pub fn new(width: usize, height: usize, labels: Vec<i64>) -> Result<Self> {
        let g = Self { width, height, labels };
        g.validate()?;
        Ok(g)
    }

    /// Square grid when `labels.len()` is a perfect square, a single row otherwise.
    pub fn from_tokens(labels: Vec<i64>) -> Self {
        let n = labels.len();
        let side = (n as f64).sqrt().round() as usize;
        let (width, height) = if side * side == n { (side, side) } else { (n, 1) };
        Self { width, height, labels }
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.width * self.height {
            return Err(Error::shape(format!(
                "{}×{} grid with {} labels",
                self.width,
                self.height,
                self.labels.len()
            )));
        }
        if let Some(v) = self.labels.iter().find(|&&v| v < IGNORE) {
            return Err(Error::Config(format!("label {v} is neither -1 nor non-negative")));
        }
        Ok(())
    }

    /// Shrinks by an integer factor, each cell taking the most frequent label
    /// of its block (ties to the smaller label).
    pub fn downsample_majority(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "{}×{} grid does not shrink by {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut labels = Vec::with_capacity(w * h);
        for by in 0..h {
            for bx in 0..w {
                let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
                for y in by * factor..(by + 1) * factor {
                    for x in bx * factor..(bx + 1) * factor {
                        *counts.entry(self.labels[y * self.width + x]).or_default() += 1;
                    }
                }
                let best = counts.iter().fold((IGNORE, 0), |acc, (&l, &c)| if c > acc.1 { (l, c) } else { acc });
                labels.push(best.0);
            }
        }
        Ok(Self { width: w, height: h, labels })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "mIoU", skip_serializing_if = "Option::is_none", default)]
    pub miou: Option<f64>,
    #[serde(rename = "mAcc", skip_serializing_if = "Option::is_none", default)]
    pub macc: Option<f64>,
    #[serde(rename = "maxF", skip_serializing_if = "Option::is_none", default)]
    pub max_f: Option<f64>,
    #[serde(rename = "IoU", skip_serializing_if = "Option::is_none", default)]
    pub iou: Option<f64>,
    #[serde(rename = "Acc", skip_serializing_if = "Option::is_none", default)]
    pub acc: Option<f64>,
    /// Matched `(predicted, ground truth)` label pairs.
    #[serde(default)]
    pub matching: Vec<(i64, i64)>,
}

/// Maximum-score one-to-one assignment between rows and columns.
///
/// Rectangular inputs are padded with zero-score dummies; the result holds
/// `min(P, G)` real `(row, column)` pairs sorted by row. Among equal totals
/// the solver's scan order decides.
pub fn hungarian_match(score: &[Vec<f64>]) -> Result<Vec<(usize, usize)>> {
    let p = score.len();
    let g = score.first().map_or(0, Vec::len);
    if score.iter().any(|r| r.len() != g) {
        return Err(Error::shape("ragged score matrix"));
    }
    if score.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite matching score".into()));
    }
    if p == 0 || g == 0 {
        return Ok(Vec::new());
    }
    let n = p.max(g);
    let cost = |i: usize, j: usize| if i < p && j < g { -score[i][j] } else { 0.0 };
    // Potentials over 1-based rows/columns, column 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter(|&j| row_of[j] != 0)
        .map(|j| (row_of[j] - 1, j - 1))
        .filter(|&(i, j)| i < p && j < g)
        .collect();
    pairs.sort_unstable();
    Ok(pairs)
}

fn distinct_labels(labels: impl Iterator<Item = i64>) -> Vec<i64> {
    let mut v: Vec<i64> = labels.filter(|&l| l != IGNORE).collect();
    v.sort_unstable();
    v.dedup();
    v
}

const ACC_TIE_WEIGHT: f64 = 1e-9;

/// Part mIoU/mAcc after Hungarian matching on IoU. Averages run over the
/// ground-truth parts; unmatched ones count as zero. Cells whose ground truth
/// is ignored are left out.
pub fn part_metrics(pred: &LabelGrid, gt: &LabelGrid) -> Result<MetricReport> {
    pred.validate()?;
    gt.validate()?;
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::shape(format!(
            "prediction {}×{} vs ground truth {}×{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let cells: Vec<(i64, i64)> = pred
        .labels
        .iter()
        .zip(&gt.labels)
        .filter(|(_, &g)| g != IGNORE)
        .map(|(&p, &g)| (p, g))
        .collect();
    let gt_ids = distinct_labels(cells.iter().map(|c| c.1));
    if gt_ids.is_empty() {
        return Ok(MetricReport::default());
    }
    let pred_ids = distinct_labels(cells.iter().map(|c| c.0));
    let pi = |l: i64| pred_ids.binary_search(&l).ok();
    let gi = |l: i64| gt_ids.binary_search(&l).expect("gt label");
    let mut inter = vec![vec![0usize; gt_ids.len()]; pred_ids.len()];
    let mut pred_size = vec![0usize; pred_ids.len()];
    let mut gt_size = vec![0usize; gt_ids.len()];
    for &(p, g) in &cells {
        gt_size[gi(g)] += 1;
        if let Some(a) = pi(p) {
            pred_size[a] += 1;
            inter[a][gi(g)] += 1;
        }
    }
    let iou: Vec<Vec<f64>> = (0..pred_ids.len())
        .map(|a| {
            (0..gt_ids.len())
                .map(|b| inter[a][b] as f64 / (pred_size[a] + gt_size[b] - inter[a][b]) as f64)
                .collect()
        })
        .collect();
    // Accuracy breaks ties between matchings of equal total IoU.
    let score: Vec<Vec<f64>> = (0..pred_ids.len())
        .map(|a| {
            (0..gt_ids.len())
                .map(|b| iou[a][b] + ACC_TIE_WEIGHT * inter[a][b] as f64 / gt_size[b] as f64)
                .collect()
        })
        .collect();
    let pairs = hungarian_match(&score)?;
    let g = gt_ids.len() as f64;
    let miou = pairs.iter().map(|&(a, b)| iou[a][b]).sum::<f64>() / g;
    let macc = pairs
        .iter()
        .map(|&(a, b)| inter[a][b] as f64 / gt_size[b] as f64)
        .sum::<f64>()
        / g;
    Ok(MetricReport {
        miou: Some(miou),
        macc: Some(macc),
        matching: pairs.iter().map(|&(a, b)| (pred_ids[a], gt_ids[b])).collect(),
        ..MetricReport::default()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// Cluster per token, numbered densely after empty clusters are dropped.
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after each assignment step.
    pub inertia: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn kmeans<T: Scalar>(tokens: &Tensor<T>, k: usize, seed: u64) -> Result<KMeans> {
    if tokens.rank() != 2 {
        return Err(Error::shape(format!("tokens {:?}", tokens.dims())));
    }
    let n = tokens.rows();
    if k == 0 || k > n {
        return Err(Error::Usage(format!("k = {k} clusters for {n} tokens")));
    }
    let pts: Vec<Vec<f64>> = (0..n)
        .map(|i| tokens.row(i).iter().map(|v| v.to_f64_lossless()).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![pts[rng.random_range(0..n)].clone()];
    while centroids.len() < k {
        let d: Vec<f64> = pts.iter().map(|p| nearest(p, &centroids).1).collect();
        let total: f64 = d.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut r = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &di) in d.iter().enumerate() {
            if di > 0.0 && r < di {
                pick = i;
                break;
            }
            r -= di;
        }
        if d[pick] == 0.0 {
            pick = d.iter().rposition(|&v| v > 0.0).expect("positive total");
        }
        centroids.push(pts[pick].clone());
    }

    let mut labels = vec![0; n];
    let mut inertia = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        let mut total = 0.0;
        for (i, p) in pts.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            labels[i] = c;
            total += d;
        }
        inertia.push(total);
        let dim = pts[0].len();
        let mut sums = vec![vec![0.0; dim]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (p, &l) in pts.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        let mut next = Vec::with_capacity(centroids.len());
        let mut remap = vec![usize::MAX; centroids.len()];
        for (c, (s, &cnt)) in sums.into_iter().zip(&counts).enumerate() {
            if cnt == 0 {
                continue;
            }
            let m: Vec<f64> = s.into_iter().map(|v| v / cnt as f64).collect();
            shift = shift.max(sq_dist(&m, &centroids[c]).sqrt());
            remap[c] = next.len();
            next.push(m);
        }
        for l in labels.iter_mut() {
            *l = remap[*l];
        }
        centroids = next;
        if shift < KMEANS_TOL {
            break;
        }
    }
    Ok(KMeans {
        labels,
        centroids,
        inertia,
    })
}

/// k-means clusters of the tokens as a part grid.
pub fn kmeans_parts<T: Scalar>(tokens: &Tensor<T>, k: usize, seed: u64) -> Result<LabelGrid> {
    let km = kmeans(tokens, k, seed)?;
    Ok(LabelGrid::from_tokens(km.labels.into_iter().map(|l| l as i64).collect()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NcutResult {
    /// Second generalized eigenvector of `(D - W, D)`, unit norm.
    pub fiedler: Vec<f64>,
    pub eigenvalue: f64,
    pub iterations: usize,
    pub foreground: Vec<bool>,
}

impl NcutResult {
    pub fn grid(&self) -> LabelGrid {
        LabelGrid::from_tokens(self.foreground.iter().map(|&f| f as i64).collect())
    }
}

/// Token affinity: 1 for cosine at least `tau_aff`, a small constant
/// otherwise, plus `alpha` times the symmetrized dependency mask.
pub fn ncut_affinity<T: Scalar>(tokens: &Tensor<T>, dep_mask: &Tensor<T>, alpha: f64, tau_aff: f64) -> Result<DMatrix<f64>> {
    if tokens.rank() != 2 {
        return Err(Error::shape(format!("tokens {:?}", tokens.dims())));
    }
    let n = tokens.rows();
    if dep_mask.dims() != [n, n] {
        return Err(Error::shape(format!("mask {:?} for {n} tokens", dep_mask.dims())));
    }
    let unit: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let r: Vec<f64> = tokens.row(i).iter().map(|v| v.to_f64_lossless()).collect();
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.into_iter().map(|v| if norm > 0.0 { v / norm } else { 0.0 }).collect()
        })
        .collect();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let cos: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
        let base = if cos >= tau_aff { 1.0 } else { WEAK_AFFINITY };
        let sym = 0.5 * (dep_mask.get2(i, j) + dep_mask.get2(j, i)).to_f64_lossless();
        base + alpha * sym
    }))
}

/// Second-smallest generalized eigenvector of `(D - W, D)` by inverse
/// iteration on the deflated normalized Laplacian. Returns the unit-norm
/// vector, its eigenvalue and the iteration count.
pub fn fiedler_vector(w: &DMatrix<f64>) -> Result<(Vec<f64>, f64, usize)> {
    let n = w.nrows();
    if n < 2 || w.ncols() != n {
        return Err(Error::shape(format!("affinity {}×{}", w.nrows(), w.ncols())));
    }
    let deg: Vec<f64> = (0..n).map(|i| w.row(i).sum()).collect();
    if deg.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
        return Err(Error::Numeric("affinity has a non-positive degree".into()));
    }
    let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
    let lsym = DMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - inv_sqrt[i] * w[(i, j)] * inv_sqrt[j]
    });
    let total: f64 = deg.iter().sum();
    let z0 = DVector::from_iterator(n, deg.iter().map(|d| (d / total).sqrt()));
    // The trivial eigenvector moves to eigenvalue 3, beyond the spectrum's bound of 2.
    let shifted = &lsym + (&z0 * z0.transpose()) * 3.0;
    let chol = shifted
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("deflated Laplacian is not positive definite".into()))?;
    let mut z = DVector::from_fn(n, |i, _| if i % 2 == 0 { 1.0 } else { -0.5 } + i as f64 / n as f64);
    z -= &z0 * z0.dot(&z);
    z.normalize_mut();
    for it in 1..=NCUT_MAX_ITERS {
        let mut next = chol.solve(&z);
        next -= &z0 * z0.dot(&next);
        let norm = next.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Numeric("inverse iteration collapsed".into()));
        }
        z = next / norm;
        let lz = &lsym * &z;
        let lambda = z.dot(&lz);
        if (lz - &z * lambda).norm() < NCUT_RESIDUAL {
            let mut y: Vec<f64> = (0..n).map(|i| z[i] * inv_sqrt[i]).collect();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            y.iter_mut().for_each(|v| *v /= ny);
            return Ok((y, lambda, it));
        }
    }
    Err(Error::Numeric(format!(
        "inverse iteration did not converge in {NCUT_MAX_ITERS} steps"
    )))
}

/// Normalized-cut foreground: split the Fiedler vector at its mean and keep
/// the side holding the token that receives the most dependency mass. If all
/// tokens receive the same mass, the side holding the most extreme entry wins.
pub fn ncut_saliency<T: Scalar>(tokens: &Tensor<T>, dep_mask: &Tensor<T>, alpha: f64, tau_aff: f64) -> Result<NcutResult> {
    let w = ncut_affinity(tokens, dep_mask, alpha, tau_aff)?;
    let (y, eigenvalue, iterations) = fiedler_vector(&w)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let side: Vec<bool> = y.iter().map(|&v| v > mean).collect();
    let mass = row_mass(dep_mask)?;
    let hi = mass.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = mass.iter().cloned().fold(f64::INFINITY, f64::min);
    let anchor = if hi > lo {
        mass.iter().position(|&m| m == hi).expect("max exists")
    } else {
        let mut best = 0;
        for i in 1..y.len() {
            if (y[i] - mean).abs() > (y[best] - mean).abs() {
                best = i;
            }
        }
        best
    };
    let foreground = side.iter().map(|&s| s == side[anchor]).collect();
    Ok(NcutResult {
        fiedler: y,
        eigenvalue,
        iterations,
        foreground,
    })
}

/// maxF over thresholds `k/100`, plus IoU and accuracy at 0.5.
///
/// A cell is predicted positive when `pred >= t`. Precision (recall) with no
/// predicted (actual) positives is taken as 1.
pub fn saliency_metrics(pred: &[f64], gt: &[bool], beta2: f64) -> Result<MetricReport> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape(format!("{} predictions for {} labels", pred.len(), gt.len())));
    }
    if !(beta2 > 0.0) {
        return Err(Error::Config(format!("beta2 {beta2} must be positive")));
    }
    let counts = |t: f64| {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (&p, &g) in pred.iter().zip(gt) {
            match (p >= t, g) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        (tp, fp, fneg)
    };
    let mut max_f: f64 = 0.0;
    for k in 0..=100 {
        let (tp, fp, fneg) = counts(k as f64 / 100.0);
        let p = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        let r = if tp + fneg == 0 { 1.0 } else { tp as f64 / (tp + fneg) as f64 };
        let f = if p + r == 0.0 { 0.0 } else { (1.0 + beta2) * p * r / (beta2 * p + r) };
        max_f = max_f.max(f);
    }
    let (tp, fp, fneg) = counts(0.5);
    let iou = if tp + fp + fneg == 0 { 1.0 } else { tp as f64 / (tp + fp + fneg) as f64 };
    let acc = (pred.len() - fp - fneg) as f64 / pred.len() as f64;
    Ok(MetricReport {
        max_f: Some(max_f),
        iou: Some(iou),
        acc: Some(acc),
        ..MetricReport::default()
    })
}
