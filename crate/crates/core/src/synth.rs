//! Synthetic blob data with known part structure.
//!
//! Tokens sit on a square grid. Each sample holds `k` non-overlapping
//! rectangular blobs over a background; every group (background and each
//! blob slot) has a fixed unit direction, and a token is its group's
//! direction plus small Gaussian noise. Directions are mutually orthogonal,
//! so within-group cosines are near 1 and cross-group cosines near 0.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{part_metrics, LabelGrid, IGNORE};
use crate::model::{model_forward, Image, ModelConfig, ModelInput, ModelWeights};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tree::{aggregate_masks, partition_subtrees, tree_from_mask};

/// Adam learning rate for blob counting.
pub const TOY_LR: f64 = 1e-3;
/// Seed of the default blob training set.
pub const TOY_DATA_SEED: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobConfig {
    /// Tokens per grid side.
    pub grid: usize,
    pub channels: usize,
    /// Blob extent in tokens (square).
    pub blob_side: usize,
    /// Number of distinct blob slots.
    pub slots: usize,
    /// Per-coordinate noise standard deviation.
    pub noise: f64,
    /// Seed of the group directions.
    pub direction_seed: u64,
    /// Lower bound on cosine similarity inside a group.
    pub min_within_cosine: f64,
    /// Upper bound on cosine similarity across groups.
    pub max_cross_cosine: f64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self {
            grid: 8,
            channels: 32,
            blob_side: 3,
            slots: 3,
            noise: 0.02,
            direction_seed: 17,
            min_within_cosine: 0.95,
            max_cross_cosine: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlobSample<T> {
    pub tokens: Tensor<T>,
    /// Blob index (0-based, in placement order) per token; background is ignored.
    pub parts: LabelGrid,
    /// Group direction slot per token; background is `slots`.
    pub groups: Vec<usize>,
    pub count: usize,
}

impl BlobConfig {
    /// Default blobs on the model's token grid and width.
    pub fn for_model(cfg: &ModelConfig) -> Result<Self> {
        let n = cfg.num_tokens();
        let grid = (n as f64).sqrt().round() as usize;
        if grid * grid != n {
            return Err(Error::Config(format!("{n} tokens do not form a square grid")));
        }
        Ok(Self {
            grid,
            channels: cfg.channels,
            ..Self::default()
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.grid * self.grid
    }

    /// Orthonormal directions: one per blob slot, the last for the background.
    pub fn directions(&self) -> Result<Vec<Vec<f64>>> {
        let groups = self.slots + 1;
        if groups > self.channels {
            return Err(Error::Config(format!(
                "{groups} orthogonal directions need at least as many channels, got {}",
                self.channels
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.direction_seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(groups);
        while dirs.len() < groups {
            let mut v: Vec<f64> = (0..self.channels).map(|_| normal.sample(&mut rng)).collect();
            for d in &dirs {
                let dot: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(d).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                dirs.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        Ok(dirs)
    }

    /// One sample with `count` blobs. Noise is redrawn until the cosine bounds hold.
    pub fn sample<T: Scalar, R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<BlobSample<T>> {
        let positions = self.place(count, rng)?;
        let dirs = self.directions()?;
        let slots: Vec<usize> = sample(rng, self.slots, count).into_vec();
        let n = self.num_tokens();
        let mut groups = vec![self.slots; n];
        let mut parts = vec![IGNORE; n];
        for (b, &(y0, x0)) in positions.iter().enumerate() {
            for y in y0..y0 + self.blob_side {
                for x in x0..x0 + self.blob_side {
                    groups[y * self.grid + x] = slots[b];
                    parts[y * self.grid + x] = b as i64;
                }
            }
        }
        let normal = Normal::new(0.0, self.noise).map_err(|e| Error::Config(e.to_string()))?;
        for _ in 0..1000 {
            let rows: Vec<Vec<f64>> = groups
                .iter()
                .map(|&g| dirs[g].iter().map(|d| d + normal.sample(rng)).collect())
                .collect();
            if self.bounds_hold(&rows, &groups) {
                let data = rows.into_iter().flatten().map(T::from_f64_lossy).collect();
                return Ok(BlobSample {
                    tokens: Tensor::new([n, self.channels], data)?,
                    parts: LabelGrid::new(self.grid, self.grid, parts)?,
                    groups,
                    count,
                });
            }
        }
        Err(Error::Config("noise too large for the cosine bounds".into()))
    }

    fn bounds_hold(&self, rows: &[Vec<f64>], groups: &[usize]) -> bool {
        let unit: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let n = r.iter().map(|a| a * a).sum::<f64>().sqrt();
                r.iter().map(|a| a / n).collect()
            })
            .collect();
        for i in 0..unit.len() {
            for j in i + 1..unit.len() {
                let cos: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
                let ok = if groups[i] == groups[j] {
                    cos >= self.min_within_cosine
                } else {
                    cos <= self.max_cross_cosine
                };
                if !ok {
                    return false;
                }
            }
        }
        true
    }

    /// Top-left corners of `count` blobs that neither overlap nor touch.
    fn place<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
        if count > self.slots || self.blob_side == 0 || self.blob_side > self.grid {
            return Err(Error::Config(format!(
                "{count} blobs of side {} on a {} grid with {} slots",
                self.blob_side, self.grid, self.slots
            )));
        }
        let span = self.grid - self.blob_side + 1;
        'attempt: for _ in 0..10_000 {
            let mut placed: Vec<(usize, usize)> = Vec::with_capacity(count);
            for _ in 0..count {
                let (y, x) = (rng.random_range(0..span), rng.random_range(0..span));
                let s = self.blob_side;
                let clash = placed
                    .iter()
                    .any(|&(py, px)| y < py + s + 1 && py < y + s + 1 && x < px + s + 1 && px < x + s + 1);
                if clash {
                    continue 'attempt;
                }
                placed.push((y, x));
            }
            return Ok(placed);
        }
        Err(Error::Config("blobs do not fit on the grid".into()))
    }

    /// `n` samples alternating between 2 and 3 blobs; the label is `count - 2`.
    pub fn dataset<T: Scalar>(&self, n: usize, seed: u64) -> Result<Vec<BlobSample<T>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|i| self.sample(2 + i % 2, &mut rng)).collect()
    }
}

/// Token inputs with their count class.
pub fn labelled<T: Scalar>(samples: &[BlobSample<T>]) -> Vec<(ModelInput<T>, usize)> {
    samples
        .iter()
        .map(|s| (ModelInput::Tokens(s.tokens.clone()), s.count - 2))
        .collect()
}

/// Mean mIoU of subtree parts, cut from the tree of the averaged mask,
/// against the blob labels.
pub fn part_recovery<T: Scalar>(
    samples: &[BlobSample<T>],
    cfg: &ModelConfig,
    w: &ModelWeights<T>,
    min_size: f64,
    max_depth: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Usage("no samples to score".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let out = model_forward(&ModelInput::Tokens(s.tokens.clone()), cfg, w)?;
        let mask = aggregate_masks(&out.states, Some(&out.ledger))?;
        let mut tree = tree_from_mask(&mask)?;
        partition_subtrees(&mut tree, min_size, max_depth)?;
        let pred = LabelGrid::new(s.parts.width, s.parts.height, tree.subtree.iter().map(|&p| p as i64).collect())?;
        total += part_metrics(&pred, &s.parts)?.miou.unwrap_or(0.0);
    }
    Ok(total / samples.len() as f64)
}

/// A gray image with `count` pure red, green or blue squares, lightly noised.
/// Also returns the per-pixel blob label (background ignored).
pub fn blob_image<R: Rng + ?Sized>(
    size: usize,
    square: usize,
    count: usize,
    noise: f64,
    rng: &mut R,
) -> Result<(Image, LabelGrid)> {
    let cfg = BlobConfig {
        grid: size,
        blob_side: square,
        slots: 3,
        ..BlobConfig::default()
    };
    let corners = cfg.place(count, rng)?;
    let colours: Vec<usize> = sample(rng, 3, count).into_vec();
    let normal = Normal::new(0.0, noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut img = Image::zeros(size, size);
    let mut labels = vec![IGNORE; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut px = [0.5f64; 3];
            for (b, &(y0, x0)) in corners.iter().enumerate() {
                if (y0..y0 + square).contains(&y) && (x0..x0 + square).contains(&x) {
                    px = [0.0; 3];
                    px[colours[b]] = 1.0;
                    labels[y * size + x] = b as i64;
                }
            }
            for ch in 0..3 {
                img.data[(y * size + x) * 3 + ch] = (px[ch] + normal.sample(rng)).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok((img, LabelGrid::new(size, size, labels)?))
}
