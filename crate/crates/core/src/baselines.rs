//! K-means baselines over the aggregated tensor.
//!
//! The tensor is viewed as `w²` points (one per query location) in `w²`
//! dimensions and clustered with Lloyd's algorithm under squared Euclidean
//! distance, seeded with k-means++.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::aggregator::AggregatedTensor;
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::scalar::Scalar;
use crate::segmenter::SegmentationMask;

/// Paper-style constant cluster count for the K-Means-C baseline.
pub const CONSTANT_K: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub restarts: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: CONSTANT_K,
            seed: 0,
            max_iters: 300,
            restarts: 1,
        }
    }
}

impl KMeansConfig {
    pub fn with_k(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            ..Self::default()
        }
    }
}

/// Result of one clustering run.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub assignments: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after each assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansFit {
    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }
}

/// Row view over a flat `points × dim` buffer.
struct Points<'a, F> {
    data: &'a [F],
    dim: usize,
}

impl<F: Scalar> Points<'_, F> {
    fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn sq_dist(&self, i: usize, center: &[f64]) -> f64 {
        self.row(i)
            .iter()
            .zip(center)
            .map(|(x, c)| {
                let d = x.widen() - c;
                d * d
            })
            .sum()
    }

    fn distinct(&self) -> usize {
        let set: HashSet<Vec<u64>> = (0..self.len())
            .map(|i| self.row(i).iter().map(|v| v.widen().to_bits()).collect())
            .collect();
        set.len()
    }
}

fn kmeans_pp<F: Scalar>(points: &Points<'_, F>, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let widen = |i: usize| points.row(i).iter().map(|v| v.widen()).collect::<Vec<f64>>();
    let mut centers = vec![widen(rng.random_range(0..n))];
    let mut nearest: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| points.sq_dist(i, &centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut running = 0.0;
            let mut chosen = n - 1;
            for (i, d) in nearest.iter().enumerate() {
                running += d;
                if running > target && *d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let center = widen(pick);
        nearest
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, d)| *d = d.min(points.sq_dist(i, &center)));
        centers.push(center);
    }
    centers
}

fn lloyd<F: Scalar>(
    points: &Points<'_, F>,
    mut centers: Vec<Vec<f64>>,
    max_iters: usize,
) -> KMeansFit {
    let n = points.len();
    let k = centers.len();
    let mut assignments: Vec<usize> = vec![usize::MAX; n];
    let mut inertia_history = Vec::new();
    let mut iterations = 0;
    loop {
        let nearest: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut best = (0usize, f64::INFINITY);
                for (c, center) in centers.iter().enumerate() {
                    let d = points.sq_dist(i, center);
                    if d < best.1 {
                        best = (c, d);
                    }
                }
                best
            })
            .collect();
        inertia_history.push(nearest.iter().map(|b| b.1).sum());
        let changed = nearest
            .iter()
            .zip(&assignments)
            .any(|(b, &a)| b.0 != a);
        for (a, b) in assignments.iter_mut().zip(&nearest) {
            *a = b.0;
        }
        if !changed || iterations >= max_iters {
            break;
        }
        iterations += 1;

        // Fixed-order accumulation keeps centers reproducible.
        let dim = points.dim;
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut sizes = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            sizes[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(points.row(i)) {
                *s += v.widen();
            }
        }
        for c in 0..k {
            // Empty clusters keep their previous center.
            if sizes[c] > 0 {
                let inv = 1.0 / sizes[c] as f64;
                centers[c] = sums[c].iter().map(|s| s * inv).collect();
            }
        }
    }
    KMeansFit {
        assignments,
        centers,
        inertia_history,
        iterations,
    }
}

/// Cluster the rows of a flat `n × dim` buffer. Picks the best of `restarts` runs by inertia.
pub fn kmeans<F: Scalar>(data: &[F], dim: usize, config: &KMeansConfig) -> Result<KMeansFit> {
    if config.k == 0 || config.max_iters == 0 || config.restarts == 0 {
        return Err(Error::InvalidArgument(format!(
            "k-means needs k, max_iters and restarts >= 1, got {config:?}"
        )));
    }
    if dim == 0 || data.is_empty() || !data.len().is_multiple_of(dim) {
        return Err(Error::Shape(format!(
            "{} values do not form rows of dimension {dim}",
            data.len()
        )));
    }
    let points = Points { data, dim };
    let distinct = points.distinct();
    let k = if config.k > distinct {
        log::warn!(
            "k = {} exceeds the {distinct} distinct points; clustering with k = {distinct}",
            config.k
        );
        distinct
    } else {
        config.k
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<KMeansFit> = None;
    for _ in 0..config.restarts {
        let centers = kmeans_pp(&points, k, &mut rng);
        let fit = lloyd(&points, centers, config.max_iters);
        if best.as_ref().is_none_or(|b| fit.inertia() < b.inertia()) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// K-means segmentation of the aggregated tensor, upsampled (nearest) to `out_h × out_w`.
///
/// Cluster ids are compacted by first occurrence like the NMS labels.
pub fn kmeans_segment<F: Scalar>(
    field: &AggregatedTensor<F>,
    config: &KMeansConfig,
    out_h: usize,
    out_w: usize,
) -> Result<SegmentationMask> {
    let fit = kmeans(&field.data, field.map_len(), config)?;
    let w = field.resolution;
    let grid = LabelMap::new(
        w,
        w,
        fit.assignments.iter().map(|&a| a as u32).collect(),
    )?;
    let up = grid.resize_nearest(out_h, out_w);
    SegmentationMask::from_winners(out_h, out_w, up.data)
}
