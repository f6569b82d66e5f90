//! Iterative attention merging.
//!
//! Anchor maps sampled on an even grid are first grown into proposals by
//! averaging every map of the aggregated tensor within symmetric KL distance
//! `tau` of the anchor. Subsequent iterations greedily merge proposals with
//! each other, without replacement, in list order.

use std::collections::HashMap;
use std::hash::{DefaultHasher, Hasher};

use rayon::prelude::*;

use crate::aggregator::AggregatedTensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Entries are clamped to at least this value before taking logarithms.
pub const KL_FLOOR: f64 = 1e-12;

const LANES: usize = 4;
/// Early-exit checks happen once per block; must be a multiple of `LANES`.
const BLOCK: usize = 256;

/// `side × side` evenly spaced query locations on a `resolution²` grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorGrid {
    pub side: usize,
    pub resolution: usize,
    pub points: Vec<(usize, usize)>,
}

/// Centred strides: coordinate `r` maps to `floor((r + 0.5) * resolution / side)`.
pub fn generate_anchor_grid(side: usize, resolution: usize) -> Result<AnchorGrid> {
    if side == 0 || side > resolution {
        return Err(Error::InvalidArgument(format!(
            "anchor grid side must be in 1..={resolution}, got {side}"
        )));
    }
    let axis: Vec<usize> = (0..side)
        .map(|r| ((r as f64 + 0.5) * resolution as f64 / side as f64).floor() as usize)
        .collect();
    let points = axis
        .iter()
        .flat_map(|&i| axis.iter().map(move |&j| (i, j)))
        .collect();
    Ok(AnchorGrid {
        side,
        resolution,
        points,
    })
}

/// An ordered list of `resolution²` probability maps (object proposals).
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalList<F> {
    pub resolution: usize,
    pub maps: Vec<Vec<F>>,
}

impl<F: Scalar> ProposalList<F> {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeConfig {
    /// Merge threshold on the symmetrized KL distance; membership is `D < tau`.
    pub tau: f64,
    /// Total merging iterations, counting the anchor pass.
    pub iterations: usize,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            iterations: 3,
        }
    }
}

impl MergeConfig {
    pub fn new(tau: f64, iterations: usize) -> Result<Self> {
        let config = Self { tau, iterations };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "KL threshold must be positive, got {}",
                self.tau
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument(
                "merging needs at least one iteration".into(),
            ));
        }
        Ok(())
    }

    /// `D < tau` rewritten on the unhalved sum; doubling is exact.
    fn sum_limit(&self) -> f64 {
        2.0 * self.tau
    }
}

/// Clamped copy of a map with its elementwise logs.
struct LogMap {
    values: Vec<f64>,
    logs: Vec<f64>,
}

impl LogMap {
    fn new<F: Scalar>(map: &[F]) -> Self {
        let values: Vec<f64> = map.iter().map(|v| v.widen().max(KL_FLOOR)).collect();
        let logs = values.iter().map(|v| v.ln()).collect();
        Self { values, logs }
    }
}

/// `KL(p‖q) + KL(q‖p) = Σ (p - q)(ln p - ln q)`, accumulated in fixed lanes.
///
/// Every term is non-negative, so the partial sum is monotone and the loop
/// may stop once it reaches `limit`; the returned value is then `>= limit`.
/// With `limit = inf` the full sum is returned, identical to the truncated
/// evaluation whenever that one ran to completion.
#[allow(clippy::needless_range_loop)]
fn sym_kl_sum(p: &LogMap, q: &LogMap, limit: f64) -> f64 {
    let n = p.values.len();
    let mut acc = [0.0f64; LANES];
    let mut start = 0;
    while start < n {
        let end = (start + BLOCK).min(n);
        let pv = &p.values[start..end];
        let pl = &p.logs[start..end];
        let qv = &q.values[start..end];
        let ql = &q.logs[start..end];
        let whole = pv.len() / LANES * LANES;
        for i in (0..whole).step_by(LANES) {
            for lane in 0..LANES {
                let k = i + lane;
                acc[lane] += (pv[k] - qv[k]) * (pl[k] - ql[k]);
            }
        }
        for k in whole..pv.len() {
            acc[k % LANES] += (pv[k] - qv[k]) * (pl[k] - ql[k]);
        }
        start = end;
        let total = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        if total >= limit {
            return total;
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// Symmetrized KL distance `½ (KL(p‖q) + KL(q‖p))` with entries floored at [`KL_FLOOR`].
pub fn kl_distance<F: Scalar>(p: &[F], q: &[F]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "KL distance between maps of {} and {} cells",
            p.len(),
            q.len()
        )));
    }
    Ok(0.5 * sym_kl_sum(&LogMap::new(p), &LogMap::new(q), f64::INFINITY))
}

/// Mean of the selected maps (in the given order), renormalized to unit mass.
fn mean_map<'a, F: Scalar>(maps: impl Iterator<Item = &'a [F]>, len: usize) -> Vec<F> {
    let mut acc = vec![0.0f64; len];
    let mut count = 0usize;
    for m in maps {
        for (a, v) in acc.iter_mut().zip(m) {
            *a += v.widen();
        }
        count += 1;
    }
    let inv = 1.0 / count as f64;
    for a in acc.iter_mut() {
        *a *= inv;
    }
    let total: f64 = acc.iter().sum();
    acc.into_iter().map(|v| F::narrow(v / total)).collect()
}

/// Group the field maps by exact value.
///
/// Returns the first index of every distinct map and, per map, its group.
fn distinct_maps<F: Scalar>(field: &AggregatedTensor<F>) -> (Vec<usize>, Vec<u32>) {
    let digests: Vec<u64> = (0..field.num_maps())
        .into_par_iter()
        .map(|idx| {
            let mut h = DefaultHasher::new();
            for v in field.map_at(idx) {
                // Normalizing -0.0 keeps the digest consistent with `==`.
                h.write_u64((v.widen() + 0.0).to_bits());
            }
            h.finish()
        })
        .collect();
    let mut buckets: HashMap<u64, Vec<u32>> = HashMap::new();
    let mut representatives: Vec<usize> = Vec::new();
    let mut group_of = Vec::with_capacity(digests.len());
    for (idx, digest) in digests.into_iter().enumerate() {
        let bucket = buckets.entry(digest).or_default();
        let map = field.map_at(idx);
        let found = bucket
            .iter()
            .copied()
            .find(|&g| field.map_at(representatives[g as usize]) == map);
        let group = found.unwrap_or_else(|| {
            representatives.push(idx);
            let g = (representatives.len() - 1) as u32;
            bucket.push(g);
            g
        });
        group_of.push(group);
    }
    (representatives, group_of)
}

/// Read the anchor maps `A_f[i_m, j_m]` off the aggregated tensor.
pub fn sample_anchors<F: Scalar>(
    field: &AggregatedTensor<F>,
    grid: &AnchorGrid,
) -> Result<ProposalList<F>> {
    if grid.resolution != field.resolution {
        return Err(Error::Shape(format!(
            "anchor grid built for resolution {}, field has {}",
            grid.resolution, field.resolution
        )));
    }
    Ok(ProposalList {
        resolution: field.resolution,
        maps: grid
            .points
            .iter()
            .map(|&(i, j)| field.map(i, j).to_vec())
            .collect(),
    })
}

/// Anchor pass: proposal `v` is the mean of every field map within `tau` of anchor `v`.
///
/// Produces exactly one proposal per anchor.
pub fn first_merge<F: Scalar>(
    anchors: &ProposalList<F>,
    field: &AggregatedTensor<F>,
    config: &MergeConfig,
) -> Result<ProposalList<F>> {
    config.validate()?;
    if anchors.resolution != field.resolution {
        return Err(Error::Shape(format!(
            "anchors at resolution {}, field at {}",
            anchors.resolution, field.resolution
        )));
    }
    let n = field.map_len();
    let limit = config.sum_limit();
    let prepared: Vec<LogMap> = anchors.maps.iter().map(|m| LogMap::new(m)).collect();

    // Identical field maps share every distance, so test each distinct map once.
    let (representatives, group_of) = distinct_maps(field);
    let group_hits: Vec<Vec<u32>> = representatives
        .par_iter()
        .map(|&idx| {
            let candidate = LogMap::new(field.map_at(idx));
            prepared
                .iter()
                .enumerate()
                .filter(|(_, anchor)| sym_kl_sum(anchor, &candidate, limit) < limit)
                .map(|(v, _)| v as u32)
                .collect()
        })
        .collect();

    let mut members: Vec<Vec<u32>> = vec![Vec::new(); anchors.len()];
    for (idx, &group) in group_of.iter().enumerate() {
        for &v in &group_hits[group as usize] {
            members[v as usize].push(idx as u32);
        }
    }

    // Anchors on the same object usually share a qualifying set; average each distinct set once.
    let mut cache: HashMap<&[u32], usize> = HashMap::new();
    let mut means: Vec<Vec<F>> = Vec::new();
    let mut maps = Vec::with_capacity(anchors.len());
    for (v, set) in members.iter().enumerate() {
        if set.is_empty() {
            // Only reachable if the anchor is not itself a field map.
            maps.push(anchors.maps[v].clone());
            continue;
        }
        let slot = *cache.entry(set.as_slice()).or_insert_with(|| {
            means.push(mean_map(set.iter().map(|&i| field.map_at(i as usize)), n));
            means.len() - 1
        });
        maps.push(means[slot].clone());
    }
    Ok(ProposalList {
        resolution: field.resolution,
        maps,
    })
}

/// One greedy merging pass over the proposal list.
///
/// Scanning in list order, each proposal not yet consumed absorbs every
/// remaining proposal within `tau` (itself included); their mean is emitted
/// and all of them leave the pool.
pub fn merge_iteration<F: Scalar>(
    proposals: &ProposalList<F>,
    config: &MergeConfig,
) -> Result<ProposalList<F>> {
    config.validate()?;
    if proposals.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot merge an empty proposal list".into(),
        ));
    }
    let n = proposals.resolution * proposals.resolution;
    let limit = config.sum_limit();
    let prepared: Vec<LogMap> = proposals.maps.iter().map(|m| LogMap::new(m)).collect();
    let mut consumed = vec![false; proposals.len()];
    let mut out = Vec::new();
    for i in 0..proposals.len() {
        if consumed[i] {
            continue;
        }
        let group: Vec<usize> = std::iter::once(i)
            .chain(((i + 1)..proposals.len()).filter(|&j| {
                !consumed[j] && sym_kl_sum(&prepared[i], &prepared[j], limit) < limit
            }))
            .collect();
        for &g in &group {
            consumed[g] = true;
        }
        out.push(mean_map(
            group.iter().map(|&g| proposals.maps[g].as_slice()),
            n,
        ));
    }
    Ok(ProposalList {
        resolution: proposals.resolution,
        maps: out,
    })
}

/// Full merging: anchor pass, then `iterations - 1` greedy passes.
pub fn run_merging<F: Scalar>(
    field: &AggregatedTensor<F>,
    grid: &AnchorGrid,
    config: &MergeConfig,
) -> Result<ProposalList<F>> {
    run_merging_traced(field, grid, config).map(|(list, _)| list)
}

/// Like [`run_merging`], also returning the proposal count after every iteration.
pub fn run_merging_traced<F: Scalar>(
    field: &AggregatedTensor<F>,
    grid: &AnchorGrid,
    config: &MergeConfig,
) -> Result<(ProposalList<F>, Vec<usize>)> {
    config.validate()?;
    let anchors = sample_anchors(field, grid)?;
    let mut proposals = first_merge(&anchors, field, config)?;
    let mut counts = vec![proposals.len()];
    for _ in 1..config.iterations {
        proposals = merge_iteration(&proposals, config)?;
        counts.push(proposals.len());
    }
    Ok((proposals, counts))
}
