//! Fuses a multi-resolution attention stack into one tensor of maps at the
//! highest resolution.
//!
//! For target query location `(I, J)` and layer `k` with resolution `w_k`,
//! the contribution is the layer's map at `(I / δ_k, J / δ_k)` (floor
//! division, `δ_k = w_max / w_k`) upsampled to `w_max × w_max`, weighted by
//! `R_k`. Each fused map is renormalized afterwards.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::attn_store::{validate_stack, AttentionStack};
use crate::error::{Error, Result};
use crate::resample::upsample_map;
use crate::scalar::Scalar;

/// How per-layer aggregation weights `R_k` are assigned.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum WeightScheme {
    /// `R_k ∝ w_k` over all layers.
    #[default]
    Proportional,
    /// Uniform over the layers at one resolution, zero elsewhere.
    OnlyResolution(usize),
    /// Per-resolution weight applied to every layer of that resolution, then
    /// normalized over all layers. Unlisted resolutions get zero.
    Custom(BTreeMap<usize, f64>),
}

/// The fused tensor: `w_max²` query locations, each with a `w_max²` probability map.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedTensor<F> {
    pub resolution: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> AggregatedTensor<F> {
    pub fn new(resolution: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != resolution.pow(4) {
            return Err(Error::Shape(format!(
                "aggregated tensor of resolution {resolution} needs {} values, got {}",
                resolution.pow(4),
                data.len()
            )));
        }
        Ok(Self { resolution, data })
    }

    #[inline]
    pub fn map_len(&self) -> usize {
        self.resolution * self.resolution
    }

    #[inline]
    pub fn num_maps(&self) -> usize {
        self.map_len()
    }

    #[inline]
    pub fn map(&self, row: usize, col: usize) -> &[F] {
        self.map_at(row * self.resolution + col)
    }

    /// Map of the query location with row-major index `index`.
    #[inline]
    pub fn map_at(&self, index: usize) -> &[F] {
        let n = self.map_len();
        &self.data[index * n..(index + 1) * n]
    }

    pub fn maps(&self) -> std::slice::ChunksExact<'_, F> {
        self.data.chunks_exact(self.map_len())
    }
}

/// Realize `scheme` as one weight per layer (layer order), summing to 1.
pub fn compute_weights<F: Scalar>(
    stack: &AttentionStack<F>,
    scheme: &WeightScheme,
) -> Result<Vec<f64>> {
    if stack.layers.is_empty() {
        return Err(Error::InvalidArgument("stack has no layers".into()));
    }
    let resolutions = stack.resolutions();
    let has = |w: usize| resolutions.contains(&w);
    let raw: Vec<f64> = match scheme {
        WeightScheme::Proportional => resolutions.iter().map(|&w| w as f64).collect(),
        WeightScheme::OnlyResolution(target) => {
            if !has(*target) {
                return Err(Error::InvalidArgument(format!(
                    "weight scheme selects resolution {target}, stack has {resolutions:?}"
                )));
            }
            resolutions
                .iter()
                .map(|&w| if w == *target { 1.0 } else { 0.0 })
                .collect()
        }
        WeightScheme::Custom(table) => {
            for (&w, &weight) in table {
                if !has(w) {
                    return Err(Error::InvalidArgument(format!(
                        "custom weights reference resolution {w}, stack has {resolutions:?}"
                    )));
                }
                if !(weight >= 0.0 && weight.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "custom weight for resolution {w} must be finite and non-negative, got {weight}"
                    )));
                }
            }
            resolutions
                .iter()
                .map(|w| table.get(w).copied().unwrap_or(0.0))
                .collect()
        }
    };
    let total: f64 = raw.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::InvalidArgument(
            "weight scheme assigns zero total weight".into(),
        ));
    }
    Ok(raw.into_iter().map(|r| r / total).collect())
}

/// Fuse every layer of `stack` into one tensor at the stack's maximum resolution.
pub fn aggregate<F: Scalar>(
    stack: &AttentionStack<F>,
    scheme: &WeightScheme,
) -> Result<AggregatedTensor<F>> {
    let violations = validate_stack(stack);
    if !violations.is_empty() {
        return Err(Error::InvalidStack(violations));
    }
    let weights = compute_weights(stack, scheme)?;
    let w_max = stack.max_resolution();
    let n = w_max * w_max;
    let mut acc = vec![0.0f64; n * n];

    for (layer, &weight) in stack.layers.iter().zip(&weights) {
        if weight == 0.0 {
            continue;
        }
        let w = layer.resolution;
        let delta = w_max / w;
        let upsampled: Vec<Vec<F>> = if delta == 1 {
            Vec::new()
        } else {
            layer
                .maps()
                .collect::<Vec<_>>()
                .par_iter()
                .map(|m| upsample_map(m, w, w_max))
                .collect::<Result<_>>()?
        };
        // Each target map is touched by exactly one source map per layer, so
        // the per-cell summation order is the layer order regardless of threads.
        acc.par_chunks_mut(n).enumerate().for_each(|(target, dst)| {
            let (row, col) = (target / w_max, target % w_max);
            let src = if delta == 1 {
                layer.map(row, col)
            } else {
                &upsampled[(row / delta) * w + col / delta]
            };
            for (d, s) in dst.iter_mut().zip(src) {
                *d += weight * s.widen();
            }
        });
    }

    acc.par_chunks_mut(n).for_each(|map| {
        let total: f64 = map.iter().sum();
        for v in map.iter_mut() {
            *v /= total;
        }
    });
    // Same-layout element conversion; for f64 this reuses the allocation.
    let data: Vec<F> = acc.into_iter().map(F::narrow).collect();
    Ok(AggregatedTensor {
        resolution: w_max,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attn_store::LayerTensor;

    fn uniform(w: usize) -> LayerTensor<f64> {
        let n = w * w;
        LayerTensor::new(w, vec![1.0 / n as f64; n * n]).unwrap()
    }

    fn stack_of(layers: Vec<LayerTensor<f64>>) -> AttentionStack<f64> {
        AttentionStack {
            layers,
            image_height: 64,
            image_width: 64,
            time_step: 0,
            source_id: String::new(),
        }
    }

    #[test]
    fn proportional_weights_on_nominal_layout() {
        // Weights only look at resolutions, so tiny stand-in tensors are enough.
        let mut layers = Vec::new();
        let mut res = Vec::new();
        for w in [64usize, 32, 16] {
            for _ in 0..5 {
                res.push(w);
            }
        }
        res.push(8);
        for _ in &res {
            layers.push(uniform(1));
        }
        let mut s = stack_of(layers);
        for (l, w) in s.layers.iter_mut().zip(&res) {
            l.resolution = *w;
        }
        let r = compute_weights(&s, &WeightScheme::Proportional).unwrap();
        for (weight, w) in r.iter().zip(&res) {
            assert!((weight - *w as f64 / 568.0).abs() < 1e-15);
        }
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let only = compute_weights(&s, &WeightScheme::OnlyResolution(64)).unwrap();
        for (weight, w) in only.iter().zip(&res) {
            let want = if *w == 64 { 0.2 } else { 0.0 };
            assert!((weight - want).abs() < 1e-15);
        }
    }

    #[test]
    fn single_layer_gets_full_weight() {
        let s = stack_of(vec![uniform(4)]);
        for scheme in [
            WeightScheme::Proportional,
            WeightScheme::OnlyResolution(4),
            WeightScheme::Custom([(4, 3.0)].into()),
        ] {
            assert_eq!(compute_weights(&s, &scheme).unwrap(), vec![1.0]);
        }
    }

    #[test]
    fn absent_resolution_is_an_error() {
        let s = stack_of(vec![uniform(4), uniform(2)]);
        assert!(compute_weights(&s, &WeightScheme::OnlyResolution(8)).is_err());
        assert!(compute_weights(&s, &WeightScheme::Custom([(3, 1.0)].into())).is_err());
        assert!(compute_weights(&s, &WeightScheme::Custom([(4, -1.0)].into())).is_err());
        assert!(compute_weights(&s, &WeightScheme::Custom(BTreeMap::new())).is_err());
    }

    #[test]
    fn uniform_layers_aggregate_to_uniform() {
        let s = stack_of(vec![uniform(8), uniform(4), uniform(2), uniform(1)]);
        let f = aggregate(&s, &WeightScheme::Proportional).unwrap();
        assert_eq!(f.resolution, 8);
        for v in &f.data {
            assert!((v - 1.0 / 64.0).abs() < 1e-15);
        }
    }

    #[test]
    fn coarse_only_is_block_constant() {
        // Distinct map per coarse query location.
        let w = 2;
        let mut data = Vec::new();
        for q in 0..4 {
            let mut m = vec![0.1f64; 4];
            m[q] = 0.7;
            data.extend(m);
        }
        let coarse = LayerTensor::new(w, data).unwrap();
        let s = stack_of(vec![uniform(8), coarse]);
        let f = aggregate(&s, &WeightScheme::OnlyResolution(2)).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let block_anchor = f.map((i / 4) * 4, (j / 4) * 4);
                assert_eq!(f.map(i, j), block_anchor);
            }
        }
        assert_ne!(f.map(0, 0), f.map(0, 4));
    }
}
