//! Non-maximum suppression over proposals and the end-to-end pipeline.

use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::aggregator::{aggregate, WeightScheme};
use crate::attn_store::AttentionStack;
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::merger::{generate_anchor_grid, run_merging_traced, MergeConfig, ProposalList};
use crate::resample::taps;
use crate::scalar::Scalar;

/// Pixel-level label mask produced by NMS.
///
/// Labels are compacted to `0..num_labels` in order of first occurrence;
/// `proposal_index[label]` is the proposal that won those pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    pub labels: LabelMap,
    pub num_labels: usize,
    pub proposal_index: Vec<usize>,
}

impl SegmentationMask {
    /// Build from raw per-pixel winner indices.
    pub fn from_winners(height: usize, width: usize, winners: Vec<u32>) -> Result<Self> {
        let raw = LabelMap::new(height, width, winners)?;
        let (labels, originals) = raw.compact();
        Ok(Self {
            labels,
            num_labels: originals.len(),
            proposal_index: originals.into_iter().map(|v| v as usize).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.labels.height
    }

    pub fn width(&self) -> usize {
        self.labels.width
    }
}

/// Upsample each proposal bilinearly to `out_h × out_w` and label every pixel
/// with the proposal of highest value there. Ties go to the lowest index.
pub fn nms_assign<F: Scalar>(
    proposals: &ProposalList<F>,
    out_h: usize,
    out_w: usize,
) -> Result<SegmentationMask> {
    if proposals.is_empty() {
        return Err(Error::InvalidArgument(
            "NMS needs at least one proposal".into(),
        ));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "output size {out_h}x{out_w} is empty"
        )));
    }
    let w = proposals.resolution;
    let rows = taps(w, out_h);
    let cols = taps(w, out_w);
    let maps: Vec<Vec<f64>> = proposals
        .maps
        .iter()
        .map(|m| m.iter().map(|v| v.widen()).collect())
        .collect();

    let mut winners = vec![0u32; out_h * out_w];
    winners
        .par_chunks_mut(out_w)
        .zip(rows.par_iter())
        .for_each(|(line, r)| {
            // Row-interpolate every proposal once for this output row.
            let blended: Vec<Vec<f64>> = maps
                .iter()
                .map(|m| {
                    let top = &m[r.lo * w..(r.lo + 1) * w];
                    let bottom = &m[r.hi * w..(r.hi + 1) * w];
                    top.iter()
                        .zip(bottom)
                        .map(|(t, b)| t * (1.0 - r.frac) + b * r.frac)
                        .collect()
                })
                .collect();
            for (slot, c) in line.iter_mut().zip(&cols) {
                let mut best = 0usize;
                let mut best_value = f64::NEG_INFINITY;
                for (p, row) in blended.iter().enumerate() {
                    let v = row[c.lo] * (1.0 - c.frac) + row[c.hi] * c.frac;
                    if v > best_value {
                        best_value = v;
                        best = p;
                    }
                }
                *slot = best as u32;
            }
        });
    SegmentationMask::from_winners(out_h, out_w, winners)
}

/// Hyperparameters of the full pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineParams {
    pub weights: WeightScheme,
    /// Anchor grid side `M`; `M²` anchors.
    pub anchor_side: usize,
    pub merge: MergeConfig,
    /// `(height, width)` of the mask; defaults to the stack's source image size.
    pub output_size: Option<(usize, usize)>,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            weights: WeightScheme::Proportional,
            anchor_side: 16,
            merge: MergeConfig::default(),
            output_size: None,
        }
    }
}

impl PipelineParams {
    /// Threshold tuned for COCO-Stuff-27.
    pub fn coco() -> Self {
        Self {
            merge: MergeConfig {
                tau: 1.1,
                ..MergeConfig::default()
            },
            ..Self::default()
        }
    }

    /// Threshold tuned for Cityscapes.
    pub fn cityscapes() -> Self {
        Self {
            merge: MergeConfig {
                tau: 0.9,
                ..MergeConfig::default()
            },
            ..Self::default()
        }
    }
}

/// Diagnostics from one [`segment_with_report`] run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineReport {
    pub resolution: usize,
    pub num_proposals: usize,
    /// Proposal count after each merging iteration.
    pub proposal_counts: Vec<usize>,
    pub aggregate_time: Duration,
    pub merge_time: Duration,
    pub nms_time: Duration,
}

/// Aggregate, merge and assign labels.
pub fn segment<F: Scalar>(
    stack: &AttentionStack<F>,
    params: &PipelineParams,
) -> Result<SegmentationMask> {
    segment_with_report(stack, params).map(|(mask, _)| mask)
}

pub fn segment_with_report<F: Scalar>(
    stack: &AttentionStack<F>,
    params: &PipelineParams,
) -> Result<(SegmentationMask, PipelineReport)> {
    params.merge.validate()?;
    let (out_h, out_w) = params
        .output_size
        .unwrap_or((stack.image_height, stack.image_width));

    let t0 = Instant::now();
    let field = aggregate(stack, &params.weights)?;
    let aggregate_time = t0.elapsed();

    let t1 = Instant::now();
    let grid = generate_anchor_grid(params.anchor_side, field.resolution)?;
    let (proposals, proposal_counts) = run_merging_traced(&field, &grid, &params.merge)?;
    drop(field);
    let merge_time = t1.elapsed();

    let t2 = Instant::now();
    let mask = nms_assign(&proposals, out_h, out_w)?;
    let nms_time = t2.elapsed();

    log::debug!(
        "segmented {}: {} proposals -> {} labels",
        stack.source_id,
        proposals.len(),
        mask.num_labels
    );
    Ok((
        mask,
        PipelineReport {
            resolution: proposals.resolution,
            num_proposals: proposals.len(),
            proposal_counts,
            aggregate_time,
            merge_time,
            nms_time,
        },
    ))
}
