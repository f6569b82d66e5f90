//! Zero-shot image segmentation from diffusion-model self-attention.
//!
//! The pipeline takes the per-layer self-attention tensors of one UNet pass
//! ([`AttentionStack`]), fuses them into a single tensor of attention maps at
//! the highest resolution ([`aggregate`]), grows and merges anchor maps into
//! object proposals by symmetric KL distance ([`run_merging`]), and labels
//! every pixel with its strongest proposal ([`nms_assign`]).
//!
//! All numeric types are generic over [`Scalar`] (`f32` or `f64` storage,
//! `f64` accumulation). The `*32` / `*64` aliases name the concrete forms.

pub mod aggregator;
pub mod attn_store;
pub mod baselines;
pub mod error;
pub mod evaluator;
pub mod labels;
pub mod merger;
pub mod resample;
pub mod scalar;
pub mod segmenter;
pub mod synth;

pub use aggregator::{aggregate, compute_weights, AggregatedTensor, WeightScheme};
pub use attn_store::{read_stack, validate_stack, write_stack, AttentionStack, LayerTensor};
pub use baselines::{kmeans, kmeans_segment, KMeansConfig, KMeansFit};
pub use error::{Error, Result};
pub use evaluator::{
    confusion, evaluate_dataset, evaluate_image, hungarian_match, score, EvalPair, EvalReport,
};
pub use labels::{LabelMap, IGNORE_LABEL};
pub use merger::{
    first_merge, generate_anchor_grid, kl_distance, merge_iteration, run_merging, AnchorGrid,
    MergeConfig, ProposalList,
};
pub use resample::upsample_map;
pub use scalar::Scalar;
pub use segmenter::{
    nms_assign, segment, segment_with_report, PipelineParams, PipelineReport, SegmentationMask,
};
pub use synth::{generate_stack, min_cross_distance, SynthSpec};

pub type AttentionStack32 = AttentionStack<f32>;
pub type AttentionStack64 = AttentionStack<f64>;
pub type AggregatedTensor32 = AggregatedTensor<f32>;
pub type AggregatedTensor64 = AggregatedTensor<f64>;
pub type ProposalList32 = ProposalList<f32>;
pub type ProposalList64 = ProposalList<f64>;
