//! Synthetic attention stacks with a known segmentation.
//!
//! Every query location attends uniformly to the cells of its own segment,
//! mixed with a uniform floor: `(1 - ε) · U_segment + ε · U_all`. Optional
//! multiplicative jitter perturbs individual entries before renormalization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attn_store::{AttentionStack, LayerTensor};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::merger::kl_distance;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// Square ground-truth labels; side must be a multiple of every resolution.
    pub label_map: LabelMap,
    pub resolutions: Vec<usize>,
    /// Uniform mixing weight in `[0, 1)`.
    pub epsilon: f64,
    pub seed: u64,
    /// Per-entry multiplicative jitter amplitude in `[0, 1)`.
    pub noise: f64,
    /// Recorded as the source image size; 8× the maximum resolution by default.
    pub image_size: Option<usize>,
    pub time_step: u32,
    pub source_id: String,
}

impl SynthSpec {
    pub fn new(label_map: LabelMap, resolutions: Vec<usize>, epsilon: f64) -> Self {
        Self {
            label_map,
            resolutions,
            epsilon,
            seed: 0,
            noise: 0.0,
            image_size: None,
            time_step: 0,
            source_id: "synthetic".into(),
        }
    }

    pub fn max_resolution(&self) -> usize {
        self.resolutions.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.resolutions.is_empty() {
            return bad("synthetic spec needs at least one resolution".into());
        }
        let side = self.label_map.height;
        if side != self.label_map.width {
            return bad(format!(
                "label map must be square, got {}x{}",
                self.label_map.height, self.label_map.width
            ));
        }
        let w_max = self.max_resolution();
        for &w in &self.resolutions {
            if w == 0 || !w_max.is_multiple_of(w) || !side.is_multiple_of(w) {
                return bad(format!(
                    "resolution {w} must divide both the maximum resolution {w_max} and the label side {side}"
                ));
            }
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return bad(format!("epsilon must be in [0, 1), got {}", self.epsilon));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return bad(format!("noise must be in [0, 1), got {}", self.noise));
        }
        Ok(())
    }
}

/// One noiseless map per segment at resolution `w`, from labels at that resolution.
fn segment_templates(labels: &LabelMap, epsilon: f64) -> Vec<(u32, Vec<f64>)> {
    let n = labels.data.len();
    labels
        .distinct(None)
        .into_iter()
        .map(|seg| {
            let size = labels.data.iter().filter(|&&l| l == seg).count() as f64;
            let inside = (1.0 - epsilon) / size + epsilon / n as f64;
            let outside = epsilon / n as f64;
            let map = labels
                .data
                .iter()
                .map(|&l| if l == seg { inside } else { outside })
                .collect();
            (seg, map)
        })
        .collect()
}

/// Build the stack and return it with the labels at the maximum resolution.
pub fn generate_stack<F: Scalar>(spec: &SynthSpec) -> Result<(AttentionStack<F>, LabelMap)> {
    spec.validate()?;
    let w_max = spec.max_resolution();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut layers = Vec::with_capacity(spec.resolutions.len());
    for &w in &spec.resolutions {
        let labels = spec.label_map.majority_downsample(w)?;
        let templates = segment_templates(&labels, spec.epsilon);
        let n = w * w;
        let mut data: Vec<F> = Vec::with_capacity(n * n);
        let mut buf = vec![0.0f64; n];
        for &seg in &labels.data {
            let template = &templates
                .iter()
                .find(|(s, _)| *s == seg)
                .expect("every label has a template")
                .1;
            if spec.noise > 0.0 {
                for (b, t) in buf.iter_mut().zip(template) {
                    *b = t * (1.0 + spec.noise * rng.random_range(-1.0..1.0));
                }
                let total: f64 = buf.iter().sum();
                data.extend(buf.iter().map(|v| F::narrow(v / total)));
            } else {
                data.extend(template.iter().map(|&v| F::narrow(v)));
            }
        }
        layers.push(LayerTensor::new(w, data)?);
    }
    let stack = AttentionStack {
        layers,
        image_height: spec.image_size.unwrap_or(8 * w_max),
        image_width: spec.image_size.unwrap_or(8 * w_max),
        time_step: spec.time_step,
        source_id: spec.source_id.clone(),
    };
    Ok((stack, spec.label_map.majority_downsample(w_max)?))
}

/// Smallest symmetrized KL distance between noiseless maps of different
/// segments at the maximum resolution. `inf` when there is only one segment.
pub fn min_cross_distance(spec: &SynthSpec) -> Result<f64> {
    spec.validate()?;
    if spec.epsilon == 0.0 {
        return Err(Error::InvalidArgument(
            "epsilon = 0 gives disjoint supports; cross-segment distance is clamp-dominated"
                .into(),
        ));
    }
    let labels = spec.label_map.majority_downsample(spec.max_resolution())?;
    let templates = segment_templates(&labels, spec.epsilon);
    let mut best = f64::INFINITY;
    for (i, (_, a)) in templates.iter().enumerate() {
        for (_, b) in &templates[i + 1..] {
            best = best.min(kl_distance(a, b)?);
        }
    }
    Ok(best)
}
