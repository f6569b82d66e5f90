//! On-disk attention stacks: a `manifest.json` plus one binary tensor per layer.
//!
//! Layer file layout (little-endian):
//!
//! ```text
//! 8 bytes   magic "ATTN4D\0\x01"
//! 4 bytes   u32 resolution w
//! 4*w^4     f32 values, row-major over (I, J, y, x)
//! ```
//!
//! Slice `[I, J, :, :]` of a layer is the attention map of query location
//! `(I, J)`: a probability distribution over the `w × w` key locations.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{renormalize, sum_f64, Scalar};

pub const MAGIC: &[u8; 8] = b"ATTN4D\x00\x01";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Tolerance on `|sum(map) - 1|` for a map to count as a distribution.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-4;

/// Maps closer to unit mass than this are left bit-for-bit alone on load;
/// float32 cannot represent a better normalization for a 4096-cell map.
const RENORMALIZE_SLACK: f64 = 1e-6;

const HEADER_LEN: usize = 12;

/// One self-attention layer, stored as a dense `(w, w, w, w)` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTensor<F> {
    pub resolution: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> LayerTensor<F> {
    pub fn new(resolution: usize, data: Vec<F>) -> Result<Self> {
        let expected = resolution.pow(4);
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "layer of resolution {resolution} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { resolution, data })
    }

    /// Number of cells in one attention map (`w²`).
    #[inline]
    pub fn map_len(&self) -> usize {
        self.resolution * self.resolution
    }

    /// Attention map of query location `(row, col)`.
    #[inline]
    pub fn map(&self, row: usize, col: usize) -> &[F] {
        let n = self.map_len();
        let start = (row * self.resolution + col) * n;
        &self.data[start..start + n]
    }

    pub fn maps(&self) -> std::slice::ChunksExact<'_, F> {
        self.data.chunks_exact(self.map_len().max(1))
    }

    pub fn cast<G: Scalar>(&self) -> LayerTensor<G> {
        LayerTensor {
            resolution: self.resolution,
            data: self.data.iter().map(|v| G::narrow(v.widen())).collect(),
        }
    }
}

/// Every self-attention layer captured from one image, plus where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack<F> {
    pub layers: Vec<LayerTensor<F>>,
    pub image_height: usize,
    pub image_width: usize,
    pub time_step: u32,
    pub source_id: String,
}

impl<F: Scalar> AttentionStack<F> {
    /// Largest layer resolution; 0 for an empty stack.
    pub fn max_resolution(&self) -> usize {
        self.layers.iter().map(|l| l.resolution).max().unwrap_or(0)
    }

    pub fn resolutions(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.resolution).collect()
    }

    pub fn cast<G: Scalar>(&self) -> AttentionStack<G> {
        AttentionStack {
            layers: self.layers.iter().map(LayerTensor::cast).collect(),
            image_height: self.image_height,
            image_width: self.image_width,
            time_step: self.time_step,
            source_id: self.source_id.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rule {
    EmptyStack,
    ZeroResolution,
    ShapeMismatch,
    ResolutionDivisibility,
    NonFinite,
    NegativeEntry,
    Normalization,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Rule::EmptyStack => "empty-stack",
            Rule::ZeroResolution => "zero-resolution",
            Rule::ShapeMismatch => "shape-mismatch",
            Rule::ResolutionDivisibility => "resolution-divisibility",
            Rule::NonFinite => "non-finite",
            Rule::NegativeEntry => "negative-entry",
            Rule::Normalization => "normalization",
        };
        f.write_str(s)
    }
}

/// A broken stack invariant, located as precisely as possible.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub layer: Option<usize>,
    pub location: Option<(usize, usize)>,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]", self.rule)?;
        if let Some(layer) = self.layer {
            write!(f, " layer {layer}")?;
        }
        if let Some((i, j)) = self.location {
            write!(f, " at ({i}, {j})")?;
        }
        write!(f, ": {}", self.detail)
    }
}

/// Check every stack invariant. Returns an empty list iff the stack is valid.
///
/// Each attention map contributes at most one violation: the first of
/// non-finite, negative entry, or bad normalization that applies.
pub fn validate_stack<F: Scalar>(stack: &AttentionStack<F>) -> Vec<Violation> {
    let mut out = Vec::new();
    if stack.layers.is_empty() {
        out.push(Violation {
            layer: None,
            location: None,
            rule: Rule::EmptyStack,
            detail: "stack has no layers".into(),
        });
        return out;
    }
    let w_max = stack.max_resolution();
    for (k, layer) in stack.layers.iter().enumerate() {
        let w = layer.resolution;
        if w == 0 {
            out.push(Violation {
                layer: Some(k),
                location: None,
                rule: Rule::ZeroResolution,
                detail: "resolution must be positive".into(),
            });
            continue;
        }
        if layer.data.len() != w.pow(4) {
            out.push(Violation {
                layer: Some(k),
                location: None,
                rule: Rule::ShapeMismatch,
                detail: format!(
                    "expected {} values for a {w}^4 tensor, found {}",
                    w.pow(4),
                    layer.data.len()
                ),
            });
            continue;
        }
        if !w_max.is_multiple_of(w) {
            out.push(Violation {
                layer: Some(k),
                location: None,
                rule: Rule::ResolutionDivisibility,
                detail: format!("resolution {w} does not divide maximum resolution {w_max}"),
            });
        }
        for (idx, map) in layer.maps().enumerate() {
            let location = Some((idx / w, idx % w));
            let violation = if let Some(pos) = map.iter().position(|v| !v.is_finite()) {
                Some((Rule::NonFinite, format!("entry {pos} is not finite")))
            } else if let Some(pos) = map.iter().position(|v| *v < F::zero()) {
                Some((
                    Rule::NegativeEntry,
                    format!("entry {pos} is negative ({})", map[pos]),
                ))
            } else {
                let total = sum_f64(map);
                ((total - 1.0).abs() > NORMALIZATION_TOLERANCE).then(|| {
                    (
                        Rule::Normalization,
                        format!("map sums to {total}, not 1 ± {NORMALIZATION_TOLERANCE}"),
                    )
                })
            };
            if let Some((rule, detail)) = violation {
                out.push(Violation {
                    layer: Some(k),
                    location,
                    rule,
                    detail,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub image_height: usize,
    pub image_width: usize,
    pub time_step: u32,
    pub source_id: String,
    pub layers: Vec<ManifestLayer>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestLayer {
    pub resolution: usize,
    pub file: String,
}

/// Write `stack` as a manifest plus one `layer_XX.bin` per layer. Values are stored as f32.
///
/// Refuses stacks that fail [`validate_stack`].
pub fn write_stack<F: Scalar>(stack: &AttentionStack<F>, dir: &Path) -> Result<()> {
    let violations = validate_stack(stack);
    if !violations.is_empty() {
        return Err(Error::InvalidStack(violations));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut manifest = Manifest {
        format_version: FORMAT_VERSION,
        image_height: stack.image_height,
        image_width: stack.image_width,
        time_step: stack.time_step,
        source_id: stack.source_id.clone(),
        layers: Vec::with_capacity(stack.layers.len()),
    };
    for (k, layer) in stack.layers.iter().enumerate() {
        let file = format!("layer_{k:02}.bin");
        let path = dir.join(&file);
        write_layer(layer, &path)?;
        manifest.layers.push(ManifestLayer {
            resolution: layer.resolution,
            file,
        });
    }

    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Manifest {
        path: path.clone(),
        message: e.to_string(),
    })?;
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

fn write_layer<F: Scalar>(layer: &LayerTensor<F>, path: &Path) -> Result<()> {
    let resolution = u32::try_from(layer.resolution).map_err(|_| {
        Error::InvalidArgument(format!("resolution {} overflows u32", layer.resolution))
    })?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write = |bytes: &[u8]| out.write_all(bytes).map_err(|e| Error::io(path, e));
    write(MAGIC)?;
    write(&resolution.to_le_bytes())?;
    for v in &layer.data {
        write(&(v.widen() as f32).to_le_bytes())?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Load and validate a stack written by [`write_stack`] (or the extractor).
///
/// Layer order follows the manifest. Maps within tolerance are renormalized
/// to unit mass; anything outside tolerance is rejected.
pub fn read_stack(dir: &Path) -> Result<AttentionStack<f32>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::MissingManifest(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: manifest_path.clone(),
        message: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Manifest {
            path: manifest_path,
            message: format!("unsupported format_version {}", manifest.format_version),
        });
    }

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        layers.push(read_layer(&dir.join(&entry.file), entry.resolution)?);
    }
    let mut stack = AttentionStack {
        layers,
        image_height: manifest.image_height,
        image_width: manifest.image_width,
        time_step: manifest.time_step,
        source_id: manifest.source_id,
    };

    let violations = validate_stack(&stack);
    if !violations.is_empty() {
        return Err(Error::InvalidStack(violations));
    }
    for layer in &mut stack.layers {
        let n = layer.map_len();
        for map in layer.data.chunks_exact_mut(n) {
            if (sum_f64(map) - 1.0).abs() > RENORMALIZE_SLACK {
                renormalize(map);
            }
        }
    }
    Ok(stack)
}

fn read_layer(path: &Path, resolution: usize) -> Result<LayerTensor<f32>> {
    let bad = |message: String| Error::TensorFile {
        path: PathBuf::from(path),
        message,
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(bad("missing ATTN4D magic header".into()));
    }
    let stored = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    if stored != resolution {
        return Err(Error::Shape(format!(
            "{}: manifest declares resolution {resolution}, file header says {stored}",
            path.display()
        )));
    }
    let expected = resolution
        .checked_pow(4)
        .ok_or_else(|| bad(format!("resolution {resolution} too large")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected * 4 {
        return Err(Error::Shape(format!(
            "{}: resolution {resolution} needs {expected} float32 values, file holds {} bytes ({} values)",
            path.display(),
            payload.len(),
            payload.len() / 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(LayerTensor { resolution, data })
}
