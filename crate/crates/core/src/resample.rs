//! Bilinear resampling with half-pixel centres (`align_corners = false`).
//!
//! Output sample `d` reads source coordinate `s = (d + 0.5) * in / out - 0.5`,
//! clamped to `[0, in - 1]`, and blends the two neighbouring cells.

use crate::error::{Error, Result};
use crate::scalar::{renormalize, Scalar};

/// Per-output-sample interpolation stencil along one axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    /// Weight of `hi`; `lo` gets `1 - frac`.
    pub frac: f64,
}

pub fn taps(input: usize, output: usize) -> Vec<Tap> {
    assert!(input > 0 && output > 0, "resampling needs non-empty axes");
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * input as f64 / output as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

/// Bilinear resize of a row-major `in_h × in_w` grid, computed in f64.
pub fn bilinear<F: Scalar>(
    src: &[F],
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    debug_assert_eq!(src.len(), in_h * in_w);
    let rows = taps(in_h, out_h);
    let cols = taps(in_w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for r in &rows {
        let top = &src[r.lo * in_w..(r.lo + 1) * in_w];
        let bottom = &src[r.hi * in_w..(r.hi + 1) * in_w];
        for c in &cols {
            let t = top[c.lo].widen() * (1.0 - c.frac) + top[c.hi].widen() * c.frac;
            let b = bottom[c.lo].widen() * (1.0 - c.frac) + bottom[c.hi].widen() * c.frac;
            out.push(t * (1.0 - r.frac) + b * r.frac);
        }
    }
    out
}

/// Upsample a square probability map from `w_in²` to `w_out²` cells and renormalize it to unit mass.
pub fn upsample_map<F: Scalar>(map: &[F], w_in: usize, w_out: usize) -> Result<Vec<F>> {
    if w_in == 0 || w_in > w_out {
        return Err(Error::InvalidArgument(format!(
            "cannot upsample a {w_in}x{w_in} map to {w_out}x{w_out}"
        )));
    }
    if map.len() != w_in * w_in {
        return Err(Error::Shape(format!(
            "map has {} cells, expected {}",
            map.len(),
            w_in * w_in
        )));
    }
    if w_in == w_out {
        return Ok(map.to_vec());
    }
    let mut out: Vec<F> = bilinear(map, w_in, w_in, w_out, w_out)
        .into_iter()
        .map(F::narrow)
        .collect();
    renormalize(&mut out);
    Ok(out)
}
