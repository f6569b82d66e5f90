use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point storage type for attention maps: `f32` or `f64`.
///
/// Maps are stored in `Self`, but every reduction in this crate (map sums,
/// KL sums, means over many maps) accumulates in `f64` and rounds back once.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Widen to `f64`. Exact for both supported types.
    #[inline]
    fn widen(self) -> f64 {
        // f32 and f64 both convert without failure
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Round an `f64` into this type.
    #[inline]
    fn narrow(value: f64) -> Self {
        Self::from_f64(value).unwrap_or_else(Self::nan)
    }
}

impl Scalar for f32 {
    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }

    #[inline]
    fn narrow(value: f64) -> Self {
        value as f32
    }
}

impl Scalar for f64 {
    #[inline]
    fn widen(self) -> f64 {
        self
    }

    #[inline]
    fn narrow(value: f64) -> Self {
        value
    }
}

/// Sum a slice in `f64` with a fixed left-to-right order.
pub fn sum_f64<F: Scalar>(values: &[F]) -> f64 {
    values.iter().fold(0.0, |acc, v| acc + v.widen())
}

/// Divide every entry by the (f64) sum of the slice. Leaves all-zero maps untouched.
pub fn renormalize<F: Scalar>(values: &mut [F]) {
    let total = sum_f64(values);
    if total > 0.0 && total.is_finite() {
        for v in values.iter_mut() {
            *v = F::narrow(v.widen() / total);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widen_narrow_roundtrip() {
        let x = 0.1f32;
        assert_eq!(f32::narrow(x.widen()), x);
        assert_eq!(f64::narrow(0.1), 0.1);
    }

    #[test]
    fn renormalize_scales_to_one() {
        let mut m = vec![1.0f64, 3.0];
        renormalize(&mut m);
        assert_eq!(m, vec![0.25, 0.75]);
        let mut z = vec![0.0f32; 3];
        renormalize(&mut z);
        assert_eq!(z, vec![0.0; 3]);
    }
}
