//! Fake quantization: values are rounded onto a uniform grid but kept in
//! floating point, so quantized inference and quantization-aware training
//! share one code path.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantKind {
    /// Signed grid centered on zero: levels -qmax..=qmax (weights).
    Symmetric,
    /// Non-negative grid: levels 0..=qmax (post-ReLU activations).
    Unsigned,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantSpec {
    bits: u8,
    scale: f64,
    kind: QuantKind,
}

impl QuantSpec {
    pub fn new(bits: u8, scale: f64, kind: QuantKind) -> Result<Self> {
        if !(2..=8).contains(&bits) {
            return Err(Error::invalid("QuantSpec", format!("bits {bits} outside 2..=8")));
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::invalid("QuantSpec", format!("scale {scale} must be positive")));
        }
        Ok(QuantSpec { bits, scale, kind })
    }

    pub fn symmetric(bits: u8, scale: f64) -> Result<Self> {
        QuantSpec::new(bits, scale, QuantKind::Symmetric)
    }

    pub fn unsigned(bits: u8, scale: f64) -> Result<Self> {
        QuantSpec::new(bits, scale, QuantKind::Unsigned)
    }

    /// Per-tensor symmetric weight spec: scale = max|w| / qmax. An all-zero
    /// tensor gets scale 1, which still quantizes every value to zero.
    pub fn for_weights<S: Scalar>(w: &Tensor<S>, bits: u8) -> Result<Self> {
        let max_abs = w.max_abs().to_f64();
        if !max_abs.is_finite() {
            return Err(Error::NonFinite { op: "QuantSpec::for_weights" });
        }
        let qmax = ((1u32 << (bits - 1)) - 1) as f64;
        let scale = if max_abs > 0.0 { max_abs / qmax } else { 1.0 };
        QuantSpec::symmetric(bits, scale)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn kind(&self) -> QuantKind {
        self.kind
    }

    /// Largest grid index. Symmetric grids also extend to -qmax.
    pub fn qmax(&self) -> i64 {
        match self.kind {
            QuantKind::Symmetric => (1i64 << (self.bits - 1)) - 1,
            QuantKind::Unsigned => (1i64 << self.bits) - 1,
        }
    }

    pub fn qmin(&self) -> i64 {
        match self.kind {
            QuantKind::Symmetric => -self.qmax(),
            QuantKind::Unsigned => 0,
        }
    }

    /// Number of representable levels, including zero.
    pub fn levels(&self) -> u64 {
        (self.qmax() - self.qmin() + 1) as u64
    }

    pub fn quantize_value<S: Scalar>(&self, v: S) -> S {
        let scale = S::from_f64(self.scale);
        let lo = S::from_f64(self.qmin() as f64);
        let hi = S::from_f64(self.qmax() as f64);
        (v / scale).round().max(lo).min(hi) * scale
    }

    /// True when `v` lies inside the representable range, i.e. no clipping.
    /// The straight-through estimator passes gradient exactly here.
    pub fn in_range<S: Scalar>(&self, v: S) -> bool {
        let scale = S::from_f64(self.scale);
        let q = v / scale;
        q >= S::from_f64(self.qmin() as f64) && q <= S::from_f64(self.qmax() as f64)
    }
}

/// Rounds every element onto the quantization grid.
pub fn fake_quantize<S: Scalar>(x: &Tensor<S>, spec: &QuantSpec) -> Tensor<S> {
    x.map(|v| spec.quantize_value(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spec_validates_bits_and_scale() {
        assert!(QuantSpec::symmetric(1, 0.1).is_err());
        assert!(QuantSpec::symmetric(9, 0.1).is_err());
        assert!(QuantSpec::symmetric(8, 0.0).is_err());
        assert!(QuantSpec::symmetric(8, -1.0).is_err());
        assert!(QuantSpec::symmetric(8, f64::NAN).is_err());
        assert!(QuantSpec::symmetric(4, 0.5).is_ok());
    }

    #[test]
    fn symmetric_8_bit_has_255_levels_including_zero() {
        let q = QuantSpec::symmetric(8, 0.01).unwrap();
        assert_eq!(q.qmin(), -127);
        assert_eq!(q.qmax(), 127);
        assert_eq!(q.levels(), 255);
        assert_eq!(q.quantize_value(0.0f64), 0.0);
    }

    #[test]
    fn unsigned_4_bit_grid_is_0_to_15() {
        let q = QuantSpec::unsigned(4, 0.5).unwrap();
        assert_eq!(q.qmin(), 0);
        assert_eq!(q.qmax(), 15);
        assert_eq!(q.levels(), 16);
        // negatives clip to zero on the unsigned grid
        assert_eq!(q.quantize_value(-3.0f64), 0.0);
        assert_eq!(q.quantize_value(100.0f64), 7.5);
    }

    #[test]
    fn round_trip_error_bounded_by_half_scale_inside_range() {
        let mut r = ChaCha8Rng::seed_from_u64(31);
        let q = QuantSpec::symmetric(8, 0.02).unwrap();
        let lim = q.qmax() as f64 * q.scale();
        for _ in 0..1000 {
            let v: f64 = r.gen_range(-lim..lim);
            let e = (q.quantize_value(v) - v).abs();
            assert!(e <= q.scale() / 2.0 + 1e-12, "value {v} error {e}");
        }
    }

    #[test]
    fn out_of_range_values_clip_to_grid_ends() {
        let q = QuantSpec::symmetric(4, 0.1).unwrap();
        assert!((q.quantize_value(100.0f64) - 0.7).abs() < 1e-12);
        assert!((q.quantize_value(-100.0f64) + 0.7).abs() < 1e-12);
        assert!(!q.in_range(100.0f64));
        assert!(q.in_range(0.65f64));
    }

    #[test]
    fn for_weights_covers_the_max_abs_value_exactly() {
        let w = Tensor::from_vec(&[4], vec![0.3f64, -1.27, 0.9, 0.0]).unwrap();
        let q = QuantSpec::for_weights(&w, 8).unwrap();
        assert!((q.scale() - 1.27 / 127.0).abs() < 1e-15);
        let qt = fake_quantize(&w, &q);
        assert!((qt.at(&[1]) - (-1.27)).abs() < 1e-12);
        assert_eq!(qt.at(&[3]), 0.0);
    }

    #[test]
    fn zero_tensor_weight_spec_is_usable() {
        let w = Tensor::<f32>::zeros(&[3]);
        let q = QuantSpec::for_weights(&w, 4).unwrap();
        assert_eq!(fake_quantize(&w, &q).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn quantized_values_are_multiples_of_scale() {
        let mut r = ChaCha8Rng::seed_from_u64(32);
        let q = QuantSpec::unsigned(4, 0.125).unwrap();
        for _ in 0..200 {
            let v: f64 = r.gen_range(-1.0..3.0);
            let qv = q.quantize_value(v);
            let steps = qv / q.scale();
            assert!((steps - steps.round()).abs() < 1e-9);
            assert!((0.0..=15.0).contains(&steps));
        }
    }
}
