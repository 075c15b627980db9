//! Fixed-point arithmetic: quantization, requantization and accumulator sizing.
//!
//! All scales are powers of two and all zero points are zero, so a code `q`
//! under a spec with `frac` fractional bits represents `q * 2^-frac`.

use crate::ir::{LayerGeom, QuantSpec};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Storage width of every accumulator register.
pub const ACC_WIDTH: u32 = 32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QuantError {
    #[error("code {code} outside {spec} range")]
    OutOfRange { code: i64, spec: QuantSpec },
    #[error("requantization would up-scale: input frac {in_frac} < output frac {out_frac}")]
    UpScale { in_frac: i32, out_frac: i32 },
    #[error("accumulator overflow risk: {required} bits required, register has {width}")]
    AccumulatorOverflow { required: u32, width: u32 },
}

/// Round half away from zero, then clamp into the spec's code range.
pub fn quantize(value: f64, spec: QuantSpec) -> i64 {
    let scaled = (value * 2f64.powi(spec.frac)).round();
    if scaled.is_nan() {
        return 0;
    }
    (scaled.max(spec.q_min() as f64).min(spec.q_max() as f64)) as i64
}

pub fn dequantize(code: i64, spec: QuantSpec) -> Result<f64, QuantError> {
    if !spec.contains(code) {
        return Err(QuantError::OutOfRange { code, spec });
    }
    Ok(code as f64 * 2f64.powi(-spec.frac))
}

/// Bias format for a layer with input `x` and weights `w`: 16 bits, `frac_x + frac_w`.
pub fn bias_spec(x: QuantSpec, w: QuantSpec) -> QuantSpec {
    QuantSpec::signed(16, x.frac + w.frac)
}

/// `acc / 2^shift`, rounded half away from zero.
#[inline]
pub fn shift_round(acc: i64, shift: u32) -> i64 {
    if shift == 0 {
        return acc;
    }
    if shift >= 63 {
        return 0;
    }
    let half = 1i64 << (shift - 1);
    if acc >= 0 {
        (acc + half) >> shift
    } else {
        -((-acc + half) >> shift)
    }
}

/// Requantizes an accumulator holding `in_frac` fractional bits to `out`,
/// optionally clamping at zero (fused ReLU).
pub fn requantize(acc: i64, in_frac: i32, out: QuantSpec, relu: bool) -> Result<i64, QuantError> {
    if in_frac < out.frac {
        return Err(QuantError::UpScale { in_frac, out_frac: out.frac });
    }
    Ok(requantize_unchecked(acc, (in_frac - out.frac) as u32, out, relu))
}

/// Hot-path variant of [`requantize`] with a pre-validated shift.
#[inline]
pub fn requantize_unchecked(acc: i64, shift: u32, out: QuantSpec, relu: bool) -> i64 {
    let lo = if relu { out.q_min().max(0) } else { out.q_min() };
    shift_round(acc, shift).clamp(lo, out.q_max())
}

/// Accumulator sizing of one conv-like layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccSpec {
    pub width: u32,
    /// Whole-layer accumulation count `och * ich * fh * fw`.
    pub n_acc: u64,
    /// `ceil(log2(n_acc)) + 2 * bw`.
    pub bw_acc_required: u32,
    /// Accumulations feeding a single output register, `ich * fh * fw`.
    pub n_phys: u64,
    /// `ceil(log2(n_phys)) + 2 * bw`.
    pub bw_phys: u32,
}

pub fn ceil_log2(n: u64) -> u32 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros()
    }
}

pub fn accumulator_requirements(geom: &LayerGeom, bw: u32) -> Result<AccSpec, QuantError> {
    let n_phys = (geom.ich * geom.fh * geom.fw) as u64;
    let n_acc = geom.och as u64 * n_phys;
    let spec = AccSpec {
        width: ACC_WIDTH,
        n_acc,
        bw_acc_required: ceil_log2(n_acc) + 2 * bw,
        n_phys,
        bw_phys: ceil_log2(n_phys) + 2 * bw,
    };
    if spec.bw_acc_required > ACC_WIDTH {
        return Err(QuantError::AccumulatorOverflow { required: spec.bw_acc_required, width: ACC_WIDTH });
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const S8F8: QuantSpec = QuantSpec::signed(8, 8);

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(0.0, S8F8), 0);
        assert_eq!(quantize(0.0, QuantSpec::unsigned(16, -3)), 0);
        // round(0.4 * 256) = round(102.4)
        assert_eq!(quantize(0.4, S8F8), 102);
        assert_eq!(quantize(1.0, S8F8), 127);
        assert_eq!(quantize(-1.0, S8F8), -128);
        // half away from zero
        assert_eq!(quantize(2.5 / 256.0, S8F8), 3);
        assert_eq!(quantize(-2.5 / 256.0, S8F8), -3);
    }

    #[test]
    fn dequantize_examples() {
        assert_eq!(dequantize(0, S8F8).unwrap(), 0.0);
        assert_eq!(dequantize(127, S8F8).unwrap(), 0.49609375);
        assert!(matches!(dequantize(128, S8F8), Err(QuantError::OutOfRange { .. })));
    }

    #[test]
    fn bias_spec_examples() {
        let b = bias_spec(QuantSpec::signed(8, 6), QuantSpec::signed(8, 7));
        assert_eq!((b.bw, b.frac, b.signed), (16, 13, true));
        assert_eq!(bias_spec(QuantSpec::signed(8, 0), QuantSpec::signed(8, 0)).frac, 0);
        assert_eq!(bias_spec(S8F8, S8F8).frac, 16);
    }

    #[test]
    fn requantize_examples() {
        let out = QuantSpec::signed(8, 0);
        assert_eq!(requantize(512, 4, out, false).unwrap(), 32);
        assert_eq!(requantize(-100, 4, out, true).unwrap(), 0);
        assert_eq!(requantize(1 << 20, 4, out, false).unwrap(), 127);
        assert_eq!(requantize(-(1 << 20), 4, out, false).unwrap(), -128);
        assert_eq!(requantize(24, 4, out, false).unwrap(), 2); // 1.5 -> 2
        assert_eq!(requantize(-24, 4, out, false).unwrap(), -2);
        assert!(matches!(requantize(1, 2, QuantSpec::signed(8, 3), false), Err(QuantError::UpScale { .. })));
    }

    #[test]
    fn accumulator_examples() {
        let g = LayerGeom::conv(32, 16, 16, 32, 3, 3, 1, 1);
        let a = accumulator_requirements(&g, 8).unwrap();
        assert_eq!((a.n_acc, a.bw_acc_required, a.width), (9216, 30, 32));
        let one = LayerGeom::conv(1, 1, 1, 1, 1, 1, 1, 0);
        assert_eq!(accumulator_requirements(&one, 8).unwrap().bw_acc_required, 16);
        let l64 = LayerGeom::conv(64, 8, 8, 64, 3, 3, 1, 1);
        let a = accumulator_requirements(&l64, 8).unwrap();
        assert_eq!((a.n_phys, a.bw_phys), (576, 26));
        let big = LayerGeom::conv(128, 8, 8, 128, 3, 3, 1, 1);
        assert!(matches!(accumulator_requirements(&big, 8), Err(QuantError::AccumulatorOverflow { .. })));
    }

    proptest! {
        #[test]
        fn code_round_trip(bw in prop::sample::select(vec![8u32, 16]), frac in -6i32..12, signed: bool, raw: i64) {
            let spec = QuantSpec { bw, frac, signed };
            let span = spec.q_max() - spec.q_min() + 1;
            let q = spec.q_min() + raw.rem_euclid(span);
            prop_assert_eq!(quantize(dequantize(q, spec).unwrap(), spec), q);
        }

        #[test]
        fn rounding_bound(b in -0.49f64..0.49, frac in 0i32..8) {
            let spec = QuantSpec::signed(8, frac);
            let back = dequantize(quantize(b, spec), spec).unwrap();
            prop_assert!((back - b).abs() <= 2f64.powi(-frac - 1) + 1e-12);
        }

        #[test]
        fn requantize_monotone(a in -(1i64 << 31)..(1i64 << 31), d in 0i64..1000, shift in 0u32..20, relu: bool) {
            let out = QuantSpec::signed(8, 0);
            let lo = requantize(a, shift as i32, out, relu).unwrap();
            let hi = requantize(a + d, shift as i32, out, relu).unwrap();
            prop_assert!(lo <= hi);
        }
    }
}
