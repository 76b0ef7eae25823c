//! Affine int8 quantization parameters and tensor conversion.
//!
//! `q = clamp(round_half_even(x / scale) + zero_point, qmin, qmax)` and
//! `x' = (q - zero_point) * scale`. Scales are kept in `f64` so that ranges
//! like `(-1, 1)` give the exact half-way zero point the formula implies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor, TensorData};

/// Integer encoding targeted by a [`QuantParams`]. Weights use symmetric
/// `I8`, activations asymmetric `U8`; `I32` only appears on static biases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantDType {
    U8,
    I8,
    I32,
}

impl QuantDType {
    pub fn bounds(self) -> (i64, i64) {
        match self {
            QuantDType::U8 => (0, 255),
            QuantDType::I8 => (-128, 127),
            QuantDType::I32 => (i32::MIN as i64, i32::MAX as i64),
        }
    }

    pub fn dtype(self) -> DType {
        match self {
            QuantDType::U8 => DType::U8,
            QuantDType::I8 => DType::I8,
            QuantDType::I32 => DType::I32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub dtype: QuantDType,
    pub scale: f64,
    pub zero_point: i32,
}

impl QuantParams {
    /// Validated constructor: positive finite scale, zero-point inside the
    /// target range, and zero zero-point for the symmetric encodings.
    pub fn new(scale: f64, zero_point: i32, dtype: QuantDType) -> Result<Self> {
        let p = QuantParams {
            dtype,
            scale,
            zero_point,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Argument(format!("scale must be positive, got {}", self.scale)));
        }
        let (lo, hi) = self.dtype.bounds();
        let zp = self.zero_point as i64;
        if zp < lo || zp > hi {
            return Err(Error::Argument(format!(
                "zero point {zp} outside {lo}..={hi}"
            )));
        }
        if self.dtype != QuantDType::U8 && self.zero_point != 0 {
            return Err(Error::Argument("symmetric encodings need a zero point of 0".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn quantize_value(&self, x: f32) -> i64 {
        let (lo, hi) = self.dtype.bounds();
        let q = (x as f64 / self.scale).round_ties_even();
        // `as` saturates (NaN -> 0) before the integer clamp
        (q as i64).saturating_add(self.zero_point as i64).clamp(lo, hi)
    }

    #[inline]
    pub fn dequantize_value(&self, q: i64) -> f32 {
        ((q - self.zero_point as i64) as f64 * self.scale) as f32
    }

    /// Snaps `x` to the nearest representable grid point.
    #[inline]
    pub fn fake_quantize(&self, x: f32) -> f32 {
        self.dequantize_value(self.quantize_value(x))
    }

    /// Real-valued interval the encoding can represent exactly at its ends.
    pub fn representable_range(&self) -> (f32, f32) {
        let (lo, hi) = self.dtype.bounds();
        (self.dequantize_value(lo), self.dequantize_value(hi))
    }
}

/// Derives quantization parameters for the observed range `[min, max]`.
///
/// `U8` is asymmetric over the range widened to include zero:
/// `scale = (max - min) / 255`, `zero_point = round(-min / scale)`. `I8` is
/// symmetric: `scale = max(|min|, |max|) / 127`, zero-point 0. An all-zero
/// range yields `scale = 1`, zero-point 0.
pub fn compute_qparams(min: f32, max: f32, dtype: QuantDType) -> QuantParams {
    let lo = (min as f64).min(0.0);
    let hi = (max as f64).max(0.0);
    match dtype {
        QuantDType::U8 => {
            let span = hi - lo;
            if !(span > 0.0 && span.is_finite()) {
                return QuantParams {
                    dtype,
                    scale: 1.0,
                    zero_point: 0,
                };
            }
            let scale = span / 255.0;
            let zp = (-lo / scale).round_ties_even().clamp(0.0, 255.0);
            QuantParams {
                dtype,
                scale,
                zero_point: zp as i32,
            }
        }
        QuantDType::I8 | QuantDType::I32 => {
            let amax = hi.max(-lo);
            let levels = if dtype == QuantDType::I8 { 127.0 } else { i32::MAX as f64 };
            let scale = amax / levels;
            QuantParams {
                dtype,
                scale: if scale > 0.0 && scale.is_finite() { scale } else { 1.0 },
                zero_point: 0,
            }
        }
    }
}

/// Quantizes an f32 tensor element-wise; the shape is preserved.
pub fn quantize_tensor(t: &Tensor, p: &QuantParams) -> Result<Tensor> {
    let xs = t.as_f32()?;
    let data = match p.dtype {
        QuantDType::U8 => TensorData::U8(xs.iter().map(|&x| p.quantize_value(x) as u8).collect()),
        QuantDType::I8 => TensorData::I8(xs.iter().map(|&x| p.quantize_value(x) as i8).collect()),
        QuantDType::I32 => TensorData::I32(xs.iter().map(|&x| p.quantize_value(x) as i32).collect()),
    };
    Tensor::new(t.shape().to_vec(), data)
}

/// Inverse of [`quantize_tensor`]: `(q - zero_point) * scale`.
pub fn dequantize_tensor(q: &Tensor, p: &QuantParams) -> Result<Tensor> {
    if q.dtype() != p.dtype.dtype() {
        return Err(Error::Argument(format!(
            "cannot dequantize {} data with {:?} parameters",
            q.dtype(),
            p.dtype
        )));
    }
    Tensor::from_f32(q.shape().to_vec(), integer_values(q)?.map(|v| p.dequantize_value(v)).collect())
}

/// Widened view of an integer tensor's elements.
pub(crate) fn integer_values(t: &Tensor) -> Result<Box<dyn Iterator<Item = i64> + '_>> {
    Ok(match t.data() {
        TensorData::I8(v) => Box::new(v.iter().map(|&x| x as i64)),
        TensorData::U8(v) => Box::new(v.iter().map(|&x| x as i64)),
        TensorData::I32(v) => Box::new(v.iter().map(|&x| x as i64)),
        TensorData::I64(v) => Box::new(v.iter().copied()),
        TensorData::F32(_) => {
            return Err(Error::Argument("expected an integer tensor".into()));
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_unit_range_u8() {
        let p = compute_qparams(-1.0, 1.0, QuantDType::U8);
        assert_eq!(p.scale, 2.0 / 255.0);
        assert_eq!(p.zero_point, 128);
        assert_eq!(p.quantize_value(0.0), 128);
    }

    #[test]
    fn degenerate_ranges() {
        let p = compute_qparams(0.0, 0.0, QuantDType::U8);
        assert_eq!((p.scale, p.zero_point), (1.0, 0));
        let p = compute_qparams(0.0, 0.0, QuantDType::I8);
        assert_eq!((p.scale, p.zero_point), (1.0, 0));
    }

    #[test]
    fn symmetric_i8_uses_largest_magnitude() {
        let p = compute_qparams(-0.5, 0.25, QuantDType::I8);
        assert_eq!(p.scale, 0.5 / 127.0);
        assert_eq!(p.zero_point, 0);
    }

    #[test]
    fn u8_widens_to_include_zero() {
        let p = compute_qparams(2.0, 5.0, QuantDType::U8);
        assert_eq!(p.zero_point, 0);
        assert_eq!(p.scale, 5.0 / 255.0);
        let p = compute_qparams(-4.0, -1.0, QuantDType::U8);
        assert_eq!(p.zero_point, 255);
    }

    #[test]
    fn quantize_known_values() {
        let p = compute_qparams(-1.0, 1.0, QuantDType::U8);
        let x = Tensor::from_f32(vec![3], vec![-1.0, 0.0, 1.0]).unwrap();
        let q = quantize_tensor(&x, &p).unwrap();
        assert_eq!(q.data().dtype(), DType::U8);
        assert!(matches!(q.data(), TensorData::U8(v) if v == &[0, 128, 255]));
    }

    #[test]
    fn zeros_map_to_zero_point() {
        let p = QuantParams::new(0.1, 37, QuantDType::U8).unwrap();
        let q = quantize_tensor(&Tensor::zeros(vec![4]), &p).unwrap();
        assert!(matches!(q.data(), TensorData::U8(v) if v.iter().all(|&x| x == 37)));
    }

    #[test]
    fn out_of_range_saturates() {
        let p = QuantParams::new(0.01, 0, QuantDType::I8).unwrap();
        assert_eq!(p.quantize_value(1e6), 127);
        assert_eq!(p.quantize_value(-1e6), -128);
        assert_eq!(p.quantize_value(f32::NAN), 0);
        let p = QuantParams::new(0.01, 10, QuantDType::U8).unwrap();
        assert_eq!(p.quantize_value(-5.0), 0);
    }

    #[test]
    fn ties_round_to_even() {
        let p = QuantParams::new(1.0, 0, QuantDType::I8).unwrap();
        assert_eq!(p.quantize_value(0.5), 0);
        assert_eq!(p.quantize_value(1.5), 2);
        assert_eq!(p.quantize_value(2.5), 2);
        assert_eq!(p.quantize_value(-2.5), -2);
    }

    #[test]
    fn dequantize_known_values() {
        let p = compute_qparams(-1.0, 1.0, QuantDType::U8);
        let q = Tensor::new(vec![2], TensorData::U8(vec![128, 255])).unwrap();
        let x = dequantize_tensor(&q, &p).unwrap();
        let x = x.as_f32().unwrap();
        assert_eq!(x[0], 0.0);
        // 127 * 2/255 = 0.996078431...
        assert!((x[1] as f64 - 127.0 * 2.0 / 255.0).abs() < 1e-7);
        assert!(dequantize_tensor(&q, &QuantParams::new(1.0, 0, QuantDType::I8).unwrap()).is_err());
    }

    #[test]
    fn constructor_checks_invariants() {
        assert!(QuantParams::new(0.0, 0, QuantDType::U8).is_err());
        assert!(QuantParams::new(1.0, 256, QuantDType::U8).is_err());
        assert!(QuantParams::new(1.0, 3, QuantDType::I8).is_err());
        assert!(QuantParams::new(f64::NAN, 0, QuantDType::I8).is_err());
    }
}
