//! Dense row-major tensors, their quantized counterpart, and the element
//! statistics shared by calibration, quantization, and reporting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantParams;

/// Ordered list of dimensions. Every dim is at least 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidShape {
                dims,
                reason: "no dimensions".into(),
            });
        }
        if dims.contains(&0) {
            return Err(Error::InvalidShape {
                dims,
                reason: "zero-sized dimension".into(),
            });
        }
        if dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .is_none()
        {
            return Err(Error::InvalidShape {
                dims,
                reason: "element count overflows".into(),
            });
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = Error;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Shape::new(dims)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(s: Shape) -> Self {
        s.0
    }
}

/// fp32 tensor. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly.
    ///
    /// Finiteness is not checked here; see [`Tensor::ensure_finite`].
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::InvalidShape {
                dims: shape.0,
                reason: format!("data length {} does not match", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Tensor::new(Shape::new(dims)?, data)
    }

    /// One-dimensional tensor over `data`.
    pub fn vector(data: Vec<f32>) -> Result<Self> {
        Tensor::from_vec(vec![data.len()], data)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ensure_finite(&self) -> Result<()> {
        ensure_finite(&self.data)
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Tensor::from_vec(dims, self.data)
    }
}

pub(crate) fn ensure_finite(data: &[f32]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// Quantized tensor: one code per element plus the params that decode it.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    shape: Shape,
    codes: Vec<u8>,
    params: QuantParams,
}

impl QuantTensor {
    pub fn new(shape: Shape, codes: Vec<u8>, params: QuantParams) -> Result<Self> {
        if codes.len() != shape.numel() {
            return Err(Error::InvalidShape {
                dims: shape.0,
                reason: format!("code length {} does not match", codes.len()),
            });
        }
        let bits = params.bits();
        let max = params.max_code();
        if let Some(&code) = codes.iter().find(|&&c| u32::from(c) > max) {
            return Err(Error::CodeOutOfRange {
                code: code.into(),
                max,
                bits,
            });
        }
        Ok(QuantTensor {
            shape,
            codes,
            params,
        })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }
}

/// Exact elementwise minimum and maximum.
pub fn min_max(t: &Tensor) -> Result<(f32, f32)> {
    min_max_slice(t.data())
}

pub(crate) fn min_max_slice(data: &[f32]) -> Result<(f32, f32)> {
    let (first, rest) = data.split_first().ok_or(Error::EmptyTensor)?;
    if !first.is_finite() {
        return Err(Error::NonFinite { index: 0 });
    }
    let mut lo = *first;
    let mut hi = *first;
    for (i, &v) in rest.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { index: i + 1 });
        }
        if v < lo {
            lo = v;
        }
        if v > hi {
            hi = v;
        }
    }
    Ok((lo, hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub mse: f64,
    pub max_abs_err: f64,
    pub cosine_sim: f64,
}

/// Reconstruction error between an original tensor and its round trip.
///
/// Accumulates in f64. Cosine similarity is 1.0 when both norms are zero and
/// 0.0 when exactly one is.
pub fn error_metrics(original: &Tensor, reconstructed: &Tensor) -> Result<ErrorMetrics> {
    if original.shape() != reconstructed.shape() {
        return Err(Error::ShapeMismatch {
            left: original.shape().dims().to_vec(),
            right: reconstructed.shape().dims().to_vec(),
        });
    }
    Ok(error_metrics_slice(original.data(), reconstructed.data()))
}

pub(crate) fn error_metrics_slice(a: &[f32], b: &[f32]) -> ErrorMetrics {
    debug_assert_eq!(a.len(), b.len());
    let mut sq = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        let d = x - y;
        sq += d * d;
        max_abs = max_abs.max(d.abs());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let cosine_sim = match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot / (na * nb).sqrt()).clamp(-1.0, 1.0),
    };
    ErrorMetrics {
        mse: if a.is_empty() {
            0.0
        } else {
            sq / a.len() as f64
        },
        max_abs_err: max_abs,
        cosine_sim,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{affine_params, QuantConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shape_rejects_zero_dims_and_empty() {
        assert!(Shape::new(vec![]).is_err());
        assert!(Shape::new(vec![2, 0, 3]).is_err());
        assert_eq!(Shape::new(vec![2, 3, 4]).unwrap().numel(), 24);
    }

    #[test]
    fn tensor_rejects_length_mismatch() {
        assert!(Tensor::from_vec(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn min_max_examples() {
        assert_eq!(
            min_max(&Tensor::vector(vec![1.0]).unwrap()).unwrap(),
            (1.0, 1.0)
        );
        let t = Tensor::vector(vec![-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(min_max(&t).unwrap(), (-1.0, 1.0));
    }

    #[test]
    fn min_max_matches_scan_on_uniform_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f32> = (0..1000).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let t = Tensor::vector(data).unwrap();
        assert_eq!(min_max(&t).unwrap(), (lo, hi));
    }

    #[test]
    fn min_max_errors() {
        assert!(matches!(min_max_slice(&[]), Err(Error::EmptyTensor)));
        let t = Tensor::vector(vec![0.0, f32::NAN]).unwrap();
        let err = min_max(&t).unwrap_err();
        assert_eq!(err.to_string(), "non-finite value at index 1");
        let t = Tensor::vector(vec![f32::INFINITY]).unwrap();
        assert_eq!(min_max(&t).unwrap_err().code(), "non_finite");
    }

    #[test]
    fn error_metrics_examples() {
        let t = Tensor::vector(vec![0.5, -2.0, 3.0]).unwrap();
        let m = error_metrics(&t, &t).unwrap();
        assert_eq!((m.mse, m.max_abs_err, m.cosine_sim), (0.0, 0.0, 1.0));

        let a = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let b = Tensor::vector(vec![0.0, 1.0]).unwrap();
        let m = error_metrics(&a, &b).unwrap();
        assert_eq!((m.mse, m.max_abs_err, m.cosine_sim), (1.0, 1.0, 0.0));

        let z = Tensor::vector(vec![0.0, 0.0]).unwrap();
        assert_eq!(error_metrics(&z, &z).unwrap().cosine_sim, 1.0);

        let c = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(error_metrics(&a, &c).unwrap_err().code(), "shape_mismatch");
    }

    #[test]
    fn error_metrics_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Vec<f32> = (0..4096).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let b: Vec<f32> = a.iter().map(|v| v + rng.gen_range(-0.1..0.1)).collect();

        // independent oracle: separate passes, no shared accumulator
        let n = a.len() as f64;
        let mut mse = 0.0;
        for i in 0..a.len() {
            mse += (a[i] as f64 - b[i] as f64).powi(2);
        }
        mse /= n;
        let max_abs = (0..a.len())
            .map(|i| (a[i] as f64 - b[i] as f64).abs())
            .fold(0.0, f64::max);
        let dot: f64 = (0..a.len()).map(|i| a[i] as f64 * b[i] as f64).sum();
        let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();

        let m = error_metrics(
            &Tensor::vector(a.clone()).unwrap(),
            &Tensor::vector(b.clone()).unwrap(),
        )
        .unwrap();
        assert!((m.mse - mse).abs() <= 1e-6);
        assert!((m.max_abs_err - max_abs).abs() <= 1e-6);
        assert!((m.cosine_sim - dot / (na * nb)).abs() <= 1e-6);
    }

    #[test]
    fn quant_tensor_rejects_codes_beyond_bit_width() {
        let cfg = QuantConfig {
            bits: 4,
            ..QuantConfig::default()
        };
        let p = affine_params(-1.0, 1.0, &cfg).unwrap();
        let shape = Shape::new(vec![2]).unwrap();
        assert!(QuantTensor::new(shape.clone(), vec![0, 15], p.clone().into()).is_ok());
        let err = QuantTensor::new(shape, vec![0, 16], p.into()).unwrap_err();
        assert_eq!(err.code(), "code_out_of_range");
    }

    proptest! {
        #[test]
        fn min_max_equals_linear_scan(data in prop::collection::vec(-1e6f32..1e6, 1..512)) {
            let mut lo = data[0];
            let mut hi = data[0];
            for &v in &data[1..] {
                if v < lo { lo = v; }
                if v > hi { hi = v; }
            }
            let t = Tensor::vector(data).unwrap();
            prop_assert_eq!(min_max(&t).unwrap(), (lo, hi));
        }

        #[test]
        fn error_metrics_identity(data in prop::collection::vec(-1e3f32..1e3, 1..256)) {
            let t = Tensor::vector(data).unwrap();
            let m = error_metrics(&t, &t).unwrap();
            prop_assert_eq!(m.mse, 0.0);
            prop_assert_eq!(m.max_abs_err, 0.0);
            prop_assert_eq!(m.cosine_sim, 1.0);
        }
    }
}
