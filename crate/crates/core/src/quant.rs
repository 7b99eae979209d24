//! Uniform affine quantization for convolution weights and log2
//! quantization for post-softmax activations.
//!
//! Both schemes share the same shape: a step size `delta`, an integer zero
//! point, and a `bits`-wide code range `[0, 2^bits - 1]`. Codes are computed
//! as `clamp(round(x / delta) + zero_point)` where `x` is the raw value
//! (uniform) or `log2(a + epsilon)` (log2), so the matching dequantizers
//! `(q - zero_point) * delta` and `2^((q - zero_point) * delta)` are true
//! inverses up to rounding. Rounding is half-away-from-zero everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ensure_finite, QuantTensor, Tensor};

pub const DEFAULT_BITS: u8 = 8;
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Slack allowed above 1.0 when checking post-softmax values.
pub const SOFTMAX_TOLERANCE: f32 = 1e-6;

/// Step used for a uniform range that collapses to the single value 0.
pub const DEGENERATE_UNIFORM_DELTA: f64 = f32::MIN_POSITIVE as f64;

/// Log-domain step used when every calibrated activation is identical.
///
/// `f32::MIN_POSITIVE` cannot be used here: the zero point would have to be
/// `-A_min / delta`, which does not fit any integer type.
pub const DEGENERATE_LOG_DELTA: f64 = 1.0 / 65536.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantConfig {
    pub bits: u8,
    pub epsilon: f64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            bits: DEFAULT_BITS,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl QuantConfig {
    pub fn new(bits: u8, epsilon: f64) -> Result<Self> {
        let cfg = QuantConfig { bits, epsilon };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    pub fn max_code(&self) -> u32 {
        max_code(self.bits)
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if (2..=8).contains(&bits) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "bits must be in [2, 8], got {bits}"
        )))
    }
}

fn max_code(bits: u8) -> u32 {
    (1u32 << bits) - 1
}

/// Round half away from zero, saturating into i64.
fn round_code(x: f64) -> i64 {
    // `as` saturates for out-of-range floats
    x.round() as i64
}

fn clamp_code(code: i64, max: u32) -> u8 {
    code.clamp(0, i64::from(max)) as u8
}

/// Parameters of the uniform affine scheme.
///
/// `min`/`max` are the calibrated weight bounds. The step is derived from the
/// bounds widened to include zero, so the zero point always lands inside the
/// code range.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub delta: f64,
    pub zero_point: i64,
    pub min: f64,
    pub max: f64,
    pub bits: u8,
}

impl AffineParams {
    pub fn max_code(&self) -> u32 {
        max_code(self.bits)
    }

    /// Calibrated range collapsed to a single value.
    pub fn is_degenerate(&self) -> bool {
        self.min == self.max
    }

    fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(Error::InvalidRange(format!(
                "delta must be positive, got {}",
                self.delta
            )));
        }
        if self.zero_point < 0 || self.zero_point > i64::from(self.max_code()) {
            return Err(Error::InvalidRange(format!(
                "zero point {} outside code range",
                self.zero_point
            )));
        }
        if self.min.partial_cmp(&self.max).is_none_or(|o| o.is_gt()) {
            return Err(Error::InvalidRange(format!(
                "min {} > max {}",
                self.min, self.max
            )));
        }
        Ok(())
    }

    pub fn quantize_value(&self, w: f32) -> u8 {
        let code = round_code(f64::from(w) / self.delta).saturating_add(self.zero_point);
        clamp_code(code, self.max_code())
    }

    pub fn dequantize_code(&self, q: u8) -> f32 {
        ((i64::from(q) - self.zero_point) as f64 * self.delta) as f32
    }
}

/// Parameters of the log2 scheme. `min`/`max` live in the log2 domain:
/// `log2(a_min + epsilon)` and `log2(a_max + epsilon)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogParams {
    pub delta: f64,
    pub zero_point: i64,
    pub min: f64,
    pub max: f64,
    pub epsilon: f64,
    pub bits: u8,
}

impl LogParams {
    pub fn max_code(&self) -> u32 {
        max_code(self.bits)
    }

    pub fn is_degenerate(&self) -> bool {
        self.min == self.max
    }

    fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(Error::InvalidRange(format!(
                "delta must be positive, got {}",
                self.delta
            )));
        }
        if self.min.partial_cmp(&self.max).is_none_or(|o| o.is_gt()) {
            return Err(Error::InvalidRange(format!(
                "min {} > max {}",
                self.min, self.max
            )));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::InvalidRange(format!("bad epsilon {}", self.epsilon)));
        }
        Ok(())
    }

    pub fn quantize_value(&self, a: f32) -> u8 {
        let log = (f64::from(a) + self.epsilon).log2();
        let code = round_code(log / self.delta).saturating_add(self.zero_point);
        clamp_code(code, self.max_code())
    }

    pub fn dequantize_code(&self, q: u8) -> f32 {
        (((i64::from(q) - self.zero_point) as f64) * self.delta).exp2() as f32
    }

    /// Every value the dequantizer can emit, indexed by code.
    pub fn codebook(&self) -> Vec<f32> {
        (0..=self.max_code())
            .map(|k| self.dequantize_code(k as u8))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QuantParams {
    Uniform(AffineParams),
    Log2(LogParams),
}

impl QuantParams {
    pub fn bits(&self) -> u8 {
        match self {
            QuantParams::Uniform(p) => p.bits,
            QuantParams::Log2(p) => p.bits,
        }
    }

    pub fn max_code(&self) -> u32 {
        max_code(self.bits())
    }

    pub fn scheme(&self) -> &'static str {
        match self {
            QuantParams::Uniform(_) => "uniform",
            QuantParams::Log2(_) => "log2",
        }
    }

    pub fn is_degenerate(&self) -> bool {
        match self {
            QuantParams::Uniform(p) => p.is_degenerate(),
            QuantParams::Log2(p) => p.is_degenerate(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            QuantParams::Uniform(p) => p.validate(),
            QuantParams::Log2(p) => p.validate(),
        }
    }
}

impl From<AffineParams> for QuantParams {
    fn from(p: AffineParams) -> Self {
        QuantParams::Uniform(p)
    }
}

impl From<LogParams> for QuantParams {
    fn from(p: LogParams) -> Self {
        QuantParams::Log2(p)
    }
}

/// Wire form of [`QuantParams`] inside a manifest `quant` block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuantBlock {
    scheme: String,
    bits: u8,
    delta: f64,
    zero_point: i64,
    min: f64,
    max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    epsilon: Option<f64>,
}

impl Serialize for QuantParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let block = match self {
            QuantParams::Uniform(p) => QuantBlock {
                scheme: "uniform".into(),
                bits: p.bits,
                delta: p.delta,
                zero_point: p.zero_point,
                min: p.min,
                max: p.max,
                epsilon: None,
            },
            QuantParams::Log2(p) => QuantBlock {
                scheme: "log2".into(),
                bits: p.bits,
                delta: p.delta,
                zero_point: p.zero_point,
                min: p.min,
                max: p.max,
                epsilon: Some(p.epsilon),
            },
        };
        block.serialize(s)
    }
}

impl<'de> Deserialize<'de> for QuantParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let b = QuantBlock::deserialize(d)?;
        let params = match (b.scheme.as_str(), b.epsilon) {
            ("uniform", None) => QuantParams::Uniform(AffineParams {
                delta: b.delta,
                zero_point: b.zero_point,
                min: b.min,
                max: b.max,
                bits: b.bits,
            }),
            ("log2", Some(epsilon)) => QuantParams::Log2(LogParams {
                delta: b.delta,
                zero_point: b.zero_point,
                min: b.min,
                max: b.max,
                epsilon,
                bits: b.bits,
            }),
            ("uniform", Some(_)) => {
                return Err(D::Error::custom("uniform scheme takes no epsilon"))
            }
            ("log2", None) => return Err(D::Error::custom("log2 scheme requires epsilon")),
            (other, _) => return Err(D::Error::custom(format!("unknown scheme {other:?}"))),
        };
        params.validate().map_err(D::Error::custom)?;
        Ok(params)
    }
}

/// Uniform parameters for the calibrated range `[w_min, w_max]`.
///
/// The range is widened to include 0 before the step is computed. For ranges
/// that already straddle zero this is exactly
/// `delta = (w_max - w_min) / (2^b - 1)`, `zero_point = round(-w_min / delta)`.
pub fn affine_params(w_min: f32, w_max: f32, cfg: &QuantConfig) -> Result<AffineParams> {
    check_bits(cfg.bits)?;
    if !(w_min.is_finite() && w_max.is_finite()) {
        return Err(Error::InvalidRange(format!(
            "non-finite bounds ({w_min}, {w_max})"
        )));
    }
    if w_min > w_max {
        return Err(Error::InvalidRange(format!("min {w_min} > max {w_max}")));
    }
    let max = cfg.max_code();
    let lo = f64::from(w_min).min(0.0);
    let hi = f64::from(w_max).max(0.0);
    let (delta, zero_point) = if hi == lo {
        (DEGENERATE_UNIFORM_DELTA, 0)
    } else {
        let delta = (hi - lo) / f64::from(max);
        let z = round_code(-lo / delta).clamp(0, i64::from(max));
        (delta, z)
    };
    Ok(AffineParams {
        delta,
        zero_point,
        min: f64::from(w_min),
        max: f64::from(w_max),
        bits: cfg.bits,
    })
}

pub fn quantize_uniform(w: &Tensor, p: &AffineParams) -> Result<QuantTensor> {
    p.validate()?;
    w.ensure_finite()?;
    let codes = w.data().iter().map(|&v| p.quantize_value(v)).collect();
    QuantTensor::new(w.shape().clone(), codes, p.clone().into())
}

pub fn dequantize_uniform(q: &QuantTensor) -> Result<Tensor> {
    let QuantParams::Uniform(p) = q.params() else {
        return Err(Error::WrongScheme {
            expected: "uniform",
            found: q.params().scheme(),
        });
    };
    let data = q.codes().iter().map(|&c| p.dequantize_code(c)).collect();
    Tensor::new(q.shape().clone(), data)
}

/// Log2 parameters for post-softmax activations observed in
/// `[a_min, a_max]`.
///
/// `epsilon` is taken from `cfg` and is added to both bounds, matching the
/// offset applied to every value at quantization time.
pub fn log2_params(a_min: f32, a_max: f32, cfg: &QuantConfig) -> Result<LogParams> {
    check_bits(cfg.bits)?;
    if !(a_min.is_finite() && a_max.is_finite()) {
        return Err(Error::InvalidRange(format!(
            "non-finite bounds ({a_min}, {a_max})"
        )));
    }
    if a_min > a_max {
        return Err(Error::InvalidRange(format!("min {a_min} > max {a_max}")));
    }
    if a_min < 0.0 || a_max > 1.0 + SOFTMAX_TOLERANCE {
        return Err(Error::InvalidRange(format!(
            "({a_min}, {a_max}) is not a post-softmax range"
        )));
    }
    let eps = cfg.epsilon;
    if !(eps.is_finite() && eps >= 0.0) || f64::from(a_min) + eps <= 0.0 {
        return Err(Error::InvalidRange(format!(
            "log2 undefined: a_min + epsilon = {} with epsilon {eps}",
            f64::from(a_min) + eps
        )));
    }
    let log_min = (f64::from(a_min) + eps).log2();
    let log_max = (f64::from(a_max) + eps).log2();
    let delta = if log_max > log_min {
        (log_max - log_min) / f64::from(cfg.max_code())
    } else {
        DEGENERATE_LOG_DELTA
    };
    Ok(LogParams {
        delta,
        zero_point: round_code(-log_min / delta),
        min: log_min,
        max: log_max,
        epsilon: eps,
        bits: cfg.bits,
    })
}

/// Checks that every value is a plausible softmax output.
pub fn check_post_softmax(values: &[f32]) -> Result<()> {
    ensure_finite(values)?;
    match values
        .iter()
        .position(|&v| !(0.0..=1.0 + SOFTMAX_TOLERANCE).contains(&v))
    {
        Some(index) => Err(Error::NotPostSoftmax {
            value: values[index],
            index,
        }),
        None => Ok(()),
    }
}

pub fn quantize_log2(a: &Tensor, p: &LogParams) -> Result<QuantTensor> {
    p.validate()?;
    check_post_softmax(a.data())?;
    let codes = a.data().iter().map(|&v| p.quantize_value(v)).collect();
    QuantTensor::new(a.shape().clone(), codes, p.clone().into())
}

pub fn dequantize_log2(q: &QuantTensor) -> Result<Tensor> {
    let QuantParams::Log2(p) = q.params() else {
        return Err(Error::WrongScheme {
            expected: "log2",
            found: q.params().scheme(),
        });
    };
    let data = q.codes().iter().map(|&c| p.dequantize_code(c)).collect();
    Tensor::new(q.shape().clone(), data)
}

/// Quantize then dequantize in place.
pub fn fake_quantize_log2(values: &mut [f32], p: &LogParams) {
    for v in values {
        *v = p.dequantize_code(p.quantize_value(*v));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg8() -> QuantConfig {
        QuantConfig::default()
    }

    fn no_eps() -> QuantConfig {
        QuantConfig {
            bits: 8,
            epsilon: 0.0,
        }
    }

    #[test]
    fn config_validation() {
        assert!(QuantConfig::new(8, 1e-5).is_ok());
        assert!(QuantConfig::new(2, 1e-5).is_ok());
        assert!(QuantConfig::new(1, 1e-5).is_err());
        assert!(QuantConfig::new(9, 1e-5).is_err());
        assert!(QuantConfig::new(8, 0.0).is_err());
        assert!(QuantConfig::new(8, f64::NAN).is_err());
    }

    #[test]
    fn affine_params_examples() {
        let p = affine_params(0.0, 255.0, &cfg8()).unwrap();
        assert_eq!(p.delta, 1.0);
        assert_eq!(p.zero_point, 0);

        let p = affine_params(-1.0, 1.0, &cfg8()).unwrap();
        assert!((p.delta - 2.0 / 255.0).abs() < 1e-15);
        assert!((p.delta - 0.007_843_14).abs() < 1e-8);
        assert_eq!(p.zero_point, 128);
    }

    #[test]
    fn affine_params_constant_range() {
        let p = affine_params(5.0, 5.0, &cfg8()).unwrap();
        assert_eq!(p.zero_point, 0);
        assert!(p.is_degenerate());
        let t = Tensor::vector(vec![5.0; 6]).unwrap();
        let back = dequantize_uniform(&quantize_uniform(&t, &p).unwrap()).unwrap();
        for &v in back.data() {
            assert!((v - 5.0).abs() <= f32::EPSILON * 5.0, "{v}");
        }

        let p = affine_params(0.0, 0.0, &cfg8()).unwrap();
        assert_eq!(p.delta, f64::from(f32::MIN_POSITIVE));
        assert_eq!(p.zero_point, 0);
        let t = Tensor::vector(vec![0.0; 3]).unwrap();
        let back = dequantize_uniform(&quantize_uniform(&t, &p).unwrap()).unwrap();
        assert_eq!(back.data(), &[0.0; 3]);
    }

    #[test]
    fn affine_params_errors() {
        assert!(affine_params(f32::NAN, 1.0, &cfg8()).is_err());
        assert!(affine_params(0.0, f32::INFINITY, &cfg8()).is_err());
        assert!(affine_params(1.0, 0.0, &cfg8()).is_err());
    }

    #[test]
    fn same_sign_ranges_widen_to_zero() {
        let p = affine_params(2.0, 6.0, &cfg8()).unwrap();
        assert!((p.delta - 6.0 / 255.0).abs() < 1e-15);
        assert_eq!(p.zero_point, 0);
        let p = affine_params(-6.0, -2.0, &cfg8()).unwrap();
        assert_eq!(p.zero_point, 255);
    }

    #[test]
    fn quantize_uniform_examples() {
        let p = affine_params(-1.0, 1.0, &cfg8()).unwrap();
        let t = Tensor::vector(vec![0.0, -1.0, 1.0]).unwrap();
        let q = quantize_uniform(&t, &p).unwrap();
        assert_eq!(q.codes(), &[128, 0, 255]);
    }

    #[test]
    fn quantize_uniform_rejects_bad_delta_and_nan() {
        let mut p = affine_params(-1.0, 1.0, &cfg8()).unwrap();
        let t = Tensor::vector(vec![f32::NAN]).unwrap();
        assert_eq!(quantize_uniform(&t, &p).unwrap_err().code(), "non_finite");
        p.delta = 0.0;
        let t = Tensor::vector(vec![0.0]).unwrap();
        assert_eq!(
            quantize_uniform(&t, &p).unwrap_err().code(),
            "invalid_range"
        );
    }

    #[test]
    fn dequantize_uniform_examples() {
        let p = affine_params(-1.0, 1.0, &cfg8()).unwrap();
        assert_eq!(p.dequantize_code(128), 0.0);
        let expected = 127.0 * 2.0 / 255.0;
        assert!((f64::from(p.dequantize_code(255)) - expected).abs() < 1e-7);
        assert!((p.dequantize_code(255) - 0.996_078).abs() < 1e-6);
    }

    #[test]
    fn dequantize_rejects_wrong_scheme() {
        let p = log2_params(0.0, 1.0, &cfg8()).unwrap();
        let q = quantize_log2(&Tensor::vector(vec![0.5]).unwrap(), &p).unwrap();
        assert_eq!(dequantize_uniform(&q).unwrap_err().code(), "wrong_scheme");
        let a = affine_params(0.0, 1.0, &cfg8()).unwrap();
        let q = quantize_uniform(&Tensor::vector(vec![0.5]).unwrap(), &a).unwrap();
        assert_eq!(dequantize_log2(&q).unwrap_err().code(), "wrong_scheme");
    }

    #[test]
    fn out_of_range_inputs_saturate() {
        let p = affine_params(-1.0, 1.0, &cfg8()).unwrap();
        let t = Tensor::vector(vec![-1e30, -3.0, 3.0, 1e30]).unwrap();
        assert_eq!(quantize_uniform(&t, &p).unwrap().codes(), &[0, 0, 255, 255]);
    }

    #[test]
    fn log2_params_examples() {
        let p = log2_params(2f32.powi(-10), 1.0, &no_eps()).unwrap();
        assert_eq!(p.min, -10.0);
        assert_eq!(p.max, 0.0);
        assert!((p.delta - 10.0 / 255.0).abs() < 1e-15);
        assert!((p.delta - 0.039_215_7).abs() < 1e-7);
        assert_eq!(p.zero_point, 255);

        let p = log2_params(0.0, 1.0, &cfg8()).unwrap();
        assert!((p.min - (-16.609_640_474_436_81)).abs() < 1e-9);
        assert!((p.max - 1.442_687_827_471_3e-5).abs() < 1e-12);
    }

    #[test]
    fn log2_params_errors() {
        assert!(log2_params(0.6, 0.5, &cfg8()).is_err());
        assert!(log2_params(0.0, 1.0, &no_eps()).is_err());
        assert!(log2_params(-0.1, 0.5, &cfg8()).is_err());
        assert!(log2_params(0.1, 1.5, &cfg8()).is_err());
    }

    #[test]
    fn log2_constant_range_reconstructs() {
        // relative to the constant itself, so epsilon / c must stay below 1e-3
        for c in [0.02f32, 0.25, 0.7, 1.0] {
            let p = log2_params(c, c, &cfg8()).unwrap();
            assert!(p.is_degenerate());
            assert!(p.delta > 0.0);
            let q = quantize_log2(&Tensor::vector(vec![c; 4]).unwrap(), &p).unwrap();
            let back = dequantize_log2(&q).unwrap();
            for &v in back.data() {
                let rel = ((v - c) / c).abs();
                assert!(rel <= 1e-3, "c={c} v={v}");
            }
        }
    }

    #[test]
    fn quantize_log2_examples() {
        let p = log2_params(2f32.powi(-10), 1.0, &no_eps()).unwrap();
        let t = Tensor::vector(vec![1.0, 2f32.powi(-5)]).unwrap();
        assert_eq!(quantize_log2(&t, &p).unwrap().codes(), &[255, 127]);

        let p = log2_params(0.0, 1.0, &cfg8()).unwrap();
        let t = Tensor::vector(vec![0.0]).unwrap();
        assert_eq!(quantize_log2(&t, &p).unwrap().codes(), &[0]);
    }

    #[test]
    fn quantize_log2_rejects_non_softmax_values() {
        let p = log2_params(0.0, 1.0, &cfg8()).unwrap();
        for bad in [-0.01f32, 1.01] {
            let err = quantize_log2(&Tensor::vector(vec![0.5, bad]).unwrap(), &p).unwrap_err();
            assert_eq!(err.code(), "not_post_softmax");
            assert!(err.to_string().starts_with("not a post-softmax activation"));
        }
        assert!(quantize_log2(&Tensor::vector(vec![1.0 + 5e-7]).unwrap(), &p).is_ok());
    }

    #[test]
    fn dequantize_log2_examples() {
        let p = log2_params(2f32.powi(-10), 1.0, &no_eps()).unwrap();
        assert_eq!(p.dequantize_code(255), 1.0);
        let v = f64::from(p.dequantize_code(127));
        // 2^(-128 * 10 / 255) = 2^-5.019607...
        assert!((v - 0.030_828_150_659).abs() < 1e-8, "{v}");
        assert!((v.log2() - (-5.0)).abs() <= p.delta);
    }

    #[test]
    fn codebook_spans_code_range() {
        let p = log2_params(0.0, 1.0, &cfg8()).unwrap();
        let book = p.codebook();
        assert_eq!(book.len(), 256);
        assert!(book.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn quant_block_wire_format() {
        let p: QuantParams = affine_params(-1.0, 1.0, &cfg8()).unwrap().into();
        let v = serde_json::to_value(&p).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(
            keys,
            ["bits", "delta", "max", "min", "scheme", "zero_point"]
        );
        assert_eq!(v["scheme"], "uniform");

        let p: QuantParams = log2_params(0.0, 1.0, &cfg8()).unwrap().into();
        let v = serde_json::to_value(&p).unwrap();
        assert_eq!(v["scheme"], "log2");
        assert_eq!(v["epsilon"], 1e-5);
        let back: QuantParams = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);

        let bad = serde_json::json!({"scheme": "uniform", "bits": 8, "delta": 0.0,
            "zero_point": 0, "min": 0.0, "max": 1.0});
        assert!(serde_json::from_value::<QuantParams>(bad).is_err());
    }

    fn range() -> impl Strategy<Value = (f32, f32)> {
        (-10.0f32..10.0, -10.0f32..10.0).prop_map(|(a, b)| (a.min(b), a.max(b)))
    }

    proptest! {
        #[test]
        fn uniform_round_trip_within_delta(
            (lo, hi) in range(),
            bits in 2u8..=8,
            fracs in prop::collection::vec(0.0f32..=1.0, 1..64),
        ) {
            let p = affine_params(lo, hi, &QuantConfig { bits, ..cfg8() }).unwrap();
            for f in fracs {
                let w = (lo + (hi - lo) * f).clamp(lo, hi);
                let back = p.dequantize_code(p.quantize_value(w));
                prop_assert!((f64::from(w) - f64::from(back)).abs() <= p.delta * (1.0 + 1e-6));
            }
        }

        #[test]
        fn uniform_codes_monotone(lo_hi in range(), x in -20.0f32..20.0, y in -20.0f32..20.0) {
            let p = affine_params(lo_hi.0, lo_hi.1, &cfg8()).unwrap();
            let (a, b) = (x.min(y), x.max(y));
            prop_assert!(p.quantize_value(a) <= p.quantize_value(b));
        }

        #[test]
        fn log_round_trip_within_delta(
            a_min in 0.0f32..0.5,
            span in 0.0f32..0.5,
            bits in 2u8..=8,
            fracs in prop::collection::vec(0.0f32..=1.0, 1..64),
        ) {
            let a_max = a_min + span;
            let p = log2_params(a_min, a_max, &QuantConfig { bits, ..cfg8() }).unwrap();
            for f in fracs {
                let a = (a_min + span * f).clamp(a_min, a_max);
                let back = p.dequantize_code(p.quantize_value(a));
                let err = (f64::from(back).log2() - (f64::from(a) + p.epsilon).log2()).abs();
                prop_assert!(err <= p.delta * (1.0 + 1e-6) + 1e-9, "err {} delta {}", err, p.delta);
            }
        }

        #[test]
        fn log_codes_monotone(x in 0.0f32..=1.0, y in 0.0f32..=1.0) {
            let p = log2_params(0.0, 1.0, &cfg8()).unwrap();
            let (a, b) = (x.min(y), x.max(y));
            prop_assert!(p.quantize_value(a) <= p.quantize_value(b));
        }
    }
}
