//! Minimal single-sample executor for sequential toy graphs.
//!
//! Supports Conv2d (integer `stride`/`padding` attrs), Linear over the last
//! axis, ReLU, Softmax over the last axis and Flatten. Containers compose
//! their children in declaration order. In simulated-quant mode conv weights
//! are dequantized before use and every calibrated softmax output is passed
//! through the log2 quantizer and back.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::identify_blocks;
use crate::error::{Error, Result};
use crate::package::{site_id, DType, LayerKind, ModelPackage, ModuleNode, TracePackage};
use crate::quant::{dequantize_uniform, fake_quantize_log2, LogParams, QuantParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Fp32,
    SimulatedQuant,
}

#[derive(Debug, Clone)]
enum Op {
    Conv2d {
        weight: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        padding: usize,
    },
    Linear {
        weight: Tensor,
        bias: Option<Tensor>,
    },
    Relu,
    Softmax {
        site: Option<String>,
        fake_quant: Option<LogParams>,
    },
    Flatten,
}

#[derive(Debug, Clone)]
struct Step {
    path: String,
    op: Op,
}

/// Ordered executable steps resolved from a package.
#[derive(Debug, Clone)]
pub struct ExecPlan {
    steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecOutput {
    pub output: Tensor,
    /// Post-softmax tensors per trace site id.
    pub captured_softmax: BTreeMap<String, Tensor>,
}

fn not_exec(path: &str, reason: impl std::fmt::Display) -> Error {
    Error::NotExecutable(format!("{path}: {reason}"))
}

fn usize_attr(node: &ModuleNode, path: &str, key: &str, default: usize) -> Result<usize> {
    match node.attr(key) {
        None => Ok(default),
        Some(v) if v >= 0 => Ok(v as usize),
        Some(v) => Err(not_exec(path, format!("negative {key} {v}"))),
    }
}

struct Builder<'a> {
    pkg: &'a ModelPackage,
    mode: ExecMode,
    sites: Vec<String>,
    steps: Vec<Step>,
}

impl Builder<'_> {
    fn weight(&self, node: &ModuleNode, path: &str, slot: &str) -> Result<Option<Tensor>> {
        let Some(rec) = node.tensors.get(slot) else {
            return Ok(None);
        };
        let t = match (rec.dtype, self.mode) {
            (DType::F32, _) => self.pkg.read_f32(rec)?,
            (DType::U8, ExecMode::SimulatedQuant) => {
                dequantize_uniform(&self.pkg.read_quant(rec)?).map_err(|e| e.at(path))?
            }
            (DType::U8, ExecMode::Fp32) => {
                return Err(not_exec(path, "quantized weight in fp32 mode"));
            }
        };
        Ok(Some(t))
    }

    fn visit(&mut self, node: &ModuleNode, path: String) -> Result<()> {
        let leaf_only = |n: &ModuleNode| {
            if n.children.is_empty() {
                Ok(())
            } else {
                Err(not_exec(&path, format!("{} node with children", n.kind)))
            }
        };
        let op = match &node.kind {
            LayerKind::Container | LayerKind::Attention if !node.children.is_empty() => {
                for c in &node.children {
                    self.visit(c, crate::package::join_path(&path, &c.name))?;
                }
                return Ok(());
            }
            LayerKind::Container => return Ok(()),
            LayerKind::Conv2d => {
                leaf_only(node)?;
                let weight = self.weight(node, &path, "weight")?.expect("validated");
                if weight.shape().rank() != 4 {
                    return Err(not_exec(&path, "conv weight must be [out, in, kh, kw]"));
                }
                let stride = usize_attr(node, &path, "stride", 1)?;
                if stride == 0 {
                    return Err(not_exec(&path, "zero stride"));
                }
                Op::Conv2d {
                    weight,
                    bias: self.weight(node, &path, "bias")?,
                    stride,
                    padding: usize_attr(node, &path, "padding", 0)?,
                }
            }
            LayerKind::Linear => {
                leaf_only(node)?;
                let weight = self.weight(node, &path, "weight")?.expect("validated");
                if weight.shape().rank() != 2 {
                    return Err(not_exec(&path, "linear weight must be [out, in]"));
                }
                Op::Linear {
                    weight,
                    bias: self.weight(node, &path, "bias")?,
                }
            }
            LayerKind::ReLU => {
                leaf_only(node)?;
                Op::Relu
            }
            LayerKind::Flatten => {
                leaf_only(node)?;
                Op::Flatten
            }
            LayerKind::Softmax => {
                leaf_only(node)?;
                let is_site = self.sites.contains(&path);
                // sites left uncalibrated run in fp32
                let fake_quant = match (self.mode, &node.quant_act) {
                    (ExecMode::SimulatedQuant, Some(QuantParams::Log2(p))) => Some(p.clone()),
                    _ => None,
                };
                Op::Softmax {
                    site: is_site.then(|| site_id(&path)),
                    fake_quant,
                }
            }
            other => return Err(not_exec(&path, format!("unsupported kind {other}"))),
        };
        self.steps.push(Step { path, op });
        Ok(())
    }
}

fn same_structure(a: &ModuleNode, b: &ModuleNode) -> bool {
    a.name == b.name
        && a.kind == b.kind
        && a.children.len() == b.children.len()
        && a.tensors.keys().eq(b.tensors.keys())
        && a.children
            .iter()
            .zip(&b.children)
            .all(|(x, y)| same_structure(x, y))
}

impl ExecPlan {
    fn build(pkg: &ModelPackage, mode: ExecMode) -> Result<Self> {
        let part = identify_blocks(pkg);
        let mut b = Builder {
            pkg,
            mode,
            sites: crate::blocks::softmax_sites(pkg.root(), &part),
            steps: Vec::new(),
        };
        b.visit(pkg.root(), pkg.root().name.clone())?;
        Ok(ExecPlan { steps: b.steps })
    }

    pub fn fp32(pkg: &ModelPackage) -> Result<Self> {
        ExecPlan::build(pkg, ExecMode::Fp32)
    }

    /// Plan running `quant`'s dequantized weights and activation params.
    /// `quant` must mirror `pkg`'s module tree.
    pub fn simulated(pkg: &ModelPackage, quant: &ModelPackage) -> Result<Self> {
        if !same_structure(pkg.root(), quant.root()) {
            return Err(Error::NotExecutable(
                "quantized package does not mirror the model".into(),
            ));
        }
        ExecPlan::build(quant, ExecMode::SimulatedQuant)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn run(&self, input: &Tensor) -> Result<ExecOutput> {
        input.ensure_finite()?;
        let mut x = input.clone();
        let mut captured = BTreeMap::new();
        for step in &self.steps {
            x = match &step.op {
                Op::Conv2d {
                    weight,
                    bias,
                    stride,
                    padding,
                } => conv2d(&x, weight, bias.as_ref(), *stride, *padding),
                Op::Linear { weight, bias } => linear(&x, weight, bias.as_ref()),
                Op::Relu => Ok(relu(x)),
                Op::Flatten => {
                    let n = x.len();
                    x.reshape(vec![n])
                }
                Op::Softmax { site, fake_quant } => {
                    let mut y = softmax(&x)?;
                    if let Some(p) = fake_quant {
                        let mut data = y.into_data();
                        fake_quantize_log2(&mut data, p);
                        y = Tensor::new(x.shape().clone(), data)?;
                    }
                    if let Some(site) = site {
                        captured.insert(site.clone(), y.clone());
                    }
                    Ok(y)
                }
            }
            .map_err(|e| e.at(step.path.as_str()))?;
        }
        Ok(ExecOutput {
            output: x,
            captured_softmax: captured,
        })
    }
}

/// One forward pass. Simulated mode needs the quantized package.
pub fn execute(
    pkg: &ModelPackage,
    input: &Tensor,
    mode: ExecMode,
    quant: Option<&ModelPackage>,
) -> Result<ExecOutput> {
    let plan = match mode {
        ExecMode::Fp32 => ExecPlan::fp32(pkg)?,
        ExecMode::SimulatedQuant => {
            let q = quant.ok_or_else(|| {
                Error::MissingQuantParams("simulated mode requires a quantized package".into())
            })?;
            ExecPlan::simulated(pkg, q)?
        }
    };
    plan.run(input)
}

/// Runs every input in fp32 mode and stores the captured softmax outputs.
pub fn record_traces(pkg: &ModelPackage, inputs: &[Tensor]) -> Result<TracePackage> {
    let plan = ExecPlan::fp32(pkg)?;
    let mut sites: BTreeMap<String, Vec<Tensor>> = BTreeMap::new();
    for input in inputs {
        for (site, t) in plan.run(input)?.captured_softmax {
            sites.entry(site).or_default().push(t);
        }
    }
    if sites.is_empty() {
        return TracePackage::new(inputs.len(), BTreeMap::new(), Vec::new());
    }
    TracePackage::from_samples(sites)
}

fn mismatch(a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        left: a.shape().dims().to_vec(),
        right: b.shape().dims().to_vec(),
    }
}

fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let wd = w.shape().dims();
    let (oc, ic, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
    let xd = x.shape().dims();
    if xd.len() != 3 || xd[0] != ic {
        return Err(mismatch(x, w));
    }
    let (h, wi) = (xd[1], xd[2]);
    if h + 2 * padding < kh || wi + 2 * padding < kw {
        return Err(mismatch(x, w));
    }
    if let Some(b) = bias {
        if b.shape().dims() != [oc] {
            return Err(mismatch(b, w));
        }
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (wi + 2 * padding - kw) / stride + 1;
    let (xs, ws) = (x.data(), w.data());
    let mut out = vec![0.0f32; oc * oh * ow];
    for o in 0..oc {
        let b0 = bias.map_or(0.0, |b| b.data()[o]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b0;
                for c in 0..ic {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= wi as isize {
                                continue;
                            }
                            let xv = xs[(c * h + iy as usize) * wi + ix as usize];
                            let wv = ws[((o * ic + c) * kh + ky) * kw + kx];
                            acc += xv * wv;
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::from_vec(vec![oc, oh, ow], out)
}

fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (out_f, in_f) = (w.shape().dims()[0], w.shape().dims()[1]);
    let xd = x.shape().dims();
    if *xd.last().expect("rank >= 1") != in_f {
        return Err(mismatch(x, w));
    }
    if let Some(b) = bias {
        if b.shape().dims() != [out_f] {
            return Err(mismatch(b, w));
        }
    }
    let rows = x.len() / in_f;
    let mut out = Vec::with_capacity(rows * out_f);
    for row in x.data().chunks_exact(in_f) {
        for o in 0..out_f {
            let wr = &w.data()[o * in_f..(o + 1) * in_f];
            let mut acc = bias.map_or(0.0, |b| b.data()[o]);
            for (a, b) in row.iter().zip(wr) {
                acc += a * b;
            }
            out.push(acc);
        }
    }
    let mut dims = xd.to_vec();
    *dims.last_mut().expect("rank >= 1") = out_f;
    Tensor::from_vec(dims, out)
}

fn relu(x: Tensor) -> Tensor {
    let shape = x.shape().clone();
    let data = x.into_data().into_iter().map(|v| v.max(0.0)).collect();
    Tensor::new(shape, data).expect("same length")
}

/// Softmax over the last axis. The normaliser is accumulated in f64.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let n = *x.shape().dims().last().expect("rank >= 1");
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(n) {
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let e: Vec<f64> = row.iter().map(|&v| f64::from(v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|&v| (v / s) as f32));
    }
    Tensor::new(x.shape().clone(), out)
}

pub fn argmax(t: &Tensor) -> usize {
    t.data()
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}

/// Output agreement between an fp32 run and a simulated-quant run.
///
/// `cosine_sim` is taken over the concatenation of every output; the
/// per-sample mean and minimum are kept alongside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub samples: usize,
    pub cosine_sim: f64,
    pub mean_sample_cosine: f64,
    pub min_sample_cosine: f64,
    pub max_abs_diff: f64,
    pub top1_agreement: f64,
}

pub fn compare(pkg: &ModelPackage, quant: &ModelPackage, inputs: &[Tensor]) -> Result<EvalSummary> {
    if inputs.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let fp = ExecPlan::fp32(pkg)?;
    let sim = ExecPlan::simulated(pkg, quant)?;
    let (mut all_a, mut all_b) = (Vec::new(), Vec::new());
    let (mut sum, mut min, mut max_abs, mut agree) = (0.0, f64::INFINITY, 0.0f64, 0usize);
    for x in inputs {
        let a = fp.run(x)?.output;
        let b = sim.run(x)?.output;
        let m = crate::tensor::error_metrics(&a, &b)?;
        sum += m.cosine_sim;
        min = min.min(m.cosine_sim);
        max_abs = max_abs.max(m.max_abs_err);
        if argmax(&a) == argmax(&b) {
            agree += 1;
        }
        all_a.extend_from_slice(a.data());
        all_b.extend_from_slice(b.data());
    }
    let n = inputs.len();
    Ok(EvalSummary {
        samples: n,
        cosine_sim: crate::tensor::error_metrics_slice(&all_a, &all_b).cosine_sim,
        mean_sample_cosine: sum / n as f64,
        min_sample_cosine: min,
        max_abs_diff: max_abs,
        top1_agreement: agree as f64 / n as f64,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InputHeader {
    count: usize,
    shape: Vec<usize>,
}

/// Writes inputs as one JSON header line `{"count":N,"shape":[..]}`
/// followed by the concatenated little-endian f32 payloads.
pub fn write_inputs(path: impl AsRef<Path>, inputs: &[Tensor]) -> Result<()> {
    let path = path.as_ref();
    let shape = inputs
        .first()
        .map(|t| t.shape().dims().to_vec())
        .ok_or_else(|| Error::InvalidRecord {
            path: path.display().to_string(),
            reason: "no inputs to write".into(),
        })?;
    if inputs.iter().any(|t| t.shape().dims() != shape.as_slice()) {
        return Err(Error::InvalidRecord {
            path: path.display().to_string(),
            reason: "inputs must share one shape".into(),
        });
    }
    let header = serde_json::to_string(&InputHeader {
        count: inputs.len(),
        shape,
    })
    .expect("header serializes");
    let mut bytes = Vec::with_capacity(header.len() + 1 + inputs.len() * inputs[0].len() * 4);
    bytes.write_all(header.as_bytes()).expect("vec write");
    bytes.push(b'\n');
    for t in inputs {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_inputs(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::InvalidRecord {
        path: path.display().to_string(),
        reason: reason.into(),
    };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line"))?;
    let header: InputHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|source| Error::MalformedJson {
            path: path.to_path_buf(),
            source,
        })?;
    let shape = crate::tensor::Shape::new(header.shape)?;
    let per = shape.numel() * 4;
    let body = &bytes[nl + 1..];
    if body.len() != per * header.count {
        return Err(bad(&format!(
            "payload is {} bytes, header declares {}",
            body.len(),
            per * header.count
        )));
    }
    body.chunks_exact(per)
        .map(|chunk| {
            let data = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let t = Tensor::new(shape.clone(), data)?;
            t.ensure_finite()?;
            Ok(t)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::package::BlobWriter;

    fn linear_softmax() -> ModelPackage {
        let mut w = BlobWriter::new();
        let eye = w.push_f32(&Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let root = ModuleNode::new("m", LayerKind::Container).with_child(
            ModuleNode::new("attn", LayerKind::Container)
                .with_child(ModuleNode::new("fc", LayerKind::Linear).with_tensor("weight", eye))
                .with_child(ModuleNode::new("sm", LayerKind::Softmax)),
        );
        ModelPackage::from_root(root, w.finish()).unwrap()
    }

    #[test]
    fn identity_linear_softmax_is_uniform() {
        let pkg = linear_softmax();
        let out = execute(
            &pkg,
            &Tensor::vector(vec![0.0, 0.0]).unwrap(),
            ExecMode::Fp32,
            None,
        )
        .unwrap();
        assert_eq!(out.output.data(), &[0.5, 0.5]);
        assert_eq!(
            out.captured_softmax["m.attn.sm:post_softmax"].data(),
            &[0.5, 0.5]
        );
    }

    #[test]
    fn simulated_without_quant_package_errors() {
        let pkg = linear_softmax();
        let input = Tensor::vector(vec![0.0, 0.0]).unwrap();
        let err = execute(&pkg, &input, ExecMode::SimulatedQuant, None).unwrap_err();
        assert_eq!(err.code(), "missing_quant_params");
        // a site with no activation params passes through unchanged
        let out = execute(&pkg, &input, ExecMode::SimulatedQuant, Some(&pkg)).unwrap();
        assert_eq!(out.output.data(), &[0.5, 0.5]);
    }

    #[test]
    fn conv_matches_hand_computation() {
        // 1x3x3 input, one 2x2 kernel of ones, stride 1, no padding
        let x = Tensor::from_vec(vec![1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let w = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape().dims(), &[1, 2, 2]);
        assert_eq!(y.data(), &[12.0, 16.0, 24.0, 28.0]);

        let b = Tensor::vector(vec![0.5]).unwrap();
        let y = conv2d(&x, &w, Some(&b), 2, 1).unwrap();
        assert_eq!(y.shape().dims(), &[1, 2, 2]);
        assert_eq!(y.data(), &[1.5, 5.5, 11.5, 28.5]);
    }

    #[test]
    fn linear_applies_to_last_axis() {
        let x = Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = Tensor::from_vec(vec![1, 3], vec![1.0, 0.0, -1.0]).unwrap();
        let b = Tensor::vector(vec![10.0]).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.shape().dims(), &[2, 1]);
        assert_eq!(y.data(), &[8.0, 8.0]);
    }

    #[test]
    fn shape_mismatch_is_reported_with_path() {
        let pkg = linear_softmax();
        let err = execute(
            &pkg,
            &Tensor::vector(vec![0.0; 3]).unwrap(),
            ExecMode::Fp32,
            None,
        )
        .unwrap_err();
        assert_eq!(err.code(), "shape_mismatch");
        assert!(err.to_string().starts_with("m.attn.fc"));
    }

    #[test]
    fn unsupported_kinds_are_not_executable() {
        let root = ModuleNode::new("m", LayerKind::Container)
            .with_child(ModuleNode::new("gelu", LayerKind::Other("GELU".into())));
        let pkg = ModelPackage::from_root(root, vec![]).unwrap();
        let err = ExecPlan::fp32(&pkg).unwrap_err();
        assert_eq!(err.code(), "not_executable");
    }

    #[test]
    fn softmax_rows_normalised() {
        let x = Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, -50.0, 0.0, 50.0]).unwrap();
        let y = softmax(&x).unwrap();
        for row in y.data().chunks(3) {
            let s: f64 = row.iter().map(|&v| f64::from(v)).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn inputs_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inputs.bin");
        let xs = vec![
            Tensor::from_vec(vec![1, 2], vec![1.0, -2.0]).unwrap(),
            Tensor::from_vec(vec![1, 2], vec![0.25, 3.5]).unwrap(),
        ];
        write_inputs(&path, &xs).unwrap();
        assert_eq!(read_inputs(&path).unwrap(), xs);
        let err = read_inputs(dir.path().join("nope.bin")).unwrap_err();
        assert_eq!(err.code(), "missing_file");
        assert!(err.to_string().contains("nope.bin"));
    }

    #[test]
    fn record_traces_one_input() {
        let pkg = linear_softmax();
        let t = record_traces(&pkg, &[Tensor::vector(vec![1.0, 0.0]).unwrap()]).unwrap();
        assert_eq!(t.n_samples(), 1);
        assert_eq!(t.site_ids().collect::<Vec<_>>(), ["m.attn.sm:post_softmax"]);
    }
}
