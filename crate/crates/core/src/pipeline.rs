//! End-to-end flow: identify blocks, calibrate, quantize, and report.
//!
//! The quantized package records its own config, per-tensor error metrics and
//! distribution diagnostics under `metadata.quantization`, so a report can be
//! re-derived from the package alone with [`derive_report`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::blocks::{identify_blocks, softmax_sites, BlockPartition};
use crate::calib::{calibrate_activations, calibrate_weights, site_node_path, Granularity};
use crate::error::{Error, Result};
use crate::package::{
    join_path, site_id, BlobWriter, LayerKind, Manifest, ModelPackage, ModuleNode, TracePackage,
};
use crate::quant::{
    affine_params, dequantize_uniform, fake_quantize_log2, log2_params, quantize_uniform,
    QuantConfig, QuantParams,
};
use crate::tensor::{error_metrics, error_metrics_slice, min_max_slice, Tensor};

pub const REPORT_VERSION: u32 = 1;
pub const HISTOGRAM_BINS: usize = 64;
pub const SMALL_VALUE_THRESHOLD: f32 = 0.01;
/// Deployment-side cost of one parameter set: an f32 scale and an i32 zero
/// point.
pub const PARAM_OVERHEAD_BYTES: u64 = 8;
pub const METADATA_KEY: &str = "quantization";

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PipelineConfig {
    pub quant: QuantConfig,
    pub granularity: Granularity,
    /// Leave softmax sites without traces unquantized instead of failing.
    pub allow_uncalibrated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub bits: u8,
    pub epsilon: f64,
    pub granularity: Granularity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub path: String,
    /// `uniform`, `log2`, or `none` for tensors left in f32.
    pub scheme: String,
    pub params: Option<QuantParams>,
    pub mse: f64,
    pub max_abs_err: f64,
    pub cosine_sim: f64,
    pub degenerate: bool,
    pub fp32_bytes: u64,
    pub quant_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub fp32_bytes: u64,
    pub quant_bytes: u64,
    pub compression_ratio: f64,
    pub quantized_tensors: usize,
    pub calibrated_sites: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub path: String,
    pub min: f32,
    pub max: f32,
    pub histogram: Vec<u64>,
    pub excess_kurtosis: Option<f64>,
    #[serde(rename = "mass_below_0.01")]
    pub mass_below_001: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub report_version: u32,
    pub config: Option<ReportConfig>,
    pub partition: BlockPartition,
    pub entries: Vec<TensorEntry>,
    pub totals: Totals,
    pub diagnostics: Vec<Diagnostics>,
    pub warnings: Vec<String>,
}

impl QuantReport {
    /// Pretty JSON with keys sorted at every level.
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let v = serde_json::to_value(self).expect("report serializes");
        let mut out = serde_json::to_vec_pretty(&v).expect("value serializes");
        out.push(b'\n');
        out
    }
}

/// Histogram, excess kurtosis and small-value mass of a tensor.
///
/// Kurtosis is `None` for constant tensors.
pub fn distribution_report(t: &Tensor) -> Result<Diagnostics> {
    distribution_of(String::new(), t.data())
}

fn distribution_of(path: String, data: &[f32]) -> Result<Diagnostics> {
    let (lo, hi) = min_max_slice(data)?;
    let mut histogram = vec![0u64; HISTOGRAM_BINS];
    let width = f64::from(hi) - f64::from(lo);
    for &v in data {
        let bin = if width > 0.0 {
            (((f64::from(v) - f64::from(lo)) / width) * HISTOGRAM_BINS as f64) as usize
        } else {
            0
        };
        histogram[bin.min(HISTOGRAM_BINS - 1)] += 1;
    }
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let (mut m2, mut m4) = (0.0f64, 0.0f64);
    for &v in data {
        let d = f64::from(v) - mean;
        let d2 = d * d;
        m2 += d2;
        m4 += d2 * d2;
    }
    m2 /= n;
    m4 /= n;
    let excess_kurtosis = (m2 > 0.0).then(|| m4 / (m2 * m2) - 3.0);
    let small = data.iter().filter(|&&v| v < SMALL_VALUE_THRESHOLD).count();
    Ok(Diagnostics {
        path,
        min: lo,
        max: hi,
        histogram,
        excess_kurtosis,
        mass_below_001: small as f64 / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct EntryStats {
    mse: f64,
    max_abs_err: f64,
    cosine_sim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct QuantMetadata {
    config: ReportConfig,
    stats: BTreeMap<String, EntryStats>,
    diagnostics: Vec<Diagnostics>,
    warnings: Vec<String>,
}

struct Rebuild<'a> {
    src: &'a ModelPackage,
    cfg: &'a QuantConfig,
    weight_bounds: &'a BTreeMap<String, (f32, f32)>,
    act_params: &'a BTreeMap<String, QuantParams>,
    writer: BlobWriter,
    stats: BTreeMap<String, EntryStats>,
    diagnostics: Vec<Diagnostics>,
}

impl Rebuild<'_> {
    fn node(&mut self, node: &ModuleNode, path: &str) -> Result<ModuleNode> {
        let mut out = ModuleNode {
            children: Vec::with_capacity(node.children.len()),
            tensors: BTreeMap::new(),
            ..node.clone()
        };
        for (slot, rec) in &node.tensors {
            let entry = format!("{path}:{slot}");
            let new_rec = match self.weight_bounds.get(path) {
                Some(&(lo, hi)) if slot == "weight" => {
                    let w = self.src.read_f32(rec).map_err(|e| e.at(entry.as_str()))?;
                    let p = affine_params(lo, hi, self.cfg).map_err(|e| e.at(entry.as_str()))?;
                    let q = quantize_uniform(&w, &p).map_err(|e| e.at(entry.as_str()))?;
                    let back = dequantize_uniform(&q)?;
                    let m = error_metrics(&w, &back)?;
                    self.stats.insert(
                        entry.clone(),
                        EntryStats {
                            mse: m.mse,
                            max_abs_err: m.max_abs_err,
                            cosine_sim: m.cosine_sim,
                        },
                    );
                    self.diagnostics.push(distribution_of(entry, w.data())?);
                    self.writer.push_quant(&q)
                }
                _ => self.writer.push_raw(rec, self.src.blob()),
            };
            out.tensors.insert(slot.clone(), new_rec);
        }
        if node.kind == LayerKind::Softmax {
            out.quant_act = self.act_params.get(&site_id(path)).cloned();
        }
        for c in &node.children {
            let child = self.node(c, &join_path(path, &c.name))?;
            out.children.push(child);
        }
        Ok(out)
    }
}

/// Quantizes conv weights (uniform) and annotates calibrated softmax sites
/// with log2 params. Returns the new package and its report.
pub fn quantize_model(
    pkg: &ModelPackage,
    traces: Option<&TracePackage>,
    cfg: &PipelineConfig,
) -> Result<(ModelPackage, QuantReport)> {
    cfg.quant.validate()?;
    if let Some(path) = pkg.first_quantized() {
        return Err(Error::AlreadyQuantized(path));
    }
    let part = identify_blocks(pkg);
    let sites: Vec<String> = softmax_sites(pkg.root(), &part)
        .iter()
        .map(|p| site_id(p))
        .collect();
    let weight_bounds = calibrate_weights(pkg, &part, cfg.granularity)?;

    let act_bounds = match traces {
        Some(t) if !t.is_empty() => {
            for site in t.site_ids() {
                let is_softmax = site_node_path(site)
                    .and_then(|p| pkg.node(p))
                    .is_some_and(|n| n.kind == LayerKind::Softmax);
                if !is_softmax {
                    return Err(Error::InvalidSite {
                        site: site.into(),
                        reason: "no Softmax node at this path".into(),
                    });
                }
            }
            calibrate_activations(t, &part)?
        }
        _ => BTreeMap::new(),
    };
    let missing: Vec<String> = sites
        .iter()
        .filter(|s| !act_bounds.contains_key(*s))
        .cloned()
        .collect();
    let mut warnings = Vec::new();
    if !missing.is_empty() {
        if !cfg.allow_uncalibrated {
            return Err(Error::Uncalibrated(missing));
        }
        for s in &missing {
            warnings.push(format!("uncalibrated softmax site left in fp32: {s}"));
        }
    }

    let mut act_params = BTreeMap::new();
    let mut site_stats = BTreeMap::new();
    let mut site_diags = Vec::new();
    for (site, &(lo, hi)) in &act_bounds {
        let p = log2_params(lo, hi, &cfg.quant).map_err(|e| e.at(site.as_str()))?;
        let samples: Vec<f32> = traces
            .expect("bounds imply traces")
            .samples(site)?
            .iter()
            .flat_map(|t| t.data().to_vec())
            .collect();
        let mut fq = samples.clone();
        fake_quantize_log2(&mut fq, &p);
        let m = error_metrics_slice(&samples, &fq);
        site_stats.insert(
            site.clone(),
            EntryStats {
                mse: m.mse,
                max_abs_err: m.max_abs_err,
                cosine_sim: m.cosine_sim,
            },
        );
        site_diags.push(distribution_of(site.clone(), &samples)?);
        act_params.insert(site.clone(), QuantParams::Log2(p));
    }

    if weight_bounds.is_empty() && act_params.is_empty() {
        let mut report = derive_report(pkg)?;
        report.warnings.extend(warnings);
        return Ok((pkg.clone(), report));
    }

    let mut rb = Rebuild {
        src: pkg,
        cfg: &cfg.quant,
        weight_bounds: &weight_bounds,
        act_params: &act_params,
        writer: BlobWriter::new(),
        stats: BTreeMap::new(),
        diagnostics: Vec::new(),
    };
    let root = rb.node(pkg.root(), &pkg.root().name)?;
    let mut stats = rb.stats;
    stats.extend(site_stats);
    let mut diagnostics = rb.diagnostics;
    diagnostics.extend(site_diags);
    let blob = rb.writer.finish();

    let meta = QuantMetadata {
        config: ReportConfig {
            bits: cfg.quant.bits,
            epsilon: cfg.quant.epsilon,
            granularity: cfg.granularity,
        },
        stats,
        diagnostics,
        warnings,
    };
    let mut metadata: Map<String, Value> = pkg.metadata().clone();
    metadata.insert(
        METADATA_KEY.into(),
        serde_json::to_value(&meta).expect("metadata serializes"),
    );
    let manifest = Manifest {
        metadata,
        ..Manifest::new(root)
    };
    let out = ModelPackage::new(manifest, blob)?;
    let report = derive_report(&out)?;
    Ok((out, report))
}

/// Rebuilds the report from a (possibly quantized) package.
pub fn derive_report(pkg: &ModelPackage) -> Result<QuantReport> {
    let meta: Option<QuantMetadata> = match pkg.metadata().get(METADATA_KEY) {
        Some(v) if pkg.first_quantized().is_some() => Some(
            serde_json::from_value(v.clone()).map_err(|source| Error::MalformedJson {
                path: METADATA_KEY.into(),
                source,
            })?,
        ),
        _ => None,
    };
    let stat = |key: &str| meta.as_ref().and_then(|m| m.stats.get(key)).copied();

    let mut entries = Vec::new();
    for (path, node) in pkg.root().walk() {
        for (slot, rec) in &node.tensors {
            let key = format!("{path}:{slot}");
            let numel = rec.shape.numel() as u64;
            let entry = match &rec.quant {
                Some(p) => {
                    let s = stat(&key).ok_or_else(|| Error::InvalidRecord {
                        path: key.clone(),
                        reason: "quantized tensor has no recorded statistics".into(),
                    })?;
                    TensorEntry {
                        path: key,
                        scheme: p.scheme().into(),
                        params: Some(p.clone()),
                        mse: s.mse,
                        max_abs_err: s.max_abs_err,
                        cosine_sim: s.cosine_sim,
                        degenerate: p.is_degenerate(),
                        fp32_bytes: numel * 4,
                        quant_bytes: rec.nbytes + PARAM_OVERHEAD_BYTES,
                    }
                }
                None => TensorEntry {
                    path: key,
                    scheme: "none".into(),
                    params: None,
                    mse: 0.0,
                    max_abs_err: 0.0,
                    cosine_sim: 1.0,
                    degenerate: false,
                    fp32_bytes: rec.nbytes,
                    quant_bytes: rec.nbytes,
                },
            };
            entries.push(entry);
        }
        if let Some(p) = &node.quant_act {
            let key = site_id(&path);
            let s = stat(&key).ok_or_else(|| Error::InvalidRecord {
                path: key.clone(),
                reason: "calibrated site has no recorded statistics".into(),
            })?;
            entries.push(TensorEntry {
                path: key,
                scheme: p.scheme().into(),
                params: Some(p.clone()),
                mse: s.mse,
                max_abs_err: s.max_abs_err,
                cosine_sim: s.cosine_sim,
                degenerate: p.is_degenerate(),
                fp32_bytes: 0,
                quant_bytes: PARAM_OVERHEAD_BYTES,
            });
        }
    }

    let fp32_bytes: u64 = entries.iter().map(|e| e.fp32_bytes).sum();
    let quant_bytes: u64 = entries.iter().map(|e| e.quant_bytes).sum();
    let quantized_tensors = entries
        .iter()
        .filter(|e| e.params.is_some() && !e.path.ends_with(crate::package::SITE_SUFFIX))
        .count();
    let calibrated_sites = entries
        .iter()
        .filter(|e| e.path.ends_with(crate::package::SITE_SUFFIX))
        .count();
    let compression_ratio = if quant_bytes == 0 {
        1.0
    } else {
        fp32_bytes as f64 / quant_bytes as f64
    };

    let mut warnings = Vec::new();
    for e in entries.iter().filter(|e| e.degenerate) {
        warnings.push(format!("degenerate range (min == max) at {}", e.path));
    }
    if quantized_tensors == 0 && calibrated_sites == 0 {
        warnings.push("nothing quantized".into());
    }
    let (config, diagnostics) = match meta {
        Some(m) => {
            warnings.extend(m.warnings);
            (Some(m.config), m.diagnostics)
        }
        None => (None, Vec::new()),
    };

    Ok(QuantReport {
        report_version: REPORT_VERSION,
        config,
        partition: identify_blocks(pkg),
        entries,
        totals: Totals {
            fp32_bytes,
            quant_bytes,
            compression_ratio,
            quantized_tensors,
            calibrated_sites,
        },
        diagnostics,
        warnings,
    })
}
