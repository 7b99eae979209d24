//! On-disk model interchange format.
//!
//! A package is a directory holding `manifest.json` (UTF-8, keys sorted) and
//! `tensors.bin`, a flat blob of little-endian f32 or raw u8 payloads
//! addressed by byte offset. Quantized packages use the same layout with
//! `dtype: "u8"` records that carry a `quant` block. Trace packages store
//! recorded post-softmax activations per site in the same blob format.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::quant::QuantParams;
use crate::tensor::{ensure_finite, QuantTensor, Shape, Tensor};

pub const FORMAT_VERSION: u64 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

/// Path separator between a parent and child node name.
pub const PATH_SEP: char = '.';
/// Suffix that turns a softmax node path into a trace site id.
pub const SITE_SUFFIX: &str = ":post_softmax";

pub fn site_id(node_path: &str) -> String {
    format!("{node_path}{SITE_SUFFIX}")
}

pub fn join_path(parent: &str, child: &str) -> String {
    format!("{parent}{PATH_SEP}{child}")
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum LayerKind {
    Conv2d,
    Linear,
    ReLU,
    Softmax,
    Attention,
    Flatten,
    Container,
    Other(String),
}

impl LayerKind {
    pub fn as_str(&self) -> &str {
        match self {
            LayerKind::Conv2d => "Conv2d",
            LayerKind::Linear => "Linear",
            LayerKind::ReLU => "ReLU",
            LayerKind::Softmax => "Softmax",
            LayerKind::Attention => "Attention",
            LayerKind::Flatten => "Flatten",
            LayerKind::Container => "Container",
            LayerKind::Other(name) => name,
        }
    }
}

impl From<String> for LayerKind {
    fn from(s: String) -> Self {
        match s.as_str() {
            "Conv2d" => LayerKind::Conv2d,
            "Linear" => LayerKind::Linear,
            "ReLU" => LayerKind::ReLU,
            "Softmax" => LayerKind::Softmax,
            "Attention" => LayerKind::Attention,
            "Flatten" => LayerKind::Flatten,
            "Container" => LayerKind::Container,
            _ => LayerKind::Other(s),
        }
    }
}

impl From<&str> for LayerKind {
    fn from(s: &str) -> Self {
        LayerKind::from(s.to_string())
    }
}

impl From<LayerKind> for String {
    fn from(k: LayerKind) -> Self {
        k.as_str().to_string()
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    U8,
}

impl DType {
    pub fn size(self) -> u64 {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub dtype: DType,
    pub shape: Shape,
    pub offset: u64,
    pub nbytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantParams>,
}

impl TensorRecord {
    pub fn end(&self) -> u64 {
        self.offset.saturating_add(self.nbytes)
    }

    fn validate(&self, path: &str, blob_len: usize) -> Result<()> {
        let expected = self.shape.numel() as u64 * self.dtype.size();
        if self.nbytes != expected {
            return Err(Error::InvalidRecord {
                path: path.into(),
                reason: format!("nbytes {} but shape needs {expected}", self.nbytes),
            });
        }
        match (self.dtype, &self.quant) {
            (DType::F32, None) | (DType::U8, Some(_)) => {}
            _ => return Err(Error::DtypeQuantMismatch(path.into())),
        }
        if self.offset.checked_add(self.nbytes).is_none() || self.end() > blob_len as u64 {
            return Err(Error::RecordOutOfRange {
                path: path.into(),
                offset: self.offset,
                end: self.end(),
                blob_len,
            });
        }
        Ok(())
    }

    fn bytes<'a>(&self, blob: &'a [u8]) -> &'a [u8] {
        &blob[self.offset as usize..self.end() as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleNode {
    pub name: String,
    pub kind: LayerKind,
    #[serde(default)]
    pub children: Vec<ModuleNode>,
    #[serde(default)]
    pub tensors: BTreeMap<String, TensorRecord>,
    #[serde(default)]
    pub attrs: BTreeMap<String, i64>,
    /// Activation quantization parameters, only on Softmax nodes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant_act: Option<QuantParams>,
}

impl ModuleNode {
    pub fn new(name: impl Into<String>, kind: impl Into<LayerKind>) -> Self {
        ModuleNode {
            name: name.into(),
            kind: kind.into(),
            children: Vec::new(),
            tensors: BTreeMap::new(),
            attrs: BTreeMap::new(),
            quant_act: None,
        }
    }

    pub fn with_child(mut self, child: ModuleNode) -> Self {
        self.children.push(child);
        self
    }

    pub fn with_attr(mut self, key: &str, value: i64) -> Self {
        self.attrs.insert(key.into(), value);
        self
    }

    pub fn with_tensor(mut self, slot: &str, record: TensorRecord) -> Self {
        self.tensors.insert(slot.into(), record);
        self
    }

    pub fn child(&self, name: &str) -> Option<&ModuleNode> {
        self.children.iter().find(|c| c.name == name)
    }

    pub fn attr(&self, key: &str) -> Option<i64> {
        self.attrs.get(key).copied()
    }

    /// Number of nodes in this subtree, including `self`.
    pub fn count(&self) -> usize {
        1 + self.children.iter().map(ModuleNode::count).sum::<usize>()
    }

    /// Pre-order walk yielding `(full_path, node)`, children in declaration
    /// order. Paths start with this node's own name.
    pub fn walk(&self) -> Vec<(String, &ModuleNode)> {
        let mut out = Vec::new();
        self.walk_into(self.name.clone(), &mut out);
        out
    }

    fn walk_into<'a>(&'a self, path: String, out: &mut Vec<(String, &'a ModuleNode)>) {
        out.push((path.clone(), self));
        for c in &self.children {
            c.walk_into(join_path(&path, &c.name), out);
        }
    }

    fn validate(
        &self,
        path: &str,
        blob_len: usize,
        spans: &mut Vec<(u64, u64, String)>,
    ) -> Result<()> {
        if self.name.is_empty() || self.name.contains(PATH_SEP) {
            return Err(Error::InvalidName(self.name.clone()));
        }
        let mut seen = HashSet::new();
        for c in &self.children {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::DuplicateSibling {
                    parent: path.into(),
                    name: c.name.clone(),
                });
            }
        }
        let invalid = |reason: &str| Error::InvalidNode {
            path: path.into(),
            reason: reason.into(),
        };
        match self.kind {
            LayerKind::Conv2d | LayerKind::Linear if !self.tensors.contains_key("weight") => {
                return Err(invalid("compute layer without a weight tensor"));
            }
            LayerKind::Container if !self.tensors.is_empty() => {
                return Err(invalid("container carries tensors"));
            }
            _ => {}
        }
        if let Some(q) = &self.quant_act {
            if self.kind != LayerKind::Softmax {
                return Err(invalid("quant_act on a non-Softmax node"));
            }
            if !matches!(q, QuantParams::Log2(_)) {
                return Err(invalid("quant_act must use the log2 scheme"));
            }
        }
        for (slot, rec) in &self.tensors {
            let rpath = format!("{path}:{slot}");
            rec.validate(&rpath, blob_len)?;
            if slot == "bias" && rec.dtype != DType::F32 {
                return Err(Error::InvalidRecord {
                    path: rpath,
                    reason: "bias tensors stay f32".into(),
                });
            }
            if rec.nbytes > 0 {
                spans.push((rec.offset, rec.end(), rpath));
            }
        }
        for c in &self.children {
            c.validate(&join_path(path, &c.name), blob_len, spans)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u64,
    pub root: ModuleNode,
    #[serde(default)]
    pub metadata: Map<String, Value>,
}

impl Manifest {
    pub fn new(root: ModuleNode) -> Self {
        Manifest {
            format_version: FORMAT_VERSION,
            root,
            metadata: Map::new(),
        }
    }
}

/// Appends tensor payloads to a blob and hands back the matching records.
#[derive(Debug, Default)]
pub struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_f32(&mut self, t: &Tensor) -> TensorRecord {
        let offset = self.bytes.len() as u64;
        for v in t.data() {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        TensorRecord {
            dtype: DType::F32,
            shape: t.shape().clone(),
            offset,
            nbytes: self.bytes.len() as u64 - offset,
            quant: None,
        }
    }

    pub fn push_quant(&mut self, q: &QuantTensor) -> TensorRecord {
        let offset = self.bytes.len() as u64;
        self.bytes.extend_from_slice(q.codes());
        TensorRecord {
            dtype: DType::U8,
            shape: q.shape().clone(),
            offset,
            nbytes: q.codes().len() as u64,
            quant: Some(q.params().clone()),
        }
    }

    /// Copies a record's payload verbatim from another blob.
    pub fn push_raw(&mut self, rec: &TensorRecord, src: &[u8]) -> TensorRecord {
        let offset = self.bytes.len() as u64;
        self.bytes.extend_from_slice(rec.bytes(src));
        TensorRecord {
            offset,
            ..rec.clone()
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

fn decode_f32(rec: &TensorRecord, blob: &[u8]) -> Result<Tensor> {
    if rec.dtype != DType::F32 {
        return Err(Error::DtypeQuantMismatch("expected an f32 record".into()));
    }
    let data = rec
        .bytes(blob)
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(rec.shape.clone(), data)
}

fn decode_quant(rec: &TensorRecord, blob: &[u8]) -> Result<QuantTensor> {
    let params = rec
        .quant
        .clone()
        .ok_or_else(|| Error::DtypeQuantMismatch("expected a u8 record".into()))?;
    QuantTensor::new(rec.shape.clone(), rec.bytes(blob).to_vec(), params)
}

fn check_overlaps(mut spans: Vec<(u64, u64, String)>) -> Result<()> {
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::OverlappingRecords {
                first: w[0].2.clone(),
                second: w[1].2.clone(),
            });
        }
    }
    Ok(())
}

fn check_payload(rec: &TensorRecord, blob: &[u8], path: &str) -> Result<()> {
    match rec.dtype {
        DType::F32 => ensure_finite(decode_f32(rec, blob)?.data()).map_err(|e| e.at(path)),
        DType::U8 => decode_quant(rec, blob).map(|_| ()).map_err(|e| e.at(path)),
    }
}

/// Serializes with keys sorted at every level.
fn canonical_json<T: Serialize>(value: &T) -> Vec<u8> {
    // serde_json's Map is a BTreeMap without the preserve_order feature
    let v = serde_json::to_value(value).expect("manifest types always serialize");
    let mut out = serde_json::to_vec_pretty(&v).expect("values always serialize");
    out.push(b'\n');
    out
}

fn read_dir_files(dir: &Path) -> Result<(Value, Vec<u8>)> {
    let mpath = dir.join(MANIFEST_FILE);
    let bpath = dir.join(BLOB_FILE);
    for p in [&mpath, &bpath] {
        if !p.is_file() {
            return Err(Error::MissingFile(p.clone()));
        }
    }
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let value: Value = serde_json::from_slice(&text).map_err(|source| Error::MalformedJson {
        path: mpath.clone(),
        source,
    })?;
    match value.get("format_version").and_then(Value::as_u64) {
        Some(FORMAT_VERSION) => {}
        Some(v) => return Err(Error::UnknownFormatVersion(v)),
        None => {
            return Err(Error::MalformedJson {
                path: mpath,
                source: serde::de::Error::custom("missing integer format_version"),
            })
        }
    }
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    Ok((value, blob))
}

fn write_dir_files(dir: &Path, manifest: Vec<u8>, blob: &[u8]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join(BLOB_FILE);
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))?;
    Ok(())
}

fn parse_manifest<T: serde::de::DeserializeOwned>(value: Value, dir: &Path) -> Result<T> {
    serde_json::from_value(value).map_err(|source| Error::MalformedJson {
        path: dir.join(MANIFEST_FILE),
        source,
    })
}

/// A model: module tree plus tensor blob. Immutable once validated.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPackage {
    manifest: Manifest,
    blob: Vec<u8>,
}

impl ModelPackage {
    pub fn new(manifest: Manifest, blob: Vec<u8>) -> Result<Self> {
        let pkg = ModelPackage { manifest, blob };
        pkg.validate()?;
        Ok(pkg)
    }

    pub fn from_root(root: ModuleNode, blob: Vec<u8>) -> Result<Self> {
        ModelPackage::new(Manifest::new(root), blob)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let (value, blob) = read_dir_files(dir)?;
        let manifest = parse_manifest(value, dir)?;
        ModelPackage::new(manifest, blob)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        write_dir_files(dir.as_ref(), self.manifest_bytes(), &self.blob)
    }

    /// The exact bytes `save` writes to `manifest.json`.
    pub fn manifest_bytes(&self) -> Vec<u8> {
        canonical_json(&self.manifest)
    }

    fn validate(&self) -> Result<()> {
        if self.manifest.format_version != FORMAT_VERSION {
            return Err(Error::UnknownFormatVersion(self.manifest.format_version));
        }
        let root = &self.manifest.root;
        let mut spans = Vec::new();
        root.validate(&root.name, self.blob.len(), &mut spans)?;
        check_overlaps(spans)?;
        for (path, node) in root.walk() {
            for (slot, rec) in &node.tensors {
                check_payload(rec, &self.blob, &format!("{path}:{slot}"))?;
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn root(&self) -> &ModuleNode {
        &self.manifest.root
    }

    pub fn metadata(&self) -> &Map<String, Value> {
        &self.manifest.metadata
    }

    pub fn blob(&self) -> &[u8] {
        &self.blob
    }

    pub fn into_parts(self) -> (Manifest, Vec<u8>) {
        (self.manifest, self.blob)
    }

    pub fn node_count(&self) -> usize {
        self.root().count()
    }

    /// Resolves a full dotted path, starting with the root's own name.
    pub fn node(&self, path: &str) -> Option<&ModuleNode> {
        let mut parts = path.split(PATH_SEP);
        let root = self.root();
        if parts.next()? != root.name {
            return None;
        }
        parts.try_fold(root, |node, name| node.child(name))
    }

    fn record(&self, path: &str, slot: &str) -> Result<&TensorRecord> {
        let node = self
            .node(path)
            .ok_or_else(|| Error::PathNotFound(path.into()))?;
        node.tensors
            .get(slot)
            .ok_or_else(|| Error::PathNotFound(format!("{path}:{slot}")))
    }

    pub fn tensor(&self, path: &str, slot: &str) -> Result<Tensor> {
        self.read_f32(self.record(path, slot)?)
    }

    pub fn quant_tensor(&self, path: &str, slot: &str) -> Result<QuantTensor> {
        self.read_quant(self.record(path, slot)?)
    }

    pub fn read_f32(&self, rec: &TensorRecord) -> Result<Tensor> {
        decode_f32(rec, &self.blob)
    }

    pub fn read_quant(&self, rec: &TensorRecord) -> Result<QuantTensor> {
        decode_quant(rec, &self.blob)
    }

    /// Sum of payload bytes over every tensor record.
    pub fn payload_bytes(&self) -> u64 {
        self.root()
            .walk()
            .iter()
            .flat_map(|(_, n)| n.tensors.values())
            .map(|r| r.nbytes)
            .sum()
    }

    /// True if any record or node carries quantization parameters.
    pub fn first_quantized(&self) -> Option<String> {
        self.root().walk().into_iter().find_map(|(path, n)| {
            if n.quant_act.is_some() {
                return Some(path);
            }
            n.tensors
                .iter()
                .find(|(_, r)| r.quant.is_some())
                .map(|(slot, _)| format!("{path}:{slot}"))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceManifest {
    format_version: u64,
    n_samples: usize,
    sites: BTreeMap<String, Vec<TensorRecord>>,
}

/// Recorded post-softmax activations, one f32 record per site per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TracePackage {
    manifest: TraceManifest,
    blob: Vec<u8>,
}

impl TracePackage {
    /// Builds a package from in-memory samples. Every site must hold the same
    /// number of samples and a single shape.
    pub fn from_samples(sites: BTreeMap<String, Vec<Tensor>>) -> Result<Self> {
        let n_samples = sites.values().next().map_or(0, Vec::len);
        let mut writer = BlobWriter::new();
        let mut records = BTreeMap::new();
        for (site, samples) in &sites {
            let recs = samples.iter().map(|t| writer.push_f32(t)).collect();
            records.insert(site.clone(), recs);
        }
        TracePackage::new(n_samples, records, writer.finish())
    }

    pub fn new(
        n_samples: usize,
        sites: BTreeMap<String, Vec<TensorRecord>>,
        blob: Vec<u8>,
    ) -> Result<Self> {
        let pkg = TracePackage {
            manifest: TraceManifest {
                format_version: FORMAT_VERSION,
                n_samples,
                sites,
            },
            blob,
        };
        pkg.validate()?;
        Ok(pkg)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let (value, blob) = read_dir_files(dir)?;
        let manifest = parse_manifest(value, dir)?;
        let pkg = TracePackage { manifest, blob };
        pkg.validate()?;
        Ok(pkg)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        write_dir_files(dir.as_ref(), self.manifest_bytes(), &self.blob)
    }

    pub fn manifest_bytes(&self) -> Vec<u8> {
        canonical_json(&self.manifest)
    }

    fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        let mut spans = Vec::new();
        for (site, recs) in &m.sites {
            if !site.ends_with(SITE_SUFFIX) || site.len() == SITE_SUFFIX.len() {
                return Err(Error::InvalidSite {
                    site: site.clone(),
                    reason: format!("site ids end with {SITE_SUFFIX:?}"),
                });
            }
            if recs.len() != m.n_samples {
                return Err(Error::SampleCountMismatch {
                    site: site.clone(),
                    expected: m.n_samples,
                    found: recs.len(),
                });
            }
            for (i, rec) in recs.iter().enumerate() {
                let rpath = format!("{site}[{i}]");
                if rec.dtype != DType::F32 || rec.quant.is_some() {
                    return Err(Error::DtypeQuantMismatch(rpath));
                }
                rec.validate(&rpath, self.blob.len())?;
                if rec.shape != recs[0].shape {
                    return Err(Error::InvalidSite {
                        site: site.clone(),
                        reason: format!("sample {i} shape differs from sample 0"),
                    });
                }
                check_payload(rec, &self.blob, &rpath)?;
                spans.push((rec.offset, rec.end(), rpath));
            }
        }
        check_overlaps(spans)
    }

    pub fn n_samples(&self) -> usize {
        self.manifest.n_samples
    }

    pub fn site_ids(&self) -> impl Iterator<Item = &str> {
        self.manifest.sites.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.sites.is_empty()
    }

    pub fn samples(&self, site: &str) -> Result<Vec<Tensor>> {
        let recs = self
            .manifest
            .sites
            .get(site)
            .ok_or_else(|| Error::PathNotFound(site.into()))?;
        recs.iter().map(|r| decode_f32(r, &self.blob)).collect()
    }

    pub fn blob(&self) -> &[u8] {
        &self.blob
    }
}
