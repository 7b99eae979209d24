use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the toolkit can report.
///
/// Each variant maps to a stable string code (see [`Error::code`]) so that
/// callers and the CLI can distinguish failure classes without matching on
/// message text.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty tensor")]
    EmptyTensor,
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("invalid shape {dims:?}: {reason}")]
    InvalidShape { dims: Vec<usize>, reason: String },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("code {code} outside [0, {max}] for {bits}-bit params")]
    CodeOutOfRange { code: u32, max: u32, bits: u8 },

    #[error("invalid quantization config: {0}")]
    InvalidConfig(String),
    #[error("invalid quantization range: {0}")]
    InvalidRange(String),
    #[error("not a post-softmax activation: value {value} at index {index}")]
    NotPostSoftmax { value: f32, index: usize },
    #[error("tensor carries {found} params, expected {expected}")]
    WrongScheme {
        expected: &'static str,
        found: &'static str,
    },

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("malformed manifest {}: {source}", .path.display())]
    MalformedJson {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("unknown format_version {0}")]
    UnknownFormatVersion(u64),
    #[error("record out of range: {path} [{offset}, {end}) exceeds blob of {blob_len} bytes")]
    RecordOutOfRange {
        path: String,
        offset: u64,
        end: u64,
        blob_len: usize,
    },
    #[error("records overlap: {first} and {second}")]
    OverlappingRecords { first: String, second: String },
    #[error("duplicate sibling name {name:?} under {parent}")]
    DuplicateSibling { parent: String, name: String },
    #[error("invalid node name {0:?}")]
    InvalidName(String),
    #[error("dtype/quant mismatch at {0}")]
    DtypeQuantMismatch(String),
    #[error("invalid record {path}: {reason}")]
    InvalidRecord { path: String, reason: String },
    #[error("invalid node {path}: {reason}")]
    InvalidNode { path: String, reason: String },
    #[error("sample count mismatch at site {site}: expected {expected}, found {found}")]
    SampleCountMismatch {
        site: String,
        expected: usize,
        found: usize,
    },
    #[error("invalid site {site}: {reason}")]
    InvalidSite { site: String, reason: String },
    #[error("io error at {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("path not found in graph: {0}")]
    PathNotFound(String),
    #[error("no sites")]
    NoSites,
    #[error("unpartitioned site {0}")]
    UnpartitionedSite(String),
    #[error("graph is not executable: {0}")]
    NotExecutable(String),
    #[error("missing quant params: {0}")]
    MissingQuantParams(String),
    #[error("uncalibrated softmax sites: {0:?}")]
    Uncalibrated(Vec<String>),
    #[error("package is already quantized ({0} carries a quant block)")]
    AlreadyQuantized(String),
    #[error("{path}: {source}")]
    At {
        path: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Stable machine-readable code for this error class.
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyTensor => "empty_tensor",
            Error::NonFinite { .. } => "non_finite",
            Error::InvalidShape { .. } => "invalid_shape",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::CodeOutOfRange { .. } => "code_out_of_range",
            Error::InvalidConfig(_) => "invalid_config",
            Error::InvalidRange(_) => "invalid_range",
            Error::NotPostSoftmax { .. } => "not_post_softmax",
            Error::WrongScheme { .. } => "wrong_scheme",
            Error::MissingFile(_) => "missing_file",
            Error::MalformedJson { .. } => "malformed_json",
            Error::UnknownFormatVersion(_) => "unknown_format_version",
            Error::RecordOutOfRange { .. } => "record_out_of_range",
            Error::OverlappingRecords { .. } => "overlapping_records",
            Error::DuplicateSibling { .. } => "duplicate_sibling",
            Error::InvalidName(_) => "invalid_name",
            Error::DtypeQuantMismatch(_) => "dtype_quant_mismatch",
            Error::InvalidRecord { .. } => "invalid_record",
            Error::InvalidNode { .. } => "invalid_node",
            Error::SampleCountMismatch { .. } => "sample_count_mismatch",
            Error::InvalidSite { .. } => "invalid_site",
            Error::Io { .. } => "io",
            Error::PathNotFound(_) => "path_not_found",
            Error::NoSites => "no_sites",
            Error::UnpartitionedSite(_) => "unpartitioned_site",
            Error::NotExecutable(_) => "not_executable",
            Error::MissingQuantParams(_) => "missing_quant_params",
            Error::Uncalibrated(_) => "uncalibrated",
            Error::AlreadyQuantized(_) => "already_quantized",
            Error::At { source, .. } => source.code(),
        }
    }

    /// Attach the graph path of the offending tensor or node.
    pub fn at(self, path: impl Into<String>) -> Error {
        Error::At {
            path: path.into(),
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
