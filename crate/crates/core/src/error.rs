use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: argument outside the domain (log of a non-positive entry)")]
    DomainError { op: &'static str },
    #[error("empty tensor")]
    EmptyTensor,
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("zero vector on the {side} side of a cosine similarity")]
    ZeroVector { side: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("class {class} is in both the seen and unseen splits")]
    SplitOverlap { class: u32 },
    #[error("item {item} has label {label} which is in neither split")]
    DanglingLabel { item: usize, label: u32 },
    #[error("class {class} has no items")]
    EmptyClass { class: u32 },
    #[error("unknown class {class}")]
    UnknownClass { class: u32 },
    #[error("invalid synthetic spec: {0}")]
    SpecInvalid(String),
    #[error("could not place class centers after {attempts} rejections")]
    CenterSamplingFailed { attempts: usize },
    #[error("dataset has no seen-class items")]
    EmptyDataset,
    #[error("wrong-class selection needs at least two seen classes")]
    SingleClassDataset,
    #[error("dataset has no unseen classes to evaluate")]
    EmptyUnseenSplit,
    #[error("no queries to evaluate")]
    EmptyQuerySet,

    #[error("invalid config value for `{key}`: {reason}")]
    ConfigInvalid { key: String, reason: String },
    #[error("dimension mismatch: {0}")]
    DimsMismatch(String),

    #[error("malformed file: {0}")]
    Format(String),
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::ConfigInvalid {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code: 1 for validation and configuration problems,
    /// 2 for runtime and I/O failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::SplitOverlap { .. }
            | Error::DanglingLabel { .. }
            | Error::EmptyClass { .. }
            | Error::UnknownClass { .. }
            | Error::SpecInvalid(_)
            | Error::SingleClassDataset
            | Error::EmptyUnseenSplit
            | Error::EmptyDataset
            | Error::ConfigInvalid { .. }
            | Error::DimsMismatch(_) => 1,
            _ => 2,
        }
    }
}
