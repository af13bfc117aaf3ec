use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum AcaeError {
    #[error("joint {joint} has depth {z:.3} mm, below the {min} mm projection limit")]
    DepthTooSmall { joint: usize, z: f64, min: f64 },

    #[error("left and right blocks differ in size ({left} vs {right})")]
    PartitionMismatch { left: usize, right: usize },

    #[error("format `{format}`: joint `{joint}` has no mirrored counterpart")]
    AsymmetricFormat { format: String, joint: String },

    #[error("format `{format}`: duplicate joint name `{joint}`")]
    DuplicateJoint { format: String, joint: String },

    #[error("cannot partition {latents} latents: got {left} per side and {center} central")]
    TooFewLatents {
        latents: usize,
        left: usize,
        center: usize,
    },

    #[error("row {row} sums to {sum:e}, too close to zero to normalize")]
    DegenerateRow { row: usize, sum: f64 },

    #[error("input pose has masked joints; a complete pose is required")]
    IncompleteInput,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("unknown source tag `{0}`")]
    UnknownTag(String),

    #[error("tag `{0}` is assigned no skeleton formats")]
    EmptyLabelSet(String),

    #[error("unknown skeleton format `{0}`")]
    UnknownFormat(String),

    #[error("root joint {0} is not valid in both poses")]
    InvalidRoot(usize),

    #[error("no joint is valid in both poses")]
    NoValidJoints,

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("catalog mismatch: {0}")]
    CatalogMismatch(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for AcaeError {
    fn from(e: std::io::Error) -> Self {
        AcaeError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for AcaeError {
    fn from(e: serde_json::Error) -> Self {
        AcaeError::Parse(e.to_string())
    }
}

pub type Result<T, E = AcaeError> = std::result::Result<T, E>;
