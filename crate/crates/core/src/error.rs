use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic: expected \"FMAP\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported FMAP version {0}")]
    BadVersion(u32),
    #[error("truncated payload: {0}")]
    TruncatedPayload(String),
    #[error("{0} trailing bytes after the last layer")]
    TrailingData(usize),
    #[error("invalid layer {name:?}: {reason}")]
    InvalidLayer { name: String, reason: String },
    #[error("layer mismatch: {0}")]
    LayerMismatch(String),
    #[error("feature maps of {0:?} are not normalized")]
    NotNormalized(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("unit index ({row}, {col}) out of range for a {height}x{width} map")]
    IndexOutOfRange {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },

    #[error("no annotations for template")]
    NoAnnotations,
    #[error("model schema version {found} is not supported (expected {expected})")]
    SchemaMismatch { found: u64, expected: u64 },
    #[error("corrupt model payload: {0}")]
    CorruptPayload(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("empty deformation range for pattern {0}")]
    EmptyDeformationRange(u32),
    #[error("template {0} has no latent patterns")]
    NoPatterns(u32),
    #[error("model has no part templates")]
    EmptyModel,

    #[error("degenerate score curve: fewer than three distinct scores")]
    DegenerateScores,
    #[error("unknown image {0:?}")]
    UnknownImage(String),
    #[error("unknown template {0}")]
    UnknownTemplate(u32),
    #[error("answer of kind {0} requires a bounding box")]
    MissingBbox(u8),
    #[error("invalid answer: {0}")]
    InvalidAnswer(String),
    #[error("feature vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no unannotated images left to ask about")]
    PoolExhausted,
    #[error("oracle failure: {0}")]
    OracleFailure(String),

    #[error("object diagonal must be positive")]
    ZeroDiagonal,
    #[error("box has non-positive area")]
    DegenerateBox,
    #[error("layer {0:?} carries no activation energy")]
    EmptyLayer(String),

    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
