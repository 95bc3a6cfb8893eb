use std::path::PathBuf;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward was already run on this tape; start a new tape")]
    BackwardTwice,

    #[error("backward needs a scalar loss, got shape {0}")]
    NonScalarLoss(Shape),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("round_around_mean quantization needs a mean tensor")]
    MissingMean,

    #[error("factorized prior CDF is not monotone in channel {channel}")]
    NonMonotoneCdf { channel: usize },

    #[error("rate: probability {0} is not in (0, 1]")]
    ZeroProbability(f64),

    #[error("non-finite loss component `{0}`")]
    NonFiniteLoss(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image is {height}x{width} but {scales}-scale MS-SSIM needs at least {min}x{min}; fewer scales are unsupported")]
    ImageTooSmall {
        height: usize,
        width: usize,
        scales: usize,
        min: usize,
    },

    #[error("BD-rate: {0}")]
    BdRate(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("bitstream: {0}")]
    Bitstream(String),

    #[error("bitstream segment {segment}: {reason}")]
    CorruptSegment { segment: usize, reason: String },

    #[error("config line {line}: {reason}")]
    ConfigSyntax { line: usize, reason: String },

    #[error("config: unknown keys {0:?}")]
    UnknownConfigKeys(Vec<String>),

    #[error("config: invalid value for `{key}`: {reason}")]
    ConfigValue { key: String, reason: String },

    #[error("no usable images in {0}")]
    EmptyCorpus(PathBuf),

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
