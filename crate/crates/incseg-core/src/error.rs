use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty reduction")]
    EmptyReduction,

    #[error("singular matrix")]
    SingularMatrix,

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("CE defined on R_new only")]
    CeOffLabeledRegion,

    #[error("ALI defined off R_new only")]
    AliOnLabeledRegion,

    #[error("negative balance weight: {0}")]
    NegativeWeight(String),

    #[error("empty feature memory")]
    EmptyMemory,

    #[error("no labeled pixels anywhere in the dataset for categories {0:?}")]
    UncoveredCategories(Vec<usize>),

    #[error("no rotation matrix for stored category {0}")]
    MissingRotation(usize),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("file format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
