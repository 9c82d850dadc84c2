use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid fraction {0}: must lie strictly between 0 and 1")]
    InvalidFraction(f64),

    #[error("dataset mismatch: {0}")]
    DatasetMismatch(String),

    #[error("class {class} out of range for {n_classes} classes")]
    ClassOutOfRange { class: usize, n_classes: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape error at layer {layer}: {msg}")]
    Shape { layer: usize, msg: String },

    #[error("divergence: non-finite loss at step {step}")]
    Divergence { step: u64 },

    #[error("frozen prefix {requested} exceeds {available} parameterized layers")]
    FrozenPrefixOutOfRange { requested: usize, available: usize },

    #[error("no individual data")]
    NoIndividualData,

    #[error("insufficient global data: requested {requested}, available {available}")]
    InsufficientGlobalData { requested: usize, available: usize },

    #[error("requested {requested} neighbours from a pool of {available}")]
    PoolTooSmall { requested: usize, available: usize },

    #[error("identity collision: sample ({individual}, {seq}) is already part of the base data")]
    IdentityCollision { individual: u32, seq: u32 },

    #[error("duplicate sample identity ({individual}, {seq})")]
    DuplicateIdentity { individual: u32, seq: u32 },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("empty input")]
    EmptyInput,

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
