use alloc::string::String;

use crate::metrics::Side;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("volume contains {count} non-finite voxel(s)")]
    NonFinite { count: usize },

    #[error("label {label} at voxel {index} is not below the class count {classes}")]
    LabelOutOfRange { label: u8, index: usize, classes: usize },

    #[error("{0} structure is empty")]
    EmptyStructure(Side),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite loss term `{term}`")]
    NonFiniteLoss { term: &'static str },

    #[error("geometry error: {0}")]
    Geometry(String),
}
