use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LmdmError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("degenerate geometry: atoms {i} and {j} are {distance:e} Å apart")]
    DegenerateGeometry { i: usize, j: usize, distance: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite activations in {stage} layer {layer}")]
    NonFinite { stage: &'static str, layer: usize },
    #[error("time step {t} outside {min}..={max}")]
    TimeOutOfRange { t: usize, min: usize, max: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("unsupported element {0:?}")]
    UnsupportedElement(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, LmdmError>;
