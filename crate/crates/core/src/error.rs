use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("expected a curve of kind {expected}, got {found}")]
    CurveKind {
        expected: &'static str,
        found: &'static str,
    },

    #[error("curves do not share one time grid and kind")]
    GridMismatch,

    #[error(
        "unsupported orientation-set level {level}; supported levels are 1..={max} (sizes {sizes})"
    )]
    UnsupportedLevel {
        level: usize,
        max: usize,
        sizes: String,
    },

    #[error("time step too coarse for the oracle: {required} substeps per grid interval required, got {given}")]
    StepRule { required: usize, given: usize },

    #[error("operator is not Hermitian (max asymmetry {asymmetry:e})")]
    NonHermitian { asymmetry: f64 },

    #[error("block-wise propagation needs on-resonance fields (offsets must be zero)")]
    OffResonanceBlocks,

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("{0}")]
    Data(String),

    #[error("under-determined fit: {points} data points for {free} free parameters (need at least {needed})")]
    Underdetermined {
        points: usize,
        free: usize,
        needed: usize,
    },

    #[error("degenerate Jacobian: the model does not respond to `{param}`; consider fixing it")]
    DegenerateJacobian { param: &'static str },

    #[error("unsupported isotope `{name}`; supported: {supported}")]
    UnsupportedIsotope { name: String, supported: String },

    #[error("zero dipolar coupling has no finite distance")]
    ZeroCoupling,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
