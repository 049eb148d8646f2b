use std::fmt;

/// Errors shared across the crate.
#[derive(Debug)]
pub enum Error {
    /// An input value is outside its mathematical domain (probability not in
    /// [0,1], non-finite loss, index out of range, and so on).
    Domain(String),
    /// A multiplicative update would produce a non-positive weight because
    /// `eta * |relative loss|` reached 1.
    StepSize { eta: f64, max_abs_loss: f64 },
    /// A default step size was requested for a horizon too short to satisfy
    /// its precondition; the caller must supply a step size explicitly.
    HorizonTooShort { needed: f64, got: f64, what: String },
    /// An instance is degenerate for the requested operation (K = m for
    /// follow-the-perturbed-leader, all experts useless for curvature, ...).
    Degenerate(String),
    /// A quantity under- or overflowed past the point where the result would
    /// be meaningful (for example a survival function hitting zero in a
    /// hazard-rate denominator).
    Overflow(String),
    /// A fixed-point bracket failed to enclose a root, which indicates the
    /// monotonicity assumption behind the solver does not hold here.
    MonotonicityViolation(String),
    /// The number of m-subsets exceeds the enumeration cap.
    CombinatorialBlowup { subsets: u128, cap: u128 },
    /// Inconsistent experiment configuration.
    Config(String),
    /// Malformed or incomplete forecast data.
    Data(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::StepSize { eta, max_abs_loss } => write!(
                f,
                "step size {eta} too large: eta * max |relative loss| = {} >= 1",
                eta * max_abs_loss
            ),
            Error::HorizonTooShort { needed, got, what } => write!(
                f,
                "{what}: horizon {got} below required {needed}; pass an explicit step size"
            ),
            Error::Degenerate(msg) => write!(f, "degenerate instance: {msg}"),
            Error::Overflow(msg) => write!(f, "numeric overflow: {msg}"),
            Error::MonotonicityViolation(msg) => {
                write!(f, "monotonicity violation: {msg}")
            }
            Error::CombinatorialBlowup { subsets, cap } => write!(
                f,
                "{subsets} candidate subsets exceed the enumeration cap of {cap}"
            ),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
