use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is not symmetric (asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("matrix is not positive semidefinite (min eigenvalue {0:.3e})")]
    NotPsd(f64),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("pair is not stabilizable: {0}")]
    Unstabilizable(String),
    #[error("matrix is not Hurwitz (spectral abscissa {0:.4})")]
    NotHurwitz(f64),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid certificate: {0}")]
    InvalidCertificate(String),
    #[error("equality residuals exceed tolerance {tol}: {residuals:?}")]
    EqualityResidual { tol: f64, residuals: [f64; 4] },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("simulation diverged at t = {0:.4} s")]
    Divergence(f64),
    #[error("state {0:?} lies outside the grid")]
    OutOfGrid(Vec<f64>),
    #[error("cell {0} is not in the winning set")]
    LosingCell(usize),
    #[error("missing trace channel: {0}")]
    MissingChannel(String),
    #[error("composition failed on channel {0}")]
    Composition(String),
    #[error("channels are not comparable: {0}")]
    Incomparable(String),
    #[error("scenario error: {0}")]
    Scenario(String),
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn parse(context: impl Into<String>, message: impl std::fmt::Display) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }
}
