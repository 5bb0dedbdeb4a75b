use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A numerical method could not reach the requested tolerance.
    #[error("convergence error: {what} (achieved {achieved:e}, requested {requested:e})")]
    Convergence {
        what: String,
        achieved: f64,
        requested: f64,
    },

    /// A correlation function whose denominator vanishes.
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
