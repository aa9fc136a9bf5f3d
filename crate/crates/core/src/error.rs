use thiserror::Error;

/// Every failure the toolkit reports. The variant doubles as the error
/// category surfaced by the command line front end.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Shape(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    UndefinedStatistic(String),
    #[error("{0}")]
    Contract(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-parsable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Input(_) => "input",
            Error::Format(_) => "format",
            Error::Data(_) => "data",
            Error::UndefinedStatistic(_) => "undefined-statistic",
            Error::Contract(_) => "contract",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
