use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("numerical conditioning failure{}: {detail}", series_suffix(.series))]
    Conditioning { series: Option<usize>, detail: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("structural error: {0}")]
    Structure(String),

    #[error("constraint {index} ({name}) is linearly dependent on the preceding constraints")]
    DegenerateConstraint { index: usize, name: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("data error at row {row}, column {column}: {detail}")]
    Data { row: usize, column: usize, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn series_suffix(series: &Option<usize>) -> String {
    match series {
        Some(j) => format!(" (series {j})"),
        None => String::new(),
    }
}

/// Coarse classification used by the command-line driver for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad input data, configuration or I/O.
    Input,
    /// Numerical breakdown during filtering or optimisation.
    Numerical,
}

impl Error {
    pub fn conditioning(series: Option<usize>, detail: impl Into<String>) -> Self {
        Error::Conditioning {
            series,
            detail: detail.into(),
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Conditioning { .. }
            | Error::Numerical(_)
            | Error::DegenerateConstraint { .. }
            | Error::Contract(_) => ErrorKind::Numerical,
            Error::Structure(_)
            | Error::Data { .. }
            | Error::Config(_)
            | Error::Io(_)
            | Error::Csv(_) => ErrorKind::Input,
            Error::Context { source, .. } => source.kind(),
        }
    }
}
