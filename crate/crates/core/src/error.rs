use thiserror::Error;

pub type Result<T> = std::result::Result<T, JpsError>;

#[derive(Debug, Error)]
pub enum JpsError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("unknown parameter: {0}")]
    Lookup(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("provenance error: {0}")]
    Provenance(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Coarse failure classes, each mapped to a distinct process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Provenance,
    Numeric,
    Io,
}

impl ErrorClass {
    pub fn exit_code(self) -> u8 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Provenance => 3,
            ErrorClass::Numeric => 4,
            ErrorClass::Io => 5,
        }
    }
}

impl JpsError {
    pub fn class(&self) -> ErrorClass {
        match self {
            JpsError::Config(_)
            | JpsError::Validation(_)
            | JpsError::Lookup(_)
            | JpsError::Size(_) => ErrorClass::Config,
            JpsError::Provenance(_) | JpsError::Consistency(_) => ErrorClass::Provenance,
            JpsError::Dimension(_) | JpsError::Domain(_) | JpsError::Training(_) => {
                ErrorClass::Numeric
            }
            JpsError::Io(_) | JpsError::Json(_) | JpsError::Csv(_) => ErrorClass::Io,
        }
    }

    pub fn exit_code(&self) -> u8 {
        self.class().exit_code()
    }
}
