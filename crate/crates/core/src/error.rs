use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("target {0} skipped: fewer than two foreground pixels")]
    TargetSkipped(usize),
    #[error("scene generation failed: could not place box {box_index} after {attempts} attempts")]
    Generation { box_index: usize, attempts: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
