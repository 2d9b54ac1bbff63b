use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("image too small: {width}x{height} (both dimensions must be at least {min})")]
    ImageTooSmall { width: u32, height: u32, min: u32 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("validation error at line {line}: {message}")]
    Validation { line: usize, message: String },
    #[error("undefined metric: {0}")]
    Undefined(String),
    #[error("model container: {0}")]
    Container(String),
    #[error("missing upstream model: {0}")]
    MissingModel(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
