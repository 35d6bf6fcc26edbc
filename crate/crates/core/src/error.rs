use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: parse error at line {line}, column {column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("image `{image_id}`: {message}")]
    Validation { image_id: String, message: String },

    #[error("degenerate crop: bbox ({x}, {y}, {w}, {h}) has zero area inside a {width}x{height} image")]
    DegenerateCrop {
        x: i64,
        y: i64,
        w: i64,
        h: i64,
        width: u32,
        height: u32,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("quadrature did not converge: estimate {estimate:e}, achieved error {achieved:e}, requested {requested:e}")]
    Quadrature {
        estimate: f64,
        achieved: f64,
        requested: f64,
    },

    #[error("training diverged at step {step}: {diagnostics}")]
    Diverged { step: usize, diagnostics: String },

    #[error("image `{name}`: {source}")]
    Image {
        name: String,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by missing or malformed user input, as opposed
    /// to failed checks. The CLI maps these to exit code 2.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation { .. }
                | Error::Io { .. }
                | Error::Image { .. }
                | Error::Csv(_)
                | Error::Json(_)
        )
    }
}
