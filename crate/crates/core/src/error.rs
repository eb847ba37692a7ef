use std::path::PathBuf;

/// Errors produced across the depth-completion pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error(
        "resolution {width}x{height} is not divisible by {multiple}; \
         pad to {padded_width}x{padded_height} (add {pad_x} columns, {pad_y} rows)"
    )]
    Resolution {
        width: usize,
        height: usize,
        multiple: usize,
        padded_width: usize,
        padded_height: usize,
        pad_x: usize,
        pad_y: usize,
    },

    #[error("degenerate warp: no valid reconstructed pixels")]
    DegenerateWarp,

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("missing file referenced by dataset: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Build a [`Error::Resolution`] report for a frame that must be a multiple of `multiple`.
    pub fn resolution(width: usize, height: usize, multiple: usize) -> Self {
        let padded_width = width.div_ceil(multiple) * multiple;
        let padded_height = height.div_ceil(multiple) * multiple;
        Error::Resolution {
            width,
            height,
            multiple,
            padded_width,
            padded_height,
            pad_x: padded_width - width,
            pad_y: padded_height - height,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
