use std::path::PathBuf;

/// Errors raised across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape, dimension, empty batch...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Every step distance of a path was zero.
    #[error("degenerate path: all step distances are zero")]
    DegeneratePath,

    /// Every sampled path was degenerate, i.e. the generator has collapsed.
    #[error("degenerate generator: all {0} sampled paths have zero perceptual length")]
    DegenerateGenerator(usize),

    #[error("training diverged at iteration {iteration}: {loss} is not finite (state dumped to {dump:?})")]
    Diverged {
        iteration: usize,
        loss: String,
        dump: Option<PathBuf>,
    },

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! contract {
    ($($arg:tt)*) => {
        $crate::error::Error::Contract(format!($($arg)*))
    };
}
pub(crate) use contract;
