use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("pixel ({x:.3}, {y:.3}) outside the {width}x{height} feature map")]
    OutOfBounds {
        x: f64,
        y: f64,
        width: f64,
        height: f64,
    },
    #[error("point has non-positive depth {0} in the camera frame")]
    BehindCamera(f64),
    #[error("object is not inside the camera frustum")]
    EmptyRender,
    #[error("no valid ambiguous camera pair after {0} attempts")]
    NoValidPair(usize),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate rotation input: {0}")]
    DegenerateRotation(String),
    #[error("not a rotation matrix: {0}")]
    NotRotation(String),
    #[error("capacity error: {queries} queries for {objects} objects")]
    Capacity { queries: usize, objects: usize },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("missing model points for object ids {0:?}")]
    MissingModel(Vec<u32>),
    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
