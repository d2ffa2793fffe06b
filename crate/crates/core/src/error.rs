use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("missing mask for bleeding image {}", .0.display())]
    MissingMask(PathBuf),

    #[error("empty mask for bleeding image {}", .0.display())]
    EmptyMask(PathBuf),

    #[error("unreadable image {}: {msg}", path.display())]
    UnreadableImage { path: PathBuf, msg: String },

    #[error("box file {} references nonexistent image", .0.display())]
    OrphanBoxFile(PathBuf),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("{}: line {line}: {msg}", path.display())]
    FileParse { path: PathBuf, line: usize, msg: String },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
