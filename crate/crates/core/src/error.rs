use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("edge list is empty")]
    EmptyHierarchy,
    #[error("node ids must be positive integers, got {0}")]
    InvalidNodeId(u32),
    #[error("cycle detected involving node {0}")]
    Cycle(u32),
    #[error("multiple roots: {0:?}")]
    MultipleRoots(Vec<u32>),
    #[error("node {child} has more than one parent ({first} and {second})")]
    DuplicateParent { child: u32, first: u32, second: u32 },
    #[error("node {0} is not connected to the hierarchy")]
    DisconnectedNode(u32),
    #[error("the root must be node 1, found node {0}")]
    RootNotOne(u32),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("degenerate series: {0}")]
    Degenerate(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Process exit code for the command-line front end: 3 for numerical
    /// failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
