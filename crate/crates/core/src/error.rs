use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // -- edge-list parsing -------------------------------------------------
    #[error("line {line}: malformed edge, expected `src dst p`: {text:?}")]
    MalformedLine { line: usize, text: String },

    #[error("line {line}: probability {p} out of range [0, 1]")]
    ProbabilityOutOfRange { line: usize, p: f64 },

    #[error("line {line}: self-loop at node {node}")]
    SelfLoop { line: usize, node: usize },

    #[error("line {line}: duplicate edge {src} -> {dst}")]
    DuplicateEdge { line: usize, src: usize, dst: usize },

    // -- structural validation --------------------------------------------
    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("node id {node} out of range for graph with {n} nodes")]
    NodeOutOfRange { node: usize, n: usize },

    #[error("invalid exposure spec: {0}")]
    InvalidExposureSpec(String),

    #[error("invalid seed set: {0}")]
    InvalidSeedSet(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    // -- resource guards ----------------------------------------------------
    #[error("enumeration guard exceeded: {what} needs {needed}, limit is {limit}")]
    GuardExceeded {
        what: &'static str,
        needed: u128,
        limit: u128,
    },

    // -- response curves and fitting --------------------------------------
    #[error("curve violates shape constraints: {0}")]
    ShapeViolation(String),

    #[error("stratum {0} has no observations")]
    EmptyStratum(usize),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid propensity {propensity} in replication {replication}")]
    InvalidPropensity { replication: usize, propensity: f64 },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("solver failed to converge: {0}")]
    Solver(String),

    // -- configuration and files ------------------------------------------
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported format version {found} (this build reads up to {supported})")]
    FormatVersion { found: u32, supported: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors raised by an enumeration or path-count guard.
    pub fn is_resource_guard(&self) -> bool {
        matches!(self, Error::GuardExceeded { .. })
    }

    pub(crate) fn guard(what: &'static str, needed: u128, limit: u128) -> Self {
        Error::GuardExceeded {
            what,
            needed,
            limit,
        }
    }
}
