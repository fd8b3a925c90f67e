use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad classification used by front-ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Malformed tree, bad shapes, bad parameters.
    Validation,
    /// Factorization failures, negative variances.
    Numerical,
    /// File system and (de)serialization problems.
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("vertex {0} appears more than once")]
    DuplicateVertex(usize),
    #[error("vertex {0} has no parent but is not the root")]
    MultipleRoots(usize),
    #[error("vertex id {0} is outside the dense id range 0..{1}")]
    OrphanVertex(usize, usize),
    #[error("cycle detected: vertex {0} is not reachable from the root")]
    CycleDetected(usize),
    #[error("leaf {leaf} is at depth {depth}, expected every leaf at depth {expected}")]
    NonUniformLeafDepth {
        leaf: usize,
        depth: usize,
        expected: usize,
    },
    #[error("unknown vertex {0}")]
    UnknownVertex(usize),
    #[error("vertex {0} is not a leaf")]
    NotALeaf(usize),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("design matrix is rank deficient (pivot {pivot} of {dim} fell below threshold)")]
    RankDeficientDesign { pivot: usize, dim: usize },
    #[error("noise variance is not symmetric positive definite: {0}")]
    NonSpdNoise(String),
    #[error("matrix is not symmetric positive definite (pivot {pivot} of {dim})")]
    NonSpd { pivot: usize, dim: usize },
    #[error("stacked system is rank deficient")]
    RankDeficient,
    #[error("dense oracle infeasible: N={cols}, M={rows} exceeds limits N<={max_cols}, M<={max_rows}")]
    InfeasibleDenseSize {
        rows: usize,
        cols: usize,
        max_rows: usize,
        max_cols: usize,
    },
    #[error("region is empty")]
    EmptyRegion,
    #[error("query variance {0:e} is negative beyond round-off")]
    NegativeVariance(f64),
    #[error("query variance is zero; z-score undefined")]
    ZeroVariance,
    #[error("argument out of domain: {0}")]
    OutOfDomain(String),
    #[error("input is empty")]
    EmptyInput,
    #[error("tree is not a complete k-ary tree: {0}")]
    NonCompleteTree(String),
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("at vertex {vertex}: {source}")]
    AtVertex {
        vertex: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("vertex {name:?}: {source}")]
    Named {
        name: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{context}: {message}")]
    Parse { context: String, message: String },
    #[error("bad store file: {0}")]
    BadStore(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn at_vertex(self, vertex: usize) -> Self {
        match self {
            // keep the innermost attribution
            e @ Error::AtVertex { .. } => e,
            e => Error::AtVertex {
                vertex,
                source: Box::new(e),
            },
        }
    }

    /// Vertex the error is attributed to, if any.
    pub fn vertex(&self) -> Option<usize> {
        match self {
            Error::AtVertex { vertex, .. } => Some(*vertex),
            Error::Named { source, .. } => source.vertex(),
            Error::DuplicateVertex(v)
            | Error::MultipleRoots(v)
            | Error::CycleDetected(v)
            | Error::UnknownVertex(v)
            | Error::NotALeaf(v) => Some(*v),
            Error::NonUniformLeafDepth { leaf, .. } => Some(*leaf),
            _ => None,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::AtVertex { source, .. } | Error::Named { source, .. } => source.kind(),
            Error::RankDeficientDesign { .. }
            | Error::NonSpdNoise(_)
            | Error::NonSpd { .. }
            | Error::RankDeficient
            | Error::NegativeVariance(_)
            | Error::ZeroVariance => ErrorKind::Numerical,
            Error::BadStore(_) | Error::Io { .. } => ErrorKind::Io,
            _ => ErrorKind::Validation,
        }
    }

    /// Attach a user-facing vertex name, replacing any numeric attribution.
    pub fn named(self, names: &[String]) -> Self {
        let Some(name) = self.vertex().and_then(|v| names.get(v)).cloned() else {
            return self;
        };
        let inner = match self {
            Error::AtVertex { source, .. } => *source,
            Error::Named { .. } => return self,
            e => e,
        };
        Error::Named {
            name,
            source: Box::new(inner),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
