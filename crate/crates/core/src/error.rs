use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("face {face}: index {index} out of range ({vertex_count} vertices)")]
    IndexOutOfRange {
        face: usize,
        index: usize,
        vertex_count: usize,
    },
    #[error("face {face} references the same vertex twice")]
    RepeatedVertex { face: usize },
    #[error("face {face} is degenerate (area {area:e})")]
    DegenerateFace { face: usize, area: f64 },
    #[error("face {face}: edge ({}, {}) is shared by more than two faces", edge.0, edge.1)]
    NonManifoldEdge { face: usize, edge: (usize, usize) },
    #[error("vertex {vertex} has a non-finite coordinate")]
    NonFiniteVertex { vertex: usize },
    #[error("vertex {vertex} has a color outside [0, 1]")]
    InvalidColor { vertex: usize },
    #[error("expected {expected} colors, got {got}")]
    ColorCount { expected: usize, got: usize },
    #[error("expected {expected} vertices, got {got}")]
    VertexCount { expected: usize, got: usize },
    #[error("mask vertex {index} out of range ({vertex_count} vertices)")]
    MaskIndex { index: usize, vertex_count: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum OperatorError {
    #[error("factorization failed at pivot {pivot} (value {value:e}): mesh is numerically degenerate")]
    Factorization { pivot: usize, value: f64 },
    #[error("expected {expected} entries, got {got}")]
    Shape { expected: usize, got: usize },
}

#[derive(Debug, Error)]
pub enum GuidanceError {
    /// Transport failure or a response that could not be decoded. Retrying may help.
    #[error("guidance service unavailable: {0}")]
    Unavailable(String),
    #[error("malformed guidance response: {0}")]
    Malformed(String),
    #[error("protocol version mismatch: expected {expected}, got {got}")]
    Protocol { expected: String, got: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite guidance gradient in view {view}")]
    NonFinite { view: usize },
}

impl GuidanceError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GuidanceError::Unavailable(_) | GuidanceError::Malformed(_))
    }
}

#[derive(Debug, Error)]
pub enum DeformError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error("guidance failed at iteration {iteration}: {source}")]
    Guidance {
        iteration: usize,
        #[source]
        source: GuidanceError,
    },
    #[error("diverged at iteration {iteration}: non-finite {term}")]
    Diverged { iteration: usize, term: &'static str },
}
