use thiserror::Error;

/// Unified error type for the whole pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid model / rope / sampler configuration.
    #[error("invalid config: {0}")]
    Config(String),

    /// Inconsistent segment layout.
    #[error("invalid layout: {0}")]
    Layout(String),

    /// Attention mask violates its invariants (e.g. a row with no keys).
    #[error("invalid mask: {0}")]
    Mask(String),

    /// A caller-facing precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// NaN/Inf surfaced during forward, sampling or evaluation.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Training aborted (NaN gradient/loss, bad resume state, ...).
    #[error("training failure: {0}")]
    Training(String),

    /// A scene spec that cannot be rendered (subject out of bounds, ...).
    #[error("invalid scene spec: {0}")]
    Spec(String),

    /// File header is not what the format requires.
    #[error("malformed header: {0}")]
    MalformedHeader(String),

    /// File ended before its declared payload.
    #[error("truncated payload: {0}")]
    Truncated(String),

    /// Manifest and on-disk files disagree (missing file, bad checksum, ...).
    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    /// Text that does not parse (manifest, spec file, run config).
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
