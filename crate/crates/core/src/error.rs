use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward root must be a scalar, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NanGradient(String),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("point coincides with the camera center")]
    AtCameraCenter,

    #[error("frustum intersection is empty")]
    EmptyIntersection,

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("point {0:?} lies outside the scene bounds")]
    OutsideBounds([f64; 3]),

    #[error("query distance {t} is below the ray's near bound {near}")]
    BeforeNear { t: f64, near: f64 },

    #[error("provenance sample has zero visibility and no observing location")]
    InvisibleSample,

    #[error("no visible empirical provenance in batch")]
    NoTargets,

    #[error("training diverged at iteration {0}")]
    Diverged(usize),

    #[error("no provenance samples available")]
    NoSamples,

    #[error("degenerate integration volume")]
    DegenerateVolume,

    #[error("no surface points found")]
    NoSurfacePoints,

    #[error("all target points were skipped")]
    NoTargetPoints,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
