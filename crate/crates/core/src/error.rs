use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("unsupported kernel size {0} (expected 1 or 3)")]
    KernelSize(usize),
    #[error("{op} requires even spatial dims, got {dims:?}")]
    OddDims { op: &'static str, dims: [usize; 3] },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(alloc::vec::Vec<usize>),
    #[error("loss does not depend on any tensor that requires grad")]
    Detached,
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("invalid volume: {0}")]
    Volume(String),
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    Dims([usize; 3], [usize; 3]),
    #[error("mask contains non-binary value {0}")]
    NonBinaryMask(u8),
    #[error("expected HU intensities")]
    NotHu,
    #[error("volume has no non-zero voxels")]
    EmptyVolume,
    #[error("z-score needs at least 2 brain voxels, found {0}")]
    TooFewBrainVoxels(usize),
    #[error("brain region has zero standard deviation")]
    ZeroVariance,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("need at least {k} patients for {k}-fold split, got {n}")]
    TooFewPatients { k: usize, n: usize },
    #[error("weighted loss requires at least one lesion voxel (N1 = 0)")]
    NoLesionVoxels,
    #[error("phantom lesion placement failed after {0} attempts")]
    LesionPlacement(usize),
    #[error("parameter {name}: {detail}")]
    Param { name: String, detail: String },
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
