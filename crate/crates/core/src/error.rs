use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// Variants are named after the failure they describe rather than the
/// module that raises them, since several conditions (an empty dataset, a
/// diverging loss) occur in more than one place.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("empty dataset")]
    EmptyDataset,

    #[error("input {height}x{width} is smaller than the model minimum {min}")]
    InputTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("selector does not reduce to a scalar: {0}")]
    NonScalarSelector(String),
    #[error("loss diverged (non-finite) at epoch {epoch}, step {step}")]
    DivergedLoss { epoch: usize, step: usize },
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error("need at least 2 classes to induce a hierarchy, got {0}")]
    InsufficientClasses(usize),
    #[error("weight row {0} is zero or non-finite")]
    DegenerateWeights(usize),
    #[error("hierarchy schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("node {0} is a leaf and has no children")]
    LeafHasNoChildren(usize),
    #[error("hierarchy dimension {hierarchy} does not match feature dimension {model}")]
    HierarchyDimensionMismatch { hierarchy: usize, model: usize },
    #[error("every pixel is ignored")]
    AllPixelsIgnored,

    #[error("crop center ({x}, {y}) lies outside the {width}x{height} image")]
    CenterOutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("pixel ({x}, {y}) is an ignore pixel")]
    IgnorePixel { x: usize, y: usize },
    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("unknown class {0}")]
    UnknownClass(usize),
    #[error("pixel ({x}, {y}) is out of bounds")]
    OutOfBounds { x: usize, y: usize },
    #[error("pixel set is empty")]
    EmptySet,
    #[error("no pixels predicted as class {0}")]
    NoPixelsOfClass(usize),

    #[error("saliency {saliency:?} cannot be aligned with labels {label:?}")]
    ResolutionMismatch {
        saliency: (usize, usize),
        label: (usize, usize),
    },
    #[error("no pixels are routed through node {0}")]
    NoRoutedPixels(usize),

    #[error("removal mask is empty")]
    EmptyMask,
    #[error("part {0} does not appear in the dataset")]
    PartAbsent(i32),
    #[error("need at least 2 parts to rank, found {0}")]
    InsufficientParts(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
