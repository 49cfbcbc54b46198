//! Synthetic shapes, occluded partial views, the XYZ text format and
//! on-disk datasets.

mod dataset;
mod partial;
mod shapes;
mod xyz;

pub use dataset::{
    generate_dataset, generate_pair, load_split, normalize_unit_cube, read_manifest,
    write_dataset, Dataset, DatasetConfig, ManifestEntry, SamplePair, Split,
};
pub use partial::make_partial;
pub use shapes::{generate_shape, ShapeKind, ShapeSpec};
pub use xyz::{format_xyz, parse_xyz, read_xyz, write_xyz};

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geometry::{GeometryError, Point};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown shape kind {0:?}")]
    UnknownKind(String),
    #[error("unknown split {0:?} (expected train, val or test)")]
    UnknownSplit(String),
    #[error("{0}")]
    Count(String),
    #[error("keep fraction must lie in (0, 1], got {0}")]
    KeepFraction(f64),
    #[error("view direction must be nonzero and finite, got {0:?}")]
    ViewDirection(Point),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{}:{line}: {message}", path.display())]
    ParseFile {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("empty cloud")]
    EmptyCloud,
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Manifest { path: PathBuf, message: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
