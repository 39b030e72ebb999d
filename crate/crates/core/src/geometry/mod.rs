//! Point-cloud and mesh primitives.

mod cloud;
mod distance;
mod geodesic;
pub mod io;
mod metrics;
mod transform;

pub use cloud::{MeshRef, PointCloud, Point};
pub use distance::{BlockDistanceMatrix, CrossShapeMode};
pub use geodesic::{geodesic_distances, GeodesicTable};
pub use metrics::{chamfer, directed_chamfer, nearest_neighbor_match};
pub use transform::{
    apply_permutation, apply_rotation, axis_rotation, inject_noise, random_rotation, Axis,
    Correspondence, Permutation, Rotation, RotationMode,
};
pub(crate) use transform::{mat_mul, mat_vec, IDENTITY};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point cloud is empty")]
    Empty,
    #[error("point {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("all points coincide; cannot normalize")]
    DegenerateCloud,
    #[error("triangle {face} references vertex {vertex} but the mesh has {count} vertices")]
    BadIndex {
        face: usize,
        vertex: usize,
        count: usize,
    },
    #[error("vertex {vertex} is unreachable from vertex {from}")]
    Unreachable { from: usize, vertex: usize },
    #[error("not a permutation of 0..{n}")]
    NotBijective { n: usize },
    #[error("size mismatch: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("{what} must be {constraint}, got {value}")]
    Domain {
        what: &'static str,
        constraint: &'static str,
        value: f64,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("i/o error on {path}: {msg}")]
    Io { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, GeometryError>;
