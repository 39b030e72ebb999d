//! Shape datasets, dataset directories, pairing and augmentation.

mod augment;
pub mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use augment::{augment_pair, epoch_batches, epoch_couples, AugmentPolicy, Couple, NoisePolicy, TrainBatch};
pub use synthetic::{generate_synthetic_dataset, SyntheticConfig};

use crate::geometry::{io, GeometryError, MeshRef, PointCloud};

/// Version written to and required from dataset manifests.
pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{0}")]
    Invalid(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad manifest {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Clouds that share one vertex indexing: point `i` of every cloud is the
/// same surface location.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeDataset {
    name: String,
    clouds: Vec<PointCloud>,
    meshes: Vec<Option<MeshRef>>,
}

impl ShapeDataset {
    pub fn new(name: impl Into<String>, clouds: Vec<PointCloud>, meshes: Vec<Option<MeshRef>>) -> Result<Self> {
        if clouds.is_empty() {
            return Err(DataError::Invalid("dataset has no shapes".into()));
        }
        if meshes.len() != clouds.len() {
            return Err(DataError::Invalid(format!(
                "{} meshes for {} clouds",
                meshes.len(),
                clouds.len()
            )));
        }
        let n = clouds[0].len();
        if let Some(i) = clouds.iter().position(|c| c.len() != n) {
            return Err(DataError::Invalid(format!(
                "shape {i} has {} points, expected {n}",
                clouds[i].len()
            )));
        }
        for (i, (c, m)) in clouds.iter().zip(&meshes).enumerate() {
            if m.as_ref().is_some_and(|m| m.cloud() != c) {
                return Err(DataError::Invalid(format!("mesh {i} does not match its cloud")));
            }
        }
        Ok(Self {
            name: name.into(),
            clouds,
            meshes,
        })
    }

    pub fn from_meshes(name: impl Into<String>, meshes: Vec<MeshRef>) -> Result<Self> {
        let clouds = meshes.iter().map(|m| m.cloud().clone()).collect();
        Self::new(name, clouds, meshes.into_iter().map(Some).collect())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    /// Points per shape.
    pub fn n(&self) -> usize {
        self.clouds[0].len()
    }

    pub fn clouds(&self) -> &[PointCloud] {
        &self.clouds
    }

    pub fn meshes(&self) -> &[Option<MeshRef>] {
        &self.meshes
    }

    pub fn mesh(&self, i: usize) -> Option<&MeshRef> {
        self.meshes[i].as_ref()
    }

    /// Splits off the last `count` shapes.
    pub fn split_tail(&self, count: usize) -> Result<(Self, Self)> {
        if count == 0 || count >= self.len() {
            return Err(DataError::Invalid(format!(
                "cannot hold out {count} of {} shapes",
                self.len()
            )));
        }
        let cut = self.len() - count;
        let part = |r: std::ops::Range<usize>, suffix: &str| {
            Self::new(
                format!("{}-{suffix}", self.name),
                self.clouds[r.clone()].to_vec(),
                self.meshes[r].to_vec(),
            )
        };
        Ok((part(0..cut, "train")?, part(cut..self.len(), "test")?))
    }

    /// Writes one OFF (with mesh) or XYZ (without) file per shape plus a
    /// manifest.
    pub fn save(&self, dir: &Path, seed: Option<u64>) -> Result<()> {
        fs::create_dir_all(dir).map_err(|source| DataError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut shapes = Vec::with_capacity(self.len());
        for (i, (cloud, mesh)) in self.clouds.iter().zip(&self.meshes).enumerate() {
            let file = match mesh {
                Some(m) => {
                    let f = format!("shape_{i:05}.off");
                    io::write_off(&dir.join(&f), m)?;
                    f
                }
                None => {
                    let f = format!("shape_{i:05}.xyz");
                    io::write_xyz(&dir.join(&f), cloud)?;
                    f
                }
            };
            shapes.push(file);
        }
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            name: self.name.clone(),
            n: self.n(),
            seed,
            shapes,
        };
        let path = dir.join(MANIFEST_FILE);
        let text = toml::to_string(&manifest).map_err(|e| DataError::Manifest {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        fs::write(&path, text).map_err(|source| DataError::Io { path, source })
    }

    /// Reads a directory written by [`ShapeDataset::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|source| DataError::Io {
            path: path.clone(),
            source,
        })?;
        let bad = |msg: String| DataError::Manifest {
            path: path.clone(),
            msg,
        };
        let manifest: Manifest = toml::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(bad(format!(
                "version {} is not supported (expected {MANIFEST_VERSION})",
                manifest.version
            )));
        }
        let mut clouds = Vec::with_capacity(manifest.shapes.len());
        let mut meshes = Vec::with_capacity(manifest.shapes.len());
        for f in &manifest.shapes {
            let p = dir.join(f);
            if f.ends_with(".off") {
                let m = load_mesh_file(&p)?;
                clouds.push(m.cloud().clone());
                meshes.push(Some(m));
            } else if f.ends_with(".xyz") {
                clouds.push(load_cloud_file(&p)?);
                meshes.push(None);
            } else {
                return Err(bad(format!("unknown shape file type {f:?}")));
            }
        }
        let ds = Self::new(manifest.name, clouds, meshes)?;
        if ds.n() != manifest.n {
            return Err(bad(format!("manifest says n = {} but shapes have {}", manifest.n, ds.n())));
        }
        Ok(ds)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    name: String,
    n: usize,
    seed: Option<u64>,
    shapes: Vec<String>,
}

pub fn load_cloud_file(path: &Path) -> Result<PointCloud> {
    Ok(io::read_xyz(path)?)
}

pub fn load_mesh_file(path: &Path) -> Result<MeshRef> {
    Ok(io::read_off(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic_dataset(3, 32, 5).unwrap();
        ds.save(dir.path(), Some(5)).unwrap();
        assert_eq!(ShapeDataset::load(dir.path()).unwrap(), ds);

        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(text.contains("version = 1"));
        fs::write(dir.path().join(MANIFEST_FILE), text.replace("version = 1", "version = 7")).unwrap();
        let err = ShapeDataset::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("version 7"), "{err}");
    }

    #[test]
    fn clouds_without_meshes_use_xyz() {
        let dir = tempfile::tempdir().unwrap();
        let c = PointCloud::new(vec![[0.0, 0.5, 1.0], [0.1, 0.2, 0.3], [1e-9, -2.5, 3.0]]).unwrap();
        let ds = ShapeDataset::new("plain", vec![c.clone(), c], vec![None, None]).unwrap();
        ds.save(dir.path(), None).unwrap();
        assert!(dir.path().join("shape_00001.xyz").exists());
        let back = ShapeDataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.clouds()[0].len(), 3);
    }

    #[test]
    fn mismatched_sizes_rejected() {
        let a = PointCloud::new(vec![[0.0; 3]; 3]).unwrap();
        let b = PointCloud::new(vec![[0.0; 3]; 4]).unwrap();
        assert!(ShapeDataset::new("x", vec![a, b], vec![None, None]).is_err());
    }

    #[test]
    fn split_tail_keeps_order() {
        let ds = generate_synthetic_dataset(5, 32, 1).unwrap();
        let (train, test) = ds.split_tail(2).unwrap();
        assert_eq!(train.len(), 3);
        assert_eq!(test.clouds(), &ds.clouds()[3..]);
        assert!(ds.split_tail(5).is_err());
    }

    #[test]
    fn off_file_with_two_faces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.off");
        fs::write(&p, "OFF\n4 2 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n3 0 1 2\n3 0 2 3\n").unwrap();
        let m = load_mesh_file(&p).unwrap();
        assert_eq!((m.cloud().len(), m.triangles().len()), (4, 2));
        let x = dir.path().join("c.xyz");
        fs::write(&x, "0 0 0\n1 2 3\n4 5 6\n").unwrap();
        assert_eq!(load_cloud_file(&x).unwrap().len(), 3);
        fs::write(&x, "0 0 0\n1 2\n").unwrap();
        assert!(load_cloud_file(&x).unwrap_err().to_string().contains(":2:"));
    }
}
