//! Matching extraction, geodesic error, noisy evaluation and ablations.

mod ablation;
mod export;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use ablation::{
    ablate_heads, ablate_layers, classify_head, quadrant_mass, write_ablation_csv, AblationReport, HeadAblation,
    HeadClass, QuadrantMass,
};
pub use export::{export_attention, support_width, AttentionExport};

use crate::data::ShapeDataset;
use crate::geometry::{
    chamfer, inject_noise, nearest_neighbor_match, Correspondence, GeodesicTable, GeometryError, MeshRef,
    Permutation, PointCloud,
};
use crate::model::{HeadMask, Model, ModelError};
use crate::train::{EvalSpec, GeodesicNorm, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{0}")]
    Invalid(String),
    #[error("i/o error on {path}: {msg}")]
    Io { path: String, msg: String },
}

impl EvalError {
    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Which remapped cloud was scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// `X̂` against `Y`: every point of X is matched into Y.
    XToY,
    /// `Ŷ` against `X`: every point of Y is matched into X.
    YToX,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::XToY => "x_to_y",
            Direction::YToX => "y_to_x",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchReport {
    /// Dataset indices of the pair.
    pub pair: (usize, usize),
    pub direction: Direction,
    /// `chamfer(X̂, Y)`.
    pub chamfer_xy: f64,
    /// `chamfer(Ŷ, X)`.
    pub chamfer_yx: f64,
    /// Geodesic distance between predicted and true match, per source point.
    pub errors: Vec<f64>,
    pub mean_error: f64,
}

/// Scores predicted clouds: picks the direction with the lower chamfer,
/// matches by nearest neighbour and measures geodesic error on the target
/// mesh. Meshes share the indexing of `x` and `y`.
#[allow(clippy::too_many_arguments)]
pub fn score_prediction(
    x_hat: &PointCloud,
    y_hat: &PointCloud,
    x: &PointCloud,
    y: &PointCloud,
    mesh_x: &MeshRef,
    mesh_y: &MeshRef,
    corr: &Correspondence,
    norm: GeodesicNorm,
) -> Result<MatchReport> {
    if x_hat.len() != x.len() || y_hat.len() != y.len() || corr.len() != x.len() {
        return Err(GeometryError::SizeMismatch(x_hat.len(), x.len()).into());
    }
    if mesh_x.cloud().len() != x.len() || mesh_y.cloud().len() != y.len() {
        return Err(GeometryError::SizeMismatch(mesh_x.cloud().len(), x.len()).into());
    }
    let chamfer_xy = chamfer(x_hat, y);
    let chamfer_yx = chamfer(y_hat, x);
    let (direction, matched, truth, mesh) = if chamfer_xy <= chamfer_yx {
        (Direction::XToY, nearest_neighbor_match(x_hat, y), corr.clone(), mesh_y)
    } else {
        (Direction::YToX, nearest_neighbor_match(y_hat, x), corr.inverse(), mesh_x)
    };
    let scale = match norm {
        GeodesicNorm::None => 1.0,
        GeodesicNorm::SqrtArea => 1.0 / mesh.surface_area().sqrt(),
    };
    let mut table = GeodesicTable::new(mesh);
    let errors = matched
        .iter()
        .enumerate()
        .map(|(i, &m)| Ok(table.distance(truth.target(i), m)? * scale))
        .collect::<Result<Vec<f64>>>()?;
    let mean_error = errors.iter().sum::<f64>() / errors.len() as f64;
    Ok(MatchReport {
        pair: (0, 0),
        direction,
        chamfer_xy,
        chamfer_yx,
        errors,
        mean_error,
    })
}

/// Runs the model on one pair and scores its output.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_pair(
    model: &Model,
    x: &PointCloud,
    y: &PointCloud,
    mesh_x: &MeshRef,
    mesh_y: &MeshRef,
    corr: &Correspondence,
    norm: GeodesicNorm,
    mask: &HeadMask,
) -> Result<MatchReport> {
    let p = model.predict(x, y, mask, false)?;
    score_prediction(&p.x_hat, &p.y_hat, x, y, mesh_x, mesh_y, corr, norm)
}

/// Reorders mesh vertices like [`Permutation::apply`] and relabels faces.
pub fn permute_mesh(mesh: &MeshRef, perm: &Permutation) -> Result<MeshRef> {
    let cloud = perm.apply(mesh.cloud())?;
    let inv = perm.inverse();
    let tris = mesh
        .triangles()
        .iter()
        .map(|t| t.map(|v| inv.as_slice()[v]))
        .collect();
    Ok(MeshRef::new(cloud, tris)?)
}

/// One test pair, shuffled and optionally noisy, with matching meshes.
#[derive(Clone, Debug)]
pub struct TestPair {
    pub pair: (usize, usize),
    pub x: PointCloud,
    pub y: PointCloud,
    pub mesh_x: MeshRef,
    pub mesh_y: MeshRef,
    pub corr: Correspondence,
}

/// Draws `spec.pairs` ordered pairs of distinct shapes. Each pair gets its
/// own random point order; `noise_stddev` adds `N(0, σ²)` to every
/// coordinate of the inputs while geodesics stay on the clean meshes.
pub fn sample_test_pairs(dataset: &ShapeDataset, spec: &EvalSpec, noise_stddev: f64) -> Result<Vec<TestPair>> {
    if dataset.len() < 2 {
        return Err(EvalError::Invalid("evaluation needs at least two shapes".into()));
    }
    if dataset.meshes().iter().any(Option::is_none) {
        return Err(EvalError::Invalid("evaluation needs a mesh for every shape".into()));
    }
    let n = dataset.n();
    let mut pick = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.pairs)
        .map(|k| {
            let i = pick.gen_range(0..dataset.len());
            let j = (i + pick.gen_range(1..dataset.len())) % dataset.len();
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(1 + k as u64);
            let px = Permutation::random(n, &mut rng);
            let py = Permutation::random(n, &mut rng);
            let mesh_x = permute_mesh(dataset.mesh(i).unwrap(), &px)?;
            let mesh_y = permute_mesh(dataset.mesh(j).unwrap(), &py)?;
            let corr = Correspondence::identity(n).permute_source(&px)?.permute_target(&py)?;
            let mut noise = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6e_6f69_7365);
            noise.set_stream(1 + k as u64);
            let x = inject_noise(mesh_x.cloud(), 1.0, noise_stddev, &mut noise)?;
            let y = inject_noise(mesh_y.cloud(), 1.0, noise_stddev, &mut noise)?;
            Ok(TestPair {
                pair: (i, j),
                x,
                y,
                mesh_x,
                mesh_y,
                corr,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TestSummary {
    pub reports: Vec<MatchReport>,
    pub mean_error: f64,
}

/// Mean geodesic error over sampled test pairs. Pairs are scored on all
/// available cores; results are in pair order.
pub fn evaluate_testset(
    model: &Model,
    dataset: &ShapeDataset,
    spec: &EvalSpec,
    noise_stddev: f64,
    mask: &HeadMask,
) -> Result<TestSummary> {
    let pairs = sample_test_pairs(dataset, spec, noise_stddev)?;
    let reports = evaluate_pairs(model, &pairs, spec.geodesic_norm, mask)?;
    let mean_error = reports.iter().map(|r| r.mean_error).sum::<f64>() / reports.len().max(1) as f64;
    Ok(TestSummary { reports, mean_error })
}

pub fn evaluate_pairs(model: &Model, pairs: &[TestPair], norm: GeodesicNorm, mask: &HeadMask) -> Result<Vec<MatchReport>> {
    let one = |p: &TestPair| -> Result<MatchReport> {
        let mut r = evaluate_pair(model, &p.x, &p.y, &p.mesh_x, &p.mesh_y, &p.corr, norm, mask)?;
        r.pair = p.pair;
        Ok(r)
    };
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(pairs.len().max(1));
    if workers <= 1 {
        return pairs.iter().map(one).collect();
    }
    let chunk = pairs.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = pairs
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(one).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(pairs.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

/// One row per pair: indices, direction, both chamfer values, mean error.
pub fn write_reports_csv(reports: &[MatchReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| EvalError::io(path, e))?;
    w.write_record(["x", "y", "direction", "chamfer_xy", "chamfer_yx", "mean_error"])
        .map_err(|e| EvalError::io(path, e))?;
    for r in reports {
        w.write_record([
            r.pair.0.to_string(),
            r.pair.1.to_string(),
            r.direction.to_string(),
            r.chamfer_xy.to_string(),
            r.chamfer_yx.to_string(),
            r.mean_error.to_string(),
        ])
        .map_err(|e| EvalError::io(path, e))?;
    }
    w.flush().map_err(|e| EvalError::io(path, e))
}
