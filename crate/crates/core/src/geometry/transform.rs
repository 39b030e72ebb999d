use std::f64::consts::TAU;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{GeometryError, Point, PointCloud, Result};

pub type Rotation = [[f64; 3]; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

/// The five rotation choices used for augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    AllAxes,
    X,
    Y,
    Z,
    None,
}

impl RotationMode {
    pub const ALL: [RotationMode; 5] = [
        RotationMode::AllAxes,
        RotationMode::X,
        RotationMode::Y,
        RotationMode::Z,
        RotationMode::None,
    ];

    /// Uniform choice among the five modes.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::ALL[rng.gen_range(0..Self::ALL.len())]
    }
}

pub fn axis_rotation(axis: Axis, angle: f64) -> Rotation {
    let (s, c) = angle.sin_cos();
    match axis {
        Axis::X => [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
        Axis::Y => [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
        Axis::Z => [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
    }
}

pub(crate) fn mat_mul(a: &Rotation, b: &Rotation) -> Rotation {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub(crate) fn mat_vec(r: &Rotation, p: &Point) -> Point {
    [
        r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
        r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
        r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
    ]
}

pub(crate) const IDENTITY: Rotation = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Rotation with angle(s) drawn uniformly from `[0, 2π)`. `AllAxes`
/// composes independent rotations about x, y and z.
pub fn random_rotation<R: Rng + ?Sized>(mode: RotationMode, rng: &mut R) -> Rotation {
    let mut angle = || rng.gen_range(0.0..TAU);
    match mode {
        RotationMode::None => IDENTITY,
        RotationMode::X => axis_rotation(Axis::X, angle()),
        RotationMode::Y => axis_rotation(Axis::Y, angle()),
        RotationMode::Z => axis_rotation(Axis::Z, angle()),
        RotationMode::AllAxes => {
            let (a, b, c) = (angle(), angle(), angle());
            mat_mul(
                &axis_rotation(Axis::Z, c),
                &mat_mul(&axis_rotation(Axis::Y, b), &axis_rotation(Axis::X, a)),
            )
        }
    }
}

pub fn apply_rotation(cloud: &PointCloud, r: &Rotation) -> PointCloud {
    PointCloud::new(cloud.points().iter().map(|p| mat_vec(r, p)).collect())
        .expect("rotation keeps points finite")
}

/// Reordering of `n` items: position `k` of the result takes item `self[k]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        let mut seen = vec![false; n];
        for &i in &order {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(GeometryError::NotBijective { n });
            }
        }
        Ok(Self(order))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        use rand::seq::SliceRandom;
        let mut v: Vec<usize> = (0..n).collect();
        v.shuffle(rng);
        Self(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (new, &old) in self.0.iter().enumerate() {
            inv[old] = new;
        }
        Self(inv)
    }

    pub fn apply(&self, cloud: &PointCloud) -> Result<PointCloud> {
        if cloud.len() != self.len() {
            return Err(GeometryError::SizeMismatch(cloud.len(), self.len()));
        }
        PointCloud::new(self.0.iter().map(|&i| cloud.point(i)).collect())
    }
}

/// Ground-truth matching: source index `i` in X pairs with `self.target(i)` in Y.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Correspondence(Vec<usize>);

impl Correspondence {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        Permutation::new(map).map(|p| Self(p.0))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn target(&self, source: usize) -> usize {
        self.0[source]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Maps Y indices back to X indices.
    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (s, &t) in self.0.iter().enumerate() {
            inv[t] = s;
        }
        Self(inv)
    }

    /// Re-index after the source cloud was reordered by `perm`.
    pub fn permute_source(&self, perm: &Permutation) -> Result<Self> {
        if perm.len() != self.len() {
            return Err(GeometryError::SizeMismatch(perm.len(), self.len()));
        }
        Ok(Self(perm.0.iter().map(|&old| self.0[old]).collect()))
    }

    /// Re-index after the target cloud was reordered by `perm`.
    pub fn permute_target(&self, perm: &Permutation) -> Result<Self> {
        if perm.len() != self.len() {
            return Err(GeometryError::SizeMismatch(perm.len(), self.len()));
        }
        let inv = perm.inverse();
        Ok(Self(self.0.iter().map(|&t| inv.0[t]).collect()))
    }
}

/// Reorders the source cloud and re-indexes the correspondence so every
/// ground-truth pair survives.
pub fn apply_permutation(
    cloud: &PointCloud,
    corr: &Correspondence,
    perm: &Permutation,
) -> Result<(PointCloud, Correspondence)> {
    Ok((perm.apply(cloud)?, corr.permute_source(perm)?))
}

/// Perturbs `⌊fraction·n⌋` uniformly chosen points with i.i.d. `N(0, stddev²)`
/// noise per coordinate.
pub fn inject_noise<R: Rng + ?Sized>(
    cloud: &PointCloud,
    fraction: f64,
    stddev: f64,
    rng: &mut R,
) -> Result<PointCloud> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(GeometryError::Domain {
            what: "noise fraction",
            constraint: "in [0, 1]",
            value: fraction,
        });
    }
    if stddev.is_nan() || stddev < 0.0 {
        return Err(GeometryError::Domain {
            what: "noise stddev",
            constraint: "non-negative",
            value: stddev,
        });
    }
    let n = cloud.len();
    let count = (fraction * n as f64).floor() as usize;
    if count == 0 || stddev == 0.0 {
        return Ok(cloud.clone());
    }
    let normal = Normal::new(0.0, stddev).expect("valid stddev");
    let mut pts = cloud.points().to_vec();
    for i in index::sample(rng, n, count) {
        for c in pts[i].iter_mut() {
            *c += normal.sample(rng);
        }
    }
    PointCloud::new(pts)
}
