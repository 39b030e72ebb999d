use super::{GeometryError, Result};

pub type Point = [f64; 3];

/// Ordered set of 3D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(GeometryError::Empty);
        }
        if let Some(index) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(GeometryError::NonFinite { index });
        }
        Ok(Self { points })
    }

    /// Builds a cloud from a flat `n×3` row-major buffer.
    pub fn from_flat(data: &[f64]) -> Result<Self> {
        if !data.len().is_multiple_of(3) {
            return Err(GeometryError::SizeMismatch(data.len(), 3));
        }
        Self::new(data.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn point(&self, i: usize) -> Point {
        self.points[i]
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    /// Centers the cloud at its centroid and scales it into the unit ball,
    /// so the farthest point sits at distance 1.
    pub fn normalize(&self) -> Result<Self> {
        if self.points.len() < 2 {
            return Err(GeometryError::DegenerateCloud);
        }
        let c = self.centroid();
        let centered: Vec<Point> = self
            .points
            .iter()
            .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
            .collect();
        let radius = centered.iter().map(norm).fold(0.0, f64::max);
        if radius <= f64::EPSILON * 16.0 {
            return Err(GeometryError::DegenerateCloud);
        }
        Ok(Self {
            points: centered.iter().map(|p| p.map(|v| v / radius)).collect(),
        })
    }
}

pub(crate) fn norm(p: &Point) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

pub(crate) fn dist2(a: &Point, b: &Point) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

pub(crate) fn dist(a: &Point, b: &Point) -> f64 {
    dist2(a, b).sqrt()
}

/// A point cloud with triangle connectivity, used for geodesic evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshRef {
    cloud: PointCloud,
    triangles: Vec<[usize; 3]>,
}

impl MeshRef {
    /// Validates indices. Connectivity is checked lazily by geodesic queries.
    pub fn new(cloud: PointCloud, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let count = cloud.len();
        for (face, tri) in triangles.iter().enumerate() {
            if let Some(&vertex) = tri.iter().find(|&&v| v >= count) {
                return Err(GeometryError::BadIndex {
                    face,
                    vertex,
                    count,
                });
            }
        }
        Ok(Self { cloud, triangles })
    }

    pub fn cloud(&self) -> &PointCloud {
        &self.cloud
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    /// Same connectivity over new vertex positions.
    pub fn with_cloud(&self, cloud: PointCloud) -> Result<Self> {
        if cloud.len() != self.cloud.len() {
            return Err(GeometryError::SizeMismatch(cloud.len(), self.cloud.len()));
        }
        Ok(Self {
            cloud,
            triangles: self.triangles.clone(),
        })
    }

    /// Undirected edges with Euclidean lengths, deduplicated.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let mut pairs: Vec<(usize, usize)> = self
            .triangles
            .iter()
            .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
            .filter(|(a, b)| a != b)
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        pairs.sort_unstable();
        pairs.dedup();
        let pts = self.cloud.points();
        pairs
            .into_iter()
            .map(|(a, b)| (a, b, dist(&pts[a], &pts[b])))
            .collect()
    }

    pub fn surface_area(&self) -> f64 {
        let p = self.cloud.points();
        self.triangles
            .iter()
            .map(|t| {
                let (a, b, c) = (p[t[0]], p[t[1]], p[t[2]]);
                let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
                let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
                let cross = [
                    u[1] * v[2] - u[2] * v[1],
                    u[2] * v[0] - u[0] * v[2],
                    u[0] * v[1] - u[1] * v[0],
                ];
                0.5 * norm(&cross)
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn normalize_symmetric_pair() {
        let c = PointCloud::new(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        let n = c.normalize().unwrap();
        assert_eq!(n.points(), &[[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_is_idempotent() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Point> = (0..50)
            .map(|_| [rng.gen_range(-4.0..4.0), rng.gen_range(-1.0..9.0), rng.gen_range(0.0..2.0)])
            .collect();
        let once = PointCloud::new(pts).unwrap().normalize().unwrap();
        let twice = once.normalize().unwrap();
        for (a, b) in once.points().iter().zip(twice.points()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalize_properties_by_recomputation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let pts: Vec<Point> = (0..rng.gen_range(2..60))
                .map(|_| [rng.gen_range(-10.0..10.0), rng.gen_range(-3.0..3.0), rng.gen_range(5.0..6.0)])
                .collect();
            let n = PointCloud::new(pts).unwrap().normalize().unwrap();
            // recompute directly rather than through centroid()
            let mut sum = [0.0; 3];
            let mut maxr: f64 = 0.0;
            for p in n.points() {
                for k in 0..3 {
                    sum[k] += p[k];
                }
                maxr = maxr.max((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt());
            }
            for s in sum {
                assert!((s / n.len() as f64).abs() < 1e-9);
            }
            assert!((maxr - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_clouds() {
        let c = PointCloud::new(vec![[1.0, 1.0, 1.0]; 4]).unwrap();
        assert_eq!(c.normalize(), Err(GeometryError::DegenerateCloud));
        let single = PointCloud::new(vec![[1.0, 0.0, 0.0]]).unwrap();
        assert!(single.normalize().is_err());
        assert!(PointCloud::new(vec![]).is_err());
        assert!(PointCloud::new(vec![[f64::NAN, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn mesh_index_validation() {
        let c = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        assert!(MeshRef::new(c.clone(), vec![[0, 1, 2]]).is_ok());
        assert!(matches!(
            MeshRef::new(c, vec![[0, 1, 3]]),
            Err(GeometryError::BadIndex { vertex: 3, .. })
        ));
    }

    #[test]
    fn unit_triangle_area() {
        let c = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let m = MeshRef::new(c, vec![[0, 1, 2]]).unwrap();
        assert!((m.surface_area() - 0.5).abs() < 1e-15);
        assert_eq!(m.edges().len(), 3);
    }
}
