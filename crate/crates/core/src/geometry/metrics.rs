use super::cloud::dist2;
use super::PointCloud;

/// Mean over `a` of the squared distance to the nearest point of `b`.
pub fn directed_chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
    let total: f64 = a
        .points()
        .iter()
        .map(|p| {
            b.points()
                .iter()
                .map(|q| dist2(p, q))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / a.len() as f64
}

/// Symmetric chamfer distance: sum of the two directed means of squared
/// nearest-neighbour distances.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
    directed_chamfer(a, b) + directed_chamfer(b, a)
}

/// For every point of `mapped`, the index of the closest point in `target`.
/// Ties resolve to the lowest index.
pub fn nearest_neighbor_match(mapped: &PointCloud, target: &PointCloud) -> Vec<usize> {
    mapped
        .points()
        .iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, q) in target.points().iter().enumerate() {
                let d = dist2(p, q);
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            best
        })
        .collect()
}
