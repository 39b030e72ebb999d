use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use super::{GeometryError, MeshRef, Result};

#[derive(Copy, Clone, PartialEq)]
struct Entry {
    dist: f64,
    vertex: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance, then vertex for determinism
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.vertex.cmp(&self.vertex))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn adjacency(mesh: &MeshRef) -> Vec<Vec<(usize, f64)>> {
    let mut adj = vec![Vec::new(); mesh.cloud().len()];
    for (a, b, w) in mesh.edges() {
        adj[a].push((b, w));
        adj[b].push((a, w));
    }
    adj
}

fn dijkstra(adj: &[Vec<(usize, f64)>], source: usize) -> Result<Vec<f64>> {
    let mut dist = vec![f64::INFINITY; adj.len()];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(Entry {
        dist: 0.0,
        vertex: source,
    });
    while let Some(Entry { dist: d, vertex }) = heap.pop() {
        if d > dist[vertex] {
            continue;
        }
        for &(next, w) in &adj[vertex] {
            let nd = d + w;
            if nd < dist[next] {
                dist[next] = nd;
                heap.push(Entry {
                    dist: nd,
                    vertex: next,
                });
            }
        }
    }
    if let Some(vertex) = dist.iter().position(|d| d.is_infinite()) {
        return Err(GeometryError::Unreachable { from: source, vertex });
    }
    Ok(dist)
}

/// Shortest-path distances along mesh edges from `source` to every vertex.
pub fn geodesic_distances(mesh: &MeshRef, source: usize) -> Result<Vec<f64>> {
    let n = mesh.cloud().len();
    if source >= n {
        return Err(GeometryError::BadIndex {
            face: 0,
            vertex: source,
            count: n,
        });
    }
    dijkstra(&adjacency(mesh), source)
}

/// Lazily filled table of geodesic rows for one mesh.
pub struct GeodesicTable {
    adj: Vec<Vec<(usize, f64)>>,
    rows: HashMap<usize, Vec<f64>>,
}

impl GeodesicTable {
    pub fn new(mesh: &MeshRef) -> Self {
        Self {
            adj: adjacency(mesh),
            rows: HashMap::new(),
        }
    }

    pub fn row(&mut self, source: usize) -> Result<&[f64]> {
        if !self.rows.contains_key(&source) {
            let r = dijkstra(&self.adj, source)?;
            self.rows.insert(source, r);
        }
        Ok(&self.rows[&source])
    }

    pub fn distance(&mut self, a: usize, b: usize) -> Result<f64> {
        // rows are symmetric; reuse whichever is cached
        if let Some(r) = self.rows.get(&b) {
            return Ok(r[a]);
        }
        Ok(self.row(a)?[b])
    }

    /// Largest finite distance, i.e. the graph diameter.
    pub fn diameter(&mut self) -> Result<f64> {
        let mut best: f64 = 0.0;
        for s in 0..self.adj.len() {
            best = best.max(self.row(s)?.iter().copied().fold(0.0, f64::max));
        }
        Ok(best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PointCloud;
    use rand::{Rng, SeedableRng};

    fn floyd_warshall(mesh: &MeshRef) -> Vec<Vec<f64>> {
        let n = mesh.cloud().len();
        let mut d = vec![vec![f64::INFINITY; n]; n];
        for (i, row) in d.iter_mut().enumerate() {
            row[i] = 0.0;
        }
        let p = mesh.cloud().points();
        for t in mesh.triangles() {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                let w = ((p[a][0] - p[b][0]).powi(2) + (p[a][1] - p[b][1]).powi(2) + (p[a][2] - p[b][2]).powi(2)).sqrt();
                d[a][b] = d[a][b].min(w);
                d[b][a] = d[b][a].min(w);
            }
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if d[i][k] + d[k][j] < d[i][j] {
                        d[i][j] = d[i][k] + d[k][j];
                    }
                }
            }
        }
        d
    }

    /// Jittered `w×h` grid split into triangles.
    fn grid(w: usize, h: usize, seed: u64) -> MeshRef {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..h)
            .flat_map(|r| (0..w).map(move |c| (r, c)))
            .map(|(r, c)| [c as f64 + rng.gen_range(-0.3..0.3), r as f64 + rng.gen_range(-0.3..0.3), rng.gen_range(-0.5..0.5)])
            .collect();
        let mut tris = Vec::new();
        for r in 0..h - 1 {
            for c in 0..w - 1 {
                let v = r * w + c;
                tris.push([v, v + 1, v + w]);
                tris.push([v + 1, v + w + 1, v + w]);
            }
        }
        MeshRef::new(PointCloud::new(pts).unwrap(), tris).unwrap()
    }

    #[test]
    fn path_graph() {
        // degenerate triangles spell out the path 0-1-2
        let c = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        let m = MeshRef::new(c, vec![[0, 1, 1], [1, 2, 2]]).unwrap();
        let d = geodesic_distances(&m, 0).unwrap();
        assert_eq!(d, vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn matches_floyd_warshall_on_grid() {
        let m = grid(6, 5, 1);
        let fw = floyd_warshall(&m);
        let mut table = GeodesicTable::new(&m);
        for s in 0..m.cloud().len() {
            let d = geodesic_distances(&m, s).unwrap();
            assert_eq!(d[s], 0.0);
            for t in 0..d.len() {
                assert!((d[t] - fw[s][t]).abs() < 1e-12);
                assert!((table.distance(s, t).unwrap() - fw[s][t]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn triangle_inequality_on_samples() {
        let m = grid(7, 7, 2);
        let mut table = GeodesicTable::new(&m);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (a, b, c) = (rng.gen_range(0..49), rng.gen_range(0..49), rng.gen_range(0..49));
            let ab = table.distance(a, b).unwrap();
            let bc = table.distance(b, c).unwrap();
            let ac = table.distance(a, c).unwrap();
            assert!(ac <= ab + bc + 1e-12);
        }
    }

    #[test]
    fn disconnected_mesh_is_an_error() {
        let c = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [5.0, 5.0, 5.0]]).unwrap();
        let m = MeshRef::new(c, vec![[0, 1, 2]]).unwrap();
        assert_eq!(
            geodesic_distances(&m, 0),
            Err(GeometryError::Unreachable { from: 0, vertex: 3 })
        );
    }
}
