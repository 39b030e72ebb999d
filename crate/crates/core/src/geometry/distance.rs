use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::cloud::dist;
use super::{GeometryError, PointCloud, Result};
use crate::tensor::{GaussianKernel, Tensor, MASKED};

/// How Gaussian heads treat pairs of tokens that are not in the same shape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossShapeMode {
    /// Cross-shape and SEP/point logits are masked, so their weights are exactly 0.
    #[default]
    Masked,
    /// Distance 0 is used across shapes, giving energy `exp(0) = 1` there.
    Literal,
}

/// Pairwise distances over the concatenated token sequence `[X | SEP | Y]`.
///
/// Entries within X and within Y hold Euclidean distances; every entry that
/// pairs tokens of different shapes, or involves SEP, is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockDistanceMatrix {
    n_x: usize,
    n_y: usize,
    data: Vec<f64>,
}

impl BlockDistanceMatrix {
    pub fn new(x: &PointCloud, y: &PointCloud) -> Self {
        let (n_x, n_y) = (x.len(), y.len());
        let size = n_x + 1 + n_y;
        let mut data = vec![0.0; size * size];
        fill_block(&mut data, size, 0, x);
        fill_block(&mut data, size, n_x + 1, y);
        Self { n_x, n_y, data }
    }

    pub fn size(&self) -> usize {
        self.n_x + 1 + self.n_y
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn sep_index(&self) -> usize {
        self.n_x
    }

    pub fn get(&self, p: usize, q: usize) -> f64 {
        self.data[p * self.size() + q]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Which shape a token belongs to: 0 for X, 1 for Y, `None` for SEP.
    pub fn shape_of(&self, p: usize) -> Option<u8> {
        match p.cmp(&self.n_x) {
            std::cmp::Ordering::Less => Some(0),
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some(1),
        }
    }

    /// Whether the `(p, q)` logit is masked under `mode`.
    pub fn is_masked(&self, p: usize, q: usize, mode: CrossShapeMode) -> bool {
        match mode {
            CrossShapeMode::Literal => false,
            CrossShapeMode::Masked => match (self.shape_of(p), self.shape_of(q)) {
                (Some(a), Some(b)) => a != b,
                // SEP only attends to itself
                (None, None) => false,
                _ => true,
            },
        }
    }

    /// Precomputed distance/mask buffers for the graph op.
    pub fn kernel(&self, mode: CrossShapeMode) -> GaussianKernel {
        let size = self.size();
        let masked = (0..size * size)
            .map(|k| self.is_masked(k / size, k % size, mode))
            .collect();
        GaussianKernel {
            rows: size,
            cols: size,
            dist: Rc::new(self.data.clone()),
            masked: Rc::new(masked),
        }
    }

    /// Pre-softmax energies `exp(-E²/2σ²)`, with [`MASKED`] where `mode` masks.
    pub fn gaussian_energy(&self, sigma: f64, mode: CrossShapeMode) -> Result<Tensor> {
        if sigma.is_nan() || sigma <= 0.0 {
            return Err(GeometryError::Domain {
                what: "sigma",
                constraint: "positive",
                value: sigma,
            });
        }
        let size = self.size();
        let denom = 2.0 * sigma * sigma;
        let data = (0..size * size)
            .map(|k| {
                let (p, q) = (k / size, k % size);
                if self.is_masked(p, q, mode) {
                    MASKED
                } else {
                    let e = self.data[k];
                    (-e * e / denom).exp()
                }
            })
            .collect();
        Ok(Tensor::new(vec![size, size], data).expect("square buffer"))
    }
}

fn fill_block(data: &mut [f64], size: usize, offset: usize, cloud: &PointCloud) {
    let pts = cloud.points();
    for i in 0..pts.len() {
        for j in (i + 1)..pts.len() {
            let d = dist(&pts[i], &pts[j]);
            data[(offset + i) * size + offset + j] = d;
            data[(offset + j) * size + offset + i] = d;
        }
    }
}
