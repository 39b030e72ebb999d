//! Training objectives: bidirectional correspondence loss plus the SEP loss.
//!
//! With clouds ordered by the ground-truth matching `π`,
//! `l_xy = Σᵢ ‖X̂ᵢ − Y_π(i)‖²` and `l_yx = Σᵢ ‖Ŷ_π(i) − Xᵢ‖²`, optionally
//! divided by the number of points. The SEP loss is the mean squared error
//! of the separator output against a fixed target.

use serde::{Deserialize, Serialize};

use crate::geometry::{Correspondence, GeometryError, PointCloud};
use crate::model::{ForwardVars, ModelError, Result};
use crate::tensor::{Graph, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Divide the summed squared error by the number of points.
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub reduction: Reduction,
    pub sep_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            reduction: Reduction::Mean,
            sep_weight: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_xy: f64,
    pub l_yx: f64,
    pub l_sep: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_xy: Var,
    pub l_yx: Var,
    pub l_sep: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            l_xy: g.scalar_value(self.l_xy),
            l_yx: g.scalar_value(self.l_yx),
            l_sep: g.scalar_value(self.l_sep),
            total: g.scalar_value(self.total),
        }
    }
}

fn check_sizes(x: &PointCloud, y: &PointCloud, corr: &Correspondence) -> Result<()> {
    if x.len() != y.len() {
        return Err(GeometryError::SizeMismatch(x.len(), y.len()).into());
    }
    if corr.len() != x.len() {
        return Err(GeometryError::SizeMismatch(corr.len(), x.len()).into());
    }
    Ok(())
}

fn reduce(g: &mut Graph, diff: Var, n: usize, reduction: Reduction) -> Result<Var> {
    let sq = g.mul(diff, diff)?;
    let s = g.sum(sq);
    Ok(match reduction {
        Reduction::Sum => s,
        Reduction::Mean => g.scale(s, 1.0 / n as f64),
    })
}

/// Differentiable `(l_xy, l_yx)`.
pub fn correspondence_loss_graph(
    g: &mut Graph,
    x_hat: Var,
    y_hat: Var,
    x: &PointCloud,
    y: &PointCloud,
    corr: &Correspondence,
    reduction: Reduction,
) -> Result<(Var, Var)> {
    check_sizes(x, y, corr)?;
    let n = x.len();
    let y_matched: Vec<f64> = corr
        .as_slice()
        .iter()
        .flat_map(|&j| y.point(j))
        .collect();
    let y_matched = g.constant(vec![n, 3], y_matched)?;
    let x_target = g.constant(vec![n, 3], x.to_flat())?;
    let dxy = g.sub(x_hat, y_matched)?;
    let l_xy = reduce(g, dxy, n, reduction)?;
    let y_hat_matched = g.gather_rows(y_hat, corr.as_slice())?;
    let dyx = g.sub(y_hat_matched, x_target)?;
    let l_yx = reduce(g, dyx, n, reduction)?;
    Ok((l_xy, l_yx))
}

/// Differentiable mean squared error of the separator output.
pub fn sep_loss_graph(g: &mut Graph, sep: Var, target: [f64; 3]) -> Result<Var> {
    let t = g.constant(vec![1, 3], target.to_vec())?;
    let d = g.sub(sep, t)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// `l_xy + l_yx + sep_weight · l_sep` on the graph.
pub fn total_loss_graph(
    g: &mut Graph,
    out: &ForwardVars,
    x: &PointCloud,
    y: &PointCloud,
    corr: &Correspondence,
    sep_target: [f64; 3],
    cfg: &LossConfig,
) -> Result<LossVars> {
    let (l_xy, l_yx) = correspondence_loss_graph(g, out.x_hat, out.y_hat, x, y, corr, cfg.reduction)?;
    let l_sep = sep_loss_graph(g, out.sep, sep_target)?;
    let pair = g.add(l_xy, l_yx)?;
    let weighted = g.scale(l_sep, cfg.sep_weight);
    let total = g.add(pair, weighted)?;
    Ok(LossVars {
        l_xy,
        l_yx,
        l_sep,
        total,
    })
}

/// Plain-value `(l_xy, l_yx)`.
pub fn correspondence_loss(
    x_hat: &PointCloud,
    y_hat: &PointCloud,
    x: &PointCloud,
    y: &PointCloud,
    corr: &Correspondence,
    reduction: Reduction,
) -> Result<(f64, f64)> {
    check_sizes(x, y, corr)?;
    if x_hat.len() != x.len() || y_hat.len() != y.len() {
        return Err(ModelError::Geometry(GeometryError::SizeMismatch(x_hat.len(), x.len())));
    }
    let sq = |a: [f64; 3], b: [f64; 3]| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
    let mut l_xy = 0.0;
    let mut l_yx = 0.0;
    for i in 0..x.len() {
        let j = corr.target(i);
        l_xy += sq(x_hat.point(i), y.point(j));
        l_yx += sq(y_hat.point(j), x.point(i));
    }
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / x.len() as f64,
    };
    Ok((l_xy * scale, l_yx * scale))
}

pub fn sep_loss(out: [f64; 3], target: [f64; 3]) -> f64 {
    (0..3).map(|k| (out[k] - target[k]).powi(2)).sum::<f64>() / 3.0
}
