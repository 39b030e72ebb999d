use std::path::{Path, PathBuf};

use crate::geometry::PointCloud;
use crate::model::{HeadMask, Model};

use super::{EvalError, Result};

/// Files written by [`export_attention`] plus the exported row.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionExport {
    pub matrix_path: PathBuf,
    pub row_path: PathBuf,
    /// Weights of the chosen query token over all `n_x + 1 + n_y` tokens.
    pub row: Vec<f64>,
}

/// Writes the full attention matrix of one head as CSV, and the row of
/// `point` as `token,shape,x,y,z,weight` records for heatmap plotting.
#[allow(clippy::too_many_arguments)]
pub fn export_attention(
    model: &Model,
    x: &PointCloud,
    y: &PointCloud,
    layer: usize,
    head: usize,
    point: usize,
    dir: &Path,
) -> Result<AttentionExport> {
    let cfg = model.config();
    if layer >= cfg.layers || head >= cfg.heads {
        return Err(EvalError::Invalid(format!(
            "head {layer}:{head} is out of range for {} layers of {} heads",
            cfg.layers, cfg.heads
        )));
    }
    let size = x.len() + 1 + y.len();
    if point >= size {
        return Err(EvalError::Invalid(format!("token {point} is out of range for {size} tokens")));
    }
    let pred = model.predict(x, y, &HeadMask::none(), true)?;
    let rec = pred.attention.expect("attention requested");
    let xi = rec.get(layer, head).expect("unmasked head has weights");

    std::fs::create_dir_all(dir).map_err(|e| EvalError::io(dir, e))?;
    let matrix_path = dir.join(format!("attention_l{layer}_h{head}.csv"));
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&matrix_path)
        .map_err(|e| EvalError::io(&matrix_path, e))?;
    for r in 0..xi.rows() {
        w.write_record(xi.row(r).iter().map(f64::to_string))
            .map_err(|e| EvalError::io(&matrix_path, e))?;
    }
    w.flush().map_err(|e| EvalError::io(&matrix_path, e))?;

    let row = xi.row(point).to_vec();
    let row_path = dir.join(format!("attention_l{layer}_h{head}_p{point}.csv"));
    let mut w = csv::Writer::from_path(&row_path).map_err(|e| EvalError::io(&row_path, e))?;
    w.write_record(["token", "shape", "x", "y", "z", "weight"])
        .map_err(|e| EvalError::io(&row_path, e))?;
    for (t, &weight) in row.iter().enumerate() {
        let (shape, p) = match t.cmp(&x.len()) {
            std::cmp::Ordering::Less => ("x", x.point(t)),
            std::cmp::Ordering::Equal => ("sep", cfg.sep),
            std::cmp::Ordering::Greater => ("y", y.point(t - x.len() - 1)),
        };
        w.write_record([
            t.to_string(),
            shape.to_string(),
            p[0].to_string(),
            p[1].to_string(),
            p[2].to_string(),
            weight.to_string(),
        ])
        .map_err(|e| EvalError::io(&row_path, e))?;
    }
    w.flush().map_err(|e| EvalError::io(&row_path, e))?;
    Ok(AttentionExport {
        matrix_path,
        row_path,
        row,
    })
}

/// Number of entries with weight at least `fraction` of the row maximum.
pub fn support_width(row: &[f64], fraction: f64) -> usize {
    let max = row.iter().cloned().fold(0.0, f64::max);
    row.iter().filter(|&&w| w > 0.0 && w >= fraction * max).count()
}
