use std::path::Path;

use crate::data::ShapeDataset;
use crate::model::{HeadMask, Model, ModelConfig, SIGMA_LADDER};
use crate::tensor::Tensor;
use crate::train::{train, EvalSpec, ExperimentConfig};

use super::{evaluate_pairs, sample_test_pairs, EvalError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadClass {
    /// Mass concentrates within each shape.
    SelfAttention,
    /// Mass concentrates across the two shapes.
    CrossAttention,
}

impl std::fmt::Display for HeadClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadClass::SelfAttention => "self",
            HeadClass::CrossAttention => "cross",
        })
    }
}

/// Attention mass in the within-shape and between-shape quadrants, with the
/// SEP row and column left out.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct QuadrantMass {
    pub self_mass: f64,
    pub cross_mass: f64,
}

impl QuadrantMass {
    pub fn add(&mut self, other: QuadrantMass) {
        self.self_mass += other.self_mass;
        self.cross_mass += other.cross_mass;
    }

    pub fn class(&self) -> HeadClass {
        if self.self_mass == self.cross_mass {
            log::warn!("head has equal self and cross mass; labelling it self");
        }
        if self.self_mass >= self.cross_mass {
            HeadClass::SelfAttention
        } else {
            HeadClass::CrossAttention
        }
    }
}

/// Sums `ξ` over the four quadrants of the `[X | SEP | Y]` layout.
pub fn quadrant_mass(xi: &Tensor, n_x: usize) -> QuadrantMass {
    let size = xi.rows();
    let mut m = QuadrantMass::default();
    for p in (0..size).filter(|&p| p != n_x) {
        let row = xi.row(p);
        for (q, &w) in row.iter().enumerate() {
            if q == n_x {
                continue;
            }
            if (p < n_x) == (q < n_x) {
                m.self_mass += w;
            } else {
                m.cross_mass += w;
            }
        }
    }
    m
}

pub fn classify_head(xi: &Tensor, n_x: usize) -> HeadClass {
    quadrant_mass(xi, n_x).class()
}

/// One row of an ablation study: the ablated unit and the resulting error.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    /// Head index, or layer index for the layer study.
    pub unit: usize,
    pub mean_error: f64,
    /// Quadrant mass of the unablated head, summed over layers and pairs.
    pub mass: Option<QuadrantMass>,
    pub class: Option<HeadClass>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadAblation {
    pub full_error: f64,
    pub reports: Vec<AblationReport>,
}

/// Masks each head position (in every layer) one at a time and re-evaluates
/// on the same clean test pairs. Parameters are never modified.
pub fn ablate_heads(model: &Model, dataset: &ShapeDataset, spec: &EvalSpec) -> Result<HeadAblation> {
    let cfg = model.config();
    let pairs = sample_test_pairs(dataset, spec, 0.0)?;
    let mean = |reports: &[super::MatchReport]| reports.iter().map(|r| r.mean_error).sum::<f64>() / reports.len() as f64;
    let full_error = mean(&evaluate_pairs(model, &pairs, spec.geodesic_norm, &HeadMask::none())?);

    let mut masses = vec![QuadrantMass::default(); cfg.heads];
    for p in &pairs {
        let pred = model.predict(&p.x, &p.y, &HeadMask::none(), true)?;
        let rec = pred.attention.expect("attention requested");
        for layer in &rec.maps {
            for (h, xi) in layer.iter().enumerate() {
                if let Some(xi) = xi {
                    masses[h].add(quadrant_mass(xi, rec.n_x));
                }
            }
        }
    }
    let reports = (0..cfg.heads)
        .map(|h| {
            let mask = HeadMask::head_in_all_layers(h, cfg.layers);
            let err = mean(&evaluate_pairs(model, &pairs, spec.geodesic_norm, &mask)?);
            Ok(AblationReport {
                unit: h,
                mean_error: err,
                mass: Some(masses[h]),
                class: Some(masses[h].class()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HeadAblation { full_error, reports })
}

/// Trains one fresh model per layer position with `gaussian` Gaussian heads
/// in that layer only, then evaluates each on the clean test pairs.
pub fn ablate_layers(
    base: &ExperimentConfig,
    gaussian: usize,
    train_set: &ShapeDataset,
    test_set: &ShapeDataset,
) -> Result<Vec<AblationReport>> {
    let m = &base.model;
    let sigmas = if m.sigmas.len() >= gaussian { m.sigmas.clone() } else { SIGMA_LADDER.to_vec() };
    if gaussian > m.heads || gaussian > sigmas.len() {
        return Err(EvalError::Invalid(format!(
            "cannot place {gaussian} Gaussian heads in a {}-head layer with {} widths",
            m.heads,
            sigmas.len()
        )));
    }
    (0..m.layers)
        .map(|layer| {
            let mut cfg = base.clone();
            let layout = ModelConfig::with_gaussian_layer(m.d, m.heads, m.layers, layer, gaussian, &sigmas);
            cfg.model.head_layout = layout.head_layout;
            cfg.model.sigmas = sigmas.clone();
            cfg.variant = format!("{}-layer{layer}", base.variant);
            let out = train(&cfg, train_set, None)?;
            let pairs = sample_test_pairs(test_set, &cfg.eval, 0.0)?;
            let reports = evaluate_pairs(&out.model, &pairs, cfg.eval.geodesic_norm, &HeadMask::none())?;
            Ok(AblationReport {
                unit: layer,
                mean_error: reports.iter().map(|r| r.mean_error).sum::<f64>() / reports.len() as f64,
                mass: None,
                class: None,
            })
        })
        .collect()
}

/// `unit,mean_error,self_mass,cross_mass,class`; mass columns are empty for
/// layer studies.
pub fn write_ablation_csv(reports: &[AblationReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| EvalError::io(path, e))?;
    w.write_record(["unit", "mean_error", "self_mass", "cross_mass", "class"])
        .map_err(|e| EvalError::io(path, e))?;
    for r in reports {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            r.unit.to_string(),
            r.mean_error.to_string(),
            opt(r.mass.map(|m| m.self_mass)),
            opt(r.mass.map(|m| m.cross_mass)),
            r.class.map(|c| c.to_string()).unwrap_or_default(),
        ])
        .map_err(|e| EvalError::io(path, e))?;
    }
    w.flush().map_err(|e| EvalError::io(path, e))
}
