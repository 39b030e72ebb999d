//! Optimization loop, experiment configuration, checkpoints and loss logs.

mod checkpoint;
mod config;
mod log;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{DataSpec, EvalSpec, ExperimentConfig, GeodesicNorm, StepDecay, PRESETS};
pub use log::{emit_loss_curve, first_epoch_reaching, moving_average, EpochRecord, TrainLog};

use crate::data::{epoch_batches, synthetic, DataError, ShapeDataset, TrainBatch};
use crate::losses::{total_loss_graph, LossBreakdown};
use crate::model::{HeadMask, Model, ModelError};
use crate::optim::AdamState;
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("loss became non-finite at epoch {epoch}, batch {batch}; snapshot: {snapshot}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        snapshot: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv error on {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

impl TrainError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn csv(path: &Path, source: csv::Error) -> Self {
        Self::Csv {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Builds the dataset a config describes and splits off its test shapes.
pub fn load_data(spec: &DataSpec) -> Result<(ShapeDataset, ShapeDataset)> {
    let all = match &spec.dir {
        Some(dir) => ShapeDataset::load(Path::new(dir))?,
        None => synthetic::generate(&spec.synthetic())?,
    };
    Ok(all.split_tail(spec.test_shapes)?)
}

/// Learning rate for `epoch` under the optional step schedule.
pub fn learning_rate(cfg: &ExperimentConfig, epoch: usize) -> f64 {
    match cfg.schedule {
        Some(s) => cfg.optimizer.lr * s.factor.powi((epoch / s.every) as i32),
        None => cfg.optimizer.lr,
    }
}

/// One optimizer step on a batch: gradients are averaged over its couples.
/// Returns the mean loss components.
pub fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    batch: &TrainBatch,
    cfg: &ExperimentConfig,
    lr: f64,
) -> Result<LossBreakdown> {
    model.zero_grad();
    let mut sum = LossBreakdown::default();
    let sep = cfg.model.sep;
    for couple in &batch.couples {
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let out = model.forward(&mut g, &vars, &couple.x, &couple.y, &HeadMask::none(), None)?;
        let loss = total_loss_graph(&mut g, &out, &couple.x, &couple.y, &couple.corr, sep, &cfg.loss)?;
        let v = loss.values(&g);
        sum.l_xy += v.l_xy;
        sum.l_yx += v.l_yx;
        sum.l_sep += v.l_sep;
        sum.total += v.total;
        if !v.total.is_finite() {
            // skip backward; the caller aborts on the non-finite mean
            continue;
        }
        let grads = g.backward(loss.total)?;
        for (var, p) in vars.iter().zip(model.params_mut()) {
            grads.accumulate_into(*var, p)?;
        }
    }
    let k = batch.couples.len() as f64;
    let mean = LossBreakdown {
        l_xy: sum.l_xy / k,
        l_yx: sum.l_yx / k,
        l_sep: sum.l_sep / k,
        total: sum.total / k,
    };
    if !mean.total.is_finite() {
        return Ok(mean);
    }
    let mut scale = 1.0 / k;
    if let Some(clip) = cfg.grad_clip {
        let norm = grad_norm(model.params()) * scale;
        if norm > clip {
            scale *= clip / norm;
        }
    }
    for p in model.params_mut() {
        p.scale_grad(scale);
    }
    let mut params: Vec<&mut Tensor> = model.params_mut().iter_mut().collect();
    adam.step(&mut params, Some(lr))?;
    Ok(mean)
}

fn grad_norm(params: &[Tensor]) -> f64 {
    params
        .iter()
        .filter_map(Tensor::grad)
        .flatten()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub model: Model,
    /// Parameters after the epoch with the lowest mean training loss.
    pub best: Model,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub log: TrainLog,
}

/// Runs `cfg.epochs` epochs of augment, forward, loss, backward and Adam.
/// With `out_dir`, writes `last.ckpt`, `best.ckpt`, periodic checkpoints,
/// and on failure `nan_snapshot.txt`.
pub fn train(cfg: &ExperimentConfig, dataset: &ShapeDataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate().map_err(TrainError::Config)?;
    if dataset.len() < cfg.batch_shapes {
        return Err(TrainError::Invalid(format!(
            "dataset has {} shapes, fewer than batch_shapes = {}",
            dataset.len(),
            cfg.batch_shapes
        )));
    }
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut adam = AdamState::new(cfg.optimizer);
    let mut log = TrainLog::default();
    let mut best: Option<(Model, usize, f64)> = None;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = learning_rate(cfg, epoch);
        let batches = epoch_batches(dataset, cfg.batch_shapes, &cfg.augment, cfg.seed, epoch)?;
        let mut sum = LossBreakdown::default();
        let mut couples = 0usize;
        for (b, batch) in batches.iter().enumerate() {
            let m = match train_step(&mut model, &mut adam, batch, cfg, lr) {
                // non-finite activations surface as rows softmax cannot normalize
                Err(TrainError::Model(ModelError::Tensor(TensorError::DegenerateRow { .. }))) => LossBreakdown {
                    total: f64::NAN,
                    ..LossBreakdown::default()
                },
                other => other?,
            };
            if !m.total.is_finite() {
                // a failed step leaves the parameters untouched
                let snapshot = write_snapshot(out_dir, epoch, b, batch, &m, &model)?;
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    snapshot,
                });
            }
            let k = batch.couples.len() as f64;
            sum.l_xy += m.l_xy * k;
            sum.l_yx += m.l_yx * k;
            sum.l_sep += m.l_sep * k;
            sum.total += m.total * k;
            couples += batch.couples.len();
        }
        let k = couples as f64;
        let record = EpochRecord {
            epoch,
            loss: sum.total / k,
            l_xy: sum.l_xy / k,
            l_yx: sum.l_yx / k,
            l_sep: sum.l_sep / k,
            sigmas: model.sigmas(),
            lr,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        ::log::info!(
            "{} epoch {epoch}: loss {:.6} ({:.2}s)",
            cfg.variant,
            record.loss,
            record.wall_secs
        );
        if best.as_ref().is_none_or(|(_, _, l)| record.loss < *l) {
            best = Some((model.clone(), epoch, record.loss));
            if let Some(dir) = out_dir {
                save_checkpoint(&dir.join("best.ckpt"), cfg, &model, epoch, record.loss)?;
            }
        }
        if let Some(dir) = out_dir {
            save_checkpoint(&dir.join("last.ckpt"), cfg, &model, epoch, record.loss)?;
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                save_checkpoint(&dir.join(format!("epoch_{:04}.ckpt", epoch + 1)), cfg, &model, epoch, record.loss)?;
            }
        }
        log.records.push(record);
    }
    let (best, best_epoch, best_loss) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        best,
        best_epoch,
        best_loss,
        log,
    })
}

/// Describes the failing batch and the parameters that produced it.
fn write_snapshot(
    out_dir: Option<&Path>,
    epoch: usize,
    batch: usize,
    b: &TrainBatch,
    loss: &LossBreakdown,
    model: &Model,
) -> Result<String> {
    let mut text = String::new();
    writeln!(text, "epoch = {epoch}\nbatch = {batch}").unwrap();
    writeln!(text, "loss = {:?}", loss).unwrap();
    writeln!(text, "couples = {:?}", b.couples.iter().map(|c| c.source).collect::<Vec<_>>()).unwrap();
    writeln!(text, "sigmas = {:?}", model.sigmas()).unwrap();
    for (name, p) in model.names().iter().zip(model.params()) {
        let norm = p.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        writeln!(text, "param {name} {:?} norm {norm}", p.shape()).unwrap();
    }
    match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
            let path = dir.join("nan_snapshot.txt");
            std::fs::write(&path, &text).map_err(|e| TrainError::io(&path, e))?;
            Ok(path.display().to_string())
        }
        None => Ok(text),
    }
}
