//! Transformer encoder over the concatenated sequence `[X | SEP | Y]`.
//!
//! Every layer runs `h` heads in parallel. Dot-product heads compute
//! `softmax(Q·rope(K)ᵀ/√d̃ + prev)`, Gaussian heads compute
//! `softmax(exp(-E²/2σ²) + prev)` from within-shape distances, where `prev`
//! is the same head's attention from the previous layer. Head outputs are
//! concatenated and projected, added to the layer input, then passed through
//! `LN → FF(+residual) → LN`.

mod config;

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use config::{HeadKind, ModelConfig, ResidualMode, SIGMA_LADDER};

use crate::geometry::{BlockDistanceMatrix, GeometryError, PointCloud};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("parameter set mismatch: {0}")]
    Params(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Heads switched off at inference time, as `(layer, head)` pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HeadMask {
    masked: BTreeSet<(usize, usize)>,
}

impl HeadMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn single(layer: usize, head: usize) -> Self {
        let mut m = Self::default();
        m.insert(layer, head);
        m
    }

    /// Masks head `head` in every layer.
    pub fn head_in_all_layers(head: usize, layers: usize) -> Self {
        let mut m = Self::default();
        for l in 0..layers {
            m.insert(l, head);
        }
        m
    }

    pub fn insert(&mut self, layer: usize, head: usize) {
        self.masked.insert((layer, head));
    }

    pub fn is_masked(&self, layer: usize, head: usize) -> bool {
        self.masked.contains(&(layer, head))
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.masked.iter().copied()
    }
}

/// Per-head attention carried between layers; `None` stands for all zeros.
#[derive(Clone, Debug)]
pub struct AttentionState {
    streams: Vec<Option<Var>>,
}

impl AttentionState {
    pub fn new(heads: usize) -> Self {
        Self {
            streams: vec![None; heads],
        }
    }

    pub fn get(&self, head: usize) -> Option<Var> {
        self.streams[head]
    }
}

/// Attention weights of every head at every layer for one forward pass.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub n_x: usize,
    pub n_y: usize,
    /// `maps[layer][head]`; `None` for masked heads.
    pub maps: Vec<Vec<Option<Tensor>>>,
}

impl AttentionRecord {
    pub fn get(&self, layer: usize, head: usize) -> Option<&Tensor> {
        self.maps.get(layer)?.get(head)?.as_ref()
    }
}

/// Graph handles produced by [`Model::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub x_hat: Var,
    pub y_hat: Var,
    pub sep: Var,
}

/// Detached model outputs.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub x_hat: PointCloud,
    pub y_hat: PointCloud,
    pub sep: [f64; 3],
    pub attention: Option<AttentionRecord>,
}

#[derive(Clone, Debug)]
enum HeadParams {
    Dot {
        q: (usize, usize),
        k: (usize, usize),
        v: (usize, usize),
    },
    Gaussian {
        sigma: usize,
        v: (usize, usize),
    },
}

#[derive(Clone, Debug)]
struct LayerParams {
    heads: Vec<HeadParams>,
    out: (usize, usize),
    ln1: (usize, usize),
    ff1: (usize, usize),
    ff2: (usize, usize),
    ln2: (usize, usize),
}

#[derive(Clone, Debug)]
struct ParamIndex {
    input: (usize, usize),
    layers: Vec<LayerParams>,
    output: (usize, usize),
    sigmas: Option<usize>,
}

/// Parameters in registration order with their shapes and names.
fn layout(cfg: &ModelConfig) -> (Vec<(String, Vec<usize>)>, ParamIndex) {
    let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
    fn add(specs: &mut Vec<(String, Vec<usize>)>, name: String, shape: Vec<usize>) -> usize {
        specs.push((name, shape));
        specs.len() - 1
    }
    fn affine(specs: &mut Vec<(String, Vec<usize>)>, prefix: String, fan_in: usize, fan_out: usize) -> (usize, usize) {
        (
            add(specs, format!("{prefix}.w"), vec![fan_in, fan_out]),
            add(specs, format!("{prefix}.b"), vec![fan_out]),
        )
    }
    let (d, dh, ff) = (cfg.d, cfg.head_dim(), cfg.ff_hidden);
    let input = affine(&mut specs, "input".into(), 3, d);
    let mut layers = Vec::new();
    for (l, row) in cfg.head_layout.iter().enumerate() {
        let heads = row
            .iter()
            .enumerate()
            .map(|(h, kind)| {
                let p = format!("layer{l}.head{h}");
                match kind {
                    HeadKind::DotProduct => HeadParams::Dot {
                        q: affine(&mut specs, format!("{p}.q"), d, dh),
                        k: affine(&mut specs, format!("{p}.k"), d, dh),
                        v: affine(&mut specs, format!("{p}.v"), d, dh),
                    },
                    HeadKind::Gaussian(s) => HeadParams::Gaussian {
                        sigma: *s,
                        v: affine(&mut specs, format!("{p}.v"), d, dh),
                    },
                }
            })
            .collect();
        let out = affine(&mut specs, format!("layer{l}.out"), d, d);
        let ln1 = (
            add(&mut specs, format!("layer{l}.ln1.gain"), vec![d]),
            add(&mut specs, format!("layer{l}.ln1.bias"), vec![d]),
        );
        let ff1 = affine(&mut specs, format!("layer{l}.ff1"), d, ff);
        let ff2 = affine(&mut specs, format!("layer{l}.ff2"), ff, d);
        let ln2 = (
            add(&mut specs, format!("layer{l}.ln2.gain"), vec![d]),
            add(&mut specs, format!("layer{l}.ln2.bias"), vec![d]),
        );
        layers.push(LayerParams {
            heads,
            out,
            ln1,
            ff1,
            ff2,
            ln2,
        });
    }
    let output = affine(&mut specs, "output".into(), d, 3);
    let sigmas = (!cfg.sigmas.is_empty()).then(|| add(&mut specs, "sigmas".into(), vec![cfg.sigmas.len()]));
    (
        specs,
        ParamIndex {
            input,
            layers,
            output,
            sigmas,
        },
    )
}

/// Encoder weights plus the configuration they were built for.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    index: ParamIndex,
}

impl Model {
    /// Xavier-uniform weights, zero biases, unit layer-norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate().map_err(ModelError::Config)?;
        let (specs, index) = layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape) in specs {
            let len: usize = shape.iter().product();
            let data = if name == "sigmas" {
                config.sigmas.clone()
            } else if name.ends_with(".gain") {
                vec![1.0; len]
            } else if shape.len() == 2 {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
            } else {
                vec![0.0; len]
            };
            let trainable = name != "sigmas" || config.sigma_learnable;
            let t = if trainable {
                Tensor::param(shape, data)?
            } else {
                Tensor::new(shape, data)?
            };
            names.push(name);
            params.push(t);
        }
        Ok(Self {
            config,
            names,
            params,
            index,
        })
    }

    /// Rebuilds a model from named arrays, checking names and shapes.
    pub fn from_named(config: ModelConfig, arrays: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate().map_err(ModelError::Config)?;
        let (specs, index) = layout(&config);
        if specs.len() != arrays.len() {
            return Err(ModelError::Params(format!(
                "expected {} arrays, found {}",
                specs.len(),
                arrays.len()
            )));
        }
        let mut by_name: HashMap<String, Tensor> = arrays.into_iter().collect();
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape) in specs {
            let t = by_name
                .remove(&name)
                .ok_or_else(|| ModelError::Params(format!("missing array {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Params(format!(
                    "array {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            let trainable = name != "sigmas" || config.sigma_learnable;
            let t = if trainable {
                Tensor::param(shape, t.into_data())?
            } else {
                Tensor::new(shape, t.into_data())?
            };
            names.push(name);
            params.push(t);
        }
        Ok(Self {
            config,
            names,
            params,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.params[i])
    }

    /// Current Gaussian widths (possibly trained).
    pub fn sigmas(&self) -> Vec<f64> {
        self.index
            .sigmas
            .map(|i| self.params[i].data().to_vec())
            .unwrap_or_default()
    }

    /// Number of trainable scalars actually held.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.requires_grad())
            .map(Tensor::numel)
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Registers every parameter as a graph leaf, in order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p)).collect()
    }

    /// Records the forward pass on `g`. `record` receives every head's
    /// attention weights when given.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &[Var],
        x: &PointCloud,
        y: &PointCloud,
        mask: &HeadMask,
        mut record: Option<&mut Vec<Vec<Option<Var>>>>,
    ) -> Result<ForwardVars> {
        if vars.len() != self.params.len() {
            return Err(ModelError::Params(format!(
                "{} bound vars for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        let cfg = &self.config;
        let (n_x, n_y) = (x.len(), y.len());
        let rows = n_x + 1 + n_y;
        let tokens = g.constant(vec![rows, 3], concat_inputs(x, y, cfg.sep))?;

        let affine = |g: &mut Graph, input: Var, (w, b): (usize, usize)| -> Result<Var> {
            let m = g.matmul(input, vars[w])?;
            Ok(g.add_row(m, vars[b])?)
        };

        let kernel = self
            .index
            .sigmas
            .map(|_| BlockDistanceMatrix::new(x, y).kernel(cfg.cross_shape));
        let mut energies: HashMap<usize, Var> = HashMap::new();

        let mut h = affine(g, tokens, self.index.input)?;
        let mut state = AttentionState::new(cfg.heads);
        let dh = cfg.head_dim();

        for (l, layer) in self.index.layers.iter().enumerate() {
            let mut outputs = Vec::with_capacity(cfg.heads);
            let mut layer_record = Vec::with_capacity(cfg.heads);
            for (i, head) in layer.heads.iter().enumerate() {
                if mask.is_masked(l, i) {
                    outputs.push(g.constant(vec![rows, dh], vec![0.0; rows * dh])?);
                    state.streams[i] = None;
                    layer_record.push(None);
                    continue;
                }
                let prev = state.streams[i];
                let (energy, v) = match head {
                    HeadParams::Dot { q, k, v } => {
                        let qv = affine(g, h, *q)?;
                        let kv = affine(g, h, *k)?;
                        let rope = cfg.rope.then_some(cfg.rope_base);
                        (dot_head_energy(g, qv, kv, prev, rope)?, affine(g, h, *v)?)
                    }
                    HeadParams::Gaussian { sigma, v } => {
                        let e = match energies.get(sigma) {
                            Some(&e) => e,
                            None => {
                                let sig_var = vars[self.index.sigmas.expect("gaussian head implies sigmas")];
                                let kern = kernel.clone().expect("kernel built with sigmas");
                                let e = g.gaussian_energy(sig_var, *sigma, kern)?;
                                energies.insert(*sigma, e);
                                e
                            }
                        };
                        (head_energy(g, e, prev)?, affine(g, h, *v)?)
                    }
                };
                let xi = energy.weights;
                state.streams[i] = match cfg.residual {
                    ResidualMode::PostSoftmax => Some(xi),
                    ResidualMode::PreSoftmax => Some(energy.scores),
                    ResidualMode::Off => None,
                };
                layer_record.push(Some(xi));
                outputs.push(attention_apply(g, xi, v)?);
            }
            if let Some(rec) = record.as_deref_mut() {
                rec.push(layer_record);
            }
            let cat = g.concat_cols(&outputs)?;
            let attn = affine(g, cat, layer.out)?;
            let a = g.add(h, attn)?;
            let h1 = g.layer_norm(a, vars[layer.ln1.0], vars[layer.ln1.1])?;
            let f = affine(g, h1, layer.ff1)?;
            let f = g.relu(f);
            let f = affine(g, f, layer.ff2)?;
            let b = g.add(h1, f)?;
            h = g.layer_norm(b, vars[layer.ln2.0], vars[layer.ln2.1])?;
        }

        let out = affine(g, h, self.index.output)?;
        Ok(ForwardVars {
            x_hat: g.slice_rows(out, 0, n_x)?,
            sep: g.slice_rows(out, n_x, n_x + 1)?,
            y_hat: g.slice_rows(out, n_x + 1, rows)?,
        })
    }

    /// Inference without gradient bookkeeping.
    pub fn predict(
        &self,
        x: &PointCloud,
        y: &PointCloud,
        mask: &HeadMask,
        keep_attention: bool,
    ) -> Result<Prediction> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| g.constant(p.shape().to_vec(), p.data().to_vec()))
            .collect::<std::result::Result<_, _>>()?;
        let mut rec = Vec::new();
        let fv = self.forward(&mut g, &vars, x, y, mask, keep_attention.then_some(&mut rec))?;
        let sep = g.value(fv.sep);
        Ok(Prediction {
            x_hat: PointCloud::from_flat(g.value(fv.x_hat))?,
            y_hat: PointCloud::from_flat(g.value(fv.y_hat))?,
            sep: [sep[0], sep[1], sep[2]],
            attention: keep_attention.then(|| AttentionRecord {
                n_x: x.len(),
                n_y: y.len(),
                maps: rec
                    .iter()
                    .map(|layer| layer.iter().map(|v| v.map(|v| g.tensor(v))).collect())
                    .collect(),
            }),
        })
    }
}

/// Pre-softmax scores and post-softmax weights of one head.
#[derive(Clone, Copy, Debug)]
pub struct HeadEnergy {
    pub scores: Var,
    pub weights: Var,
}

/// `softmax(scores + prev)`; `prev = None` means a zero residual.
pub fn head_energy(g: &mut Graph, scores: Var, prev: Option<Var>) -> Result<HeadEnergy> {
    let scores = match prev {
        Some(p) => g.add(scores, p)?,
        None => scores,
    };
    Ok(HeadEnergy {
        scores,
        weights: g.softmax_rows(scores)?,
    })
}

/// Dot-product attention energy `softmax(Q·R·Kᵀ/√d̃ + prev)`; the rotary
/// encoding, when `rope_base` is given, acts on the keys only.
pub fn dot_head_energy(
    g: &mut Graph,
    q: Var,
    k: Var,
    prev: Option<Var>,
    rope_base: Option<f64>,
) -> Result<HeadEnergy> {
    let dh = g.shape(q)[1];
    let k = match rope_base {
        Some(base) => g.rope(k, base)?,
        None => k,
    };
    let logits = g.matmul_nt(q, k)?;
    let logits = g.scale(logits, 1.0 / (dh as f64).sqrt());
    head_energy(g, logits, prev)
}

/// Weighted average of the value rows: `ξ·V`.
pub fn attention_apply(g: &mut Graph, xi: Var, v: Var) -> Result<Var> {
    Ok(g.matmul(xi, v)?)
}

/// Stacks `[X; sep; Y]` into a flat `(n_x + 1 + n_y) × 3` buffer.
pub fn concat_inputs(x: &PointCloud, y: &PointCloud, sep: [f64; 3]) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * (x.len() + 1 + y.len()));
    out.extend(x.points().iter().flatten());
    out.extend(sep);
    out.extend(y.points().iter().flatten());
    out
}

/// Splits a concatenated buffer back into `(X, sep, Y)`.
pub fn split_outputs(flat: &[f64], n_x: usize) -> Result<(PointCloud, [f64; 3], PointCloud)> {
    let x = PointCloud::from_flat(&flat[..3 * n_x])?;
    let s = &flat[3 * n_x..3 * n_x + 3];
    let y = PointCloud::from_flat(&flat[3 * n_x + 3..])?;
    Ok((x, [s[0], s[1], s[2]], y))
}
