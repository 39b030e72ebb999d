use serde::{Deserialize, Serialize};

use crate::data::{AugmentPolicy, NoisePolicy, SyntheticConfig};
use crate::losses::LossConfig;
use crate::model::{ModelConfig, SIGMA_LADDER};
use crate::optim::AdamConfig;

/// Where training shapes come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    /// Dataset directory; when absent a synthetic set is generated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    pub count: usize,
    pub n: usize,
    pub seed: u64,
    pub pose_scale: f64,
    pub length_jitter: f64,
    /// Trailing shapes held out for evaluation.
    pub test_shapes: usize,
}

impl DataSpec {
    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            count: self.count,
            n: self.n,
            seed: self.seed,
            pose_scale: self.pose_scale,
            length_jitter: self.length_jitter,
        }
    }
}

/// How geodesic errors are scaled before averaging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeodesicNorm {
    #[default]
    None,
    /// Divide by the square root of the target mesh's surface area.
    SqrtArea,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    pub pairs: usize,
    pub seed: u64,
    /// Per-coordinate standard deviation of the test-time noise.
    pub noise_stddev: f64,
    pub geodesic_norm: GeodesicNorm,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            pairs: 100,
            seed: 0,
            noise_stddev: 0.01,
            geodesic_norm: GeodesicNorm::None,
        }
    }
}

/// Multiply the learning rate by `factor` every `every` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub every: usize,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: String,
    pub seed: u64,
    pub epochs: usize,
    /// Shapes per optimizer step; paired into `batch_shapes / 2` couples.
    pub batch_shapes: usize,
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub loss: LossConfig,
    pub augment: AugmentPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<StepDecay>,
    /// Global gradient-norm clip.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    /// Save `epoch_<k>.ckpt` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Moving-average window of the loss curve.
    pub smoothing_window: usize,
    pub data: DataSpec,
    pub eval: EvalSpec,
}

/// Named variants: `0gh`, `4gh`, `4gh.lis`, `4gh.lis.noise`, each also with
/// a `mini-` prefix for the desk-scale setting.
pub const PRESETS: [&str; 8] = [
    "0gh",
    "4gh",
    "4gh.lis",
    "4gh.lis.noise",
    "mini-0gh",
    "mini-4gh",
    "mini-4gh.lis",
    "mini-4gh.lis.noise",
];

impl ExperimentConfig {
    pub fn preset(name: &str) -> Option<Self> {
        let (mini, variant) = match name.strip_prefix("mini-") {
            Some(v) => (true, v),
            None => (false, name),
        };
        let (gaussian, learnable, noise) = match variant {
            "0gh" => (0, false, false),
            "4gh" => (4, false, false),
            "4gh.lis" => (4, true, false),
            "4gh.lis.noise" => (4, true, true),
            _ => return None,
        };
        let mut cfg = if mini { Self::mini(gaussian) } else { Self::full(gaussian) };
        cfg.variant = name.to_string();
        cfg.model.sigma_learnable = learnable;
        if noise {
            cfg.augment.noise = Some(NoisePolicy {
                fraction: 0.5,
                stddev: 0.02,
            });
        }
        Some(cfg)
    }

    /// `d = 512`, eight heads, six layers, 1000-point shapes, 24-shape batches.
    fn full(gaussian: usize) -> Self {
        Self {
            variant: String::new(),
            seed: 0,
            epochs: 600,
            batch_shapes: 24,
            model: ModelConfig::with_gaussian_heads(512, 8, 6, gaussian, &SIGMA_LADDER),
            optimizer: AdamConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentPolicy::default(),
            schedule: None,
            grad_clip: None,
            checkpoint_every: 50,
            smoothing_window: 10,
            data: DataSpec {
                dir: None,
                count: 10_000,
                n: 1000,
                seed: 0,
                pose_scale: 1.0,
                length_jitter: 0.15,
                test_shapes: 200,
            },
            eval: EvalSpec::default(),
        }
    }

    /// `d = 64`, eight heads, three layers on 200 shapes of 128 points.
    fn mini(gaussian: usize) -> Self {
        let mut cfg = Self::full(gaussian);
        cfg.model = ModelConfig::with_gaussian_heads(64, 8, 3, gaussian, &SIGMA_LADDER);
        cfg.epochs = 60;
        cfg.batch_shapes = 8;
        cfg.optimizer.lr = 1e-3;
        // random rotations are not learnable at this size; point order stays shuffled
        cfg.augment.rotate = false;
        cfg.checkpoint_every = 0;
        cfg.data.count = 200;
        cfg.data.n = 128;
        cfg.data.test_shapes = 20;
        cfg.eval.pairs = 20;
        cfg
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model.validate()?;
        if self.epochs == 0 {
            return Err("epochs must be at least 1".into());
        }
        if self.batch_shapes < 2 || !self.batch_shapes.is_multiple_of(2) {
            return Err(format!("batch_shapes must be a positive even number, got {}", self.batch_shapes));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.eps > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err("optimizer needs lr > 0, eps > 0 and betas in [0, 1)".into());
        }
        if !(self.loss.sep_weight >= 0.0) {
            return Err("loss.sep_weight must be non-negative".into());
        }
        if let Some(n) = self.augment.noise {
            if !(0.0..=1.0).contains(&n.fraction) || !(n.stddev >= 0.0) {
                return Err("noise needs fraction in [0, 1] and stddev >= 0".into());
            }
        }
        if let Some(s) = self.schedule {
            if s.every == 0 || !(s.factor > 0.0) {
                return Err("schedule needs every >= 1 and factor > 0".into());
            }
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err("grad_clip must be positive".into());
        }
        if self.smoothing_window == 0 {
            return Err("smoothing_window must be at least 1".into());
        }
        if self.data.dir.is_none() && self.data.test_shapes >= self.data.count {
            return Err("data.test_shapes must leave some training shapes".into());
        }
        if !(self.eval.noise_stddev >= 0.0) {
            return Err("eval.noise_stddev must be non-negative".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies a dotted `key=value` override, e.g. `model.layers=2`. The value
    /// is parsed as TOML, falling back to a bare string; the result must
    /// still deserialize and validate.
    pub fn set(&mut self, assignment: &str) -> Result<(), String> {
        self.apply_overrides(&[assignment])
    }

    /// Applies overrides in order and validates only the final result, so
    /// keys that constrain each other can change together. On error the
    /// config is left untouched.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, assignments: &[S]) -> Result<(), String> {
        let mut tree = toml::Value::try_from(&*self).map_err(|e| e.to_string())?;
        for a in assignments {
            assign(&mut tree, a.as_ref())?;
        }
        let cfg: Self = tree.try_into().map_err(|e: toml::de::Error| e.message().to_string())?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }
}

fn assign(tree: &mut toml::Value, assignment: &str) -> Result<(), String> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| format!("override {assignment:?} is not key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut slot = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = slot
            .as_table_mut()
            .ok_or_else(|| format!("{key}: {} is not a table", parts[..i].join(".")))?;
        let last = i + 1 == parts.len();
        if !table.contains_key(*part) && !(last && is_optional_key(&parts)) {
            return Err(format!("unknown config key {key:?}"));
        }
        if last {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        slot = table.get_mut(*part).expect("checked above");
    }
    Err(format!("empty config key in {assignment:?}"))
}

fn is_optional_key(parts: &[&str]) -> bool {
    matches!(parts, ["schedule"] | ["grad_clip"] | ["data", "dir"] | ["augment", "noise"])
}
