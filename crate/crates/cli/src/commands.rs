use std::path::Path;

use anyhow::{anyhow, bail, ensure, Context, Result};
use gaussmatch::data::{synthetic, NoisePolicy, ShapeDataset};
use gaussmatch::eval::{
    ablate_heads, ablate_layers, evaluate_testset, export_attention, support_width, write_ablation_csv,
    write_reports_csv,
};
use gaussmatch::model::{HeadKind, HeadMask, ModelConfig};
use gaussmatch::train::{emit_loss_curve, load_checkpoint, load_data, train, Checkpoint, ExperimentConfig, PRESETS};
use serde::Serialize;

use crate::manifest::RunManifest;
use crate::{Command, Common};

const DEFAULT_PRESET: &str = "4gh";

/// Resolves the config, runs the command and always leaves a run manifest
/// in the output directory.
pub fn run(cmd: &Command) -> Result<()> {
    let common = cmd.common();
    let mut manifest = RunManifest::start(cmd.name());
    let result = execute(cmd, common, &mut manifest);
    manifest.finish(result.as_ref().err());
    let written = manifest.write(&common.out);
    result?;
    written.map(|_| ())
}

fn execute(cmd: &Command, common: &Common, manifest: &mut RunManifest) -> Result<()> {
    let checkpoint = match cmd {
        Command::Eval { checkpoint, .. }
        | Command::AblateHeads { checkpoint, .. }
        | Command::ExportAttn { checkpoint, .. } => Some(
            load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?,
        ),
        _ => None,
    };
    let mut cfg = resolve_config(common, checkpoint.as_ref())?;
    if let Command::Train { noise: Some((stddev, fraction)), .. } = cmd {
        cfg.augment.noise = Some(NoisePolicy {
            fraction: *fraction,
            stddev: *stddev,
        });
    }
    cfg.validate().map_err(|e| anyhow!("invalid config: {e}"))?;
    manifest.set_config(&cfg);

    let out = common.out.as_path();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match cmd {
        Command::GenData { .. } => gen_data(&cfg, out, manifest),
        Command::Train { .. } => run_train(&cfg, out, manifest),
        Command::Eval { mask_head, noise, .. } => {
            run_eval(&cfg, checkpoint.as_ref().unwrap(), mask_head, *noise, out, manifest)
        }
        Command::AblateHeads { .. } => run_ablate_heads(&cfg, checkpoint.as_ref().unwrap(), out, manifest),
        Command::AblateLayers { gaussian, .. } => run_ablate_layers(&cfg, *gaussian, out, manifest),
        Command::ExportAttn {
            pair, layer, head, point, ..
        } => run_export(&cfg, checkpoint.as_ref().unwrap(), *pair, *layer, *head, *point, out, manifest),
        Command::InspectConfig { .. } => {
            print!("{}", describe(&cfg));
            Ok(())
        }
    }
}

/// Base config from `--config` (file or preset), else the checkpoint's,
/// else the default preset; then `--set`, `--seed` and `--epochs`.
pub fn resolve_config(common: &Common, checkpoint: Option<&Checkpoint>) -> Result<ExperimentConfig> {
    let mut cfg = match (&common.config, checkpoint) {
        (Some(c), _) => load_config(c)?,
        (None, Some(ck)) => ck.config.clone(),
        (None, None) => ExperimentConfig::preset(DEFAULT_PRESET).expect("default preset exists"),
    };
    cfg.apply_overrides(&common.set).map_err(|e| anyhow!("--set: {e}"))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.data.seed = seed;
    }
    if let Some(epochs) = common.epochs {
        cfg.epochs = epochs;
    }
    cfg.validate().map_err(|e| anyhow!("invalid config: {e}"))?;
    Ok(cfg)
}

fn load_config(spec: &str) -> Result<ExperimentConfig> {
    let path = Path::new(spec);
    if path.is_file() {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {spec}"))?;
        return ExperimentConfig::from_toml(&text).map_err(|e| anyhow!("{spec}: {e}"));
    }
    ExperimentConfig::preset(spec).ok_or_else(|| {
        anyhow!(
            "`{spec}` is neither a config file nor a preset; presets: {}",
            PRESETS.join(", ")
        )
    })
}

fn gen_data(cfg: &ExperimentConfig, out: &Path, manifest: &mut RunManifest) -> Result<()> {
    let ds = synthetic::generate(&cfg.data.synthetic())?;
    let dir = out.join("data");
    ds.save(&dir, Some(cfg.data.seed))?;
    println!("wrote {} shapes of {} points to {}", ds.len(), ds.n(), dir.display());
    manifest.output(&dir);
    Ok(())
}

fn run_train(cfg: &ExperimentConfig, out: &Path, manifest: &mut RunManifest) -> Result<()> {
    let (train_set, _) = load_data(&cfg.data)?;
    let outcome = train(cfg, &train_set, Some(out))?;
    let log_path = out.join("train_log.csv");
    outcome.log.write_csv(&log_path)?;
    let curve_path = out.join("loss_curve.csv");
    emit_loss_curve(&outcome.log, &curve_path, cfg.smoothing_window)?;
    for p in [out.join("best.ckpt"), out.join("last.ckpt"), log_path, curve_path] {
        manifest.output(&p);
    }
    let last = outcome.log.records.last().expect("at least one epoch");
    println!(
        "{}: {} epochs, final loss {:.6}, best loss {:.6} at epoch {}",
        cfg.variant,
        outcome.log.records.len(),
        last.loss,
        outcome.best_loss,
        outcome.best_epoch
    );
    if !last.sigmas.is_empty() {
        println!("sigmas: {:?}", last.sigmas);
    }
    Ok(())
}

fn test_set(cfg: &ExperimentConfig) -> Result<ShapeDataset> {
    Ok(load_data(&cfg.data)?.1)
}

#[derive(Serialize)]
struct EvalSummary {
    pairs: usize,
    masked_heads: Vec<String>,
    clean_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    noise_stddev: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    noisy_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    noisy_to_clean: Option<f64>,
}

fn run_eval(
    cfg: &ExperimentConfig,
    ck: &Checkpoint,
    heads: &[(usize, usize)],
    noise: Option<(f64, f64)>,
    out: &Path,
    manifest: &mut RunManifest,
) -> Result<()> {
    let mc = ck.model.config();
    let mut mask = HeadMask::none();
    for &(l, h) in heads {
        ensure!(
            l < mc.layers && h < mc.heads,
            "--mask-head {l}:{h} is out of range for {} layers of {} heads",
            mc.layers,
            mc.heads
        );
        mask.insert(l, h);
    }
    let stddev = match noise {
        Some((_, f)) if f != 1.0 => bail!("test-time noise applies to every point; use a fraction of 1"),
        Some((s, _)) => s,
        None => cfg.eval.noise_stddev,
    };
    let test = test_set(cfg)?;
    let clean = evaluate_testset(&ck.model, &test, &cfg.eval, 0.0, &mask)?;
    let path = out.join("reports.csv");
    write_reports_csv(&clean.reports, &path)?;
    manifest.output(&path);
    println!("clean mean geodesic error: {:.6}", clean.mean_error);

    let mut summary = EvalSummary {
        pairs: clean.reports.len(),
        masked_heads: mask.iter().map(|(l, h)| format!("{l}:{h}")).collect(),
        clean_error: clean.mean_error,
        noise_stddev: None,
        noisy_error: None,
        noisy_to_clean: None,
    };
    if stddev > 0.0 {
        let noisy = evaluate_testset(&ck.model, &test, &cfg.eval, stddev, &mask)?;
        let path = out.join("reports_noisy.csv");
        write_reports_csv(&noisy.reports, &path)?;
        manifest.output(&path);
        println!("noisy mean geodesic error (stddev {stddev}): {:.6}", noisy.mean_error);
        summary.noise_stddev = Some(stddev);
        summary.noisy_error = Some(noisy.mean_error);
        summary.noisy_to_clean = Some(noisy.mean_error / clean.mean_error);
    }
    let path = out.join("eval_summary.toml");
    std::fs::write(&path, toml::to_string(&summary)?).with_context(|| format!("writing {}", path.display()))?;
    manifest.output(&path);
    Ok(())
}

fn run_ablate_heads(cfg: &ExperimentConfig, ck: &Checkpoint, out: &Path, manifest: &mut RunManifest) -> Result<()> {
    let test = test_set(cfg)?;
    let result = ablate_heads(&ck.model, &test, &cfg.eval)?;
    let path = out.join("head_ablation.csv");
    write_ablation_csv(&result.reports, &path)?;
    manifest.output(&path);
    println!("full model: {:.6}", result.full_error);
    let layout = &ck.model.config().head_layout;
    for r in &result.reports {
        println!(
            "head {} ({}): {:.6} [{}]",
            r.unit,
            layout[0][r.unit],
            r.mean_error,
            r.class.map(|c| c.to_string()).unwrap_or_default()
        );
    }
    Ok(())
}

fn run_ablate_layers(
    cfg: &ExperimentConfig,
    gaussian: Option<usize>,
    out: &Path,
    manifest: &mut RunManifest,
) -> Result<()> {
    let per_layer = cfg.model.head_layout.first().map_or(0, |row| {
        row.iter().filter(|k| matches!(k, HeadKind::Gaussian(_))).count()
    });
    let gaussian = gaussian.unwrap_or(if per_layer > 0 { per_layer } else { 4 });
    let (train_set, test) = load_data(&cfg.data)?;
    let reports = ablate_layers(cfg, gaussian, &train_set, &test)?;
    let path = out.join("layer_ablation.csv");
    write_ablation_csv(&reports, &path)?;
    manifest.output(&path);
    for r in &reports {
        println!("Gaussian heads in layer {}: {:.6}", r.unit, r.mean_error);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_export(
    cfg: &ExperimentConfig,
    ck: &Checkpoint,
    (i, j): (usize, usize),
    layer: usize,
    head: usize,
    point: usize,
    out: &Path,
    manifest: &mut RunManifest,
) -> Result<()> {
    let test = test_set(cfg)?;
    ensure!(
        i < test.len() && j < test.len(),
        "pair {i}:{j} is out of range for {} test shapes",
        test.len()
    );
    let e = export_attention(&ck.model, &test.clouds()[i], &test.clouds()[j], layer, head, point, out)?;
    manifest.output(&e.matrix_path);
    manifest.output(&e.row_path);
    println!(
        "wrote {} and {}; {} tokens hold at least half the row maximum",
        e.matrix_path.display(),
        e.row_path.display(),
        support_width(&e.row, 0.5)
    );
    Ok(())
}

/// Human-readable summary printed by `inspect-config`.
pub fn describe(cfg: &ExperimentConfig) -> String {
    let m = &cfg.model;
    let params = m.parameter_count();
    let mut dot_only = m.clone();
    dot_only.head_layout = ModelConfig::with_gaussian_heads(m.d, m.heads, m.layers, 0, &[]).head_layout;
    dot_only.sigmas.clear();
    dot_only.sigma_learnable = false;
    let mut s = String::new();
    s += &format!("variant: {}\n", cfg.variant);
    s += &format!("parameters: {params} ({:.2}M)\n", params as f64 / 1e6);
    s += &format!(
        "parameters without Gaussian heads: {} (difference {})\n",
        dot_only.parameter_count(),
        dot_only.parameter_count() as i64 - params as i64
    );
    s += &format!("d = {}, heads = {}, layers = {}, ff_hidden = {}\n", m.d, m.heads, m.layers, m.ff_hidden);
    if !m.sigmas.is_empty() {
        s += &format!(
            "sigmas: {:?} ({})\n",
            m.sigmas,
            if m.sigma_learnable { "learnable" } else { "fixed" }
        );
    }
    s += "head layout:\n";
    for (l, row) in m.head_layout.iter().enumerate() {
        let kinds: Vec<String> = row.iter().map(ToString::to_string).collect();
        s += &format!("  layer {l}: {}\n", kinds.join(" "));
    }
    s += "\n";
    s += &cfg.to_toml();
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn common(config: Option<&str>, set: &[&str]) -> Common {
        Common {
            config: config.map(str::to_string),
            out: PathBuf::from("unused"),
            seed: None,
            epochs: None,
            set: set.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn overrides_apply_in_order_and_are_validated() {
        let cfg = resolve_config(&common(Some("mini-4gh"), &["epochs=3", "epochs=5"]), None).unwrap();
        assert_eq!(cfg.epochs, 5);
        assert!(resolve_config(&common(Some("mini-4gh"), &["epochs=0"]), None).is_err());
        assert!(resolve_config(&common(Some("mini-4gh"), &["no.such=1"]), None).is_err());
        assert!(resolve_config(&common(Some("nonexistent"), &[]), None).is_err());
    }

    #[test]
    fn seed_flag_sets_both_seeds() {
        let mut c = common(None, &[]);
        c.seed = Some(42);
        c.epochs = Some(7);
        let cfg = resolve_config(&c, None).unwrap();
        assert_eq!((cfg.seed, cfg.data.seed, cfg.epochs), (42, 42, 7));
        assert_eq!(cfg.variant, DEFAULT_PRESET);
    }

    #[test]
    fn description_lists_every_layer() {
        let cfg = ExperimentConfig::preset("4gh").unwrap();
        let text = describe(&cfg);
        assert!(text.contains("layer 5:"));
        assert!(text.contains(&cfg.model.parameter_count().to_string()));
    }
}
