//! Command implementations behind the `atd` binary, plus checkpoint, image
//! and configuration I/O.
//!
//! Every command takes a resolved [`RunConfig`]; the binary only parses
//! flags into one.

pub mod checkpoint;
pub mod config;
pub mod io;

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::error::{contract, AtdError, Result};
use crate::metrics::{bicubic_resize, evaluate_pair, EvalRecord, Resize};
use crate::model::{preset, AtdModel};
use crate::train::{self, crop, synthetic_dataset, synthetic_image, Dataset, LossRecord, TrainConfig, TrainState};
use crate::Tensor;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;

pub const DEFAULT_PRESET: &str = "atd_tiny";
pub const DEFAULT_SCALE: usize = 2;

/// Published parameter counts the presets are compared against.
pub fn paper_param_target(preset: &str, scale: usize) -> Option<usize> {
    match (preset, scale) {
        ("atd_light", 2) => Some(753_000),
        ("atd", 4) => Some(20_300_000),
        _ => None,
    }
}

fn seed(rc: &RunConfig) -> Result<u64> {
    rc.get_or("seed", 0)
}

/// Model from `checkpoint` if given, otherwise a fresh preset model.
pub fn resolve_model(rc: &RunConfig) -> Result<AtdModel> {
    if let Some(path) = rc.path("checkpoint") {
        let model = Checkpoint::load(&path)?.to_model()?;
        if let Some(s) = rc.get::<usize>("scale")? {
            if s != model.config.scale {
                return Err(AtdError::Config(format!(
                    "checkpoint is ×{}, but scale {s} was requested",
                    model.config.scale
                )));
            }
        }
        return Ok(model);
    }
    let name = rc.raw("preset").unwrap_or(DEFAULT_PRESET);
    let mut cfg = preset(name, rc.get_or("scale", DEFAULT_SCALE)?)?;
    rc.apply_model_overrides(&mut cfg)?;
    AtdModel::new(cfg, seed(rc)?)
}

/// Training configuration: desk defaults, then file/flag overrides.
pub fn resolve_train_config(rc: &RunConfig, scale: usize) -> Result<TrainConfig> {
    let iters = rc.get_or("iters", 2000)?;
    let mut cfg = TrainConfig::desk(iters, scale, seed(rc)?);
    cfg.batch = rc.get_or("batch", cfg.batch)?;
    cfg.lr = rc.get_or("lr", cfg.lr)?;
    cfg.betas = (rc.get_or("beta1", cfg.betas.0)?, rc.get_or("beta2", cfg.betas.1)?);
    cfg.weight_decay = rc.get_or("weight_decay", cfg.weight_decay)?;
    cfg.warmup_iters = rc.get_or("warmup_iters", cfg.warmup_iters)?;
    cfg.patch_lr = rc.get_or("patch_lr", cfg.patch_lr)?;
    cfg.checkpoint_every = rc.get_or("checkpoint_every", cfg.checkpoint_every)?;
    if let Some(m) = rc.get_list("lr_milestones")? {
        cfg.lr_milestones = m;
    }
    let stage2: usize = rc.get_or("stage2_iters", 0)?;
    if stage2 > 0 {
        cfg = cfg.with_second_stage(stage2);
        if let Some(s) = cfg.second_stage.as_mut() {
            s.patch_lr = rc.get_or("stage2_patch_lr", s.patch_lr)?;
            s.lr = rc.get_or("stage2_lr", s.lr)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// HR images from `data`, or a synthetic set when `synth_count` is given.
pub fn resolve_dataset(rc: &RunConfig, scale: usize) -> Result<Dataset> {
    if let Some(dir) = rc.path("data") {
        let (images, bad) = io::load_dir(&dir)?;
        for (p, e) in &bad {
            warn!("skipping {}: {e}", p.display());
        }
        if images.is_empty() {
            return Err(AtdError::Data(format!("no readable PNG images in {}", dir.display())));
        }
        return Dataset::from_hr(images, scale);
    }
    let count: usize = rc.get_or("synth_count", 0)?;
    if count == 0 {
        return Err(AtdError::Config("set data=<dir> or synth_count=<n>".into()));
    }
    synthetic_dataset(count, rc.get_or("synth_size", 64)?, scale, seed(rc)?)
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub curve: Vec<LossRecord>,
    pub final_checkpoint: PathBuf,
    pub loss_csv: PathBuf,
}

pub fn write_loss_csv(path: &Path, curve: &[LossRecord]) -> Result<()> {
    let mut f = File::create(path)?;
    writeln!(f, "{}", LossRecord::CSV_HEADER)?;
    for r in curve {
        writeln!(f, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Trains and writes `loss.csv`, periodic `ckpt_<iter>.atd` files and
/// `final.atd` into `out`. A checkpoint with optimizer state resumes.
pub fn cmd_train(rc: &RunConfig) -> Result<TrainReport> {
    let out = rc.require_path("out")?;
    fs::create_dir_all(&out)?;
    let mut state = match rc.path("checkpoint") {
        Some(p) => Checkpoint::load(&p)?.to_state(seed(rc)?)?,
        None => TrainState::new(resolve_model(rc)?, seed(rc)?),
    };
    let scale = state.model.config.scale;
    let cfg = resolve_train_config(rc, scale)?;
    let data = resolve_dataset(rc, scale)?;
    info!("training {} on {} images for {} iterations", state.model, data.len(), cfg.total_iters());
    let final_path = out.join("final.atd");
    let curve = train::train_loop(&mut state, &data, &cfg, |st| {
        let path = if st.iteration == cfg.total_iters() {
            final_path.clone()
        } else {
            out.join(format!("ckpt_{:06}.atd", st.iteration))
        };
        Checkpoint::from_state(st).save(&path)
    })?;
    let loss_csv = out.join("loss.csv");
    write_loss_csv(&loss_csv, &curve)?;
    Ok(TrainReport {
        curve,
        final_checkpoint: final_path,
        loss_csv,
    })
}

/// Upscales `input` into `out`.
pub fn cmd_infer(rc: &RunConfig) -> Result<Tensor> {
    let model = resolve_model(rc)?;
    let img = io::load_png(&rc.require_path("input")?)?;
    let sr = model.infer(&img)?;
    io::save_png(&rc.require_path("out")?, &sr)?;
    Ok(sr)
}

/// Scores the model and the bicubic baseline on every HR PNG in `hr_dir`.
/// The CSV goes to `out` when set.
pub fn cmd_eval(rc: &RunConfig) -> Result<Vec<EvalRecord>> {
    let model = resolve_model(rc)?;
    let s = model.config.scale;
    let (images, bad) = io::load_dir(&rc.require_path("hr_dir")?)?;
    for (p, e) in &bad {
        warn!("skipping {}: {e}", p.display());
    }
    if images.is_empty() {
        warn!("no images to evaluate");
    }
    let mut rows = Vec::with_capacity(images.len());
    for (name, img) in images {
        let (_, h, w) = img.dims3()?;
        if h < s || w < s {
            warn!("skipping {name}: smaller than the scale factor");
            continue;
        }
        let hr = crop(&img, 0, 0, h - h % s, w - w % s)?;
        let lr = bicubic_resize(&hr, Resize::Down(s))?;
        let sr = model.infer(&lr)?;
        rows.push(evaluate_pair(&name, &hr, &lr, &sr, s)?);
    }
    if let Some(path) = rc.path("out") {
        let mut f = File::create(path)?;
        writeln!(f, "{}", EvalRecord::CSV_HEADER)?;
        for r in &rows {
            writeln!(f, "{}", r.csv_row())?;
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamsReport {
    pub preset: String,
    pub scale: usize,
    pub count: usize,
    pub target: Option<usize>,
}

impl ParamsReport {
    /// Relative deviation from the published count.
    pub fn deviation(&self) -> Option<f64> {
        self.target
            .map(|t| (self.count as f64 - t as f64) / t as f64)
    }

    pub fn within_tolerance(&self) -> Option<bool> {
        self.deviation().map(|d| d.abs() <= 0.10)
    }
}

impl std::fmt::Display for ParamsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} x{}: {} parameters", self.preset, self.scale, self.count)?;
        if let (Some(t), Some(d)) = (self.target, self.deviation()) {
            write!(
                f,
                " (published {t}, {:+.2}%, {})",
                d * 100.0,
                if d.abs() <= 0.10 { "within ±10%" } else { "outside ±10%" }
            )?;
        }
        Ok(())
    }
}

pub fn cmd_params(rc: &RunConfig) -> Result<ParamsReport> {
    let name = rc.raw("preset").unwrap_or(DEFAULT_PRESET).to_string();
    let scale = rc.get_or("scale", DEFAULT_SCALE)?;
    let model = resolve_model(rc)?;
    Ok(ParamsReport {
        target: paper_param_target(&name, scale),
        preset: name,
        scale,
        count: model.count_params(),
    })
}

/// One mask per dictionary token: `masks[k][p]` is true when pixel `p`
/// belongs to category `k`.
pub fn category_masks(labels: &[usize], dict_size: usize) -> Vec<Vec<bool>> {
    (0..dict_size)
        .map(|k| labels.iter().map(|&l| l == k).collect())
        .collect()
}

/// Writes `category_<k>.png` for every dictionary token of the chosen
/// block and layer. Returns the masks.
pub fn cmd_viz_categories(rc: &RunConfig) -> Result<Vec<Vec<bool>>> {
    let model = resolve_model(rc)?;
    let block: usize = rc.get_or("block", 0)?;
    let layer: usize = rc.get_or("layer", 0)?;
    if block >= model.config.blocks || layer >= model.config.layers_per_block {
        return Err(contract(format!(
            "block {block}/layer {layer} out of range for {}×{} layers",
            model.config.blocks, model.config.layers_per_block
        )));
    }
    let img = io::load_png(&rc.require_path("input")?)?;
    let (_, h, w) = img.dims3()?;
    let (_, trace) = model.infer_traced(&img)?;
    let labels = trace
        .labels(block, layer)
        .ok_or_else(|| contract("no categories recorded"))?;
    let masks = category_masks(labels, model.config.dict_size);
    let out = rc.require_path("out")?;
    fs::create_dir_all(&out)?;
    for (k, m) in masks.iter().enumerate() {
        io::save_mask(&out.join(format!("category_{k:03}.png")), m, h, w)?;
    }
    Ok(masks)
}

/// Writes `synth_count` procedural HR images of `synth_size` pixels to `out`.
pub fn cmd_synth(rc: &RunConfig) -> Result<Vec<PathBuf>> {
    use rand::SeedableRng;
    let out = rc.require_path("out")?;
    fs::create_dir_all(&out)?;
    let count: usize = rc.get_or("synth_count", 16)?;
    let size: usize = rc.get_or("synth_size", 64)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed(rc)?);
    (0..count)
        .map(|i| {
            let p = out.join(format!("synth_{i:04}.png"));
            io::save_png(&p, &synthetic_image(size, size, &mut rng))?;
            Ok(p)
        })
        .collect()
}
