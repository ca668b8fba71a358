//! Desk-scale training: L1 loss, AdamW with warm-up and step halving, random
//! aligned crops with dihedral augmentation.

use log::{info, warn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{TAU_MAX, TAU_MIN};
use crate::categorize::Mode;
use crate::error::{contract, dim_err, AtdError, Result};
use crate::metrics::{bicubic_resize, Resize};
use crate::model::AtdModel;
use crate::nn::derive_seed;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub iters: usize,
    /// Iterations at which the learning rate halves.
    pub lr_milestones: Vec<usize>,
    pub warmup_iters: usize,
    pub patch_lr: usize,
    pub scale: usize,
    pub seed: u64,
    /// Checkpoint period in iterations; 0 saves only the final state.
    pub checkpoint_every: usize,
    /// Optional larger-patch stage run after `iters`.
    pub second_stage: Option<SecondStage>,
}

/// Extra iterations on larger patches with a restarted schedule: fresh
/// warm-up to `lr`, halving at [`SECOND_STAGE_FRACTIONS`] of `iters`.
/// Optimizer moments carry over.
#[derive(Clone, Debug, PartialEq)]
pub struct SecondStage {
    pub iters: usize,
    pub patch_lr: usize,
    pub lr: f64,
}

/// Halving points of the second stage (150k/200k/225k/240k of 250k).
pub const SECOND_STAGE_FRACTIONS: [f64; 4] = [0.6, 0.8, 0.9, 0.96];

/// Halving points as fractions of the run, following the lightweight
/// schedule (250k/400k/450k/475k/490k of 500k).
pub const MILESTONE_FRACTIONS: [f64; 5] = [0.5, 0.8, 0.9, 0.95, 0.98];

impl TrainConfig {
    /// Desk-scale defaults for a run of `iters` steps.
    pub fn desk(iters: usize, scale: usize, seed: u64) -> Self {
        Self {
            batch: 8,
            lr: 2e-3,
            betas: (0.9, 0.9),
            eps: 1e-8,
            weight_decay: 0.0,
            iters,
            lr_milestones: milestones_for(iters),
            warmup_iters: iters / 50,
            patch_lr: 32,
            scale,
            seed,
            checkpoint_every: 0,
            second_stage: None,
        }
    }

    /// Second stage of `iters` steps on patches 1.5× the first stage's.
    pub fn with_second_stage(mut self, iters: usize) -> Self {
        self.second_stage = Some(SecondStage {
            iters,
            patch_lr: self.patch_lr * 3 / 2,
            lr: self.lr,
        });
        self
    }

    /// Iterations over both stages.
    pub fn total_iters(&self) -> usize {
        self.iters + self.second_stage.as_ref().map_or(0, |s| s.iters)
    }

    /// The second stage as a standalone single-stage configuration.
    pub fn second_stage_config(&self) -> Option<TrainConfig> {
        let s = self.second_stage.as_ref()?;
        Some(TrainConfig {
            lr: s.lr,
            iters: s.iters,
            lr_milestones: fractions_of(&SECOND_STAGE_FRACTIONS, s.iters),
            warmup_iters: s.iters / 50,
            patch_lr: s.patch_lr,
            second_stage: None,
            ..self.clone()
        })
    }

    /// Configuration and stage-local iteration for global iteration `it`.
    fn stage_at<'a>(&'a self, it: usize, second: Option<&'a TrainConfig>) -> (&'a TrainConfig, usize) {
        match second {
            Some(s) if it >= self.iters => (s, it - self.iters),
            _ => (self, it),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AtdError::Config(m));
        if self.batch == 0 || self.patch_lr == 0 {
            return bad("batch and patch_lr must be positive".into());
        }
        if !(2..=4).contains(&self.scale) {
            return bad(format!("scale must be 2, 3 or 4, got {}", self.scale));
        }
        if !(self.lr >= 0.0 && self.eps > 0.0 && self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be non-negative and eps positive".into());
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lr milestones must be strictly increasing".into());
        }
        if self.lr_milestones.last().is_some_and(|&m| m >= self.iters) {
            return bad(format!("lr milestones must be below iters ({})", self.iters));
        }
        if let Some(s) = self.second_stage_config() {
            s.validate()?;
        }
        Ok(())
    }
}

/// Milestones at [`MILESTONE_FRACTIONS`] of `iters`, deduplicated.
pub fn milestones_for(iters: usize) -> Vec<usize> {
    fractions_of(&MILESTONE_FRACTIONS, iters)
}

fn fractions_of(fractions: &[f64], iters: usize) -> Vec<usize> {
    let mut m: Vec<usize> = fractions
        .iter()
        .map(|f| (f * iters as f64).round() as usize)
        .filter(|&m| m > 0 && m < iters)
        .collect();
    m.dedup();
    m
}

/// Linear warm-up from 0, then halving at every milestone passed.
pub fn lr_schedule(iter: usize, cfg: &TrainConfig) -> f64 {
    if iter < cfg.warmup_iters {
        return cfg.lr * iter as f64 / cfg.warmup_iters as f64;
    }
    let passed = cfg.lr_milestones.iter().filter(|&&m| iter >= m).count();
    cfg.lr * 0.5f64.powi(passed as i32)
}

/// Mean absolute difference.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(dim_err("l1_loss", pred.shape(), target.shape()));
    }
    let n = pred.numel().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// First and second moments for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay and bias correction.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    weight_decay: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(contract("optimizer state does not match the parameters"));
    }
    state.step += 1;
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        if g.len() != p.numel() {
            return Err(dim_err("adamw_step", &[g.len()], p.shape()));
        }
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            *w -= lr * weight_decay * *w;
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *w -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Element of the dihedral group of the square: bit 2 is a horizontal flip
/// applied first, bits 0–1 count counter-clockwise quarter turns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral(pub u8);

impl Dihedral {
    pub const ALL: [Dihedral; 8] = [
        Dihedral(0),
        Dihedral(1),
        Dihedral(2),
        Dihedral(3),
        Dihedral(4),
        Dihedral(5),
        Dihedral(6),
        Dihedral(7),
    ];

    pub fn apply(self, img: &Tensor) -> Result<Tensor> {
        let mut out = if self.0 & 4 != 0 { flip_h(img)? } else { img.clone() };
        for _ in 0..(self.0 & 3) {
            out = rot90(&out)?;
        }
        Ok(out)
    }

    pub fn invert(self, img: &Tensor) -> Result<Tensor> {
        let mut out = img.clone();
        for _ in 0..(4 - (self.0 & 3)) % 4 {
            out = rot90(&out)?;
        }
        if self.0 & 4 != 0 {
            out = flip_h(&out)?;
        }
        Ok(out)
    }
}

fn flip_h(img: &Tensor) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    let d = img.data();
    let data = (0..c * h * w)
        .map(|i| {
            let (r, x) = (i / w, i % w);
            d[r * w + (w - 1 - x)]
        })
        .collect();
    Tensor::new(vec![c, h, w], data)
}

/// Counter-clockwise quarter turn of a `C×H×W` image.
fn rot90(img: &Tensor) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    let d = img.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..w {
            for x in 0..h {
                // new (y, x) shows old (x, w-1-y)
                out[ch * h * w + y * h + x] = d[ch * h * w + x * w + (w - 1 - y)];
            }
        }
    }
    Tensor::new(vec![c, w, h], out)
}

/// Crops `C×H×W` to `[y, y+ph) × [x, x+pw)`.
pub fn crop(img: &Tensor, y: usize, x: usize, ph: usize, pw: usize) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    if y + ph > h || x + pw > w {
        return Err(contract(format!("crop {ph}×{pw} at ({y},{x}) exceeds {h}×{w}")));
    }
    let d = img.data();
    let mut out = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for r in y..y + ph {
            let start = ch * h * w + r * w + x;
            out.extend_from_slice(&d[start..start + pw]);
        }
    }
    Tensor::new(vec![c, ph, pw], out)
}

/// Where a training pair came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub image: usize,
    /// Top-left corner of the LR crop.
    pub y: usize,
    pub x: usize,
    pub aug: Dihedral,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub lr_patch: Tensor,
    pub hr_patch: Tensor,
    pub provenance: Provenance,
}

/// One HR image and its bicubic-degraded LR counterpart.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub name: String,
    pub hr: Tensor,
    pub lr: Tensor,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub pairs: Vec<ImagePair>,
    pub scale: usize,
}

impl Dataset {
    /// Crops each HR image to a multiple of `scale` and degrades it with
    /// bicubic downscaling.
    pub fn from_hr(images: Vec<(String, Tensor)>, scale: usize) -> Result<Self> {
        let mut pairs = Vec::with_capacity(images.len());
        for (name, img) in images {
            let (_, h, w) = img.dims3()?;
            let (hc, wc) = (h - h % scale, w - w % scale);
            if hc == 0 || wc == 0 {
                warn!("skipping {name}: {h}×{w} is smaller than the scale factor");
                continue;
            }
            let hr = crop(&img, 0, 0, hc, wc)?;
            let lr = bicubic_resize(&hr, Resize::Down(scale))?;
            pairs.push(ImagePair { name, hr, lr });
        }
        Ok(Self { pairs, scale })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Draws `cfg.batch` aligned LR/HR crops, each with a random dihedral
/// augmentation. Images smaller than the patch are skipped.
pub fn sample_batch(dataset: &Dataset, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<SamplePair>> {
    if dataset.scale != cfg.scale {
        return Err(AtdError::Config(format!(
            "dataset scale {} differs from training scale {}",
            dataset.scale, cfg.scale
        )));
    }
    let p = cfg.patch_lr;
    let usable: Vec<usize> = (0..dataset.len())
        .filter(|&i| {
            let s = dataset.pairs[i].lr.shape();
            s[1] >= p && s[2] >= p
        })
        .collect();
    if usable.len() < dataset.len() {
        warn!(
            "{} image(s) smaller than the {p}×{p} LR patch are skipped",
            dataset.len() - usable.len()
        );
    }
    if usable.is_empty() {
        return Err(AtdError::Data(format!("no training image holds a {p}×{p} LR patch")));
    }
    let s = cfg.scale;
    (0..cfg.batch)
        .map(|_| {
            let image = usable[rng.gen_range(0..usable.len())];
            let pair = &dataset.pairs[image];
            let (_, h, w) = pair.lr.dims3()?;
            let y = rng.gen_range(0..=h - p);
            let x = rng.gen_range(0..=w - p);
            let aug = Dihedral(rng.gen_range(0..8));
            let lr = crop(&pair.lr, y, x, p, p)?;
            let hr = crop(&pair.hr, y * s, x * s, p * s, p * s)?;
            Ok(SamplePair {
                lr_patch: aug.apply(&lr)?,
                hr_patch: aug.apply(&hr)?,
                provenance: Provenance { image, y, x, aug },
            })
        })
        .collect()
}

/// Procedural RGB image with edges, stripes and smooth shading; a stand-in
/// for natural-image training data.
pub fn synthetic_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut img = vec![0.0; 3 * h * w];
    let base: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let (gx, gy): (f64, f64) = (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
    let n_stripes = rng.gen_range(1..=2);
    let stripes: Vec<(f64, f64, f64, [f64; 3])> = (0..n_stripes)
        .map(|_| {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let period: f64 = rng.gen_range(3.0..12.0);
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
            (theta, period, phase, amp)
        })
        .collect();
    let n_rects = rng.gen_range(1..=4);
    let rects: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..n_rects)
        .map(|_| {
            let y0 = rng.gen_range(0.0..h as f64);
            let x0 = rng.gen_range(0.0..w as f64);
            let hh = rng.gen_range(2.0..h as f64 / 2.0 + 2.0);
            let ww = rng.gen_range(2.0..w as f64 / 2.0 + 2.0);
            (y0, x0, hh, ww, [rng.gen(), rng.gen(), rng.gen()])
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let (yf, xf) = (y as f64, x as f64);
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = base[c] + gx * xf / w as f64 + gy * yf / h as f64;
            }
            for &(theta, period, phase, amp) in &stripes {
                let t = xf * theta.cos() + yf * theta.sin();
                // square-ish wave: sharp edges the network can learn to restore
                let s = (std::f64::consts::TAU * t / period + phase).sin().signum();
                for c in 0..3 {
                    px[c] += amp[c] * s;
                }
            }
            for &(y0, x0, hh, ww, col) in &rects {
                if yf >= y0 && yf < y0 + hh && xf >= x0 && xf < x0 + ww {
                    px = col;
                }
            }
            for c in 0..3 {
                img[c * h * w + y * w + x] = px[c].clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![3, h, w], img).expect("consistent shape")
}

/// Reproducible toy dataset of `count` synthetic `size×size` HR images.
pub fn synthetic_dataset(count: usize, size: usize, scale: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..count)
        .map(|i| (format!("synth_{i:04}"), synthetic_image(size, size, &mut rng)))
        .collect();
    Dataset::from_hr(images, scale)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "iter,loss,lr";

    pub fn csv_row(&self) -> String {
        format!("{},{:e},{:e}", self.iter, self.loss, self.lr)
    }
}

/// Everything needed to resume a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: AtdModel,
    pub optimizer: AdamState,
    /// Sampling RNG.
    pub rng: ChaCha8Rng,
    /// Completed iterations.
    pub iteration: usize,
}

impl TrainState {
    pub fn new(model: AtdModel, seed: u64) -> Self {
        let optimizer = AdamState::zeros_like(model.store.tensors());
        Self {
            model,
            optimizer,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5A4D])),
            iteration: 0,
        }
    }
}

/// Worker threads for per-sample gradients, from `ATD_NUM_THREADS`
/// (default 1).
pub fn num_threads() -> usize {
    std::env::var("ATD_NUM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Loss and gradients of one sample, flattened per parameter.
fn sample_grads(model: &AtdModel, pair: &SamplePair, seed: u64) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let x = tape.constant(pair.lr_patch.clone());
    let y = model.forward(&mut tape, &p, x, Mode::Train, seed, None)?;
    let loss = tape.l1_loss(y, &pair.hr_patch)?;
    let value = tape.value(loss).data()[0];
    let mut g = tape.backward(loss)?;
    let grads = p
        .vars()
        .iter()
        .zip(model.store.tensors())
        .map(|(&v, t)| g.take(v).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    Ok((value, grads))
}

/// Mean loss and gradients over a batch. Per-sample work may be spread over
/// threads; the reduction always runs in sample order.
fn batch_grads(model: &AtdModel, batch: &[SamplePair], seeds: &[u64], threads: usize) -> Result<(f64, Vec<Vec<f64>>)> {
    let results: Vec<Result<(f64, Vec<Vec<f64>>)>> = if threads <= 1 || batch.len() <= 1 {
        batch.iter().zip(seeds).map(|(s, &seed)| sample_grads(model, s, seed)).collect()
    } else {
        let chunk = batch.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .zip(seeds.chunks(chunk))
                .map(|(b, s)| {
                    scope.spawn(move || {
                        b.iter()
                            .zip(s)
                            .map(|(p, &seed)| sample_grads(model, p, seed))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("gradient worker panicked"))
                .collect()
        })
    };
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut acc: Vec<Vec<f64>> = model.store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    for r in results {
        let (l, g) = r?;
        loss += l;
        for (a, gi) in acc.iter_mut().zip(g) {
            for (x, y) in a.iter_mut().zip(gi) {
                *x += y;
            }
        }
    }
    acc.iter_mut().flatten().for_each(|x| *x /= n);
    Ok((loss / n, acc))
}

/// Names the first parameter or gradient holding a NaN or infinity.
fn first_non_finite(model: &AtdModel, grads: &[Vec<f64>]) -> String {
    for (id, (name, t)) in model.store.iter().enumerate() {
        if t.data().iter().any(|v| !v.is_finite()) {
            return format!("parameter {name}");
        }
        if grads[id].iter().any(|v| !v.is_finite()) {
            return format!("gradient of {name}");
        }
    }
    "the loss itself".into()
}

/// Keeps every temperature inside its valid range.
pub fn clamp_temperatures(model: &mut AtdModel) {
    for id in model.tau_ids() {
        model
            .store
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|t| *t = t.clamp(TAU_MIN, TAU_MAX));
    }
}

/// Runs `cfg.total_iters() − state.iteration` steps, invoking
/// `on_checkpoint` every `cfg.checkpoint_every` iterations and once at the end.
pub fn train_loop(
    state: &mut TrainState,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(&TrainState) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(AtdError::Data("training set is empty".into()));
    }
    if state.model.config.scale != cfg.scale {
        return Err(AtdError::Config("model and training scales differ".into()));
    }
    let threads = num_threads();
    let total = cfg.total_iters();
    let second = cfg.second_stage_config();
    let mut curve = Vec::with_capacity(total.saturating_sub(state.iteration));
    while state.iteration < total {
        let it = state.iteration;
        let (stage, local) = cfg.stage_at(it, second.as_ref());
        let lr = lr_schedule(local + 1, stage);
        let batch = sample_batch(dataset, stage, &mut state.rng)?;
        let seeds: Vec<u64> = (0..batch.len())
            .map(|i| derive_seed(cfg.seed, &[it as u64, i as u64]))
            .collect();
        let (loss, grads) = batch_grads(&state.model, &batch, &seeds, threads)?;
        if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(AtdError::NonFinite(format!(
                "iteration {it}: loss {loss}, first offender is {}",
                first_non_finite(&state.model, &grads)
            )));
        }
        adamw_step(
            state.model.store.tensors_mut(),
            &grads,
            &mut state.optimizer,
            lr,
            cfg.betas,
            cfg.weight_decay,
            cfg.eps,
        )?;
        clamp_temperatures(&mut state.model);
        state.iteration += 1;
        curve.push(LossRecord { iter: it, loss, lr });
        if it.is_multiple_of(100) || state.iteration == total {
            info!("iter {it} loss {loss:.5} lr {lr:.3e}");
        }
        if cfg.checkpoint_every > 0 && state.iteration.is_multiple_of(cfg.checkpoint_every) && state.iteration < total {
            on_checkpoint(state)?;
        }
    }
    on_checkpoint(state)?;
    Ok(curve)
}
