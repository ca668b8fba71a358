//! Network assembly: transformer layers with three parallel attention
//! branches, blocks that thread a refined dictionary through their layers,
//! and the full super-resolution network.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{tdca, window_msa, TdcaParams, WindowAttentionParams};
use crate::categorize::{ac_msa, AcMsaParams, CategoryPartition, Mode};
use crate::dictionary::{init_dictionary, refine, AdrParams, TokenDictionary};
use crate::error::{contract, AtdError, Result};
use crate::nn::{derive_seed, Bound, Conv3x3, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Every architectural hyperparameter of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub blocks: usize,
    pub layers_per_block: usize,
    /// Dictionary size M.
    pub dict_size: usize,
    /// Width of the cosine-similarity space (d / r).
    pub inner_dim: usize,
    /// Sub-category size n_s.
    pub group_size: usize,
    pub window: usize,
    pub heads: usize,
    pub ffn_ratio: f64,
    pub scale: usize,
    pub global_residual: bool,
    pub rel_pos_bias: bool,
    pub adr_norm_affine: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("dim", self.dim),
            ("blocks", self.blocks),
            ("layers_per_block", self.layers_per_block),
            ("dict_size", self.dict_size),
            ("inner_dim", self.inner_dim),
            ("group_size", self.group_size),
            ("window", self.window),
            ("heads", self.heads),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(AtdError::Config(format!("{name} must be at least 1")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(AtdError::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(2..=4).contains(&self.scale) {
            return Err(AtdError::Config(format!("scale must be 2, 3 or 4, got {}", self.scale)));
        }
        if !(self.ffn_ratio > 0.0 && self.ffn_ratio.is_finite()) {
            return Err(AtdError::Config("ffn_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn ffn_hidden(&self) -> usize {
        ((self.dim as f64) * self.ffn_ratio).round().max(1.0) as usize
    }

    /// `key=value` lines, the inverse of [`ModelConfig::from_kv`].
    pub fn to_kv(&self) -> String {
        format!(
            "dim={}\nblocks={}\nlayers_per_block={}\ndict_size={}\ninner_dim={}\ngroup_size={}\n\
             window={}\nheads={}\nffn_ratio={}\nscale={}\nglobal_residual={}\nrel_pos_bias={}\n\
             adr_norm_affine={}\n",
            self.dim,
            self.blocks,
            self.layers_per_block,
            self.dict_size,
            self.inner_dim,
            self.group_size,
            self.window,
            self.heads,
            self.ffn_ratio,
            self.scale,
            self.global_residual,
            self.rel_pos_bias,
            self.adr_norm_affine
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = preset("atd_tiny", 2)?;
        let mut seen = 0;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| AtdError::Config(format!("malformed config line {line:?}")))?;
            cfg.set(k.trim(), v.trim())?;
            seen += 1;
        }
        if seen != 13 {
            return Err(AtdError::Config(format!("model config has {seen} of 13 keys")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overrides one field by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| AtdError::Config(format!("bad value {v:?} for {k}")))
        }
        match key {
            "dim" => self.dim = num(key, value)?,
            "blocks" => self.blocks = num(key, value)?,
            "layers_per_block" => self.layers_per_block = num(key, value)?,
            "dict_size" => self.dict_size = num(key, value)?,
            "inner_dim" => self.inner_dim = num(key, value)?,
            "group_size" => self.group_size = num(key, value)?,
            "window" => self.window = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "ffn_ratio" => self.ffn_ratio = num(key, value)?,
            "scale" => self.scale = num(key, value)?,
            "global_residual" => self.global_residual = num(key, value)?,
            "rel_pos_bias" => self.rel_pos_bias = num(key, value)?,
            "adr_norm_affine" => self.adr_norm_affine = num(key, value)?,
            _ => return Err(AtdError::Config(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }
}

/// Named configurations: `atd`, `atd_light`, and the desk-scale `atd_tiny`.
pub fn preset(name: &str, scale: usize) -> Result<ModelConfig> {
    let base = ModelConfig {
        dim: 0,
        blocks: 0,
        layers_per_block: 0,
        dict_size: 0,
        inner_dim: 0,
        group_size: 0,
        window: 0,
        heads: 0,
        ffn_ratio: 2.0,
        scale,
        global_residual: true,
        rel_pos_bias: true,
        adr_norm_affine: true,
    };
    let cfg = match name {
        "atd" => ModelConfig {
            dim: 210,
            blocks: 6,
            layers_per_block: 6,
            dict_size: 128,
            inner_dim: 20,
            group_size: 128,
            window: 16,
            heads: 6,
            ..base
        },
        "atd_light" => ModelConfig {
            dim: 48,
            blocks: 4,
            layers_per_block: 6,
            dict_size: 64,
            inner_dim: 8,
            group_size: 128,
            window: 8,
            heads: 4,
            ..base
        },
        "atd_tiny" => ModelConfig {
            dim: 24,
            blocks: 1,
            layers_per_block: 2,
            dict_size: 8,
            inner_dim: 4,
            group_size: 16,
            window: 8,
            heads: 2,
            ..base
        },
        other => return Err(AtdError::Config(format!("unknown preset {other:?}"))),
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug)]
pub struct TransformerLayerParams {
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub wmsa: WindowAttentionParams,
    pub tdca: TdcaParams,
    pub acmsa: AcMsaParams,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct AtdBlockParams {
    pub layers: Vec<TransformerLayerParams>,
    /// Learnable first-layer dictionary, `M×d`.
    pub dict: ParamId,
    pub adr: AdrParams,
    pub conv: Conv3x3,
}

/// Categorization captured during a forward pass, per block and layer.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    pub partitions: Vec<Vec<CategoryPartition>>,
    /// Dictionary layer index after each block's last refinement.
    pub final_dict_index: Vec<usize>,
    pub refinements: usize,
}

impl ForwardTrace {
    pub fn labels(&self, block: usize, layer: usize) -> Option<&[usize]> {
        self.partitions
            .get(block)
            .and_then(|b| b.get(layer))
            .map(|p| p.labels.as_slice())
    }
}

/// Context shared by every layer of one forward pass.
pub struct LayerCtx {
    pub h: usize,
    pub w: usize,
    pub mode: Mode,
    pub seed: u64,
    pub group_size: usize,
}

/// One transformer layer: pre-norm, the three attention branches summed onto
/// the residual, an FFN, then refinement of the dictionary for the next layer.
pub fn transformer_layer(
    tape: &mut Tape,
    p: &Bound,
    params: &TransformerLayerParams,
    adr: &AdrParams,
    x: Var,
    dict: &TokenDictionary,
    ctx: &LayerCtx,
) -> Result<(Var, TokenDictionary, CategoryPartition)> {
    let h = params.norm1.forward(tape, p, x)?;
    let (t, attn) = tdca(tape, p, &params.tdca, h, dict.tokens)?;
    let attn_values = tape.value(attn).clone();
    let (a, part) = ac_msa(
        tape,
        p,
        &params.acmsa,
        h,
        &attn_values,
        ctx.group_size,
        ctx.mode,
        ctx.seed,
    )?;
    let wm = window_msa(tape, p, &params.wmsa, h, ctx.h, ctx.w)?;
    let x1 = tape.add(x, t)?;
    let x1 = tape.add(x1, a)?;
    let x1 = tape.add(x1, wm)?;
    let hn = params.norm2.forward(tape, p, x1)?;
    let f = params.fc1.forward(tape, p, hn)?;
    let f = tape.gelu(f);
    let f = params.fc2.forward(tape, p, f)?;
    let out = tape.add(x1, f)?;
    let next = refine(tape, p, dict, attn, out, adr)?;
    Ok((out, next, part))
}

#[derive(Clone, Debug)]
pub struct AtdModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub shallow: Conv3x3,
    pub blocks: Vec<AtdBlockParams>,
    pub tail: Conv3x3,
}

impl fmt::Display for AtdModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "AtdModel(d={}, {}x{} layers, M={}, x{}, {} params)",
            self.config.dim,
            self.config.blocks,
            self.config.layers_per_block,
            self.config.dict_size,
            self.config.scale,
            self.count_params()
        )
    }
}

impl AtdModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shallow = Conv3x3::new(&mut store, &mut rng, "shallow", 3, c.dim);
        let mut blocks = Vec::with_capacity(c.blocks);
        for b in 0..c.blocks {
            let name = format!("blocks.{b}");
            let init = init_dictionary(c.dict_size, c.dim, derive_seed(seed, &[0xD1C7, b as u64]));
            let dict = store.add(format!("{name}.dictionary"), init.tokens);
            let mut layers = Vec::with_capacity(c.layers_per_block);
            for l in 0..c.layers_per_block {
                let ln = format!("{name}.layers.{l}");
                let shift = if l % 2 == 1 { c.window / 2 } else { 0 };
                layers.push(TransformerLayerParams {
                    norm1: LayerNorm::new(&mut store, &format!("{ln}.norm1"), c.dim),
                    wmsa: WindowAttentionParams::new(
                        &mut store,
                        &mut rng,
                        &format!("{ln}.wmsa"),
                        c.dim,
                        c.heads,
                        c.window,
                        shift,
                        c.rel_pos_bias,
                    )?,
                    tdca: TdcaParams::new(&mut store, &mut rng, &format!("{ln}.tdca"), c.dim, c.inner_dim)?,
                    acmsa: AcMsaParams::new(&mut store, &mut rng, &format!("{ln}.acmsa"), c.dim, c.heads)?,
                    norm2: LayerNorm::new(&mut store, &format!("{ln}.norm2"), c.dim),
                    fc1: Linear::new(&mut store, &mut rng, &format!("{ln}.ffn.fc1"), c.dim, c.ffn_hidden(), true),
                    fc2: Linear::new(&mut store, &mut rng, &format!("{ln}.ffn.fc2"), c.ffn_hidden(), c.dim, true),
                });
            }
            let adr = AdrParams::new(&mut store, &format!("{name}.adr"), c.dict_size, c.adr_norm_affine);
            let conv = Conv3x3::new(&mut store, &mut rng, &format!("{name}.conv"), c.dim, c.dim);
            blocks.push(AtdBlockParams {
                layers,
                dict,
                adr,
                conv,
            });
        }
        let tail = Conv3x3::new(&mut store, &mut rng, "tail", c.dim, 3 * c.scale * c.scale);
        Ok(Self {
            config,
            store,
            shallow,
            blocks,
            tail,
        })
    }

    /// Exact number of learnable scalars.
    pub fn count_params(&self) -> usize {
        self.store.count_scalars()
    }

    /// Every `tau` parameter (one per layer).
    pub fn tau_ids(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| b.layers.iter().map(|l| l.tdca.tau))
            .collect()
    }

    /// Runs one block on `x[N×d]`: layers with the dictionary chain, trailing
    /// conv, block residual.
    #[allow(clippy::too_many_arguments)]
    pub fn atd_block(
        &self,
        tape: &mut Tape,
        p: &Bound,
        block: usize,
        x: Var,
        h: usize,
        w: usize,
        mode: Mode,
        seed: u64,
        trace: Option<&mut ForwardTrace>,
    ) -> Result<Var> {
        let bp = &self.blocks[block];
        let mut dict = TokenDictionary {
            tokens: p.var(bp.dict),
            layer_index: 1,
            per_sample: false,
        };
        let mut feat = x;
        let mut parts = Vec::with_capacity(bp.layers.len());
        let mut refinements = 0;
        for (l, lp) in bp.layers.iter().enumerate() {
            let ctx = LayerCtx {
                h,
                w,
                mode,
                seed: derive_seed(seed, &[block as u64, l as u64]),
                group_size: self.config.group_size,
            };
            let (out, next, part) = transformer_layer(tape, p, lp, &bp.adr, feat, &dict, &ctx)?;
            feat = out;
            dict = next;
            refinements += 1;
            parts.push(part);
        }
        let img = tape.transpose(feat)?;
        let img = tape.reshape(img, &[self.config.dim, h, w])?;
        let conv = bp.conv.forward(tape, p, img)?;
        let conv = tape.reshape(conv, &[self.config.dim, h * w])?;
        let conv = tape.transpose(conv)?;
        if let Some(t) = trace {
            t.partitions.push(parts);
            t.final_dict_index.push(dict.layer_index);
            t.refinements += refinements;
        }
        tape.add(x, conv)
    }

    /// `img[3×H×W]` → `[3×sH×sW]`, unclamped.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        img: Var,
        mode: Mode,
        seed: u64,
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<Var> {
        let (c, h, w) = tape.value(img).dims3()?;
        if c != 3 {
            return Err(contract(format!("expected a 3-channel image, got {c} channels")));
        }
        let d = self.config.dim;
        let shallow = self.shallow.forward(tape, p, img)?;
        let flat = tape.reshape(shallow, &[d, h * w])?;
        let mut x = tape.transpose(flat)?;
        for b in 0..self.blocks.len() {
            x = self.atd_block(tape, p, b, x, h, w, mode, seed, trace.as_deref_mut())?;
        }
        let body = tape.transpose(x)?;
        let mut body = tape.reshape(body, &[d, h, w])?;
        if self.config.global_residual {
            body = tape.add(body, shallow)?;
        }
        let up = self.tail.forward(tape, p, body)?;
        tape.pixel_shuffle(up, self.config.scale)
    }

    /// Eval-mode forward with the output clamped to `[0, 1]`.
    pub fn infer(&self, img: &Tensor) -> Result<Tensor> {
        Ok(self.infer_traced(img)?.0)
    }

    pub fn infer_traced(&self, img: &Tensor) -> Result<(Tensor, ForwardTrace)> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let x = tape.constant(img.clone());
        let mut trace = ForwardTrace::default();
        let y = self.forward(&mut tape, &p, x, Mode::Eval, 0, Some(&mut trace))?;
        let mut out = tape.value(y).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok((out, trace))
    }
}
