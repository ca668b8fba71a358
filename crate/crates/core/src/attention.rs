//! Shifted-window multi-head self-attention and token-dictionary
//! cross-attention.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{contract, dim_err, Result};
use crate::nn::{trunc_normal, Bound, Linear, ParamId, ParamStore};
use crate::tensor::{AttnLayout, Tape, Tensor, Var, COSINE_EPS};

pub const TAU_INIT: f64 = 0.5;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 2.0;

#[derive(Clone, Debug)]
pub struct WindowAttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    /// `(2w−1)² × heads` additive bias table.
    pub rel_bias: Option<ParamId>,
    pub heads: usize,
    pub window: usize,
    pub shift: usize,
}

impl WindowAttentionParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        shift: usize,
        rel_bias: bool,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(contract(format!("dim {dim} not divisible by {heads} heads")));
        }
        if window == 0 || shift >= window {
            return Err(contract(format!("shift {shift} must be below window {window}")));
        }
        let q = Linear::new(store, rng, &format!("{name}.q"), dim, dim, true);
        let k = Linear::new(store, rng, &format!("{name}.k"), dim, dim, true);
        let v = Linear::new(store, rng, &format!("{name}.v"), dim, dim, true);
        let o = Linear::new(store, rng, &format!("{name}.proj"), dim, dim, true);
        let span = 2 * window - 1;
        let rel_bias = rel_bias.then(|| {
            store.add(
                format!("{name}.relative_position_bias"),
                trunc_normal(rng, vec![span * span, heads], 0.02),
            )
        });
        Ok(Self {
            q,
            k,
            v,
            o,
            rel_bias,
            heads,
            window,
            shift,
        })
    }
}

/// Index maps taking an `H×W` token grid into reflect-padded, cyclically
/// shifted, window-ordered rows and back.
#[derive(Clone, Debug)]
pub struct WindowLayout {
    pub padded_h: usize,
    pub padded_w: usize,
    /// For each window slot, the source token.
    pub gather: Arc<[usize]>,
    /// For each source token, the slot holding its own (non-padding) copy.
    pub scatter: Arc<[usize]>,
    pub attn: Arc<AttnLayout>,
}

/// Mirror index for reflect padding of any width.
pub fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Relative-position lookup for every query/key pair inside a window.
pub fn relative_position_index(window: usize) -> Vec<u32> {
    let l = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(l * l);
    for i in 0..l {
        let (iy, ix) = (i / window, i % window);
        for j in 0..l {
            let (jy, jx) = (j / window, j % window);
            let dy = iy + window - 1 - jy;
            let dx = ix + window - 1 - jx;
            idx.push((dy * span + dx) as u32);
        }
    }
    idx
}

pub fn window_layout(
    h: usize,
    w: usize,
    window: usize,
    shift: usize,
    heads: usize,
    scale: f64,
    rel_bias: bool,
) -> WindowLayout {
    let hp = h.div_ceil(window) * window;
    let wp = w.div_ceil(window) * window;
    let (nwy, nwx) = (hp / window, wp / window);
    let l = window * window;
    let groups = nwy * nwx;

    let mut gather = Vec::with_capacity(groups * l);
    // region label of every slot in rolled coordinates, for the shift mask
    let mut region = Vec::with_capacity(groups * l);
    let band = |p: usize, n: usize| {
        if p < n - window {
            0
        } else if p < n - shift {
            1
        } else {
            2
        }
    };
    for wy in 0..nwy {
        for wx in 0..nwx {
            for iy in 0..window {
                for ix in 0..window {
                    let (py, px) = (wy * window + iy, wx * window + ix);
                    // rolled[p] = padded[(p + shift) mod n]
                    let ry = (py + shift) % hp;
                    let rx = (px + shift) % wp;
                    gather.push(reflect_index(ry, h) * w + reflect_index(rx, w));
                    region.push(band(py, hp) * 3 + band(px, wp));
                }
            }
        }
    }

    let mut scatter = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            let py = (y + hp - shift) % hp;
            let px = (x + wp - shift) % wp;
            let win = (py / window) * nwx + px / window;
            scatter[y * w + x] = win * l + (py % window) * window + px % window;
        }
    }

    let mask = (shift > 0).then(|| {
        let mut m = Vec::with_capacity(groups * l * l);
        for g in 0..groups {
            let r = &region[g * l..(g + 1) * l];
            for i in 0..l {
                for j in 0..l {
                    m.push(r[i] == r[j]);
                }
            }
        }
        m
    });

    WindowLayout {
        padded_h: hp,
        padded_w: wp,
        gather: gather.into(),
        scatter: scatter.into(),
        attn: Arc::new(AttnLayout {
            groups,
            group_len: l,
            heads,
            scale,
            rel_index: rel_bias.then(|| relative_position_index(window)),
            mask,
        }),
    }
}

/// Multi-head self-attention inside (optionally shifted) `w×w` windows of an
/// `H×W` token grid. Grids not divisible by `w` are reflect-padded and
/// cropped back.
pub fn window_msa(
    tape: &mut Tape,
    p: &Bound,
    params: &WindowAttentionParams,
    x: Var,
    h: usize,
    w: usize,
) -> Result<Var> {
    let (n, d) = tape.value(x).dims2()?;
    if n != h * w {
        return Err(contract(format!("window_msa got {n} tokens for a {h}×{w} grid")));
    }
    let scale = 1.0 / ((d / params.heads) as f64).sqrt();
    let layout = window_layout(h, w, params.window, params.shift, params.heads, scale, params.rel_bias.is_some());

    let q = params.q.forward(tape, p, x)?;
    let k = params.k.forward(tape, p, x)?;
    let v = params.v.forward(tape, p, x)?;
    let qg = tape.gather_rows(q, layout.gather.clone())?;
    let kg = tape.gather_rows(k, layout.gather.clone())?;
    let vg = tape.gather_rows(v, layout.gather.clone())?;
    let bias = params.rel_bias.map(|b| p.var(b));
    let att = tape.attention(qg, kg, vg, bias, layout.attn.clone())?;
    let back = tape.gather_rows(att, layout.scatter.clone())?;
    params.o.forward(tape, p, back)
}

#[derive(Clone, Debug)]
pub struct TdcaParams {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    /// One-element temperature, kept in `[TAU_MIN, TAU_MAX]` by the trainer.
    pub tau: ParamId,
    pub inner_dim: usize,
}

impl TdcaParams {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, inner_dim: usize) -> Result<Self> {
        if inner_dim == 0 {
            return Err(contract("TDCA inner width must be positive"));
        }
        let wq = Linear::new(store, rng, &format!("{name}.wq"), dim, inner_dim, true);
        let wk = Linear::new(store, rng, &format!("{name}.wk"), dim, inner_dim, true);
        let wv = Linear::new(store, rng, &format!("{name}.wv"), dim, dim, true);
        let tau = store.add(format!("{name}.tau"), Tensor::scalar(TAU_INIT));
        Ok(Self {
            wq,
            wk,
            wv,
            tau,
            inner_dim,
        })
    }
}

/// Token-dictionary cross-attention: image tokens query an `M×d`
/// dictionary through cosine similarity sharpened by `τ`.
///
/// Returns `(out[N×d], attn[N×M])`; the attention map feeds dictionary
/// refinement and categorization.
pub fn tdca(tape: &mut Tape, p: &Bound, params: &TdcaParams, x: Var, dict: Var) -> Result<(Var, Var)> {
    let (_, dx) = tape.value(x).dims2()?;
    let (_, dd) = tape.value(dict).dims2()?;
    if dx != dd || dx != params.wq.in_dim {
        return Err(dim_err("tdca", tape.shape(x), tape.shape(dict)));
    }
    let qx = params.wq.forward(tape, p, x)?;
    let kd = params.wk.forward(tape, p, dict)?;
    let vd = params.wv.forward(tape, p, dict)?;
    let sim = tape.cosine_sim(qx, kd, COSINE_EPS)?;
    let logits = tape.div_scalar(sim, p.var(params.tau))?;
    let attn = tape.softmax(logits);
    let out = tape.matmul(attn, vd)?;
    Ok((out, attn))
}
