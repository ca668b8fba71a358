//! Per-block token dictionaries and their layer-by-layer refinement.
//!
//! Only the first layer of a block owns a learnable dictionary. Every later
//! layer receives a dictionary rebuilt from the previous layer's output by a
//! reversed attention: each dictionary token pools the image tokens that
//! attended to it, and the pooled result is blended with the old token.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Result};
use crate::nn::{normal, Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var, LAYER_NORM_EPS};

/// Standard deviation of the initial dictionary tokens.
pub const DICT_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct TokenDictionary<T = Var> {
    /// `M×d` tokens.
    pub tokens: T,
    /// 1 for the learnable dictionary, `l + 1` after `l` refinements.
    pub layer_index: usize,
    /// True once refined against an input image.
    pub per_sample: bool,
}

impl TokenDictionary<Tensor> {
    pub fn on_tape(self, tape: &mut Tape) -> TokenDictionary<Var> {
        TokenDictionary {
            tokens: tape.leaf(self.tokens),
            layer_index: self.layer_index,
            per_sample: self.per_sample,
        }
    }
}

/// Fresh `M×d` dictionary with i.i.d. normal(0, 0.02²) tokens.
pub fn init_dictionary(m: usize, d: usize, seed: u64) -> TokenDictionary<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TokenDictionary {
        tokens: normal(&mut rng, vec![m.max(1), d.max(1)], DICT_INIT_STD),
        layer_index: 1,
        per_sample: false,
    }
}

/// Blend weight σ (through a sigmoid) and the affine of the attention-map
/// normalization. One set per block.
#[derive(Clone, Debug)]
pub struct AdrParams {
    /// Unconstrained logit; σ = sigmoid(logit), initialized to σ = 0.5.
    pub sigma_logit: ParamId,
    /// Per-dictionary-token `(gamma, beta)` of the normalization, if enabled.
    pub norm: Option<(ParamId, ParamId)>,
}

impl AdrParams {
    pub fn new(store: &mut ParamStore, name: &str, dict_size: usize, affine: bool) -> Self {
        let sigma_logit = store.add(format!("{name}.sigma"), Tensor::scalar(0.0));
        let norm = affine.then(|| {
            (
                store.add(format!("{name}.norm.weight"), Tensor::ones(vec![dict_size])),
                store.add(format!("{name}.norm.bias"), Tensor::zeros(vec![dict_size])),
            )
        });
        Self { sigma_logit, norm }
    }
}

/// Refines `dict` from the layer's attention map `attn[N×M]` and output
/// features `x_next[N×d]`.
pub fn refine(
    tape: &mut Tape,
    p: &Bound,
    dict: &TokenDictionary,
    attn: Var,
    x_next: Var,
    params: &AdrParams,
) -> Result<TokenDictionary> {
    let logit = p.var(params.sigma_logit);
    let sigma = tape.sigmoid(logit);
    let norm = params.norm.map(|(g, b)| (p.var(g), p.var(b)));
    refine_with(tape, dict, attn, x_next, sigma, norm)
}

/// [`refine`] with an explicit one-element blend weight `sigma` in `[0, 1]`.
///
/// `D̂ = softmax_N(norm(attnᵀ))·x_next`, then `σ·D̂ + (1−σ)·D`.
pub fn refine_with(
    tape: &mut Tape,
    dict: &TokenDictionary,
    attn: Var,
    x_next: Var,
    sigma: Var,
    norm: Option<(Var, Var)>,
) -> Result<TokenDictionary> {
    let (n, m) = tape.value(attn).dims2()?;
    let (n2, d) = tape.value(x_next).dims2()?;
    let (m2, d2) = tape.value(dict.tokens).dims2()?;
    if n != n2 {
        return Err(dim_err("refine attn/x_next", tape.shape(attn), tape.shape(x_next)));
    }
    if m != m2 || d != d2 {
        return Err(dim_err("refine dict", tape.shape(dict.tokens), &[m, d]));
    }
    let at = tape.transpose(attn)?;
    let mut z = tape.standardize_rows(at, LAYER_NORM_EPS)?;
    if let Some((g, b)) = norm {
        z = tape.row_affine(z, g, b)?;
    }
    let weights = tape.softmax(z);
    let pooled = tape.matmul(weights, x_next)?;
    let tokens = tape.lerp(pooled, dict.tokens, sigma)?;
    Ok(TokenDictionary {
        tokens,
        layer_index: dict.layer_index + 1,
        per_sample: true,
    })
}
