//! Category-based self-attention.
//!
//! Each token is labelled with the dictionary token it attends to most. Tokens
//! are sorted by label, the sorted sequence is cut into equal groups, and
//! ordinary multi-head attention runs inside every group before the results
//! are scattered back to their original positions.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, dim_err, Result};
use crate::nn::{Bound, Linear, ParamStore};
use crate::tensor::{AttnLayout, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Intra-category order is a seeded shuffle.
    Train,
    /// Intra-category order is ascending token index.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoryPartition {
    /// Category label of each token, in `[0, M)`.
    pub labels: Vec<usize>,
    /// Token index → position in the label-sorted sequence.
    pub permutation: Vec<usize>,
    /// Slot → token, `group_count · group_size` long; the trailing
    /// `pad_count` slots repeat real tokens of the final group.
    pub slots: Vec<usize>,
    pub group_count: usize,
    pub group_size: usize,
    pub pad_count: usize,
}

impl CategoryPartition {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Tokens of group `g`, pads included.
    pub fn group(&self, g: usize) -> &[usize] {
        &self.slots[g * self.group_size..(g + 1) * self.group_size]
    }
}

/// Row-wise argmax of an `N×M` attention map; ties go to the lowest index.
pub fn categorize(attn: &Tensor) -> Result<Vec<usize>> {
    let (_, m) = attn.dims2()?;
    Ok(attn
        .data()
        .chunks(m)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect())
}

/// Sorts tokens by label and cuts them into groups of `n_s`.
///
/// The group size is `min(n_s, N)`. When it does not divide `N` the final
/// group is filled up by cycling backwards through its own real tokens.
pub fn sub_categorize(labels: &[usize], n_s: usize, mode: Mode, seed: u64) -> Result<CategoryPartition> {
    if n_s == 0 {
        return Err(contract("sub-category size must be at least 1"));
    }
    let n = labels.len();
    if n == 0 {
        return Err(contract("cannot partition zero tokens"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if mode == Mode::Train {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    // stable: keeps the shuffled (or ascending) order inside each label
    order.sort_by_key(|&t| labels[t]);

    let mut permutation = vec![0; n];
    for (pos, &t) in order.iter().enumerate() {
        permutation[t] = pos;
    }

    let size = n_s.min(n);
    let group_count = n.div_ceil(size);
    let pad_count = group_count * size - n;
    let mut slots = order;
    if pad_count > 0 {
        let last_start = (group_count - 1) * size;
        let real = n - last_start;
        for k in 0..pad_count {
            slots.push(slots[last_start + real - 1 - (k % real)]);
        }
    }
    Ok(CategoryPartition {
        labels: labels.to_vec(),
        permutation,
        slots,
        group_count,
        group_size: size,
        pad_count,
    })
}

/// Gathers token rows into partition slot order.
pub fn gather_groups(tape: &mut Tape, x: Var, part: &CategoryPartition) -> Result<Var> {
    let (n, _) = tape.value(x).dims2()?;
    if n != part.len() {
        return Err(dim_err("gather_groups", tape.shape(x), &[part.len()]));
    }
    tape.gather_rows(x, part.slots.clone().into())
}

/// Inverse of [`gather_groups`]: every token reads back its own slot and pad
/// rows are dropped.
pub fn uncategorize(tape: &mut Tape, grouped: Var, part: &CategoryPartition) -> Result<Var> {
    let (rows, _) = tape.value(grouped).dims2()?;
    if rows != part.group_count * part.group_size {
        return Err(dim_err(
            "uncategorize",
            tape.shape(grouped),
            &[part.group_count * part.group_size],
        ));
    }
    tape.gather_rows(grouped, part.permutation.clone().into())
}

/// Projections of the category-attention branch (no output projection and no
/// positional bias).
#[derive(Clone, Debug)]
pub struct AcMsaParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub heads: usize,
}

impl AcMsaParams {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(contract(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim, true),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim, true),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim, true),
            heads,
        })
    }
}

/// Self-attention within each sub-category of `x[N×d]`, categories taken
/// from `attn[N×M]`. The partition is a constant of the graph.
#[allow(clippy::too_many_arguments)]
pub fn ac_msa(
    tape: &mut Tape,
    p: &Bound,
    params: &AcMsaParams,
    x: Var,
    attn: &Tensor,
    n_s: usize,
    mode: Mode,
    seed: u64,
) -> Result<(Var, CategoryPartition)> {
    let (n, d) = tape.value(x).dims2()?;
    let (na, _) = attn.dims2()?;
    if n != na {
        return Err(contract(format!("ac_msa: {n} tokens but attention map has {na} rows")));
    }
    let part = sub_categorize(&categorize(attn)?, n_s, mode, seed)?;
    let q = params.q.forward(tape, p, x)?;
    let k = params.k.forward(tape, p, x)?;
    let v = params.v.forward(tape, p, x)?;
    let qg = gather_groups(tape, q, &part)?;
    let kg = gather_groups(tape, k, &part)?;
    let vg = gather_groups(tape, v, &part)?;
    let layout = Arc::new(AttnLayout {
        groups: part.group_count,
        group_len: part.group_size,
        heads: params.heads,
        scale: 1.0 / ((d / params.heads) as f64).sqrt(),
        rel_index: None,
        mask: None,
    });
    let out = tape.attention(qg, kg, vg, None, layout)?;
    let back = uncategorize(tape, out, &part)?;
    Ok((back, part))
}
