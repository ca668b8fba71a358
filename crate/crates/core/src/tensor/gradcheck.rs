use super::{Tape, Tensor, Var};
use crate::error::{contract, Result};

/// Differences smaller than this are measured absolutely rather than relatively.
const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max_i |a_i − n_i| / max(|a_i|, |n_i|, 1e-3)` over the probed entries.
    pub max_rel_error: f64,
    /// Flat index of the entry attaining `max_rel_error`.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub tol: f64,
    pub passed: bool,
}

/// Compares the tape gradient of scalar `f(x)` against central differences
/// over every entry of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, &all, h, tol)
}

/// As [`grad_check`], restricted to the flat entries in `indices`.
pub fn grad_check_at<F>(f: F, x: &Tensor, indices: &[usize], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(contract(format!("finite-difference step {h} outside (0, 1e-2]")));
    }
    let eval = |t: Tensor, requires_grad: bool| -> Result<(Tape, Var, Var)> {
        let mut tape = Tape::new();
        let xv = tape.leaf(t.with_requires_grad(requires_grad));
        let y = f(&mut tape, xv)?;
        if tape.value(y).numel() != 1 {
            return Err(contract("grad_check function must be scalar-valued"));
        }
        Ok((tape, xv, y))
    };

    let (tape, xv, y) = eval(x.clone(), true)?;
    let grads = tape.backward(y)?;
    let full = grads.get(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut analytic = Vec::with_capacity(indices.len());
    let mut numeric = Vec::with_capacity(indices.len());
    let (mut worst, mut worst_index) = (0.0f64, 0usize);
    for &i in indices {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let (tp, _, yp) = eval(plus, false)?;
        let (tm, _, ym) = eval(minus, false)?;
        let n = (tp.value(yp).data()[0] - tm.value(ym).data()[0]) / (2.0 * h);
        let a = full[i];
        let err = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
        if err > worst || (err.is_nan() && !worst.is_nan()) {
            worst = err;
            worst_index = i;
        }
        analytic.push(a);
        numeric.push(n);
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        worst_index,
        analytic,
        numeric,
        tol,
        passed: worst < tol,
    })
}
