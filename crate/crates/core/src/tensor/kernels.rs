//! Raw slice kernels shared by the forward ops and their adjoints.
//!
//! Every kernel accumulates into its output (`c += ...`) and uses a fixed
//! summation order, so results are bit-reproducible.

/// `c[n×m] += a[n×k] · b[k×m]`
///
/// Rows of `c` are updated four at a time so each row of `b` is loaded once
/// per block. Every output still sums over `k` in ascending order.
pub fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    debug_assert!(a.len() >= n * k && b.len() >= k * m && c.len() >= n * m);
    let blocks = n / 4;
    for blk in 0..blocks {
        let i = blk * 4;
        let (c0, rest) = c[i * m..(i + 4) * m].split_at_mut(m);
        let (c1, rest) = rest.split_at_mut(m);
        let (c2, c3) = rest.split_at_mut(m);
        for p in 0..k {
            let a0 = a[i * k + p];
            let a1 = a[(i + 1) * k + p];
            let a2 = a[(i + 2) * k + p];
            let a3 = a[(i + 3) * k + p];
            if a0 == 0.0 && a1 == 0.0 && a2 == 0.0 && a3 == 0.0 {
                continue;
            }
            let b_row = &b[p * m..(p + 1) * m];
            axpy4(b_row, [a0, a1, a2, a3], c0, c1, c2, c3);
        }
    }
    for i in blocks * 4..n {
        let c_row = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            axpy(aip, &b[p * m..(p + 1) * m], c_row);
        }
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline]
fn axpy4(x: &[f64], a: [f64; 4], y0: &mut [f64], y1: &mut [f64], y2: &mut [f64], y3: &mut [f64]) {
    let m = x.len();
    let (y0, y1, y2, y3) = (&mut y0[..m], &mut y1[..m], &mut y2[..m], &mut y3[..m]);
    for j in 0..m {
        let xv = x[j];
        y0[j] += a[0] * xv;
        y1[j] += a[1] * xv;
        y2[j] += a[2] * xv;
        y3[j] += a[3] * xv;
    }
}

/// `c[n×m] += a[n×k] · b[m×k]ᵀ`, via a transposed copy of `b`.
pub fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    debug_assert!(a.len() >= n * k && b.len() >= m * k && c.len() >= n * m);
    let bt = transpose(&b[..m * k], m, k);
    gemm_nn(a, &bt, c, n, k, m);
}

/// `c[n×m] += a[k×n]ᵀ · b[k×m]`
pub fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    debug_assert!(a.len() >= k * n && b.len() >= k * m && c.len() >= n * m);
    let blocks = n / 4;
    for p in 0..k {
        let a_row = &a[p * n..(p + 1) * n];
        let b_row = &b[p * m..(p + 1) * m];
        for blk in 0..blocks {
            let i = blk * 4;
            let av = [a_row[i], a_row[i + 1], a_row[i + 2], a_row[i + 3]];
            if av == [0.0; 4] {
                continue;
            }
            let (c0, rest) = c[i * m..(i + 4) * m].split_at_mut(m);
            let (c1, rest) = rest.split_at_mut(m);
            let (c2, c3) = rest.split_at_mut(m);
            axpy4(b_row, av, c0, c1, c2, c3);
        }
        for i in blocks * 4..n {
            if a_row[i] != 0.0 {
                axpy(a_row[i], b_row, &mut c[i * m..(i + 1) * m]);
            }
        }
    }
}

/// Dot product with four independent accumulators.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let len = a.len().min(b.len());
    let (a, b) = (&a[..len], &b[..len]);
    let mut acc = [0.0f64; 4];
    let chunks = len / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..len {
        s += a[i] * b[i];
    }
    s
}

/// In-place transpose copy: `out[j×n + i] = a[i×m + j]` for `a` of shape `n×m`.
pub fn transpose(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

/// Unfolds a `C×H×W` image into `(C·9)×(H·W)` columns for a zero-padded 3×3 kernel.
pub fn im2col3(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; c * 9 * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..((ci * 9) + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    // dst[x] = src[x + kx - 1]
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`]: folds column gradients back onto the image.
pub fn col2im3(cols: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut x = vec![0.0; c * hw];
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..((ci * 9) + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
    x
}

/// Row-wise softmax over `cols` entries, with an optional keep-mask.
/// Masked-out entries get probability zero. Each row must keep at least one entry.
pub fn softmax_rows(x: &mut [f64], cols: usize, mask: Option<&[bool]>) {
    for (r, row) in x.chunks_mut(cols).enumerate() {
        let keep = mask.map(|m| &m[r * cols..(r + 1) * cols]);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if keep.is_none_or(|k| k[j]) && v > max {
                max = v;
            }
        }
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if keep.is_none_or(|k| k[j]) {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Adjoint of a row softmax: `dx = y ⊙ (dy − Σ dy⊙y)`, accumulated into `dx`.
pub fn softmax_rows_backward(y: &[f64], dy: &[f64], dx: &mut [f64], cols: usize) {
    for ((yr, dyr), dxr) in y.chunks(cols).zip(dy.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let s = dot(yr, dyr);
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d += yv * (g - s);
        }
    }
}
