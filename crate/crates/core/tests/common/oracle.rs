//! Straightforward reference implementations. They share no code with the
//! library beyond reading parameter tensors, and favour directness over speed.

use atd_sr::attention::WindowAttentionParams;
use atd_sr::categorize::AcMsaParams;
use atd_sr::nn::{Linear, ParamStore};
use atd_sr::Tensor;

/// `x[n×din]·W + b`, one dot product at a time.
pub fn linear(store: &ParamStore, l: &Linear, x: &[f64], n: usize) -> Vec<f64> {
    let w = store.get(l.weight).data();
    let b = l.bias.map(|b| store.get(b).data().to_vec());
    let mut out = vec![0.0; n * l.out_dim];
    for r in 0..n {
        for o in 0..l.out_dim {
            let mut s = b.as_ref().map_or(0.0, |b| b[o]);
            for i in 0..l.in_dim {
                s += x[r * l.in_dim + i] * w[i * l.out_dim + o];
            }
            out[r * l.out_dim + o] = s;
        }
    }
    out
}

/// Softmax over the entries with `keep[j]`, zero elsewhere.
fn masked_softmax(logits: &[f64], keep: &[bool]) -> Vec<f64> {
    let m = logits
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits
        .iter()
        .zip(keep)
        .map(|(&v, &k)| if k { (v - m).exp() } else { 0.0 })
        .collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mirror an out-of-range coordinate back into `[0, n)`, folding repeatedly.
fn mirror(i: i64, n: i64) -> usize {
    if n == 1 {
        return 0;
    }
    let mut j = i;
    loop {
        if j < 0 {
            j = -j;
        } else if j >= n {
            j = 2 * (n - 1) - j;
        } else {
            return j as usize;
        }
    }
}

/// Brute-force shifted-window attention on an `h×w` grid of `x[N×d]` tokens.
///
/// Follows the textbook recipe step by step: reflect-pad to a multiple of the
/// window, roll by `−shift`, split into windows, label the rolled grid with
/// the three-by-three slice regions and forbid cross-region pairs, add the
/// relative-position bias, attend per head, roll back, crop, project.
pub fn window_msa(store: &ParamStore, p: &WindowAttentionParams, x: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    assert_eq!(n, h * w);
    let win = p.window;
    let s = p.shift;
    let heads = p.heads;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let q = linear(store, &p.q, x.data(), n);
    let k = linear(store, &p.k, x.data(), n);
    let v = linear(store, &p.v, x.data(), n);

    let hp = h.div_ceil(win) * win;
    let wp = w.div_ceil(win) * win;
    // rolled grid position → source token
    let src = |ry: usize, rx: usize| -> usize {
        let py = (ry + s) % hp;
        let px = (rx + s) % wp;
        mirror(py as i64, h as i64) * w + mirror(px as i64, w as i64)
    };

    // region ids on the rolled grid, built from explicit slices
    let mut region = vec![0usize; hp * wp];
    if s > 0 {
        let hs = [(0, hp - win), (hp - win, hp - s), (hp - s, hp)];
        let ws = [(0, wp - win), (wp - win, wp - s), (wp - s, wp)];
        let mut cnt = 0;
        for &(y0, y1) in &hs {
            for &(x0, x1) in &ws {
                for y in y0..y1 {
                    for xx in x0..x1 {
                        region[y * wp + xx] = cnt;
                    }
                }
                cnt += 1;
            }
        }
    }

    let span = 2 * win - 1;
    let bias = p.rel_bias.map(|b| store.get(b).data().to_vec());
    let mut rolled_out = vec![0.0; hp * wp * d];
    for wy in 0..hp / win {
        for wx in 0..wp / win {
            let cells: Vec<(usize, usize)> = (0..win * win)
                .map(|i| (wy * win + i / win, wx * win + i % win))
                .collect();
            for hh in 0..heads {
                for &(yi, xi) in &cells {
                    let ti = src(yi, xi);
                    let mut logits = Vec::with_capacity(cells.len());
                    let mut keep = Vec::with_capacity(cells.len());
                    for &(yj, xj) in &cells {
                        let tj = src(yj, xj);
                        let mut dotp = 0.0;
                        for c in 0..hd {
                            dotp += q[ti * d + hh * hd + c] * k[tj * d + hh * hd + c];
                        }
                        let mut logit = dotp * scale;
                        if let Some(b) = &bias {
                            let dy = yi % win + win - 1 - yj % win;
                            let dx = xi % win + win - 1 - xj % win;
                            logit += b[(dy * span + dx) * heads + hh];
                        }
                        logits.push(logit);
                        keep.push(region[yi * wp + xi] == region[yj * wp + xj]);
                    }
                    let probs = masked_softmax(&logits, &keep);
                    for c in 0..hd {
                        let mut acc = 0.0;
                        for (j, &(yj, xj)) in cells.iter().enumerate() {
                            acc += probs[j] * v[src(yj, xj) * d + hh * hd + c];
                        }
                        rolled_out[(yi * wp + xi) * d + hh * hd + c] = acc;
                    }
                }
            }
        }
    }

    // undo the roll and crop
    let mut out = vec![0.0; n * d];
    for y in 0..h {
        for xx in 0..w {
            let ry = (y + hp - s) % hp;
            let rx = (xx + wp - s) % wp;
            out[(y * w + xx) * d..(y * w + xx + 1) * d]
                .copy_from_slice(&rolled_out[(ry * wp + rx) * d..(ry * wp + rx + 1) * d]);
        }
    }
    let out = linear(store, &p.o, &out, n);
    Tensor::new(vec![n, d], out).unwrap()
}

/// Eval-mode groups of the sort-and-cut rule, computed by bucketing.
/// Returns `(slots, group_size)`.
pub fn eval_groups(labels: &[usize], n_s: usize) -> (Vec<usize>, usize) {
    let n = labels.len();
    let m = labels.iter().max().map_or(0, |&l| l + 1);
    let mut buckets = vec![Vec::new(); m];
    for (t, &l) in labels.iter().enumerate() {
        buckets[l].push(t);
    }
    let mut slots: Vec<usize> = buckets.concat();
    let size = n_s.min(n);
    let groups = n.div_ceil(size);
    let start = (groups - 1) * size;
    let real: Vec<usize> = slots[start..].to_vec();
    let mut k = 0;
    while slots.len() < groups * size {
        slots.push(real[real.len() - 1 - k % real.len()]);
        k += 1;
    }
    (slots, size)
}

/// Index of the first maximum of each row.
pub fn argmax_rows(attn: &Tensor) -> Vec<usize> {
    let m = attn.shape()[1];
    attn.data()
        .chunks(m)
        .map(|row| {
            let mut best = 0;
            for j in 1..m {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Dense per-group attention for eval-mode category attention.
pub fn ac_msa(store: &ParamStore, p: &AcMsaParams, x: &Tensor, attn: &Tensor, n_s: usize) -> Tensor {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let hd = d / p.heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let q = linear(store, &p.q, x.data(), n);
    let k = linear(store, &p.k, x.data(), n);
    let v = linear(store, &p.v, x.data(), n);
    let (slots, size) = eval_groups(&argmax_rows(attn), n_s);
    let mut out = vec![f64::NAN; n * d];
    let mut done = vec![false; n];
    for group in slots.chunks(size) {
        for &ti in group {
            if done[ti] {
                continue;
            }
            done[ti] = true;
            for hh in 0..p.heads {
                let logits: Vec<f64> = group
                    .iter()
                    .map(|&tj| {
                        (0..hd)
                            .map(|c| q[ti * d + hh * hd + c] * k[tj * d + hh * hd + c])
                            .sum::<f64>()
                            * scale
                    })
                    .collect();
                let probs = masked_softmax(&logits, &vec![true; group.len()]);
                for c in 0..hd {
                    out[ti * d + hh * hd + c] = group
                        .iter()
                        .zip(&probs)
                        .map(|(&tj, pr)| pr * v[tj * d + hh * hd + c])
                        .sum();
                }
            }
        }
    }
    Tensor::new(vec![n, d], out).unwrap()
}

/// Luma from `[0, 1]` RGB in 8-bit units.
pub fn luma(img: &Tensor) -> Vec<f64> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let d = img.data();
    let n = h * w;
    (0..n)
        .map(|i| (65.481 * d[i] + 128.553 * d[n + i] + 24.966 * d[2 * n + i]) + 16.0)
        .collect()
}

/// Planes in 8-bit units after the optional Y conversion and border crop.
fn planes(img: &Tensor, y_only: bool, border: usize) -> (Vec<Vec<f64>>, usize, usize) {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let full: Vec<Vec<f64>> = if y_only {
        vec![luma(img)]
    } else {
        (0..c)
            .map(|ch| img.data()[ch * h * w..(ch + 1) * h * w].iter().map(|v| v * 255.0).collect())
            .collect()
    };
    let (oh, ow) = (h - 2 * border, w - 2 * border);
    let cropped = full
        .iter()
        .map(|p| {
            let mut o = Vec::with_capacity(oh * ow);
            for y in border..h - border {
                for x in border..w - border {
                    o.push(p[y * w + x]);
                }
            }
            o
        })
        .collect();
    (cropped, oh, ow)
}

pub fn psnr(a: &Tensor, b: &Tensor, y_only: bool, border: usize) -> f64 {
    let (pa, _, _) = planes(a, y_only, border);
    let (pb, _, _) = planes(b, y_only, border);
    let mut se = 0.0;
    let mut cnt = 0usize;
    for (x, y) in pa.iter().zip(&pb) {
        for (u, v) in x.iter().zip(y) {
            se += (u - v).powi(2);
            cnt += 1;
        }
    }
    let mse = se / cnt as f64;
    if mse == 0.0 {
        return 100.0;
    }
    (10.0 * (255.0f64.powi(2) / mse).log10()).min(100.0)
}

/// Mean SSIM with a directly evaluated 11×11 Gaussian window (σ = 1.5) over
/// every fully contained position.
pub fn ssim(a: &Tensor, b: &Tensor, y_only: bool, border: usize) -> f64 {
    let (pa, h, w) = planes(a, y_only, border);
    let (pb, _, _) = planes(b, y_only, border);
    let mut win = [[0.0f64; 11]; 11];
    let mut tot = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dy * dy + dx * dx) / 4.5).exp();
            tot += *v;
        }
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let mut sum = 0.0;
    for (x, y) in pa.iter().zip(&pb) {
        let mut acc = 0.0;
        let mut cnt = 0usize;
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let g = win[i][j] / tot;
                        let (u, v) = (x[(y0 + i) * w + x0 + j], y[(y0 + i) * w + x0 + j]);
                        mx += g * u;
                        my += g * v;
                        sxx += g * u * u;
                        syy += g * v * v;
                        sxy += g * u * v;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                acc += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                cnt += 1;
            }
        }
        sum += acc / cnt as f64;
    }
    sum / pa.len() as f64
}

fn keys(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        1.5 * x.powi(3) - 2.5 * x.powi(2) + 1.0
    } else if x < 2.0 {
        -0.5 * x.powi(3) + 2.5 * x.powi(2) - 4.0 * x + 2.0
    } else {
        0.0
    }
}

/// `(source index, weight)` contributions for one output coordinate, with the
/// kernel widened by the shrink factor and edges replicated.
fn contributions(o: usize, n_in: usize, n_out: usize) -> Vec<(usize, f64)> {
    let r = n_out as f64 / n_in as f64;
    let k = r.min(1.0);
    let centre = (o as f64 + 0.5) / r - 0.5;
    let reach = (2.0 / k).ceil() as i64 + 1;
    let base = centre.floor() as i64;
    let mut taps = Vec::new();
    for j in base - reach..=base + reach {
        let wt = k * keys(k * (centre - j as f64));
        if wt != 0.0 {
            taps.push((j.clamp(0, n_in as i64 - 1) as usize, wt));
        }
    }
    let s: f64 = taps.iter().map(|t| t.1).sum();
    taps.into_iter().map(|(j, wt)| (j, wt / s)).collect()
}

/// Bicubic resampling evaluated as a direct 2D weighted sum per output pixel.
pub fn bicubic(img: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let d = img.data();
    let mut out = vec![0.0; c * oh * ow];
    for y in 0..oh {
        let ty = contributions(y, h, oh);
        for x in 0..ow {
            let tx = contributions(x, w, ow);
            for ch in 0..c {
                let mut s = 0.0;
                for &(sy, wy) in &ty {
                    for &(sx, wx) in &tx {
                        s += wy * wx * d[ch * h * w + sy * w + sx];
                    }
                }
                out[ch * oh * ow + y * ow + x] = s;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out).unwrap()
}

/// Plain multi-head attention of every token over every token, without an
/// output projection.
pub fn global_attention(store: &ParamStore, q: &Linear, k: &Linear, v: &Linear, heads: usize, x: &Tensor) -> Vec<f64> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let (q, k, v) = (
        linear(store, q, x.data(), n),
        linear(store, k, x.data(), n),
        linear(store, v, x.data(), n),
    );
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for hh in 0..heads {
            let logits: Vec<f64> = (0..n)
                .map(|j| (0..hd).map(|c| q[i * d + hh * hd + c] * k[j * d + hh * hd + c]).sum::<f64>() * scale)
                .collect();
            let probs = masked_softmax(&logits, &vec![true; n]);
            for c in 0..hd {
                out[i * d + hh * hd + c] = (0..n).map(|j| probs[j] * v[j * d + hh * hd + c]).sum();
            }
        }
    }
    out
}
