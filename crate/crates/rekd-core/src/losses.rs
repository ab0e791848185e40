//! Training losses: dense orientation alignment over histogram maps and the
//! window-based keypoint detection loss, combined as `beta * ori + kpts`.
//!
//! Both losses return their gradients alongside the value; the maps they
//! differentiate (`K`, `O`) are network outputs, so the model's backward
//! pass picks these gradients up directly.

use crate::equivariant::{cyclic_shift, CyclicGroup};
use crate::geometry::{warp_image, warp_image_backward, RotTransform, ValidityMask};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Non-overlapping `n x n` windows tiling a `[H, W]` map; partial border
/// windows are dropped.
#[derive(Clone, Copy, Debug)]
pub struct WindowGrid {
    pub n: usize,
    pub rows: usize,
    pub cols: usize,
}

impl WindowGrid {
    pub fn new(h: usize, w: usize, n: usize) -> Self {
        WindowGrid {
            n,
            rows: h / n,
            cols: w / n,
        }
    }

    pub fn count(&self) -> usize {
        self.rows * self.cols
    }

    /// Top-left corner `(x0, y0)` of window `i` in row-major window order.
    pub fn corner(&self, i: usize) -> (usize, usize) {
        ((i % self.cols) * self.n, (i / self.cols) * self.n)
    }
}

fn softmax_slice<T: Scalar>(vals: &[T], out: &mut [T]) {
    let mut max = T::neg_infinity();
    for &v in vals {
        max = max.max(v);
    }
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(vals) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Softmax over each spatial window of `k`; returns `[count, n, n]`.
pub fn window_softmax<T: Scalar>(k: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    if k.rank() != 2 {
        return Err(Error::ShapeMismatch("window_softmax expects [H, W]".into()));
    }
    let (h, w) = (k.shape()[0], k.shape()[1]);
    let grid = WindowGrid::new(h, w, n);
    let mut out = Tensor::zeros(&[grid.count(), n, n]);
    let mut buf = vec![T::zero(); n * n];
    for i in 0..grid.count() {
        let (x0, y0) = grid.corner(i);
        for v in 0..n {
            for u in 0..n {
                buf[v * n + u] = k.data()[(y0 + v) * w + x0 + u];
            }
        }
        softmax_slice(&buf, &mut out.data_mut()[i * n * n..(i + 1) * n * n]);
    }
    Ok(out)
}

/// Soft-selected absolute image coordinate of a window map `m` (`[n, n]`,
/// sums to 1) anchored at `corner`: the `m`-weighted mean of coordinates.
pub fn soft_coordinates<T: Scalar>(m: &[T], n: usize, corner: (usize, usize)) -> (f64, f64) {
    let (x0, y0) = (corner.0 as f64, corner.1 as f64);
    let mut x = 0.0;
    let mut y = 0.0;
    for v in 0..n {
        for u in 0..n {
            let w = m[v * n + u].as_f64();
            x += w * (x0 + u as f64);
            y += w * (y0 + v as f64);
        }
    }
    (x, y)
}

/// Index-proposal loss for one window level.
///
/// `k_b` is first aligned into `k_a`'s frame by warping with `t^-1`, so
/// window `i` of both maps covers the same physical region. For each
/// window whose pixels are all valid in `mask_a`: the soft coordinate of
/// `k_a` is compared against the hard argmax coordinate of the aligned
/// `k_b` window, weighted by `alpha = m_a[soft] + m_b[hard]` where `m` are
/// the window-softmax maps (a shift-invariant realization of the
/// response-map weighting). The alpha weights are differentiated along
/// with the distances, so the analytic gradient agrees with finite
/// differences of the value. Returns the alpha-weighted mean squared
/// distance and its gradients with respect to `k_a` and `k_b`.
pub fn ip_loss<T: Scalar>(
    k_a: &Tensor<T>,
    k_b: &Tensor<T>,
    t: &RotTransform,
    n: usize,
    mask_a: &ValidityMask,
) -> Result<(T, Tensor<T>, Tensor<T>)> {
    if k_a.rank() != 2 || k_b.rank() != 2 {
        return Err(Error::ShapeMismatch("ip_loss maps must be [H, W]".into()));
    }
    let (h, w) = (k_a.shape()[0], k_a.shape()[1]);
    let grid = WindowGrid::new(h, w, n);
    let nn = n * n;
    let t_inv = t.inverse();
    let (aligned_b, _) = warp_image(k_b, &t_inv)?;
    let mut dk_a = Tensor::zeros(k_a.shape());
    let mut d_aligned = Tensor::zeros(aligned_b.shape());

    struct Term {
        window: usize,
        m_a: Vec<f64>,
        m_b: Vec<f64>,
        best: usize,
        alpha: f64,
        dist2: f64,
        ex: f64,
        ey: f64,
        cell: (usize, usize, usize, usize), // x0, x1, y0, y1 of the sample
        frac: (f64, f64),
        gx: f64,
        gy: f64,
    }
    let mut terms: Vec<Term> = Vec::new();
    let mut win_a = vec![T::zero(); nn];
    let mut win_b = vec![T::zero(); nn];
    'windows: for i in 0..grid.count() {
        let (cx, cy) = grid.corner(i);
        for v in 0..n {
            for u in 0..n {
                if !mask_a.get(cx + u, cy + v) {
                    continue 'windows;
                }
                win_a[v * n + u] = k_a.data()[(cy + v) * w + cx + u];
                win_b[v * n + u] = aligned_b.data()[(cy + v) * w + cx + u];
            }
        }
        let m_a = softmax_f64(&win_a);
        let m_b = softmax_f64(&win_b);
        // hard argmax in the aligned window, ties to the lowest row-major index
        let mut best = 0usize;
        for j in 1..nn {
            if win_b[j] > win_b[best] {
                best = j;
            }
        }
        let hard = (cx as f64 + (best % n) as f64, cy as f64 + (best / n) as f64);
        let mut sx = 0.0;
        let mut sy = 0.0;
        for v in 0..n {
            for u in 0..n {
                sx += m_a[v * n + u] * (cx + u) as f64;
                sy += m_a[v * n + u] * (cy + v) as f64;
            }
        }
        // bilinear sample of m_a at the window-local soft coordinate
        let lx = sx - cx as f64;
        let ly = sy - cy as f64;
        let x0 = (lx.floor() as usize).min(n - 1);
        let y0 = (ly.floor() as usize).min(n - 1);
        let x1 = (x0 + 1).min(n - 1);
        let y1 = (y0 + 1).min(n - 1);
        let fx = lx - x0 as f64;
        let fy = ly - y0 as f64;
        let at = |yy: usize, xx: usize| m_a[yy * n + xx];
        let sample = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
            + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
        let gx = (1.0 - fy) * (at(y0, x1) - at(y0, x0)) + fy * (at(y1, x1) - at(y1, x0));
        let gy = (1.0 - fx) * (at(y1, x0) - at(y0, x0)) + fx * (at(y1, x1) - at(y0, x1));
        let alpha = sample + m_b[best];
        let ex = sx - hard.0;
        let ey = sy - hard.1;
        terms.push(Term {
            window: i,
            m_a,
            m_b,
            best,
            alpha,
            dist2: ex * ex + ey * ey,
            ex,
            ey,
            cell: (x0, x1, y0, y1),
            frac: (fx, fy),
            gx,
            gy,
        });
    }
    if terms.is_empty() {
        warn_no_windows(n);
        return Ok((T::zero(), dk_a, Tensor::zeros(k_b.shape())));
    }
    let den: f64 = terms.iter().map(|t| t.alpha).sum();
    let num: f64 = terms.iter().map(|t| t.alpha * t.dist2).sum();
    let loss = num / den;
    // dL = sum_i [ alpha_i * d(dist2_i) + (dist2_i - L) * d(alpha_i) ] / den
    for term in &terms {
        let (cx, cy) = grid.corner(term.window);
        let c_d = term.alpha / den;
        let c_a = (term.dist2 - loss) / den;
        let (x0, x1, y0, y1) = term.cell;
        let (fx, fy) = term.frac;
        // gradient w.r.t. the softmax map m_a
        let mut dm = vec![0.0f64; nn];
        for v in 0..n {
            for u in 0..n {
                let j = v * n + u;
                let dsx = (cx + u) as f64;
                let dsy = (cy + v) as f64;
                dm[j] = c_d * (2.0 * term.ex * dsx + 2.0 * term.ey * dsy)
                    + c_a * (term.gx * dsx + term.gy * dsy);
            }
        }
        dm[y0 * n + x0] += c_a * (1.0 - fx) * (1.0 - fy);
        dm[y0 * n + x1] += c_a * fx * (1.0 - fy);
        dm[y1 * n + x0] += c_a * (1.0 - fx) * fy;
        dm[y1 * n + x1] += c_a * fx * fy;
        // through softmax: dk = m .* (dm - <m, dm>)
        let dot: f64 = term.m_a.iter().zip(&dm).map(|(a, b)| a * b).sum();
        for v in 0..n {
            for u in 0..n {
                let j = v * n + u;
                let g = term.m_a[j] * (dm[j] - dot);
                let slot = &mut dk_a.data_mut()[(cy + v) * w + cx + u];
                *slot += T::from_f64(g);
            }
        }
        // alpha's m_b[best] term through the aligned window's softmax
        let dot_b = term.m_b[term.best] * c_a;
        for v in 0..n {
            for u in 0..n {
                let j = v * n + u;
                let dm_b = if j == term.best { c_a } else { 0.0 };
                let g = term.m_b[j] * (dm_b - dot_b);
                let slot = &mut d_aligned.data_mut()[(cy + v) * w + cx + u];
                *slot += T::from_f64(g);
            }
        }
    }
    // aligned map is a linear function of k_b
    let dk_b = warp_image_backward(&d_aligned, &t_inv);
    Ok((T::from_f64(loss), dk_a, dk_b))
}

/// Warn at most once per window size per process; training loops hit the
/// empty-window case on every large-angle pair.
fn warn_no_windows(n: usize) {
    use std::sync::atomic::{AtomicU64, Ordering};
    static WARNED: AtomicU64 = AtomicU64::new(0);
    let bit = 1u64 << (n.min(63));
    if WARNED.fetch_or(bit, Ordering::Relaxed) & bit == 0 {
        eprintln!("ip_loss: no surviving windows (n={n}); contributing 0");
    }
}

fn softmax_f64<T: Scalar>(vals: &[T]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for v in vals {
        max = max.max(v.as_f64());
    }
    let mut out: Vec<f64> = vals.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// Multi-level keypoint loss with source/target switching:
/// `sum_l lambda_l * (ip(a->b, N_l) + ip(b->a, N_l))`.
/// Returns `(loss, dk_a, dk_b)`.
pub fn keypoint_loss<T: Scalar>(
    k_a: &Tensor<T>,
    k_b: &Tensor<T>,
    t: &RotTransform,
    window_sizes: &[usize],
    window_weights: &[f64],
    mask_a: &ValidityMask,
    mask_b: &ValidityMask,
) -> Result<(T, Tensor<T>, Tensor<T>)> {
    assert_eq!(window_sizes.len(), window_weights.len());
    let t_inv = t.inverse();
    let mut loss = T::zero();
    let mut dk_a = Tensor::zeros(k_a.shape());
    let mut dk_b = Tensor::zeros(k_b.shape());
    for (&n, &lambda) in window_sizes.iter().zip(window_weights) {
        let lam = T::from_f64(lambda);
        let (l_ab, ga_1, gb_1) = ip_loss(k_a, k_b, t, n, mask_a)?;
        let (l_ba, gb_2, ga_2) = ip_loss(k_b, k_a, &t_inv, n, mask_b)?;
        loss += lam * (l_ab + l_ba);
        dk_a.add_scaled(&ga_1, lam);
        dk_a.add_scaled(&ga_2, lam);
        dk_b.add_scaled(&gb_1, lam);
        dk_b.add_scaled(&gb_2, lam);
    }
    Ok((loss, dk_a, dk_b))
}

/// Dense orientation alignment loss between softmax-normalized histogram
/// maps `[|G|, H, W]` of an image pair related by `t`.
///
/// `o_b` is spatially aligned by warping each histogram channel with
/// `t^-1`; `o_a` is histogram-aligned by a cyclic shift of
/// `round(angle / bin)` bins. The loss is the cross-entropy
/// `-sum_g shift(o_a)_g * log(warp(o_b)_g)` averaged over pixels valid in
/// `mask_a`, with the log clamped at 1e-12. Gradients flow through both
/// operands. Returns `(loss, dO_a, dO_b)`.
pub fn orientation_alignment_loss<T: Scalar>(
    o_a: &Tensor<T>,
    o_b: &Tensor<T>,
    t: &RotTransform,
    mask_a: &ValidityMask,
) -> Result<(T, Tensor<T>, Tensor<T>)> {
    if o_a.shape() != o_b.shape() || o_a.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "orientation maps must be equal [G, H, W], got {:?} vs {:?}",
            o_a.shape(),
            o_b.shape()
        )));
    }
    let (g, h, w) = (o_a.shape()[0], o_a.shape()[1], o_a.shape()[2]);
    assert_eq!((mask_a.width, mask_a.height), (w, h), "mask size mismatch");
    let group = CyclicGroup::new(g);
    let shift = group.bin_of(t.angle_deg) as isize;
    let pa = cyclic_shift(o_a, shift);
    let t_inv = t.inverse();
    let (wb, _) = warp_image(o_b, &t_inv)?;
    let n_valid = mask_a.count();
    if n_valid == 0 {
        return Err(Error::NoValidRegion("orientation_alignment_loss".into()));
    }
    let inv_n = 1.0 / n_valid as f64;
    let clamp = 1e-12;
    let mut loss = 0.0f64;
    let mut dpa = Tensor::zeros(pa.shape());
    let mut dwb = Tensor::zeros(wb.shape());
    for gi in 0..g {
        let pa_p = &pa.data()[gi * h * w..(gi + 1) * h * w];
        let wb_p = &wb.data()[gi * h * w..(gi + 1) * h * w];
        let dpa_p = &mut dpa.data_mut()[gi * h * w..(gi + 1) * h * w];
        let dwb_p = &mut dwb.data_mut()[gi * h * w..(gi + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                if !mask_a.get(x, y) {
                    continue;
                }
                let idx = y * w + x;
                let p = pa_p[idx].as_f64();
                let q = wb_p[idx].as_f64();
                let qc = q.max(clamp);
                loss -= p * qc.ln() * inv_n;
                dpa_p[idx] = T::from_f64(-qc.ln() * inv_n);
                if q > clamp {
                    dwb_p[idx] = T::from_f64(-p / q * inv_n);
                }
            }
        }
    }
    let d_oa = cyclic_shift(&dpa, -shift);
    let d_ob = warp_image_backward(&dwb, &t_inv);
    Ok((T::from_f64(loss), d_oa, d_ob))
}

/// `beta * l_ori + l_kpts`.
pub fn total_loss<T: Scalar>(l_ori: T, l_kpts: T, beta: f64) -> T {
    T::from_f64(beta) * l_ori + l_kpts
}
