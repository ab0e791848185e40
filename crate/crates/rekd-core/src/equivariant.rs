//! Cyclic-group rotation-equivariant layers: kernel rotation, lifting
//! convolution, group convolution, group pooling, channel pooling and
//! cyclic shifts.
//!
//! Rotated kernel copies are derived from a single base kernel by bilinear
//! resampling of the kernel grid; gradients of every copy accumulate back
//! into the base (weight sharing). Resampling is an exact index permutation
//! at quarter turns, which is what makes the whole network exactly
//! 90-degree equivariant.

use crate::tensor::{conv2d, Scalar, Tensor};
use crate::{Error, Result};

/// The cyclic rotation group `C_N`; element `g` stands for a rotation by
/// `g * 360 / N` degrees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CyclicGroup {
    pub order: usize,
}

impl CyclicGroup {
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "group order must be positive");
        CyclicGroup { order }
    }

    /// Bin width in degrees.
    pub fn step_deg(&self) -> f64 {
        360.0 / self.order as f64
    }

    pub fn angle_of(&self, g: usize) -> f64 {
        g as f64 * self.step_deg()
    }

    /// Nearest group element for an angle in degrees.
    pub fn bin_of(&self, angle_deg: f64) -> usize {
        let k = (angle_deg / self.step_deg()).round() as i64;
        k.rem_euclid(self.order as i64) as usize
    }
}

/// Precomputed sparse resampling maps, one per group element, for rotating
/// `k x k` kernels. Entry `(tgt, src, w)` means `out[tgt] += w * kernel[src]`.
pub struct KernelRotator {
    pub k: usize,
    pub group: CyclicGroup,
    plans: Vec<Vec<(u16, u16, f64)>>,
}

impl KernelRotator {
    pub fn new(k: usize, group: CyclicGroup) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd");
        let c = (k as f64 - 1.0) / 2.0;
        let plans = (0..group.order)
            .map(|g| {
                let angle = group.angle_of(g).rem_euclid(360.0);
                // exact trig at quarter turns keeps those rotations grid-exact
                let (cos, sin) = if angle == 0.0 {
                    (1.0, 0.0)
                } else if angle == 90.0 {
                    (0.0, 1.0)
                } else if angle == 180.0 {
                    (-1.0, 0.0)
                } else if angle == 270.0 {
                    (0.0, -1.0)
                } else {
                    let r = angle.to_radians();
                    (r.cos(), r.sin())
                };
                let mut plan = Vec::new();
                for i in 0..k {
                    for j in 0..k {
                        let dx = j as f64 - c;
                        let dy = i as f64 - c;
                        // inverse-map the target cell into the source kernel
                        let sx = cos * dx - sin * dy + c;
                        let sy = sin * dx + cos * dy + c;
                        if sx <= -1.0 || sy <= -1.0 || sx >= k as f64 || sy >= k as f64 {
                            continue;
                        }
                        let x0 = sx.floor();
                        let y0 = sy.floor();
                        let fx = sx - x0;
                        let fy = sy - y0;
                        let tgt = (i * k + j) as u16;
                        let mut push = |xx: isize, yy: isize, w: f64| {
                            if xx >= 0 && yy >= 0 && (xx as usize) < k && (yy as usize) < k && w != 0.0
                            {
                                plan.push((tgt, (yy as usize * k + xx as usize) as u16, w));
                            }
                        };
                        let (x0, y0) = (x0 as isize, y0 as isize);
                        push(x0, y0, (1.0 - fx) * (1.0 - fy));
                        push(x0 + 1, y0, fx * (1.0 - fy));
                        push(x0, y0 + 1, (1.0 - fx) * fy);
                        push(x0 + 1, y0 + 1, fx * fy);
                    }
                }
                plan
            })
            .collect();
        KernelRotator { k, group, plans }
    }

    /// `out = rotate_g(kernel)`; `out` must be zeroed `k*k`.
    pub fn apply<T: Scalar>(&self, g: usize, kernel: &[T], out: &mut [T]) {
        for &(tgt, src, w) in &self.plans[g] {
            out[tgt as usize] += T::from_f64(w) * kernel[src as usize];
        }
    }

    /// Transpose: `dkernel += rotate_g^T(dout)`; accumulates.
    pub fn apply_transpose<T: Scalar>(&self, g: usize, dout: &[T], dkernel: &mut [T]) {
        for &(tgt, src, w) in &self.plans[g] {
            dkernel[src as usize] += T::from_f64(w) * dout[tgt as usize];
        }
    }
}

/// Rotate a `[k, k]` kernel by group element `g`. Samples falling outside
/// the kernel support read zero; `g = 0` is the exact identity and
/// `g = |G|/4` the exact 90-degree index permutation.
pub fn rotate_kernel<T: Scalar>(kernel: &Tensor<T>, group: CyclicGroup, g: usize) -> Tensor<T> {
    assert_eq!(kernel.rank(), 2, "rotate_kernel expects [k, k]");
    let k = kernel.shape()[0];
    let rot = KernelRotator::new(k, group);
    let mut out = Tensor::zeros(&[k, k]);
    rot.apply(g % group.order, kernel.data(), out.data_mut());
    out
}

/// Expand the base kernel of a lifting convolution into the full
/// `[(|G|*Cout), Cin, k, k]` filter bank: slice `(g, c, cin)` is
/// `rotate_g(base[c, cin])`.
pub fn expand_lift_kernel<T: Scalar>(
    base: &Tensor<T>,
    rot: &KernelRotator,
) -> Tensor<T> {
    let (cout, cin, k) = (base.shape()[0], base.shape()[1], base.shape()[2]);
    let order = rot.group.order;
    let kk = k * k;
    let mut ek = Tensor::zeros(&[order * cout, cin, k, k]);
    for g in 0..order {
        for c in 0..cout {
            for ci in 0..cin {
                let src = &base.data()[(c * cin + ci) * kk..(c * cin + ci + 1) * kk];
                let off = ((g * cout + c) * cin + ci) * kk;
                rot.apply(g, src, &mut ek.data_mut()[off..off + kk]);
            }
        }
    }
    ek
}

/// Scatter the expanded-kernel gradient of a lifting convolution back into
/// the base kernel through the transposed rotations.
pub fn collapse_lift_kernel_grad<T: Scalar>(
    dek: &Tensor<T>,
    base_shape: &[usize],
    rot: &KernelRotator,
) -> Tensor<T> {
    let (cout, cin, k) = (base_shape[0], base_shape[1], base_shape[2]);
    let order = rot.group.order;
    let kk = k * k;
    let mut dbase = Tensor::zeros(base_shape);
    for g in 0..order {
        for c in 0..cout {
            for ci in 0..cin {
                let src = &dek.data()[((g * cout + c) * cin + ci) * kk..][..kk];
                let off = (c * cin + ci) * kk;
                rot.apply_transpose(g, src, &mut dbase.data_mut()[off..off + kk]);
            }
        }
    }
    dbase
}

/// Expand the base kernel of a group convolution into
/// `[(|G|*Cout), (|G|*Cin), k, k]`: slice `(g, c, h, cin)` is
/// `rotate_g(base[c, ((h - g) mod |G|) * Cin + cin])` — the filter's group
/// index is cyclically shifted while its spatial support rotates.
pub fn expand_group_kernel<T: Scalar>(base: &Tensor<T>, rot: &KernelRotator) -> Tensor<T> {
    let order = rot.group.order;
    let (cout, cin_total, k) = (base.shape()[0], base.shape()[1], base.shape()[2]);
    assert_eq!(cin_total % order, 0, "base Cin must be Cin * |G|");
    let cin = cin_total / order;
    let kk = k * k;
    let mut ek = Tensor::zeros(&[order * cout, order * cin, k, k]);
    for g in 0..order {
        for c in 0..cout {
            for h in 0..order {
                let hs = (h + order - g % order) % order;
                for ci in 0..cin {
                    let src = &base.data()[(c * cin_total + hs * cin + ci) * kk..][..kk];
                    let off = ((g * cout + c) * (order * cin) + h * cin + ci) * kk;
                    rot.apply(g, src, &mut ek.data_mut()[off..off + kk]);
                }
            }
        }
    }
    ek
}

/// Transpose of [`expand_group_kernel`] for gradient accumulation.
pub fn collapse_group_kernel_grad<T: Scalar>(
    dek: &Tensor<T>,
    base_shape: &[usize],
    rot: &KernelRotator,
) -> Tensor<T> {
    let order = rot.group.order;
    let (cout, cin_total, k) = (base_shape[0], base_shape[1], base_shape[2]);
    let cin = cin_total / order;
    let kk = k * k;
    let mut dbase = Tensor::zeros(base_shape);
    for g in 0..order {
        for c in 0..cout {
            for h in 0..order {
                let hs = (h + order - g % order) % order;
                for ci in 0..cin {
                    let src = &dek.data()[((g * cout + c) * (order * cin) + h * cin + ci) * kk..][..kk];
                    let off = (c * cin_total + hs * cin + ci) * kk;
                    rot.apply_transpose(g, src, &mut dbase.data_mut()[off..off + kk]);
                }
            }
        }
    }
    dbase
}

/// Lifting convolution: map a plain image `[Cin, H, W]` to the group
/// feature `[|G|, Cout, H, W]` by convolving with every rotated copy of the
/// base kernel `[Cout, Cin, k, k]`.
pub fn lift_conv<T: Scalar>(
    img: &Tensor<T>,
    base: &Tensor<T>,
    group: CyclicGroup,
) -> Result<Tensor<T>> {
    let rot = KernelRotator::new(base.shape()[2], group);
    let ek = expand_lift_kernel(base, &rot);
    let pad = (base.shape()[2] - 1) / 2;
    let out = conv2d(img, &ek, pad, 1)?;
    let (gc, h, w) = (out.shape()[0], out.shape()[1], out.shape()[2]);
    out.reshape(&[group.order, gc / group.order, h, w])
}

/// Group convolution on `[|G|, Cin, H, W]` with base `[Cout, |G|*Cin, k, k]`.
pub fn group_conv<T: Scalar>(
    hin: &Tensor<T>,
    base: &Tensor<T>,
    group: CyclicGroup,
) -> Result<Tensor<T>> {
    if hin.rank() != 4 || hin.shape()[0] != group.order {
        return Err(Error::ShapeMismatch(format!(
            "group_conv input must be [|G|, Cin, H, W], got {:?}",
            hin.shape()
        )));
    }
    let (g, cin, h, w) = (
        hin.shape()[0],
        hin.shape()[1],
        hin.shape()[2],
        hin.shape()[3],
    );
    let rot = KernelRotator::new(base.shape()[2], group);
    let ek = expand_group_kernel(base, &rot);
    let pad = (base.shape()[2] - 1) / 2;
    let flat = hin.clone().reshape(&[g * cin, h, w])?;
    let out = conv2d(&flat, &ek, pad, 1)?;
    let gc = out.shape()[0];
    out.reshape(&[group.order, gc / group.order, h, w])
}

/// Max pooling over the group axis: `P = max_g H[g]`.
/// Returns the pooled map and per-position argmax indices (ties resolve to
/// the lowest group index) used to route gradients.
pub fn group_pool_max<T: Scalar>(h: &Tensor<T>) -> (Tensor<T>, Vec<u16>) {
    assert!(h.rank() >= 2, "group_pool_max expects [|G|, ...]");
    let g = h.shape()[0];
    let rest: usize = h.shape()[1..].iter().product();
    let mut out = Tensor::from_vec(&h.shape()[1..], h.data()[..rest].to_vec()).unwrap();
    let mut arg = vec![0u16; rest];
    for gi in 1..g {
        let slice = &h.data()[gi * rest..(gi + 1) * rest];
        for (i, (&v, o)) in slice.iter().zip(out.data_mut().iter_mut()).enumerate() {
            if v > *o {
                *o = v;
                arg[i] = gi as u16;
            }
        }
    }
    (out, arg)
}

/// Route `dout` back to the argmax slices.
pub fn group_pool_max_backward<T: Scalar>(
    group_shape: &[usize],
    arg: &[u16],
    dout: &Tensor<T>,
) -> Tensor<T> {
    let rest: usize = group_shape[1..].iter().product();
    let mut dh = Tensor::zeros(group_shape);
    for (i, (&a, &g)) in arg.iter().zip(dout.data()).enumerate() {
        dh.data_mut()[a as usize * rest + i] = g;
    }
    dh
}

/// Weighted channel collapse per group element: `Q[g] = sum_c w[c] * H[g,c]`.
/// The same weight vector applies at every group index (required for
/// equivariance).
pub fn channel_pool<T: Scalar>(h: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    if h.rank() != 4 {
        return Err(Error::ShapeMismatch("channel_pool expects [|G|, C, H, W]".into()));
    }
    let (g, c, hh, ww) = (
        h.shape()[0],
        h.shape()[1],
        h.shape()[2],
        h.shape()[3],
    );
    if w.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "channel_pool weights {} vs {} channels",
            w.len(),
            c
        )));
    }
    let hw = hh * ww;
    let mut q = Tensor::zeros(&[g, hh, ww]);
    for gi in 0..g {
        let dst = &mut q.data_mut()[gi * hw..(gi + 1) * hw];
        for ci in 0..c {
            let wc = w.data()[ci];
            let src = &h.data()[(gi * c + ci) * hw..(gi * c + ci + 1) * hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += wc * s;
            }
        }
    }
    Ok(q)
}

/// Gradients of [`channel_pool`]: `(dH, dw)`.
pub fn channel_pool_backward<T: Scalar>(
    h: &Tensor<T>,
    w: &Tensor<T>,
    dq: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (g, c, hh, ww) = (
        h.shape()[0],
        h.shape()[1],
        h.shape()[2],
        h.shape()[3],
    );
    let hw = hh * ww;
    let mut dh = Tensor::zeros(h.shape());
    let mut dw = Tensor::zeros(&[c]);
    for gi in 0..g {
        let gq = &dq.data()[gi * hw..(gi + 1) * hw];
        for ci in 0..c {
            let wc = w.data()[ci];
            let hs = &h.data()[(gi * c + ci) * hw..(gi * c + ci + 1) * hw];
            let ds = &mut dh.data_mut()[(gi * c + ci) * hw..(gi * c + ci + 1) * hw];
            let mut acc = T::zero();
            for ((d, &q), &hv) in ds.iter_mut().zip(gq).zip(hs) {
                *d = wc * q;
                acc += q * hv;
            }
            dw.data_mut()[ci] += acc;
        }
    }
    (dh, dw)
}

/// Cyclic shift along the leading group axis: `out[g] = x[(g - k) mod |G|]`.
/// Shift by 0 or `|G|` is the identity; shifts compose additively mod `|G|`.
pub fn cyclic_shift<T: Scalar>(x: &Tensor<T>, k: isize) -> Tensor<T> {
    let g = x.shape()[0] as isize;
    let rest: usize = x.shape()[1..].iter().product();
    let mut out = Tensor::zeros(x.shape());
    for gi in 0..g {
        let src = (gi - k).rem_euclid(g) as usize;
        out.data_mut()[gi as usize * rest..(gi as usize + 1) * rest]
            .copy_from_slice(&x.data()[src * rest..(src + 1) * rest]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::random_uniform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        random_uniform(shape, 1.0, &mut rng)
    }

    #[test]
    fn rotate_identity_and_quarter_turn_are_exact() {
        let k = rand_t(&[5, 5], 1);
        let g36 = CyclicGroup::new(36);
        assert_eq!(rotate_kernel(&k, g36, 0).data(), k.data());
        let r = rotate_kernel(&k, g36, 9); // 90 degrees
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(r.at(&[i, j]), k.at(&[j, 4 - i]), "at ({i},{j})");
            }
        }
    }

    /// Unit-norm random 5x5 kernels: `smooth` draws mixtures of Gaussian
    /// bumps, otherwise cells are white noise.
    fn unit_kernel(seed: u64, smooth: bool) -> Tensor<f32> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut k = if smooth {
            let mut k = Tensor::<f32>::zeros(&[5, 5]);
            for _ in 0..3 {
                let (cy, cx) = (rng.gen_range(1.0..3.0f32), rng.gen_range(1.0..3.0f32));
                let sig = rng.gen_range(0.8..1.5f32);
                let amp = rng.gen_range(-1.0..1.0f32);
                for i in 0..5 {
                    for j in 0..5 {
                        let d2 = (i as f32 - cy).powi(2) + (j as f32 - cx).powi(2);
                        let v = k.at(&[i, j]) + amp * (-d2 / (2.0 * sig * sig)).exp();
                        k.set(&[i, j], v);
                    }
                }
            }
            k
        } else {
            rand_t(&[5, 5], seed)
        };
        let norm = k.data().iter().map(|v| v * v).sum::<f32>().sqrt();
        k.scale(1.0 / norm.max(1e-6));
        k
    }

    fn roundtrip_worst(smooth: bool) -> (f32, f32) {
        let group = CyclicGroup::new(36);
        let mut worst_all = 0.0f32;
        let mut worst_int = 0.0f32;
        for seed in 0..100 {
            let k = unit_kernel(seed, smooth);
            let g = (seed as usize % 35) + 1;
            let fwd = rotate_kernel(&k, group, g);
            let back = rotate_kernel(&fwd, group, 36 - g);
            for i in 0..5 {
                for j in 0..5 {
                    let d = (back.at(&[i, j]) - k.at(&[i, j])).abs();
                    worst_all = worst_all.max(d);
                    if (1..4).contains(&i) && (1..4).contains(&j) {
                        worst_int = worst_int.max(d);
                    }
                }
            }
        }
        (worst_all, worst_int)
    }

    #[test]
    fn rotate_roundtrip_tolerances() {
        // rotate by g then |G|-g over 100 unit-norm kernels; bounds frozen
        // from this oracle's measurement. White-noise kernels cannot survive
        // two bilinear resamplings (the interpolation low-passes them), so
        // the recoverability bounds are stated for smooth kernels and a
        // looser envelope is pinned for the white-noise case.
        let (all_s, int_s) = roundtrip_worst(true);
        let (all_w, int_w) = roundtrip_worst(false);
        assert!(all_s < 0.30, "smooth max-abs {all_s}");
        assert!(int_s < 0.30, "smooth interior {int_s}");
        assert!(all_w < 0.45, "white max-abs {all_w}");
        assert!(int_w < 0.45, "white interior {int_w}");
        // quarter turns round-trip exactly for any kernel
        let group = CyclicGroup::new(36);
        for seed in 0..10 {
            let k = unit_kernel(seed, false);
            for g in [9usize, 18, 27] {
                let back = rotate_kernel(&rotate_kernel(&k, group, g), group, 36 - g);
                assert_eq!(back.data(), k.data());
            }
        }
    }

    #[test]
    fn lift_with_delta_kernel_replicates_input() {
        // quarter-turn group: the delta kernel is exactly rotation-invariant
        let group = CyclicGroup::new(4);
        let img = rand_t(&[1, 6, 6], 2);
        let mut base = Tensor::<f32>::zeros(&[1, 1, 5, 5]);
        base.set(&[0, 0, 2, 2], 1.0);
        let out = lift_conv(&img, &base, group).unwrap();
        for g in 0..4 {
            for i in 0..36 {
                assert_eq!(out.data()[g * 36 + i], img.data()[i]);
            }
        }
    }

    #[test]
    fn lift_matches_per_group_conv_oracle() {
        let group = CyclicGroup::new(8);
        let img = rand_t(&[2, 9, 7], 3);
        let base = rand_t(&[3, 2, 5, 5], 4);
        let out = lift_conv(&img, &base, group).unwrap();
        // oracle: independently rotate kernels, conv per group element
        for g in 0..8 {
            let mut kg = Tensor::<f32>::zeros(&[3, 2, 5, 5]);
            for c in 0..3 {
                for ci in 0..2 {
                    let slice = Tensor::from_vec(
                        &[5, 5],
                        (0..25).map(|i| base.at(&[c, ci, i / 5, i % 5])).collect(),
                    )
                    .unwrap();
                    let r = rotate_kernel(&slice, group, g);
                    for i in 0..5 {
                        for j in 0..5 {
                            kg.set(&[c, ci, i, j], r.at(&[i, j]));
                        }
                    }
                }
            }
            let want = conv2d(&img, &kg, 2, 1).unwrap();
            let got = &out.data()[g * want.len()..(g + 1) * want.len()];
            assert_eq!(got, want.data(), "group element {g}");
        }
    }

    #[test]
    fn lift_90_equivariance() {
        use crate::geometry::{warp_image, RotTransform};
        let group = CyclicGroup::new(8);
        let img = rand_t(&[1, 12, 12], 5);
        let base = rand_t(&[2, 1, 5, 5], 6);
        let out = lift_conv(&img, &base, group).unwrap();
        let (rot_img, _) = warp_image(&img, &RotTransform::rotation(90.0, (12, 12))).unwrap();
        let out_rot = lift_conv(&rot_img, &base, group).unwrap();
        // rotate + cyclic shift the plain output
        let shifted = cyclic_shift(&out, 2); // |G|/4
        let (expect, _) =
            warp_image(&shifted, &RotTransform::rotation(90.0, (12, 12))).unwrap();
        assert!(
            out_rot.rel_error(&expect) < 1e-5,
            "rel {}",
            out_rot.rel_error(&expect)
        );
    }

    #[test]
    fn group_conv_1x1_is_cyclic_cross_correlation() {
        let group = CyclicGroup::new(4);
        let hin = rand_t(&[4, 1, 3, 3], 7);
        let base = rand_t(&[1, 4, 1, 1], 8);
        let out = group_conv(&hin, &base, group).unwrap();
        // hand oracle: out[g, p] = sum_h hin[h, p] * base[(h - g) mod 4]
        for g in 0..4 {
            for p in 0..9 {
                let mut want = 0.0f32;
                for h in 0..4 {
                    want += hin.data()[h * 9 + p] * base.data()[(h + 4 - g) % 4];
                }
                let got = out.data()[g * 9 + p];
                assert!((got - want).abs() < 1e-6, "g={g} p={p}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn group_conv_symmetric_input_and_kernel() {
        // identical slices across g and a base that is both constant over h
        // and 90-degree symmetric: output must be identical across g
        let group = CyclicGroup::new(4);
        let plane = rand_t(&[1, 1, 6, 6], 9);
        let mut hin = Tensor::<f32>::zeros(&[4, 1, 6, 6]);
        for g in 0..4 {
            hin.data_mut()[g * 36..(g + 1) * 36].copy_from_slice(plane.data());
        }
        // build an exactly 90-degree symmetric 5x5: the elementwise max of
        // the four quarter rotations is order-independent, hence bitwise
        // invariant under a further quarter turn
        let raw = rand_t(&[5, 5], 10);
        let mut sym = rotate_kernel(&raw, group, 0);
        for g in 1..4 {
            let r = rotate_kernel(&raw, group, g);
            for (a, &b) in sym.data_mut().iter_mut().zip(r.data()) {
                *a = a.max(b);
            }
        }
        let mut base = Tensor::<f32>::zeros(&[1, 4, 5, 5]);
        for h in 0..4 {
            for i in 0..5 {
                for j in 0..5 {
                    base.set(&[0, h, i, j], sym.at(&[i, j]));
                }
            }
        }
        let out = group_conv(&hin, &base, group).unwrap();
        for g in 1..4 {
            assert_eq!(
                &out.data()[g * 36..(g + 1) * 36],
                &out.data()[..36],
                "slice {g}"
            );
        }
    }

    #[test]
    fn group_conv_90_commutation() {
        use crate::geometry::{warp_image, RotTransform};
        let group = CyclicGroup::new(8);
        let hin = rand_t(&[8, 2, 10, 10], 11);
        let base = rand_t(&[2, 16, 5, 5], 12);
        let out = group_conv(&hin, &base, group).unwrap();
        let shifted_in = cyclic_shift(&hin, 2);
        let (rot_in, _) =
            warp_image(&shifted_in, &RotTransform::rotation(90.0, (10, 10))).unwrap();
        let out_rot = group_conv(&rot_in, &base, group).unwrap();
        let shifted_out = cyclic_shift(&out, 2);
        let (expect, _) =
            warp_image(&shifted_out, &RotTransform::rotation(90.0, (10, 10))).unwrap();
        assert!(
            out_rot.rel_error(&expect) < 1e-5,
            "rel {}",
            out_rot.rel_error(&expect)
        );
    }

    #[test]
    fn group_pool_max_basics() {
        let h = rand_t(&[6, 2, 4, 4], 13);
        let (p, arg) = group_pool_max(&h);
        // direct oracle
        for i in 0..32 {
            let mut best = f32::NEG_INFINITY;
            let mut best_g = 0;
            for g in 0..6 {
                let v = h.data()[g * 32 + i];
                if v > best {
                    best = v;
                    best_g = g;
                }
            }
            assert_eq!(p.data()[i], best);
            assert_eq!(arg[i] as usize, best_g);
        }
        // shift invariance
        let (p2, _) = group_pool_max(&cyclic_shift(&h, 3));
        assert_eq!(p.data(), p2.data());
        // constant over g: output equals any slice
        let mut hc = Tensor::<f32>::zeros(&[4, 1, 2, 2]);
        for g in 0..4 {
            hc.data_mut()[g * 4..(g + 1) * 4].copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        }
        let (pc, argc) = group_pool_max(&hc);
        assert_eq!(pc.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(argc.iter().all(|&a| a == 0), "ties resolve to lowest index");
    }

    #[test]
    fn channel_pool_cases() {
        let h = rand_t(&[5, 1, 3, 3], 14);
        let w1 = Tensor::<f32>::full(&[1], 1.0);
        let q = channel_pool(&h, &w1).unwrap();
        assert_eq!(q.data(), h.data());
        let h = rand_t(&[5, 3, 3, 3], 15);
        let w0 = Tensor::<f32>::zeros(&[3]);
        let q = channel_pool(&h, &w0).unwrap();
        assert!(q.data().iter().all(|&v| v == 0.0));
        // shift commutation is exact
        let w = rand_t(&[3], 16);
        let q1 = cyclic_shift(&channel_pool(&h, &w).unwrap(), 2);
        let q2 = channel_pool(&cyclic_shift(&h, 2), &w).unwrap();
        assert_eq!(q1.data(), q2.data());
    }

    #[test]
    fn cyclic_shift_identities() {
        let x = rand_t(&[6, 2, 2], 17);
        assert_eq!(cyclic_shift(&x, 0).data(), x.data());
        assert_eq!(cyclic_shift(&x, 6).data(), x.data());
        assert_eq!(cyclic_shift(&x, -6).data(), x.data());
        let a = cyclic_shift(&cyclic_shift(&x, 2), 3);
        let b = cyclic_shift(&x, 5);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn channel_pool_backward_consistency() {
        // <channel_pool(H, w), U> gradients vs finite differences in f64
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let h: Tensor<f64> = random_uniform(&[4, 3, 3, 3], 1.0, &mut rng);
        let w: Tensor<f64> = random_uniform(&[3], 1.0, &mut rng);
        let u: Tensor<f64> = random_uniform(&[4, 3, 3], 1.0, &mut rng);
        let (dh, dw) = channel_pool_backward(&h, &w, &u);
        let loss = |h: &Tensor<f64>, w: &Tensor<f64>| -> f64 {
            channel_pool(h, w)
                .unwrap()
                .data()
                .iter()
                .zip(u.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let eps = 1e-6;
        for i in (0..h.len()).step_by(11) {
            let mut hp = h.clone();
            hp.data_mut()[i] += eps;
            let mut hm = h.clone();
            hm.data_mut()[i] -= eps;
            let fd = (loss(&hp, &w) - loss(&hm, &w)) / (2.0 * eps);
            assert!((fd - dh.data()[i]).abs() < 1e-8);
        }
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp.data_mut()[i] += eps;
            let mut wm = w.clone();
            wm.data_mut()[i] -= eps;
            let fd = (loss(&h, &wp) - loss(&h, &wm)) / (2.0 * eps);
            assert!((fd - dw.data()[i]).abs() < 1e-8);
        }
    }
}
