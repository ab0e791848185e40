//! 2D cross-correlation ("convolution" in the CNN sense) with zero padding,
//! plus its backward pass.
//!
//! The forward path lowers to one GEMM per strip of output rows: an im2col
//! buffer of shape `[Cin*k*k, strip_px]` is filled by shifted row copies and
//! multiplied by the `[Cout, Cin*k*k]` kernel matrix. Strips keep the
//! scratch buffer small on large inputs. Accumulation order per output
//! element is fixed by the GEMM blocking, so results are reproducible
//! run-to-run and independent of the thread count (batch items are the only
//! parallel axis).

use super::{debug_check_finite, Scalar, Tensor};
use crate::{Error, Result};

/// Output spatial extent of a convolution axis.
pub fn conv2d_out_extent(input: usize, k: usize, padding: usize, stride: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Scratch ceiling for the im2col strip, in elements.
const STRIP_ELEMS: usize = 1 << 20;

struct ConvDims {
    cin: usize,
    cout: usize,
    k: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

fn check_dims<T: Scalar>(
    input_shape: &[usize],
    kernel: &Tensor<T>,
    padding: usize,
    stride: usize,
) -> Result<ConvDims> {
    if kernel.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "kernel must be [Cout, Cin, k, k], got {:?}",
            kernel.shape()
        )));
    }
    let (cout, kcin, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if kh != kw || kh % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "kernel must be odd and square, got {kh}x{kw}"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    let [cin, h, w] = [input_shape[0], input_shape[1], input_shape[2]];
    if cin != kcin {
        return Err(Error::ShapeMismatch(format!(
            "input has {cin} channels, kernel expects {kcin}"
        )));
    }
    let oh = conv2d_out_extent(h, kh, padding, stride);
    let ow = conv2d_out_extent(w, kw, padding, stride);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok(ConvDims {
            cin,
            cout,
            k: kh,
            h,
            w,
            oh,
            ow,
        }),
        _ => Err(Error::InvalidArgument(format!(
            "non-positive output extent for input {h}x{w}, kernel {kh}, padding {padding}"
        ))),
    }
}

/// Fill `col` with the im2col block for output rows `oy0..oy1`.
/// Layout: `col[(cin*k + ky)*k + kx][oy*ow + ox]` for `oy` relative to `oy0`.
fn im2col<T: Scalar>(
    input: &[T],
    d: &ConvDims,
    padding: usize,
    stride: usize,
    oy0: usize,
    oy1: usize,
    col: &mut [T],
) {
    let strip = (oy1 - oy0) * d.ow;
    debug_assert_eq!(col.len(), d.cin * d.k * d.k * strip);
    let pad = padding as isize;
    for cin in 0..d.cin {
        let plane = &input[cin * d.h * d.w..(cin + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = &mut col[((cin * d.k + ky) * d.k + kx) * strip
                    ..((cin * d.k + ky) * d.k + kx + 1) * strip];
                for oy in oy0..oy1 {
                    let dst = &mut row[(oy - oy0) * d.ow..(oy - oy0 + 1) * d.ow];
                    let iy = (oy * stride + ky) as isize - pad;
                    if iy < 0 || iy >= d.h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    if stride == 1 {
                        // contiguous copy of the in-bounds span, zeros elsewhere
                        let ix0 = kx as isize - pad; // ix = ox + ix0
                        let ox_lo = (-ix0).max(0) as usize;
                        let ox_hi = ((d.w as isize - ix0).max(0) as usize).min(d.ow);
                        dst[..ox_lo.min(d.ow)].iter_mut().for_each(|v| *v = T::zero());
                        if ox_lo < ox_hi {
                            dst[ox_lo..ox_hi].copy_from_slice(
                                &src_row[(ox_lo as isize + ix0) as usize
                                    ..(ox_hi as isize + ix0) as usize],
                            );
                        }
                        dst[ox_hi.max(ox_lo)..].iter_mut().for_each(|v| *v = T::zero());
                    } else {
                        for (ox, v) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad;
                            *v = if ix >= 0 && ix < d.w as isize {
                                src_row[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the transpose of im2col: `dinput += col2im(dcol)`.
fn col2im_add<T: Scalar>(
    dcol: &[T],
    d: &ConvDims,
    padding: usize,
    stride: usize,
    oy0: usize,
    oy1: usize,
    dinput: &mut [T],
) {
    let strip = (oy1 - oy0) * d.ow;
    let pad = padding as isize;
    for cin in 0..d.cin {
        let plane = &mut dinput[cin * d.h * d.w..(cin + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = &dcol[((cin * d.k + ky) * d.k + kx) * strip
                    ..((cin * d.k + ky) * d.k + kx + 1) * strip];
                for oy in oy0..oy1 {
                    let src = &row[(oy - oy0) * d.ow..(oy - oy0 + 1) * d.ow];
                    let iy = (oy * stride + ky) as isize - pad;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    if stride == 1 {
                        let ix0 = kx as isize - pad;
                        let ox_lo = (-ix0).max(0) as usize;
                        let ox_hi = ((d.w as isize - ix0).max(0) as usize).min(d.ow);
                        for ox in ox_lo..ox_hi {
                            dst_row[(ox as isize + ix0) as usize] += src[ox];
                        }
                    } else {
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad;
                            if ix >= 0 && ix < d.w as isize {
                                dst_row[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn strip_rows(kdim: usize, ow: usize) -> usize {
    (STRIP_ELEMS / (kdim * ow).max(1)).max(1)
}

fn conv2d_single<T: Scalar>(
    input: &[T],
    kernel: &Tensor<T>,
    padding: usize,
    stride: usize,
    d: &ConvDims,
    out: &mut [T],
) {
    let kdim = d.cin * d.k * d.k;
    let rows = strip_rows(kdim, d.ow);
    let mut col = vec![T::zero(); kdim * rows * d.ow];
    let mut oy0 = 0;
    while oy0 < d.oh {
        let oy1 = (oy0 + rows).min(d.oh);
        let strip = (oy1 - oy0) * d.ow;
        im2col(input, d, padding, stride, oy0, oy1, &mut col[..kdim * strip]);
        // out[cout, oy0.., :] = kernel_mat [cout, kdim] @ col [kdim, strip]
        T::gemm(
            d.cout,
            kdim,
            strip,
            T::one(),
            kernel.data(),
            kdim as isize,
            1,
            &col[..kdim * strip],
            strip as isize,
            1,
            T::zero(),
            &mut out[oy0 * d.ow..],
            (d.oh * d.ow) as isize,
            1,
        );
        oy0 = oy1;
    }
}

/// Cross-correlate `input` (`[Cin,H,W]` or `[B,Cin,H,W]`) with
/// `kernel [Cout,Cin,k,k]` under zero padding.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    padding: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    match input.rank() {
        3 => {
            let d = check_dims(input.shape(), kernel, padding, stride)?;
            let mut out = Tensor::zeros(&[d.cout, d.oh, d.ow]);
            conv2d_single(input.data(), kernel, padding, stride, &d, out.data_mut());
            debug_check_finite("conv2d", &out);
            Ok(out)
        }
        4 => {
            let b = input.shape()[0];
            let d = check_dims(&input.shape()[1..], kernel, padding, stride)?;
            let mut out = Tensor::zeros(&[b, d.cout, d.oh, d.ow]);
            let in_sz = d.cin * d.h * d.w;
            let out_sz = d.cout * d.oh * d.ow;
            let input_data = input.data();
            crate::par::for_each_chunk_mut(out.data_mut(), out_sz, |i, out_i| {
                conv2d_single(
                    &input_data[i * in_sz..(i + 1) * in_sz],
                    kernel,
                    padding,
                    stride,
                    &d,
                    out_i,
                );
            });
            debug_check_finite("conv2d", &out);
            Ok(out)
        }
        r => Err(Error::ShapeMismatch(format!(
            "conv2d input must be rank 3 or 4, got rank {r}"
        ))),
    }
}

fn conv2d_backward_single<T: Scalar>(
    input: &[T],
    kernel: &Tensor<T>,
    padding: usize,
    stride: usize,
    d: &ConvDims,
    dout: &[T],
    dinput: &mut [T],
    dkernel: &mut [T],
) {
    let kdim = d.cin * d.k * d.k;
    let rows = strip_rows(kdim, d.ow);
    let mut col = vec![T::zero(); kdim * rows * d.ow];
    let mut dcol = vec![T::zero(); kdim * rows * d.ow];
    let mut oy0 = 0;
    while oy0 < d.oh {
        let oy1 = (oy0 + rows).min(d.oh);
        let strip = (oy1 - oy0) * d.ow;
        im2col(input, d, padding, stride, oy0, oy1, &mut col[..kdim * strip]);
        // dkernel [cout, kdim] += dout_strip [cout, strip] @ col^T [strip, kdim]
        T::gemm(
            d.cout,
            strip,
            kdim,
            T::one(),
            &dout[oy0 * d.ow..],
            (d.oh * d.ow) as isize,
            1,
            &col[..kdim * strip],
            1,
            strip as isize,
            T::one(),
            dkernel,
            kdim as isize,
            1,
        );
        // dcol [kdim, strip] = kernel^T [kdim, cout] @ dout_strip [cout, strip]
        T::gemm(
            kdim,
            d.cout,
            strip,
            T::one(),
            kernel.data(),
            1,
            kdim as isize,
            &dout[oy0 * d.ow..],
            (d.oh * d.ow) as isize,
            1,
            T::zero(),
            &mut dcol[..kdim * strip],
            strip as isize,
            1,
        );
        col2im_add(&dcol[..kdim * strip], d, padding, stride, oy0, oy1, dinput);
        oy0 = oy1;
    }
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    padding: usize,
    stride: usize,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut dkernel = Tensor::zeros(kernel.shape());
    match input.rank() {
        3 => {
            let d = check_dims(input.shape(), kernel, padding, stride)?;
            assert_eq!(dout.shape(), &[d.cout, d.oh, d.ow], "dout shape mismatch");
            let mut dinput = Tensor::zeros(input.shape());
            conv2d_backward_single(
                input.data(),
                kernel,
                padding,
                stride,
                &d,
                dout.data(),
                dinput.data_mut(),
                dkernel.data_mut(),
            );
            Ok((dinput, dkernel))
        }
        4 => {
            let b = input.shape()[0];
            let d = check_dims(&input.shape()[1..], kernel, padding, stride)?;
            assert_eq!(dout.shape(), &[b, d.cout, d.oh, d.ow], "dout shape mismatch");
            let mut dinput = Tensor::zeros(input.shape());
            let in_sz = d.cin * d.h * d.w;
            let out_sz = d.cout * d.oh * d.ow;
            let input_data = input.data();
            let dout_data = dout.data();
            // batch items are independent; per-item dkernel buffers are
            // reduced afterwards in batch order so the sum is reproducible
            let per_item = crate::par::map_indexed(b, |i| {
                let mut dk_i = vec![T::zero(); kernel.len()];
                let mut din_i = vec![T::zero(); in_sz];
                conv2d_backward_single(
                    &input_data[i * in_sz..(i + 1) * in_sz],
                    kernel,
                    padding,
                    stride,
                    &d,
                    &dout_data[i * out_sz..(i + 1) * out_sz],
                    &mut din_i,
                    &mut dk_i,
                );
                (din_i, dk_i)
            });
            for ((din_i, dk_i), din_slot) in per_item
                .into_iter()
                .zip(dinput.data_mut().chunks_mut(in_sz))
            {
                din_slot.copy_from_slice(&din_i);
                for (a, b) in dkernel.data_mut().iter_mut().zip(&dk_i) {
                    *a += *b;
                }
            }
            Ok((dinput, dkernel))
        }
        r => Err(Error::ShapeMismatch(format!(
            "conv2d input must be rank 3 or 4, got rank {r}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct quadruple-loop reference, accumulated in f64.
    pub fn conv2d_oracle(
        input: &Tensor<f64>,
        kernel: &Tensor<f64>,
        padding: usize,
        stride: usize,
    ) -> Tensor<f64> {
        let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (cout, k) = (kernel.shape()[0], kernel.shape()[2]);
        let oh = conv2d_out_extent(h, k, padding, stride).unwrap();
        let ow = conv2d_out_extent(w, k, padding, stride).unwrap();
        let mut out = Tensor::zeros(&[cout, oh, ow]);
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    acc += input.at(&[ci, iy as usize, ix as usize])
                                        * kernel.at(&[co, ci, ky, kx]);
                                }
                            }
                        }
                    }
                    out.set(&[co, oy, ox], acc);
                }
            }
        }
        out
    }

    #[test]
    fn all_ones_3x3_padding_arithmetic() {
        let input = Tensor::<f32>::full(&[1, 3, 3], 1.0);
        let kernel = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let out = conv2d(&input, &kernel, 1, 1).unwrap();
        assert_eq!(out.at(&[0, 1, 1]), 9.0);
        assert_eq!(out.at(&[0, 0, 0]), 4.0);
        assert_eq!(out.at(&[0, 0, 1]), 6.0);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = super::super::random_uniform::<f32, _>(&[2, 6, 5], 1.0, &mut rng);
        let mut kernel = Tensor::<f32>::zeros(&[2, 2, 3, 3]);
        kernel.set(&[0, 0, 1, 1], 1.0);
        kernel.set(&[1, 1, 1, 1], 1.0);
        let out = conv2d(&input, &kernel, 1, 1).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn matches_direct_sum_oracle_on_spec_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = super::super::random_uniform::<f64, _>(&[2, 5, 7], 1.0, &mut rng);
        let kernel = super::super::random_uniform::<f64, _>(&[3, 2, 3, 3], 1.0, &mut rng);
        let out = conv2d(&input, &kernel, 1, 1).unwrap();
        let want = conv2d_oracle(&input, &kernel, 1, 1);
        assert!(out.rel_error(&want) < 1e-5, "rel {}", out.rel_error(&want));
    }

    #[test]
    fn matches_oracle_on_50_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let cin = rng.gen_range(1..4);
            let cout = rng.gen_range(1..4);
            let k = [1usize, 3, 5][rng.gen_range(0..3)];
            let h = rng.gen_range(k..k + 9);
            let w = rng.gen_range(k..k + 9);
            let padding = rng.gen_range(0..=k / 2 + 1);
            let stride = rng.gen_range(1..3);
            if conv2d_out_extent(h, k, padding, stride).is_none()
                || conv2d_out_extent(w, k, padding, stride).is_none()
            {
                continue;
            }
            let input = super::super::random_uniform::<f64, _>(&[cin, h, w], 1.0, &mut rng);
            let kernel =
                super::super::random_uniform::<f64, _>(&[cout, cin, k, k], 1.0, &mut rng);
            let out = conv2d(&input, &kernel, padding, stride).unwrap();
            let want = conv2d_oracle(&input, &kernel, padding, stride);
            assert!(
                out.rel_error(&want) < 1e-5,
                "rel {} for k={k} pad={padding} stride={stride}",
                out.rel_error(&want)
            );
        }
    }

    #[test]
    fn rejects_channel_mismatch_and_bad_extent() {
        let input = Tensor::<f32>::zeros(&[2, 4, 4]);
        let kernel = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        assert!(conv2d(&input, &kernel, 1, 1).is_err());
        let kernel = Tensor::<f32>::zeros(&[1, 2, 5, 5]);
        assert!(conv2d(&input, &kernel, 0, 1).is_err());
    }

    #[test]
    fn batched_equals_per_item() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = super::super::random_uniform::<f32, _>(&[3, 2, 6, 6], 1.0, &mut rng);
        let kernel = super::super::random_uniform::<f32, _>(&[4, 2, 3, 3], 1.0, &mut rng);
        let out = conv2d(&batch, &kernel, 1, 1).unwrap();
        for i in 0..3 {
            let item = Tensor::from_vec(
                &[2, 6, 6],
                batch.data()[i * 72..(i + 1) * 72].to_vec(),
            )
            .unwrap();
            let want = conv2d(&item, &kernel, 1, 1).unwrap();
            assert_eq!(&out.data()[i * 144..(i + 1) * 144], want.data());
        }
    }

    #[test]
    fn backward_matches_f64_oracle_gradients() {
        // loss = sum(U . conv(x, k)); check dx and dk against finite differences
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = super::super::random_uniform::<f64, _>(&[2, 6, 5], 1.0, &mut rng);
        let kernel = super::super::random_uniform::<f64, _>(&[3, 2, 3, 3], 1.0, &mut rng);
        let upstream = super::super::random_uniform::<f64, _>(&[3, 6, 5], 1.0, &mut rng);
        let (dx, dk) = conv2d_backward(&input, &kernel, 1, 1, &upstream).unwrap();
        let loss = |x: &Tensor<f64>, k: &Tensor<f64>| -> f64 {
            conv2d(x, k, 1, 1)
                .unwrap()
                .data()
                .iter()
                .zip(upstream.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let eps = 1e-6;
        for probe in 0..10 {
            let i = (probe * 7) % input.len();
            let mut xp = input.clone();
            xp.data_mut()[i] += eps;
            let mut xm = input.clone();
            xm.data_mut()[i] -= eps;
            let fd = (loss(&xp, &kernel) - loss(&xm, &kernel)) / (2.0 * eps);
            assert!((fd - dx.data()[i]).abs() < 1e-7, "dx[{i}] fd={fd} got={}", dx.data()[i]);
            let j = (probe * 5) % kernel.len();
            let mut kp = kernel.clone();
            kp.data_mut()[j] += eps;
            let mut km = kernel.clone();
            km.data_mut()[j] -= eps;
            let fd = (loss(&input, &kp) - loss(&input, &km)) / (2.0 * eps);
            assert!((fd - dk.data()[j]).abs() < 1e-7, "dk[{j}] fd={fd} got={}", dk.data()[j]);
        }
    }
}
