//! Pointwise and resampling ops: relu, softmax along an axis, and bilinear
//! resize with the align-corners-false (center-of-pixel) convention.

use super::{debug_check_finite, Scalar, Tensor};
use crate::{Error, Result};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// `dx = dy * [x > 0]`. The subgradient at exactly zero is taken as 0.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    assert_eq!(x.shape(), dy.shape());
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&xi, &gi)| if xi > T::zero() { gi } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data).unwrap()
}

fn axis_spans(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, extent, inner)
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::InvalidArgument(format!(
            "softmax axis {axis} out of range for rank {}",
            x.rank()
        )));
    }
    let (outer, extent, inner) = axis_spans(x.shape(), axis);
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let mut max = T::neg_infinity();
            for e in 0..extent {
                max = max.max(data[base + e * inner]);
            }
            let mut sum = T::zero();
            for e in 0..extent {
                let v = (data[base + e * inner] - max).exp();
                data[base + e * inner] = v;
                sum += v;
            }
            for e in 0..extent {
                data[base + e * inner] /= sum;
            }
        }
    }
    debug_check_finite("softmax", &out);
    Ok(out)
}

/// Backward of softmax given its output `y`: `dx = y * (dy - sum(dy * y))`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Tensor<T> {
    assert_eq!(y.shape(), dy.shape());
    let (outer, extent, inner) = axis_spans(y.shape(), axis);
    let mut dx = Tensor::zeros(y.shape());
    let (yd, gd, xd) = (y.data(), dy.data(), dx.data_mut());
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let mut dot = T::zero();
            for e in 0..extent {
                dot += yd[base + e * inner] * gd[base + e * inner];
            }
            for e in 0..extent {
                xd[base + e * inner] = yd[base + e * inner] * (gd[base + e * inner] - dot);
            }
        }
    }
    dx
}

/// Sample weights for one resized axis under the center-of-pixel convention.
/// Returns `(i0, i1, frac)` per target index; `i0`/`i1` are clamped source
/// indices and the sample is `(1-frac)*src[i0] + frac*src[i1]`.
fn resize_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|t| {
            let s = (t as f64 + 0.5) * scale - 0.5;
            let floor = s.floor();
            let frac = s - floor;
            let i0 = (floor as isize).clamp(0, src as isize - 1) as usize;
            let i1 = (floor as isize + 1).clamp(0, src as isize - 1) as usize;
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resize of the trailing two axes to `oh x ow`. Leading axes are
/// treated as independent channels. Same-size resize is exactly identity.
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    if x.rank() < 2 {
        return Err(Error::ShapeMismatch("resize needs rank >= 2".into()));
    }
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidArgument("target extents must be >= 1".into()));
    }
    let (h, w) = (x.shape()[x.rank() - 2], x.shape()[x.rank() - 1]);
    let chans: usize = x.shape()[..x.rank() - 2].iter().product();
    let mut out_shape = x.shape().to_vec();
    let r = out_shape.len();
    out_shape[r - 2] = oh;
    out_shape[r - 1] = ow;
    let ys = resize_axis(h, oh);
    let xs = resize_axis(w, ow);
    let mut out = Tensor::zeros(&out_shape);
    let src = x.data();
    for c in 0..chans {
        let plane = &src[c * h * w..(c + 1) * h * w];
        let dst = &mut out.data_mut()[c * oh * ow..(c + 1) * oh * ow];
        for (ty, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = T::from_f64(fy);
            let row0 = &plane[y0 * w..y0 * w + w];
            let row1 = &plane[y1 * w..y1 * w + w];
            for (tx, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = T::from_f64(fx);
                let top = row0[x0] + fx * (row0[x1] - row0[x0]);
                let bot = row1[x0] + fx * (row1[x1] - row1[x0]);
                dst[ty * ow + tx] = top + fy * (bot - top);
            }
        }
    }
    debug_check_finite("bilinear_resize", &out);
    Ok(out)
}

/// Transpose of [`bilinear_resize`]: scatter `dy` back onto the source grid.
pub fn bilinear_resize_backward<T: Scalar>(src_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let r = src_shape.len();
    let (h, w) = (src_shape[r - 2], src_shape[r - 1]);
    let (oh, ow) = (dy.shape()[r - 2], dy.shape()[r - 1]);
    let chans: usize = src_shape[..r - 2].iter().product();
    let ys = resize_axis(h, oh);
    let xs = resize_axis(w, ow);
    let mut dx = Tensor::zeros(src_shape);
    let g = dy.data();
    for c in 0..chans {
        let gp = &g[c * oh * ow..(c + 1) * oh * ow];
        let dp = &mut dx.data_mut()[c * h * w..(c + 1) * h * w];
        for (ty, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = T::from_f64(fy);
            for (tx, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = T::from_f64(fx);
                let v = gp[ty * ow + tx];
                let one = T::one();
                dp[y0 * w + x0] += (one - fy) * (one - fx) * v;
                dp[y0 * w + x1] += (one - fy) * fx * v;
                dp[y1 * w + x0] += fy * (one - fx) * v;
                dp[y1 * w + x1] += fy * fx * v;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_of_constant_vector_is_uniform() {
        let x = Tensor::<f64>::full(&[36], 2.5);
        let y = softmax(&x, 0).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 36.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_probability_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = super::super::random_uniform::<f32, _>(&[4, 9, 3], 5.0, &mut rng);
        let y = softmax(&x, 1).unwrap();
        for o in 0..4 {
            for i in 0..3 {
                let mut sum = 0.0f32;
                for e in 0..9 {
                    let v = y.at(&[o, e, i]);
                    assert!(v >= 0.0);
                    sum += v;
                }
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn resize_same_size_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = super::super::random_uniform::<f32, _>(&[2, 4, 4], 1.0, &mut rng);
        let y = bilinear_resize(&x, 4, 4).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn resize_2x2_to_4x4_matches_closed_form() {
        // source [[0,1],[2,3]]; target centers at (t+0.5)*0.5-0.5
        let x = Tensor::<f64>::from_vec(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = bilinear_resize(&x, 4, 4).unwrap();
        // with a 2x2 source, sampling at clamped coords (cy, cx) in [0,1]^2
        // is plain unit-square interpolation of the four corners
        let sample = |sy: f64, sx: f64| -> f64 {
            let cy = sy.clamp(0.0, 1.0);
            let cx = sx.clamp(0.0, 1.0);
            (1.0 - cy) * ((1.0 - cx) * 0.0 + cx * 1.0) + cy * ((1.0 - cx) * 2.0 + cx * 3.0)
        };
        for ty in 0..4 {
            for tx in 0..4 {
                let sy = (ty as f64 + 0.5) * 0.5 - 0.5;
                let sx = (tx as f64 + 0.5) * 0.5 - 0.5;
                let want = sample(sy, sx);
                let got = y.at(&[0, ty, tx]);
                assert!(
                    (got - want).abs() < 1e-12,
                    "({ty},{tx}): got {got}, want {want}"
                );
            }
        }
    }

    #[test]
    fn resize_backward_is_transpose() {
        // <resize(x), u> == <x, resize^T(u)> for the linear map
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = super::super::random_uniform::<f64, _>(&[1, 5, 7], 1.0, &mut rng);
        let u = super::super::random_uniform::<f64, _>(&[1, 8, 3], 1.0, &mut rng);
        let yx = bilinear_resize(&x, 8, 3).unwrap();
        let lhs: f64 = yx.data().iter().zip(u.data()).map(|(a, b)| a * b).sum();
        let xt = bilinear_resize_backward(&[1, 5, 7], &u);
        let rhs: f64 = x.data().iter().zip(xt.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn relu_backward_masks() {
        let x = Tensor::<f32>::from_vec(&[4], vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        let dy = Tensor::<f32>::full(&[4], 3.0);
        let dx = relu_backward(&x, &dy);
        assert_eq!(dx.data(), &[0.0, 0.0, 3.0, 3.0]);
    }
}
