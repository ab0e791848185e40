//! Image and point warping under in-plane rotations, with validity masks.
//!
//! Conventions used crate-wide: pixel centers sit at integer coordinates,
//! `x` is the column and `y` the row, and a positive angle rotates the image
//! counter-clockwise in the usual display orientation. Warping is inverse
//! mapping with bilinear sampling; out-of-bounds reads are zero.

use crate::tensor::{Scalar, Tensor};
use crate::Result;

/// Rotation about the image center by `angle_deg`, mapping a `src_size`
/// image onto a `dst_size` canvas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotTransform {
    pub angle_deg: f64,
    /// src (width, height)
    pub src_size: (usize, usize),
    /// dst (width, height)
    pub dst_size: (usize, usize),
}

/// Binary map over the destination frame: 1 exactly where the inverse-warped
/// sample point lies fully inside the source image.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidityMask {
    pub width: usize,
    pub height: usize,
    data: Vec<bool>,
}

impl ValidityMask {
    pub fn all_valid(width: usize, height: usize) -> Self {
        ValidityMask {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), width * height);
        ValidityMask {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Validity at a real-valued point; false outside the frame.
    pub fn at_point(&self, x: f64, y: f64) -> bool {
        let xi = x.round();
        let yi = y.round();
        if xi < 0.0 || yi < 0.0 || xi >= self.width as f64 || yi >= self.height as f64 {
            return false;
        }
        self.get(xi as usize, yi as usize)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn intersect(&self, other: &ValidityMask) -> ValidityMask {
        assert_eq!((self.width, self.height), (other.width, other.height));
        ValidityMask {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a && b)
                .collect(),
        }
    }
}

impl RotTransform {
    pub fn new(angle_deg: f64, src_size: (usize, usize), dst_size: (usize, usize)) -> Self {
        RotTransform {
            angle_deg,
            src_size,
            dst_size,
        }
    }

    /// Same-frame rotation.
    pub fn rotation(angle_deg: f64, size: (usize, usize)) -> Self {
        Self::new(angle_deg, size, size)
    }

    pub fn identity(size: (usize, usize)) -> Self {
        Self::new(0.0, size, size)
    }

    pub fn inverse(&self) -> RotTransform {
        RotTransform {
            angle_deg: -self.angle_deg,
            src_size: self.dst_size,
            dst_size: self.src_size,
        }
    }

    fn centers(&self) -> ((f64, f64), (f64, f64)) {
        let sc = (
            (self.src_size.0 as f64 - 1.0) / 2.0,
            (self.src_size.1 as f64 - 1.0) / 2.0,
        );
        let dc = (
            (self.dst_size.0 as f64 - 1.0) / 2.0,
            (self.dst_size.1 as f64 - 1.0) / 2.0,
        );
        (sc, dc)
    }

    /// (cos, sin), exact at multiples of 90 degrees.
    fn cos_sin(&self) -> (f64, f64) {
        let a = self.angle_deg.rem_euclid(360.0);
        if a == 0.0 {
            (1.0, 0.0)
        } else if a == 90.0 {
            (0.0, 1.0)
        } else if a == 180.0 {
            (-1.0, 0.0)
        } else if a == 270.0 {
            (0.0, -1.0)
        } else {
            let r = a.to_radians();
            (r.cos(), r.sin())
        }
    }

    /// Map a source-frame point to the destination frame.
    ///
    /// With y pointing down, a CCW image rotation by `a` sends the centered
    /// offset `(dx, dy)` to `(c*dx + s*dy, -s*dx + c*dy)` with
    /// `c = cos a, s = sin a`.
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let ((scx, scy), (dcx, dcy)) = self.centers();
        let (c, s) = self.cos_sin();
        let (dx, dy) = (x - scx, y - scy);
        (c * dx + s * dy + dcx, -s * dx + c * dy + dcy)
    }

    /// Map a destination-frame point back to the source frame.
    pub fn apply_inverse(&self, x: f64, y: f64) -> (f64, f64) {
        self.inverse().apply(x, y)
    }

    /// True when the angle is an exact multiple of 90 degrees, where the
    /// warp of a square image is a lossless index permutation.
    pub fn is_quarter_turn(&self) -> bool {
        self.angle_deg.rem_euclid(90.0) == 0.0
    }
}

/// Bilinear sample of a `[H, W]` plane at a real point; zero outside.
pub fn sample_bilinear<T: Scalar>(plane: &[T], w: usize, h: usize, x: f64, y: f64) -> T {
    if x <= -1.0 || y <= -1.0 || x >= w as f64 || y >= h as f64 {
        return T::zero();
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = T::from_f64(x - x0);
    let fy = T::from_f64(y - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let read = |xx: isize, yy: isize| -> T {
        if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
            T::zero()
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let one = T::one();
    let top = read(x0, y0) * (one - fx) + read(x0 + 1, y0) * fx;
    let bot = read(x0, y0 + 1) * (one - fx) + read(x0 + 1, y0 + 1) * fx;
    top * (one - fy) + bot * fy
}

fn quarter_src_index(quarters: usize, w: usize, h: usize, x: usize, y: usize) -> (usize, usize) {
    match quarters {
        0 => (x, y),
        // ccw by 90: dst[y][x] = src[x][W-1-y] in (row, col) terms
        1 => (w - 1 - y, x),
        2 => (w - 1 - x, h - 1 - y),
        _ => (y, h - 1 - x),
    }
}

/// Warp every trailing-plane channel of `img` by `t`, producing the
/// destination-frame image and its validity mask.
///
/// The mask keeps exactly the pixels whose full bilinear support lies inside
/// the source (equivalent to warping an all-ones image and thresholding at
/// 0.999). Quarter-turn angles on square frames take an exact index
/// permutation path.
pub fn warp_image<T: Scalar>(
    img: &Tensor<T>,
    t: &RotTransform,
) -> Result<(Tensor<T>, ValidityMask)> {
    let r = img.rank();
    assert!(r >= 2, "warp_image needs rank >= 2");
    let (h, w) = (img.shape()[r - 2], img.shape()[r - 1]);
    assert_eq!((w, h), t.src_size, "image does not match transform src_size");
    let (dw, dh) = t.dst_size;
    let chans: usize = img.shape()[..r - 2].iter().product();
    let mut out_shape = img.shape().to_vec();
    out_shape[r - 2] = dh;
    out_shape[r - 1] = dw;
    let mut out = Tensor::zeros(&out_shape);

    if t.is_quarter_turn() && w == h && dw == w && dh == h {
        let quarters = (t.angle_deg.rem_euclid(360.0) / 90.0).round() as usize % 4;
        for c in 0..chans {
            let src = &img.data()[c * h * w..(c + 1) * h * w];
            let dst = &mut out.data_mut()[c * h * w..(c + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let (sx, sy) = quarter_src_index(quarters, w, h, x, y);
                    dst[y * w + x] = src[sy * w + sx];
                }
            }
        }
        return Ok((out, ValidityMask::all_valid(dw, dh)));
    }

    let inv = t.inverse();
    let mut mask = vec![false; dw * dh];
    for y in 0..dh {
        for x in 0..dw {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            // full bilinear support inside the source frame
            mask[y * dw + x] =
                sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f64 && sy <= (h - 1) as f64;
        }
    }
    for c in 0..chans {
        let src = &img.data()[c * h * w..(c + 1) * h * w];
        let dst = &mut out.data_mut()[c * dh * dw..(c + 1) * dh * dw];
        for y in 0..dh {
            for x in 0..dw {
                let (sx, sy) = inv.apply(x as f64, y as f64);
                dst[y * dw + x] = sample_bilinear(src, w, h, sx, sy);
            }
        }
    }
    Ok((out, ValidityMask::from_data(dw, dh, mask)))
}

/// Transpose of [`warp_image`]'s linear map: scatter `dout` back onto the
/// source grid through the same bilinear weights.
pub fn warp_image_backward<T: Scalar>(dout: &Tensor<T>, t: &RotTransform) -> Tensor<T> {
    let r = dout.rank();
    let (dh, dw) = (dout.shape()[r - 2], dout.shape()[r - 1]);
    assert_eq!((dw, dh), t.dst_size);
    let (w, h) = t.src_size;
    let chans: usize = dout.shape()[..r - 2].iter().product();
    let mut in_shape = dout.shape().to_vec();
    in_shape[r - 2] = h;
    in_shape[r - 1] = w;
    let mut dx = Tensor::zeros(&in_shape);
    if t.is_quarter_turn() && w == h && dw == w && dh == h {
        let quarters = (t.angle_deg.rem_euclid(360.0) / 90.0).round() as usize % 4;
        for c in 0..chans {
            let g = &dout.data()[c * h * w..(c + 1) * h * w];
            let d = &mut dx.data_mut()[c * h * w..(c + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let (sx, sy) = quarter_src_index(quarters, w, h, x, y);
                    d[sy * w + sx] += g[y * w + x];
                }
            }
        }
        return dx;
    }
    let inv = t.inverse();
    for c in 0..chans {
        let g = &dout.data()[c * dh * dw..(c + 1) * dh * dw];
        let d = &mut dx.data_mut()[c * h * w..(c + 1) * h * w];
        for y in 0..dh {
            for x in 0..dw {
                let v = g[y * dw + x];
                if v == T::zero() {
                    continue;
                }
                let (sx, sy) = inv.apply(x as f64, y as f64);
                if sx <= -1.0 || sy <= -1.0 || sx >= w as f64 || sy >= h as f64 {
                    continue;
                }
                let x0f = sx.floor();
                let y0f = sy.floor();
                let fx = T::from_f64(sx - x0f);
                let fy = T::from_f64(sy - y0f);
                let (x0, y0) = (x0f as isize, y0f as isize);
                let one = T::one();
                let mut scatter = |xx: isize, yy: isize, wgt: T| {
                    if xx >= 0 && yy >= 0 && xx < w as isize && yy < h as isize {
                        d[yy as usize * w + xx as usize] += wgt * v;
                    }
                };
                scatter(x0, y0, (one - fx) * (one - fy));
                scatter(x0 + 1, y0, fx * (one - fy));
                scatter(x0, y0 + 1, (one - fx) * fy);
                scatter(x0 + 1, y0 + 1, fx * fy);
            }
        }
    }
    dx
}

/// Forward-warp a list of `(x, y)` points.
pub fn warp_points(pts: &[(f64, f64)], t: &RotTransform) -> Vec<(f64, f64)> {
    pts.iter().map(|&(x, y)| t.apply(x, y)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_img(w: usize, h: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(&[h, w], data).unwrap()
    }

    #[test]
    fn identity_warp_is_identity() {
        let img = rand_img(7, 7, 1);
        let t = RotTransform::identity((7, 7));
        let (out, mask) = warp_image(&img, &t).unwrap();
        assert_eq!(out.data(), img.data());
        assert_eq!(mask.count(), 49);
    }

    #[test]
    fn ccw_90_is_exact_permutation() {
        let img = rand_img(5, 5, 2);
        let t = RotTransform::rotation(90.0, (5, 5));
        let (out, mask) = warp_image(&img, &t).unwrap();
        assert_eq!(mask.count(), 25);
        // img'[i, j] = img[j, H-1-i]
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(out.at(&[i, j]), img.at(&[j, 4 - i]), "at ({i},{j})");
            }
        }
    }

    #[test]
    fn four_quarter_turns_return_original_exactly() {
        let img = rand_img(8, 8, 3);
        let t = RotTransform::rotation(90.0, (8, 8));
        let mut cur = img.clone();
        for _ in 0..4 {
            cur = warp_image(&cur, &t).unwrap().0;
        }
        assert_eq!(cur.data(), img.data());
    }

    #[test]
    fn mask_area_at_45_matches_polygon_overlap() {
        // overlap of the square with its 45-degree rotation is an octagon;
        // cutting four corner triangles of side (1 - 1/sqrt(2)) each leaves
        // area 1 - (sqrt(2) - 1)^2 * ... computed directly below
        let n = 256;
        let img = Tensor::<f32>::full(&[n, n], 1.0);
        let t = RotTransform::rotation(45.0, (n, n));
        let (_, mask) = warp_image(&img, &t).unwrap();
        let frac = mask.count() as f64 / (n * n) as f64;
        // analytic overlap of unit square and concentric 45-deg rotation:
        // regular octagon with apothem 1/2: area = 8 * (1/2)^2 * tan(pi/8)
        let octagon = 8.0 * 0.25 * (std::f64::consts::PI / 8.0).tan();
        assert!((frac - octagon).abs() < 0.02, "frac {frac}, want {octagon}");
    }

    #[test]
    fn corners_invalid_at_45() {
        let img = Tensor::<f32>::full(&[64, 64], 1.0);
        let t = RotTransform::rotation(45.0, (64, 64));
        let (_, mask) = warp_image(&img, &t).unwrap();
        assert!(!mask.get(0, 0));
        assert!(!mask.get(63, 63));
        assert!(mask.get(32, 32));
    }

    #[test]
    fn point_roundtrip_under_random_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = RotTransform::rotation(rng.gen_range(-180.0..180.0), (100, 80));
        let pts: Vec<(f64, f64)> = (0..100)
            .map(|_| (rng.gen_range(0.0..99.0), rng.gen_range(0.0..79.0)))
            .collect();
        let fwd = warp_points(&pts, &t);
        let back = warp_points(&fwd, &t.inverse());
        for (p, q) in pts.iter().zip(&back) {
            assert!((p.0 - q.0).abs() < 1e-6 && (p.1 - q.1).abs() < 1e-6);
        }
    }

    #[test]
    fn center_is_fixed_point() {
        for angle in [13.0, 45.0, 90.0, 211.5] {
            let t = RotTransform::rotation(angle, (9, 9));
            let (x, y) = t.apply(4.0, 4.0);
            assert!((x - 4.0).abs() < 1e-12 && (y - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_points_roundtrip_through_warp() {
        let img = rand_img(32, 32, 9);
        let t = RotTransform::rotation(30.0, (32, 32));
        let (_, mask) = warp_image(&img, &t).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                if mask.get(x, y) {
                    let (fx, fy) = t.inverse().apply(x as f64, y as f64);
                    let (bx, by) = t.apply(fx, fy);
                    assert!((bx - x as f64).abs() < 1e-6 && (by - y as f64).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn warp_backward_is_transpose_of_forward() {
        let img = rand_img(16, 16, 5).cast::<f64>();
        let t = RotTransform::rotation(33.0, (16, 16));
        let (out, _) = warp_image(&img, &t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u: Tensor<f64> = crate::tensor::random_uniform(&[16, 16], 1.0, &mut rng);
        let lhs: f64 = out.data().iter().zip(u.data()).map(|(a, b)| a * b).sum();
        let ut = warp_image_backward(&u, &t);
        let rhs: f64 = img.data().iter().zip(ut.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
