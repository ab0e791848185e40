//! Metrics and evaluation drivers: repeatability, mean matching accuracy,
//! orientation-estimation accuracy, the synthetic-rotation sweep, and an
//! HPatches-style folder reader for external data.

use crate::geometry::{RotTransform, ValidityMask};
use crate::inference::Keypoint;
use crate::model::Model;
use crate::tensor::{BnMode, Tensor};
use crate::{Error, Result};
use std::io::Write;
use std::path::Path;

/// A ground-truth point correspondence between two frames. Rotations cover
/// the synthetic pipeline; homographies exist for external evaluation data.
pub trait PointMap: Sync {
    /// src-frame point to dst frame.
    fn map(&self, x: f64, y: f64) -> (f64, f64);
    /// dst-frame point to src frame.
    fn map_inverse(&self, x: f64, y: f64) -> (f64, f64);
    /// src (width, height)
    fn src_size(&self) -> (usize, usize);
    /// dst (width, height)
    fn dst_size(&self) -> (usize, usize);
}

impl PointMap for RotTransform {
    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        self.apply(x, y)
    }
    fn map_inverse(&self, x: f64, y: f64) -> (f64, f64) {
        self.apply_inverse(x, y)
    }
    fn src_size(&self) -> (usize, usize) {
        self.src_size
    }
    fn dst_size(&self) -> (usize, usize) {
        self.dst_size
    }
}

/// Plane projective transform given row-major 3x3 coefficients.
#[derive(Clone, Debug)]
pub struct Homography {
    h: [f64; 9],
    h_inv: [f64; 9],
    src: (usize, usize),
    dst: (usize, usize),
}

fn invert3(m: &[f64; 9]) -> Result<[f64; 9]> {
    let det = m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6]);
    if det.abs() < 1e-12 {
        return Err(Error::InvalidArgument("singular homography".into()));
    }
    let inv = [
        (m[4] * m[8] - m[5] * m[7]) / det,
        (m[2] * m[7] - m[1] * m[8]) / det,
        (m[1] * m[5] - m[2] * m[4]) / det,
        (m[5] * m[6] - m[3] * m[8]) / det,
        (m[0] * m[8] - m[2] * m[6]) / det,
        (m[2] * m[3] - m[0] * m[5]) / det,
        (m[3] * m[7] - m[4] * m[6]) / det,
        (m[1] * m[6] - m[0] * m[7]) / det,
        (m[0] * m[4] - m[1] * m[3]) / det,
    ];
    Ok(inv)
}

fn project(h: &[f64; 9], x: f64, y: f64) -> (f64, f64) {
    let w = h[6] * x + h[7] * y + h[8];
    ((h[0] * x + h[1] * y + h[2]) / w, (h[3] * x + h[4] * y + h[5]) / w)
}

impl Homography {
    pub fn new(h: [f64; 9], src: (usize, usize), dst: (usize, usize)) -> Result<Self> {
        Ok(Homography {
            h_inv: invert3(&h)?,
            h,
            src,
            dst,
        })
    }
}

impl PointMap for Homography {
    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        project(&self.h, x, y)
    }
    fn map_inverse(&self, x: f64, y: f64) -> (f64, f64) {
        project(&self.h_inv, x, y)
    }
    fn src_size(&self) -> (usize, usize) {
        self.src
    }
    fn dst_size(&self) -> (usize, usize) {
        self.dst
    }
}

fn in_bounds(x: f64, y: f64, size: (usize, usize)) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (size.0 - 1) as f64 && y <= (size.1 - 1) as f64
}

/// Repeatability at a pixel threshold: keypoints of either side whose
/// ground-truth counterpart leaves the other frame are dropped, the rest
/// are matched greedily one-to-one by ascending distance in the src frame,
/// and the matched count is divided by the smaller surviving cardinality.
pub fn repeatability(kps_a: &[Keypoint], kps_b: &[Keypoint], map: &dyn PointMap, thresh_px: f64) -> f64 {
    let a_valid: Vec<&Keypoint> = kps_a
        .iter()
        .filter(|k| {
            let p = map.map(k.x, k.y);
            in_bounds(p.0, p.1, map.dst_size())
        })
        .collect();
    let b_valid: Vec<(f64, f64)> = kps_b
        .iter()
        .filter_map(|k| {
            let p = map.map_inverse(k.x, k.y);
            in_bounds(p.0, p.1, map.src_size()).then_some(p)
        })
        .collect();
    if a_valid.is_empty() || b_valid.is_empty() {
        if kps_a.is_empty() && kps_b.is_empty() {
            eprintln!("repeatability: both keypoint lists empty, returning 0");
        }
        return 0.0;
    }
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, a) in a_valid.iter().enumerate() {
        for (j, b) in b_valid.iter().enumerate() {
            let d = ((a.x - b.0).powi(2) + (a.y - b.1).powi(2)).sqrt();
            if d <= thresh_px {
                candidates.push((d, i, j));
            }
        }
    }
    candidates.sort_by(|x, y| {
        x.0.partial_cmp(&y.0)
            .unwrap()
            .then(x.1.cmp(&y.1))
            .then(x.2.cmp(&y.2))
    });
    let mut used_a = vec![false; a_valid.len()];
    let mut used_b = vec![false; b_valid.len()];
    let mut matched = 0usize;
    for (_, i, j) in candidates {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            matched += 1;
        }
    }
    matched as f64 / a_valid.len().min(b_valid.len()) as f64
}

/// Fraction of matches whose warped-back target keypoint lies within each
/// threshold of its source keypoint. A pair with zero matches scores 0.
pub fn mma(
    matches: &crate::matching::MatchSet,
    kps_a: &[Keypoint],
    kps_b: &[Keypoint],
    map: &dyn PointMap,
    thresholds: &[f64],
) -> Vec<f64> {
    if matches.is_empty() {
        return vec![0.0; thresholds.len()];
    }
    let errors: Vec<f64> = matches
        .pairs
        .iter()
        .map(|&(i, j)| {
            let b = map.map_inverse(kps_b[j].x, kps_b[j].y);
            ((kps_a[i].x - b.0).powi(2) + (kps_a[i].y - b.1).powi(2)).sqrt()
        })
        .collect();
    thresholds
        .iter()
        .map(|&t| errors.iter().filter(|&&e| e <= t).count() as f64 / errors.len() as f64)
        .collect()
}

/// Spatially align the channels of `o` (dst frame) back into the src frame
/// of `map` by bilinear inverse warping; the mask marks full-support pixels.
pub fn align_channels(o: &Tensor<f32>, map: &dyn PointMap) -> (Tensor<f32>, ValidityMask) {
    let (g, hd, wd) = (o.shape()[0], o.shape()[1], o.shape()[2]);
    let (ws, hs) = map.src_size();
    debug_assert_eq!((map.dst_size().1, map.dst_size().0), (hd, wd));
    let mut out = Tensor::zeros(&[g, hs, ws]);
    let mut mask = vec![false; ws * hs];
    for y in 0..hs {
        for x in 0..ws {
            let (sx, sy) = map.map(x as f64, y as f64);
            mask[y * ws + x] = in_bounds(sx, sy, (wd, hd));
        }
    }
    for gi in 0..g {
        let src = &o.data()[gi * hd * wd..(gi + 1) * hd * wd];
        let dst = &mut out.data_mut()[gi * hs * ws..(gi + 1) * hs * ws];
        for y in 0..hs {
            for x in 0..ws {
                let (sx, sy) = map.map(x as f64, y as f64);
                dst[y * ws + x] = crate::geometry::sample_bilinear(src, wd, hd, sx, sy);
            }
        }
    }
    (out, ValidityMask::from_data(ws, hs, mask))
}

/// Per-pixel orientation-estimation accuracy at an angular threshold.
///
/// `o_b` is aligned into the src frame, the predicted relative angle is the
/// argmax-bin difference, and a pixel is correct when its circular distance
/// to the ground-truth angle is at most `thresh_deg`. Only pixels valid in
/// both `mask` and the alignment count.
pub fn orientation_accuracy(
    o_a: &Tensor<f32>,
    o_b: &Tensor<f32>,
    map: &dyn PointMap,
    gt_angle_deg: f64,
    mask: &ValidityMask,
    thresh_deg: f64,
) -> f64 {
    let g = o_a.shape()[0];
    let (h, w) = (o_a.shape()[1], o_a.shape()[2]);
    let step = 360.0 / g as f64;
    let (aligned, align_mask) = align_channels(o_b, map);
    let mask = mask.intersect(&align_mask);
    let mut correct = 0usize;
    let mut total = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let argmax = |t: &Tensor<f32>| -> usize {
                let mut best = 0;
                let mut bv = f32::NEG_INFINITY;
                for gi in 0..g {
                    let v = t.data()[(gi * h + y) * w + x];
                    if v > bv {
                        bv = v;
                        best = gi;
                    }
                }
                best
            };
            let ga = argmax(o_a);
            let gb = argmax(&aligned);
            let predicted = (gb as f64 - ga as f64) * step;
            if crate::matching::circular_diff(predicted, gt_angle_deg) <= thresh_deg {
                correct += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return 0.0;
    }
    correct as f64 / total as f64
}

/// One row of a rotation sweep.
#[derive(Clone, Copy, Debug)]
pub struct SweepRow {
    pub angle_deg: f64,
    pub repeatability: f64,
    pub ori_accuracy: f64,
}

/// Synthetic-rotation protocol: for each angle, rotate each image, add
/// Gaussian pixel noise of `noise_sigma` to the rotated copy, then measure
/// detection repeatability (at 3 px with `num_kpts` keypoints) and
/// orientation accuracy (at 15 degrees), averaged over the images.
pub fn rotation_sweep(
    model: &Model<f32>,
    images: &[Tensor<f32>],
    angles: &[f64],
    noise_sigma: f64,
    num_kpts: usize,
) -> Result<Vec<SweepRow>> {
    use rand::SeedableRng;
    use rand_distr::Distribution;
    let rows: Vec<Result<SweepRow>> = crate::par::map_indexed(angles.len(), |ai| {
        let angle = angles[ai];
        let mut rep_sum = 0.0;
        let mut ori_sum = 0.0;
        for (ii, img) in images.iter().enumerate() {
            let (h, w) = (img.shape()[0], img.shape()[1]);
            let t = RotTransform::rotation(angle, (w, h));
            let (mut rotated, _) = crate::geometry::warp_image(img, &t)?;
            if noise_sigma > 0.0 {
                let mut rng =
                    rand_chacha::ChaCha8Rng::seed_from_u64(((ai as u64) << 32) ^ ii as u64);
                let normal = rand_distr::Normal::new(0.0f64, noise_sigma).unwrap();
                for v in rotated.data_mut() {
                    *v = (*v + normal.sample(&mut rng) as f32).clamp(0.0, 1.0);
                }
            }
            let kps_a = crate::inference::detect(model, img, num_kpts)?;
            let kps_b = crate::inference::detect(model, &rotated, num_kpts)?;
            rep_sum += repeatability(&kps_a, &kps_b, &t, 3.0);
            let o_a = model.forward(img, BnMode::Eval)?.output.o;
            let o_b = model.forward(&rotated, BnMode::Eval)?.output.o;
            let ones = Tensor::<f32>::full(&[h, w], 1.0);
            let mask_a = crate::geometry::warp_image(&ones, &t.inverse())?.1;
            ori_sum += orientation_accuracy(&o_a, &o_b, &t, angle, &mask_a, 15.0);
        }
        Ok(SweepRow {
            angle_deg: angle,
            repeatability: rep_sum / images.len() as f64,
            ori_accuracy: ori_sum / images.len() as f64,
        })
    });
    rows.into_iter().collect()
}

/// Write sweep rows as CSV with an `angle,repeatability,ori_accuracy` header.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "angle,repeatability,ori_accuracy")?;
    for r in rows {
        writeln!(out, "{},{:.6},{:.6}", r.angle_deg, r.repeatability, r.ori_accuracy)?;
    }
    Ok(())
}

/// An evaluation pair from an HPatches-style folder: scene directories with
/// `1.pgm..6.pgm` and `H_1_k` text files holding a row-major 3x3 homography
/// mapping image 1 coordinates to image k.
pub struct ScenePair {
    pub scene: String,
    pub k: usize,
    pub img_a: Tensor<f32>,
    pub img_b: Tensor<f32>,
    pub map: Homography,
}

/// Load every `(1, k)` pair of every scene directory under `root`.
pub fn load_hpatches_dir(root: &Path) -> Result<Vec<ScenePair>> {
    let mut scenes: Vec<std::path::PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| {
            let e = e.ok()?;
            e.path().is_dir().then_some(e.path())
        })
        .collect();
    scenes.sort();
    let mut pairs = Vec::new();
    for scene in scenes {
        let name = scene
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let img_a = crate::io::read_pgm(&scene.join("1.pgm"))?;
        for k in 2..=6 {
            let img_path = scene.join(format!("{k}.pgm"));
            let h_path = scene.join(format!("H_1_{k}"));
            if !img_path.exists() || !h_path.exists() {
                continue;
            }
            let img_b = crate::io::read_pgm(&img_path)?;
            let text = std::fs::read_to_string(&h_path)?;
            let vals: Vec<f64> = text
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Parse(format!("bad homography {}", h_path.display())))?;
            if vals.len() != 9 {
                return Err(Error::Parse(format!(
                    "homography {} must have 9 entries",
                    h_path.display()
                )));
            }
            let map = Homography::new(
                vals.try_into().unwrap(),
                (img_a.shape()[1], img_a.shape()[0]),
                (img_b.shape()[1], img_b.shape()[0]),
            )?;
            pairs.push(ScenePair {
                scene: name.clone(),
                k,
                img_a: img_a.clone(),
                img_b,
                map,
            });
        }
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equivariant::cyclic_shift;
    use crate::matching::MatchSet;

    fn kp(x: f64, y: f64) -> Keypoint {
        Keypoint {
            x,
            y,
            score: 1.0,
            scale: 1.0,
            orientation_deg: 0.0,
        }
    }

    #[test]
    fn repeatability_identity_and_disjoint() {
        let t = RotTransform::identity((64, 64));
        let a = vec![kp(5.0, 5.0), kp(20.0, 30.0), kp(40.0, 10.0)];
        assert_eq!(repeatability(&a, &a, &t, 3.0), 1.0);
        let b = vec![kp(50.0, 50.0), kp(60.0, 60.0)];
        assert_eq!(repeatability(&a, &b, &t, 3.0), 0.0);
        // spec case: one of two within sqrt(2)
        let a = vec![kp(0.0, 0.0), kp(10.0, 10.0)];
        let b = vec![kp(1.0, 1.0), kp(50.0, 50.0)];
        assert_eq!(repeatability(&a, &b, &t, 3.0), 0.5);
        assert_eq!(repeatability(&[], &[], &t, 3.0), 0.0);
    }

    #[test]
    fn repeatability_is_symmetric_under_inversion() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let t = RotTransform::rotation(35.0, (64, 64));
        let a: Vec<Keypoint> = (0..30)
            .map(|_| kp(rng.gen_range(0.0..63.0), rng.gen_range(0.0..63.0)))
            .collect();
        let b: Vec<Keypoint> = (0..25)
            .map(|_| kp(rng.gen_range(0.0..63.0), rng.gen_range(0.0..63.0)))
            .collect();
        let fwd = repeatability(&a, &b, &t, 3.0);
        let rev = repeatability(&b, &a, &t.inverse(), 3.0);
        assert!((fwd - rev).abs() < 1e-6, "{fwd} vs {rev}");
    }

    #[test]
    fn mma_counting_cases() {
        let t = RotTransform::identity((64, 64));
        let a: Vec<Keypoint> = (0..4).map(|i| kp(10.0 * i as f64, 10.0)).collect();
        // b displaced by 1, 2, 4, 6 px
        let offsets = [1.0, 2.0, 4.0, 6.0];
        let b: Vec<Keypoint> = a
            .iter()
            .zip(offsets)
            .map(|(k, d)| kp(k.x + d, k.y))
            .collect();
        let m = MatchSet {
            pairs: (0..4).map(|i| (i, i)).collect(),
            distances: vec![0.0; 4],
        };
        let acc = mma(&m, &a, &b, &t, &[3.0, 5.0]);
        assert_eq!(acc, vec![0.5, 0.75]);
        // exact matches -> 1.0; empty -> 0.0
        let m_exact = MatchSet {
            pairs: (0..4).map(|i| (i, i)).collect(),
            distances: vec![0.0; 4],
        };
        assert_eq!(mma(&m_exact, &a, &a, &t, &[3.0, 5.0]), vec![1.0, 1.0]);
        assert_eq!(mma(&MatchSet::default(), &a, &b, &t, &[3.0]), vec![0.0]);
    }

    #[test]
    fn orientation_accuracy_identity_and_shifted() {
        let g = 8;
        let mut o = Tensor::<f32>::zeros(&[g, 10, 10]);
        for p in 0..100 {
            o.data_mut()[2 * 100 + p] = 1.0;
        }
        let t = RotTransform::identity((10, 10));
        let mask = ValidityMask::all_valid(10, 10);
        assert_eq!(orientation_accuracy(&o, &o, &t, 0.0, &mask, 15.0), 1.0);
        // target shifted by exactly the GT bin multiple: 2 bins = 90 degrees
        let shifted = cyclic_shift(&o, 2);
        let t90 = RotTransform::rotation(90.0, (10, 10));
        let (rotated, _) = crate::geometry::warp_image(&shifted, &t90).unwrap();
        let acc = orientation_accuracy(&o, &rotated, &t90, 90.0, &mask, 15.0);
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn orientation_accuracy_random_baseline() {
        use rand::{Rng, SeedableRng};
        // |G| = 36, threshold 15 degrees: exactly 3 of 36 bins are correct
        // when the ground truth is a bin multiple, so a uniformly random
        // argmax scores ~3/36
        let g = 36;
        let (h, w) = (100, 100);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut o_a = Tensor::<f32>::zeros(&[g, h, w]);
        let mut o_b = Tensor::<f32>::zeros(&[g, h, w]);
        for p in 0..h * w {
            o_a.data_mut()[rng.gen_range(0..g) * h * w + p] = 1.0;
            o_b.data_mut()[rng.gen_range(0..g) * h * w + p] = 1.0;
        }
        let t = RotTransform::identity((w, h));
        let mask = ValidityMask::all_valid(w, h);
        let acc = orientation_accuracy(&o_a, &o_b, &t, 0.0, &mask, 15.0);
        let expect = 3.0 / 36.0;
        assert!((acc - expect).abs() < 0.02, "acc {acc}, expect {expect}");
    }

    #[test]
    fn homography_identity_matches_rotation() {
        // pure rotation expressed as a homography gives the same point maps
        let t = RotTransform::rotation(30.0, (64, 64));
        let c = 31.5;
        let rad = 30f64.to_radians();
        let (cos, sin) = (rad.cos(), rad.sin());
        // x' = cos*(x-c) + sin*(y-c) + c ; y' = -sin*(x-c) + cos*(y-c) + c
        let h = [
            cos,
            sin,
            c - cos * c - sin * c,
            -sin,
            cos,
            c + sin * c - cos * c,
            0.0,
            0.0,
            1.0,
        ];
        let hom = Homography::new(h, (64, 64), (64, 64)).unwrap();
        for &(x, y) in &[(3.0, 4.0), (20.0, 50.0), (63.0, 0.0)] {
            let a = t.apply(x, y);
            let b = hom.map(x, y);
            assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
            let ai = t.apply_inverse(x, y);
            let bi = hom.map_inverse(x, y);
            assert!((ai.0 - bi.0).abs() < 1e-9 && (ai.1 - bi.1).abs() < 1e-9);
        }
    }

    #[test]
    fn sweep_at_angle_zero_without_noise_is_perfect() {
        let cfg = crate::model::RekdConfig {
            group_order: 8,
            channels: 2,
            ..Default::default()
        };
        let model = Model::<f32>::new(cfg, 5).unwrap();
        let mut rng = {
            use rand::SeedableRng;
            rand_chacha::ChaCha8Rng::seed_from_u64(3)
        };
        let img = crate::datagen::to_gray(&crate::datagen::texture_image(&mut rng, 64));
        let rows = rotation_sweep(&model, &[img], &[0.0], 0.0, 100).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].repeatability, 1.0);
        assert_eq!(rows[0].ori_accuracy, 1.0);
    }

    #[test]
    fn hpatches_folder_roundtrip() {
        let root = std::env::temp_dir().join("rekd_hp_test");
        let scene = root.join("v_test");
        std::fs::create_dir_all(&scene).unwrap();
        let img = Tensor::<f32>::full(&[32, 40], 0.5);
        for k in 1..=3 {
            crate::io::write_pgm(&scene.join(format!("{k}.pgm")), &img).unwrap();
        }
        for k in 2..=3 {
            std::fs::write(
                scene.join(format!("H_1_{k}")),
                "1 0 0\n0 1 0\n0 0 1\n",
            )
            .unwrap();
        }
        let pairs = load_hpatches_dir(&root).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].scene, "v_test");
        assert_eq!(pairs[0].k, 2);
        let p = pairs[0].map.map(3.0, 7.0);
        assert_eq!(p, (3.0, 7.0));
    }
}
