//! Multi-scale detection: 8-level sqrt(2) pyramid, per-level NMS with a
//! score budget, orientation and scale assignment.

use crate::model::Model;
use crate::tensor::{bilinear_resize, BnMode, Tensor};
use crate::Result;

/// An oriented keypoint in original-image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub score: f32,
    /// `sqrt(2)^(s-2)` for pyramid level `s`.
    pub scale: f64,
    /// Argmax orientation in degrees, a multiple of `360/|G|` in `[0, 360)`.
    pub orientation_deg: f64,
}

pub const PYRAMID_LEVELS: usize = 8;
/// NMS neighborhood side at test time.
pub const NMS_WINDOW: usize = 15;

/// Resize factor of pyramid level `s`: `sqrt(2)^(2-s)`.
pub fn level_factor(s: usize) -> f64 {
    2f64.powf((2.0 - s as f64) / 2.0)
}

/// The pyramid images with their levels; level 2 is the input itself.
/// Levels 0-1 are upsampled.
pub fn scale_pyramid(img: &Tensor<f32>) -> Result<Vec<(usize, Tensor<f32>)>> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut out = Vec::with_capacity(PYRAMID_LEVELS);
    for s in 0..PYRAMID_LEVELS {
        if s == 2 {
            out.push((s, img.clone()));
            continue;
        }
        let f = level_factor(s);
        let hs = ((h as f64) * f).round() as usize;
        let ws = ((w as f64) * f).round() as usize;
        if hs == 0 || ws == 0 {
            continue;
        }
        out.push((s, bilinear_resize(img, hs, ws)?));
    }
    Ok(out)
}

/// Per-level keypoint budgets: weights `2^(2-s)` normalized to sum to `p`,
/// rounded, with the rounding remainder folded into level 0. The result
/// sums to `p` exactly.
pub fn allocate_budgets(p: usize) -> Vec<usize> {
    let weights: Vec<f64> = (0..PYRAMID_LEVELS)
        .map(|s| 2f64.powi(2 - s as i32))
        .collect();
    let total: f64 = weights.iter().sum();
    let mut n: Vec<isize> = weights
        .iter()
        .map(|w| (p as f64 * w / total).round() as isize)
        .collect();
    let sum: isize = n.iter().sum();
    n[0] += p as isize - sum;
    // guard tiny budgets: fold any negative level-0 remainder into the
    // largest other entries, deterministically
    while n[0] < 0 {
        let (idx, _) = n
            .iter()
            .enumerate()
            .skip(1)
            .max_by_key(|(i, &v)| (v, std::cmp::Reverse(*i)))
            .unwrap();
        if n[idx] == 0 {
            break;
        }
        n[idx] -= 1;
        n[0] += 1;
    }
    n.iter().map(|&v| v.max(0) as usize).collect()
}

/// Budget of a single level.
pub fn allocate_keypoints(p: usize, s: usize) -> usize {
    allocate_budgets(p)[s]
}

/// Strict-maximum non-maximum suppression: a pixel survives iff it beats
/// every neighbor in its `window x window` neighborhood, with ties won by
/// the lowest row-major index. A border margin of `window/2` is excluded.
/// Peaks are returned in row-major order as `(x, y, score)`.
pub fn nms(k: &Tensor<f32>, window: usize) -> Vec<(usize, usize, f32)> {
    assert_eq!(k.rank(), 2, "nms expects [H, W]");
    let (h, w) = (k.shape()[0], k.shape()[1]);
    let r = window / 2;
    if h < window || w < window {
        return Vec::new();
    }
    let data = k.data();
    let rows = crate::par::map_indexed(h, |y| {
        let mut row_peaks = Vec::new();
        if y < r || y >= h - r {
            return row_peaks;
        }
        'pixel: for x in r..w - r {
            let v = data[y * w + x];
            let my_idx = y * w + x;
            for ny in y - r..=y + r {
                for nx in x - r..=x + r {
                    let idx = ny * w + nx;
                    if idx == my_idx {
                        continue;
                    }
                    let nv = data[idx];
                    if nv > v || (nv == v && idx < my_idx) {
                        continue 'pixel;
                    }
                }
            }
            row_peaks.push((x, y, v));
        }
        row_peaks
    });
    rows.into_iter().flatten().collect()
}

/// Detect up to `p` oriented keypoints over the scale pyramid.
///
/// Per level: forward, NMS on `K`, keep the level's budget of top-scoring
/// peaks, read the argmax orientation from `O` at level resolution, and map
/// coordinates back to the original frame. Levels too small for the
/// network or the NMS window are skipped with zero budget. The result is
/// sorted by descending score (ties by y, x, scale) and holds at most `p`
/// entries, fewer when peaks are scarce.
pub fn detect(model: &Model<f32>, img: &Tensor<f32>, p: usize) -> Result<Vec<Keypoint>> {
    let (h0, w0) = (img.shape()[0], img.shape()[1]);
    let budgets = allocate_budgets(p);
    let pyramid = scale_pyramid(img)?;
    let group = model.group();
    // minimum extent the network accepts at this config
    let min_net = {
        let mut n = 2 * model.cfg.kernel;
        while model.cfg.scale_extent(n, model.cfg.scales - 1) < 2 * model.cfg.kernel {
            n += 1;
        }
        n
    };
    let per_level: Vec<Result<Vec<Keypoint>>> = crate::par::map_indexed(pyramid.len(), |i| {
        let (s, level_img) = &pyramid[i];
        let budget = budgets[*s];
        let (hs, ws) = (level_img.shape()[0], level_img.shape()[1]);
        if budget == 0 || hs.min(ws) < NMS_WINDOW.max(min_net) {
            return Ok(Vec::new());
        }
        let out = model.forward(level_img, BnMode::Eval)?.output;
        let mut peaks = nms(&out.k, NMS_WINDOW);
        peaks.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.0.cmp(&b.0))
        });
        peaks.truncate(budget);
        let mut kps = Vec::with_capacity(peaks.len());
        for (x, y, score) in peaks {
            let mut best_g = 0;
            let mut best_v = f32::NEG_INFINITY;
            for g in 0..group.order {
                let v = out.o.data()[(g * hs + y) * ws + x];
                if v > best_v {
                    best_v = v;
                    best_g = g;
                }
            }
            let ox = (x as f64 + 0.5) * (w0 as f64 / ws as f64) - 0.5;
            let oy = (y as f64 + 0.5) * (h0 as f64 / hs as f64) - 0.5;
            kps.push(Keypoint {
                x: ox.clamp(0.0, (w0 - 1) as f64),
                y: oy.clamp(0.0, (h0 - 1) as f64),
                score,
                scale: 2f64.powf((*s as f64 - 2.0) / 2.0),
                orientation_deg: group.angle_of(best_g),
            });
        }
        Ok(kps)
    });
    let mut all = Vec::new();
    for level in per_level {
        all.extend(level?);
    }
    all.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.y.partial_cmp(&b.y).unwrap())
            .then(a.x.partial_cmp(&b.x).unwrap())
            .then(a.scale.partial_cmp(&b.scale).unwrap())
    });
    all.truncate(p);
    Ok(all)
}

/// Native-resolution detection (no pyramid); used for validation scoring
/// during training where the full pyramid would dominate the epoch cost.
pub fn detect_single_scale(
    model: &Model<f32>,
    img: &Tensor<f32>,
    p: usize,
) -> Result<Vec<Keypoint>> {
    let out = model.forward(img, BnMode::Eval)?.output;
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let group = model.group();
    let mut peaks = nms(&out.k, NMS_WINDOW);
    peaks.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.0.cmp(&b.0))
    });
    peaks.truncate(p);
    Ok(peaks
        .into_iter()
        .map(|(x, y, score)| {
            let mut best_g = 0;
            let mut best_v = f32::NEG_INFINITY;
            for g in 0..group.order {
                let v = out.o.data()[(g * h + y) * w + x];
                if v > best_v {
                    best_v = v;
                    best_g = g;
                }
            }
            Keypoint {
                x: x as f64,
                y: y as f64,
                score,
                scale: 1.0,
                orientation_deg: group.angle_of(best_g),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RekdConfig;
    use crate::Model;

    #[test]
    fn pyramid_levels_and_sizes() {
        let img = Tensor::<f32>::full(&[192, 192], 0.5);
        let pyr = scale_pyramid(&img).unwrap();
        assert_eq!(pyr.len(), 8);
        assert_eq!(pyr[0].1.shape(), &[384, 384]);
        assert_eq!(pyr[2].1.shape(), &[192, 192]);
        assert_eq!(pyr[2].1.data(), img.data(), "level 2 is the input");
        assert_eq!(pyr[4].1.shape(), &[96, 96]);
    }

    #[test]
    fn budgets_match_spec_example_and_sum_exactly() {
        let b = allocate_budgets(1000);
        assert_eq!(b, vec![502, 251, 125, 63, 31, 16, 8, 4]);
        for p in [0usize, 1, 7, 300, 1000, 8000] {
            assert_eq!(allocate_budgets(p).iter().sum::<usize>(), p, "p={p}");
        }
        assert_eq!(allocate_keypoints(1000, 3), 63);
    }

    #[test]
    fn nms_single_spike_and_spacing() {
        let mut k = Tensor::<f32>::zeros(&[50, 50]);
        k.set(&[20, 20], 1.0);
        let peaks = nms(&k, 15);
        // the spike plus nothing else: flat zero regions tie and lose to
        // lower row-major neighbors except the very first interior pixel,
        // which ties against later indices only... strictness kills them all
        assert!(peaks.contains(&(20, 20, 1.0)));
        for &(x, y, _) in &peaks {
            assert!(
                (x, y) == (20, 20) || k.at(&[y, x]) == 0.0,
                "unexpected peak at {x},{y}"
            );
        }
        // two spikes 20 px apart both survive; 10 px apart only the larger
        let mut k = Tensor::<f32>::zeros(&[60, 60]);
        k.set(&[20, 15], 1.0);
        k.set(&[20, 35], 0.9);
        let peaks = nms(&k, 15);
        assert!(peaks.contains(&(15, 20, 1.0)) && peaks.contains(&(35, 20, 0.9)));
        // ~10 px apart on the diagonal: Chebyshev distance 7 -> interact
        let mut k = Tensor::<f32>::zeros(&[60, 60]);
        k.set(&[20, 15], 1.0);
        k.set(&[27, 22], 0.9);
        let peaks = nms(&k, 15);
        assert!(peaks.contains(&(15, 20, 1.0)));
        assert!(!peaks.iter().any(|&(x, y, _)| (x, y) == (22, 27)));
    }

    #[test]
    fn nms_matches_bruteforce_oracle_on_random_maps() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let (h, w) = (rng.gen_range(20..40), rng.gen_range(20..40));
            let k = Tensor::<f32>::from_vec(
                &[h, w],
                (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect(),
            )
            .unwrap();
            let got = nms(&k, 15);
            // brute force: all-pairs suppression within Chebyshev distance 7
            let mut want = Vec::new();
            let r = 7usize;
            for y in r..h - r {
                for x in r..w - r {
                    let me = y * w + x;
                    let mut survives = true;
                    for ny in 0..h {
                        for nx in 0..w {
                            let other = ny * w + nx;
                            if other == me
                                || ny.abs_diff(y) > r
                                || nx.abs_diff(x) > r
                            {
                                continue;
                            }
                            if k.data()[other] > k.data()[me]
                                || (k.data()[other] == k.data()[me] && other < me)
                            {
                                survives = false;
                            }
                        }
                    }
                    if survives {
                        want.push((x, y, k.data()[me]));
                    }
                }
            }
            assert_eq!(got, want);
        }
    }

    #[test]
    fn detect_returns_sorted_bounded_and_reproducible() {
        let cfg = RekdConfig {
            group_order: 8,
            channels: 2,
            ..Default::default()
        };
        let model = Model::<f32>::new(cfg, 3).unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let img = Tensor::<f32>::from_vec(
            &[96, 96],
            (0..96 * 96).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let kps = detect(&model, &img, 50).unwrap();
        assert!(kps.len() <= 50);
        assert!(!kps.is_empty());
        for w in kps.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
        for kp in &kps {
            assert!(kp.x >= 0.0 && kp.x < 96.0 && kp.y >= 0.0 && kp.y < 96.0);
            assert_eq!(kp.orientation_deg % 45.0, 0.0, "orientation on the bin grid");
        }
        let again = detect(&model, &img, 50).unwrap();
        assert_eq!(kps, again);
        // asking for far more than available returns everything, unpadded
        let lots = detect(&model, &img, 100_000).unwrap();
        assert!(lots.len() < 100_000);
    }

    #[test]
    fn level_coordinates_roundtrip_within_half_pixel() {
        for s in 0..8usize {
            let f = level_factor(s);
            let (w0, h0) = (192usize, 192usize);
            let ws = ((w0 as f64) * f).round() as usize;
            let hs = ((h0 as f64) * f).round() as usize;
            for &(x, y) in &[(7usize, 7usize), (ws / 2, hs / 2), (ws - 8, hs - 8)] {
                let ox = (x as f64 + 0.5) * (w0 as f64 / ws as f64) - 0.5;
                let oy = (y as f64 + 0.5) * (h0 as f64 / hs as f64) - 0.5;
                let bx = (ox + 0.5) * (ws as f64 / w0 as f64) - 0.5;
                let by = (oy + 0.5) * (hs as f64 / h0 as f64) - 0.5;
                assert!((bx - x as f64).abs() < 0.5 && (by - y as f64).abs() < 0.5);
            }
        }
    }
}
