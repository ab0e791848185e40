//! Descriptor extraction, mutual-nearest-neighbor matching and
//! orientation-consensus outlier filtering.
//!
//! The descriptor is deliberately plain: an oriented, scale-normalized
//! 16x16 patch, mean-subtracted and L2-normalized. It exists to exercise
//! the matching and filtering machinery, not to compete with learned
//! descriptors.

use crate::equivariant::CyclicGroup;
use crate::geometry::sample_bilinear;
use crate::inference::Keypoint;
use crate::tensor::Tensor;

pub const DESCRIPTOR_SIDE: usize = 16;

/// Mutual-nearest-neighbor matches between two descriptor lists.
#[derive(Clone, Debug, Default)]
pub struct MatchSet {
    /// `(i, j)` index pairs into the two keypoint lists.
    pub pairs: Vec<(usize, usize)>,
    /// L2 descriptor distance per pair.
    pub distances: Vec<f32>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Sample an oriented square patch around a keypoint and reduce it to a
/// unit-norm 256-vector.
///
/// The patch spans `side * kp.scale` pixels, rotated so the keypoint's
/// orientation axis maps to the patch's +x axis (the same rotation family
/// as the image warps, so a 90-degree-rotated image with a 90-degree-shifted
/// orientation reproduces the descriptor). A zero-variance patch yields the
/// zero vector flagged invalid.
pub fn patch_descriptor(img: &Tensor<f32>, kp: &Keypoint, side: usize) -> (Vec<f32>, bool) {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let span = side as f64 * kp.scale;
    let a = kp.orientation_deg.rem_euclid(360.0);
    // exact quarter-turn trig keeps the 90-degree descriptor test exact
    let (c, s) = if a == 0.0 {
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
    };
    let mut vals = vec![0f32; side * side];
    for r in 0..side {
        for cidx in 0..side {
            let u = ((cidx as f64 + 0.5) / side as f64 - 0.5) * span;
            let v = ((r as f64 + 0.5) / side as f64 - 0.5) * span;
            // rotate the patch frame by the keypoint orientation, matching
            // RotTransform::apply's (c*dx + s*dy, -s*dx + c*dy) convention
            let dx = c * u + s * v;
            let dy = -s * u + c * v;
            vals[r * side + cidx] = sample_bilinear(img.data(), w, h, kp.x + dx, kp.y + dy);
        }
    }
    let mean = vals.iter().sum::<f32>() / vals.len() as f32;
    vals.iter_mut().for_each(|v| *v -= mean);
    let norm = vals.iter().map(|v| v * v).sum::<f32>().sqrt();
    if norm < 1e-12 {
        return (vec![0.0; side * side], false);
    }
    vals.iter_mut().for_each(|v| *v /= norm);
    (vals, true)
}

/// Descriptors for a keypoint list; invalid (flat) patches keep their slot
/// so indices line up with the keypoints.
pub fn describe_all(img: &Tensor<f32>, kps: &[Keypoint], side: usize) -> Vec<(Vec<f32>, bool)> {
    crate::par::map_indexed(kps.len(), |i| patch_descriptor(img, &kps[i], side))
}

fn l2(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f32>()
        .sqrt()
}

/// Mutual nearest neighbors under L2 distance; argmin ties break toward the
/// lower index on both sides.
pub fn mnn_match(desc_a: &[Vec<f32>], desc_b: &[Vec<f32>]) -> MatchSet {
    if desc_a.is_empty() || desc_b.is_empty() {
        return MatchSet::default();
    }
    let best_b_for_a: Vec<(usize, f32)> = crate::par::map_indexed(desc_a.len(), |i| {
        let mut best = (0usize, f32::INFINITY);
        for (j, d) in desc_b.iter().enumerate() {
            let dist = l2(&desc_a[i], d);
            if dist < best.1 {
                best = (j, dist);
            }
        }
        best
    });
    let best_a_for_b: Vec<usize> = crate::par::map_indexed(desc_b.len(), |j| {
        let mut best = (0usize, f32::INFINITY);
        for (i, d) in desc_a.iter().enumerate() {
            let dist = l2(d, &desc_b[j]);
            if dist < best.1 {
                best = (i, dist);
            }
        }
        best.0
    });
    let mut out = MatchSet::default();
    for (i, &(j, dist)) in best_b_for_a.iter().enumerate() {
        if best_a_for_b[j] == i {
            out.pairs.push((i, j));
            out.distances.push(dist);
        }
    }
    out
}

/// Circular distance between two angles in degrees.
pub fn circular_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Orientation difference `(o_b - o_a + 360) mod 360` of one match.
fn match_difference(m: (usize, usize), ori_a: &[f64], ori_b: &[f64]) -> f64 {
    (ori_b[m.1] - ori_a[m.0]).rem_euclid(360.0)
}

/// The most frequent orientation difference over the tentative matches.
/// Orientations must be quantized to multiples of `360/|G|`; ties resolve
/// to the smallest difference value.
pub fn mode_of_differences(
    ori_a: &[f64],
    ori_b: &[f64],
    matches: &MatchSet,
    group: CyclicGroup,
) -> f64 {
    let mut counts = vec![0usize; group.order];
    for &m in &matches.pairs {
        counts[group.bin_of(match_difference(m, ori_a, ori_b))] += 1;
    }
    let mut best = 0usize;
    for (bin, &count) in counts.iter().enumerate() {
        if count > counts[best] {
            best = bin;
        }
    }
    group.angle_of(best)
}

/// Inlier flags under orientation consensus: a match survives iff the
/// circular distance between its orientation difference and the modal
/// difference is at most `t` degrees.
pub fn orientation_outlier_filter(
    matches: &MatchSet,
    ori_a: &[f64],
    ori_b: &[f64],
    group: CyclicGroup,
    t: f64,
) -> Vec<bool> {
    if matches.is_empty() {
        return Vec::new();
    }
    let mode = mode_of_differences(ori_a, ori_b, matches, group);
    matches
        .pairs
        .iter()
        .map(|&m| circular_diff(mode, match_difference(m, ori_a, ori_b)) <= t)
        .collect()
}
