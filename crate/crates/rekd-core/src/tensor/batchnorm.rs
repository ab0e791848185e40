//! Batch normalization over group features `[B, |G|, C, H, W]`.
//!
//! Statistics are pooled per channel `c` over `(B, |G|, H, W)`. Pooling over
//! the group axis is required: any per-group statistic would break the
//! cyclic-shift equivariance of the representation.

use super::{debug_check_finite, Scalar, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Clone)]
pub struct BatchNorm<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub eps: T,
}

/// Per-forward cache needed by the backward pass and for folding batch
/// statistics into the running averages.
pub struct BnCache<T = f32> {
    mode: BnMode,
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    count: usize,
    batch_mean: Vec<T>,
    batch_var: Vec<T>,
}

fn spans(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 5 {
        return Err(Error::ShapeMismatch(format!(
            "batchnorm_group expects [B, G, C, H, W], got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2], shape[3] * shape[4]))
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: T::from_f64(0.1),
            eps: T::from_f64(1e-5),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalize `x`. Training mode uses the population (biased) batch
    /// statistics, which are recorded in the cache; fold them into the
    /// running averages with [`BatchNorm::update_running`]. Eval mode uses
    /// the running statistics.
    pub fn forward(&self, x: &Tensor<T>, mode: BnMode) -> Result<(Tensor<T>, BnCache<T>)> {
        let (b, g, c, hw) = spans(x.shape())?;
        if c != self.channels() {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm has {} channels, input has {c}",
                self.channels()
            )));
        }
        let count = b * g * hw;
        let (mut mean, mut var) = (vec![T::zero(); c], vec![T::zero(); c]);
        match mode {
            BnMode::Train => {
                // accumulate in f64 so the statistics are unchanged (after
                // the cast back to T) under cyclic shifts of the group axis
                let data = x.data();
                for ci in 0..c {
                    let mut sum = 0.0f64;
                    let mut sq = 0.0f64;
                    for bi in 0..b {
                        for gi in 0..g {
                            let base = ((bi * g + gi) * c + ci) * hw;
                            for &v in &data[base..base + hw] {
                                let v = v.as_f64();
                                sum += v;
                                sq += v * v;
                            }
                        }
                    }
                    let n = count as f64;
                    let m = sum / n;
                    mean[ci] = T::from_f64(m);
                    var[ci] = T::from_f64((sq / n - m * m).max(0.0));
                }
            }
            BnMode::Eval => {
                mean.copy_from_slice(self.running_mean.data());
                var.copy_from_slice(self.running_var.data());
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + self.eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        {
            let src = x.data();
            let xh = xhat.data_mut();
            let yd = y.data_mut();
            for bi in 0..b {
                for gi in 0..g {
                    for ci in 0..c {
                        let base = ((bi * g + gi) * c + ci) * hw;
                        let (m, s) = (mean[ci], inv_std[ci]);
                        let (ga, be) = (self.gamma.data()[ci], self.beta.data()[ci]);
                        for k in base..base + hw {
                            let h = (src[k] - m) * s;
                            xh[k] = h;
                            yd[k] = ga * h + be;
                        }
                    }
                }
            }
        }
        debug_check_finite("batchnorm_group", &y);
        Ok((
            y,
            BnCache {
                mode,
                xhat,
                inv_std,
                count,
                batch_mean: mean,
                batch_var: var,
            },
        ))
    }

    /// Fold a training-mode cache's batch statistics into the running
    /// averages with momentum 0.1. Eval-mode caches are ignored.
    pub fn update_running(&mut self, cache: &BnCache<T>) {
        if cache.mode != BnMode::Train {
            return;
        }
        let om = T::one() - self.momentum;
        for ci in 0..self.channels() {
            self.running_mean.data_mut()[ci] =
                om * self.running_mean.data()[ci] + self.momentum * cache.batch_mean[ci];
            self.running_var.data_mut()[ci] =
                om * self.running_var.data()[ci] + self.momentum * cache.batch_var[ci];
        }
    }

    /// Gradients `(dx, dgamma, dbeta)`.
    ///
    /// Training mode differentiates through the batch statistics; eval mode
    /// treats mean/var as constants.
    pub fn backward(&self, cache: &BnCache<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let (b, g, c, hw) = spans(dy.shape()).expect("cached shape");
        let n = T::from_f64(cache.count as f64);
        let mut dgamma = Tensor::zeros(&[c]);
        let mut dbeta = Tensor::zeros(&[c]);
        let mut dx = Tensor::zeros(dy.shape());
        let (gd, xh) = (dy.data(), cache.xhat.data());
        for ci in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for bi in 0..b {
                for gi in 0..g {
                    let base = ((bi * g + gi) * c + ci) * hw;
                    for k in base..base + hw {
                        sum_dy += gd[k];
                        sum_dy_xhat += gd[k] * xh[k];
                    }
                }
            }
            dgamma.data_mut()[ci] = sum_dy_xhat;
            dbeta.data_mut()[ci] = sum_dy;
            let ga = self.gamma.data()[ci];
            let s = cache.inv_std[ci];
            let dxd = dx.data_mut();
            match cache.mode {
                BnMode::Train => {
                    let mean_dy = sum_dy / n;
                    let mean_dy_xhat = sum_dy_xhat / n;
                    for bi in 0..b {
                        for gi in 0..g {
                            let base = ((bi * g + gi) * c + ci) * hw;
                            for k in base..base + hw {
                                dxd[k] = ga * s * (gd[k] - mean_dy - xh[k] * mean_dy_xhat);
                            }
                        }
                    }
                }
                BnMode::Eval => {
                    for bi in 0..b {
                        for gi in 0..g {
                            let base = ((bi * g + gi) * c + ci) * hw;
                            for k in base..base + hw {
                                dxd[k] = ga * s * gd[k];
                            }
                        }
                    }
                }
            }
        }
        (dx, dgamma, dbeta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalized_input_passes_through() {
        // per-channel zero-mean unit-var input, gamma=1, beta=0 -> y ~ x
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = super::super::random_uniform::<f64, _>(&[1, 4, 2, 5, 5], 1.0, &mut rng);
        // normalize per channel over (B, G, H, W)
        for ci in 0..2 {
            let mut vals = vec![];
            for gi in 0..4 {
                for k in 0..25 {
                    vals.push(x.at(&[0, gi, ci, k / 5, k % 5]));
                }
            }
            let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let v: f64 = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
            for gi in 0..4 {
                for k in 0..25 {
                    let idx = [0, gi, ci, k / 5, k % 5];
                    let val = (x.at(&idx) - m) / v.sqrt();
                    x.set(&idx, val);
                }
            }
        }
        let bn = BatchNorm::<f64>::new(2);
        let (y, _) = bn.forward(&x, BnMode::Train).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn commutes_with_group_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = super::super::random_uniform::<f32, _>(&[2, 6, 3, 4, 4], 1.0, &mut rng);
        // shift along the group axis by 2
        let mut xs = Tensor::zeros(x.shape());
        for bi in 0..2 {
            for gi in 0..6 {
                for ci in 0..3 {
                    for yy in 0..4 {
                        for xx in 0..4 {
                            let v = x.at(&[bi, (gi + 4) % 6, ci, yy, xx]);
                            xs.set(&[bi, gi, ci, yy, xx], v);
                        }
                    }
                }
            }
        }
        let bn1 = BatchNorm::<f32>::new(3);
        let bn2 = BatchNorm::<f32>::new(3);
        let (y, _) = bn1.forward(&x, BnMode::Train).unwrap();
        let (ys, _) = bn2.forward(&xs, BnMode::Train).unwrap();
        for bi in 0..2 {
            for gi in 0..6 {
                for ci in 0..3 {
                    for yy in 0..4 {
                        for xx in 0..4 {
                            assert_eq!(
                                ys.at(&[bi, gi, ci, yy, xx]),
                                y.at(&[bi, (gi + 4) % 6, ci, yy, xx])
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn train_mode_output_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = super::super::random_uniform::<f64, _>(&[2, 8, 2, 6, 6], 2.0, &mut rng);
        let bn = BatchNorm::<f64>::new(2);
        let (y, _) = bn.forward(&x, BnMode::Train).unwrap();
        for ci in 0..2 {
            let mut vals = vec![];
            for bi in 0..2 {
                for gi in 0..8 {
                    for yy in 0..6 {
                        for xx in 0..6 {
                            vals.push(y.at(&[bi, gi, ci, yy, xx]));
                        }
                    }
                }
            }
            let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let v: f64 = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5, "mean {m}");
            assert!((v - 1.0).abs() < 1e-4, "var {v}");
        }
    }

    #[test]
    fn update_running_applies_momentum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = super::super::random_uniform::<f64, _>(&[1, 4, 1, 4, 4], 1.0, &mut rng)
            .map(|v| v + 3.0);
        let mut bn = BatchNorm::<f64>::new(1);
        let (_, cache) = bn.forward(&x, BnMode::Train).unwrap();
        bn.update_running(&cache);
        // running = 0.9 * init + 0.1 * batch
        let batch_mean: f64 = x.data().iter().sum::<f64>() / 64.0;
        assert!((bn.running_mean.data()[0] - 0.1 * batch_mean).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - (0.9 + 0.1 * cache.batch_var[0])).abs() < 1e-12);
        // eval-mode caches are ignored
        let (_, eval_cache) = bn.forward(&x, BnMode::Eval).unwrap();
        let before = bn.running_mean.data()[0];
        bn.update_running(&eval_cache);
        assert_eq!(bn.running_mean.data()[0], before);
    }

    #[test]
    fn eval_before_training_uses_identity_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = super::super::random_uniform::<f32, _>(&[1, 2, 2, 3, 3], 1.0, &mut rng);
        let bn = BatchNorm::<f32>::new(2);
        let (y, _) = bn.forward(&x, BnMode::Eval).unwrap();
        // mean 0 var 1 -> y = x / sqrt(1 + eps)
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a / (1.0f32 + 1e-5).sqrt() - b).abs() < 1e-6);
        }
    }
}
