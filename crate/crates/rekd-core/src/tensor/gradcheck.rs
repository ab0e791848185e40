//! Gradient verification against central finite differences.
//!
//! The check runs in 64-bit: the scalar objective is `L = sum(U . f(x))`
//! for a fixed random weighting `U`, the analytic gradient comes from the
//! op's backward pass seeded with `U`, and each coordinate is probed with
//! `(L(x + e) - L(x - e)) / 2e`.

use super::{Scalar, Tensor};
use crate::Result;

/// A differentiable operation: forward over owned input tensors, backward
/// from an upstream gradient to per-input gradients of matching shapes.
pub trait DiffOp<T: Scalar> {
    fn forward(&mut self, inputs: &[Tensor<T>]) -> Result<Tensor<T>>;
    fn backward(&mut self, upstream: &Tensor<T>) -> Result<Vec<Tensor<T>>>;
}

fn weighted_sum(out: &Tensor<f64>, weights: &Tensor<f64>) -> f64 {
    out.data()
        .iter()
        .zip(weights.data())
        .map(|(a, b)| a * b)
        .sum()
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Max relative error between analytic and finite-difference gradients over
/// every coordinate of every input.
pub fn grad_check(op: &mut dyn DiffOp<f64>, inputs: &[Tensor<f64>], eps: f64) -> Result<f64> {
    let n_inputs = inputs.len();
    let coords: Vec<(usize, usize)> = (0..n_inputs)
        .flat_map(|i| (0..inputs[i].len()).map(move |c| (i, c)))
        .collect();
    grad_check_at(op, inputs, eps, &coords)
}

/// Like [`grad_check`] but probing only `count` pseudo-randomly chosen
/// coordinates; used where a full scan is too expensive.
pub fn grad_check_probed(
    op: &mut dyn DiffOp<f64>,
    inputs: &[Tensor<f64>],
    eps: f64,
    count: usize,
    seed: u64,
) -> Result<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<(usize, usize)> = (0..count)
        .map(|_| {
            let i = rng.gen_range(0..inputs.len());
            let c = rng.gen_range(0..inputs[i].len());
            (i, c)
        })
        .collect();
    grad_check_at(op, inputs, eps, &coords)
}

fn grad_check_at(
    op: &mut dyn DiffOp<f64>,
    inputs: &[Tensor<f64>],
    eps: f64,
    coords: &[(usize, usize)],
) -> Result<f64> {
    use rand::SeedableRng;
    let out = op.forward(inputs)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
    let weights = super::random_uniform::<f64, _>(out.shape(), 1.0, &mut rng);
    let grads = op.backward(&weights)?;
    let mut worst = 0.0f64;
    for &(i, c) in coords {
        let mut plus = inputs.to_vec();
        plus[i].data_mut()[c] += eps;
        let lp = weighted_sum(&op.forward(&plus)?, &weights);
        let mut minus = inputs.to_vec();
        minus[i].data_mut()[c] -= eps;
        let lm = weighted_sum(&op.forward(&minus)?, &weights);
        let numeric = (lp - lm) / (2.0 * eps);
        worst = worst.max(rel_err(grads[i].data()[c], numeric));
    }
    Ok(worst)
}

/// Adapters wrapping the free functions of this module as [`DiffOp`]s.
pub mod ops {
    use super::super::{
        bilinear_resize, bilinear_resize_backward, conv2d, conv2d_backward, relu, relu_backward,
        softmax, softmax_backward, BatchNorm, BnCache, BnMode,
    };
    use super::{DiffOp, Tensor};
    use crate::Result;

    pub struct Conv2dOp {
        pub padding: usize,
        pub stride: usize,
        cache: Option<(Tensor<f64>, Tensor<f64>)>,
    }

    impl Conv2dOp {
        pub fn new(padding: usize, stride: usize) -> Self {
            Conv2dOp {
                padding,
                stride,
                cache: None,
            }
        }
    }

    impl DiffOp<f64> for Conv2dOp {
        fn forward(&mut self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
            self.cache = Some((inputs[0].clone(), inputs[1].clone()));
            conv2d(&inputs[0], &inputs[1], self.padding, self.stride)
        }
        fn backward(&mut self, upstream: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
            let (x, k) = self.cache.as_ref().expect("forward first");
            let (dx, dk) = conv2d_backward(x, k, self.padding, self.stride, upstream)?;
            Ok(vec![dx, dk])
        }
    }

    #[derive(Default)]
    pub struct ReluOp {
        cache: Option<Tensor<f64>>,
    }

    impl DiffOp<f64> for ReluOp {
        fn forward(&mut self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
            self.cache = Some(inputs[0].clone());
            Ok(relu(&inputs[0]))
        }
        fn backward(&mut self, upstream: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
            Ok(vec![relu_backward(self.cache.as_ref().unwrap(), upstream)])
        }
    }

    pub struct SoftmaxOp {
        pub axis: usize,
        cache: Option<Tensor<f64>>,
    }

    impl SoftmaxOp {
        pub fn new(axis: usize) -> Self {
            SoftmaxOp { axis, cache: None }
        }
    }

    impl DiffOp<f64> for SoftmaxOp {
        fn forward(&mut self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
            let y = softmax(&inputs[0], self.axis)?;
            self.cache = Some(y.clone());
            Ok(y)
        }
        fn backward(&mut self, upstream: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
            Ok(vec![softmax_backward(
                self.cache.as_ref().unwrap(),
                upstream,
                self.axis,
            )])
        }
    }

    pub struct BilinearResizeOp {
        pub oh: usize,
        pub ow: usize,
        src_shape: Vec<usize>,
    }

    impl BilinearResizeOp {
        pub fn new(oh: usize, ow: usize) -> Self {
            BilinearResizeOp {
                oh,
                ow,
                src_shape: vec![],
            }
        }
    }

    impl DiffOp<f64> for BilinearResizeOp {
        fn forward(&mut self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
            self.src_shape = inputs[0].shape().to_vec();
            bilinear_resize(&inputs[0], self.oh, self.ow)
        }
        fn backward(&mut self, upstream: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
            Ok(vec![bilinear_resize_backward(&self.src_shape, upstream)])
        }
    }

    /// Batchnorm in training mode over inputs `[x, gamma, beta]`.
    pub struct BatchNormOp {
        cache: Option<(BatchNorm<f64>, BnCache<f64>)>,
    }

    impl BatchNormOp {
        pub fn new() -> Self {
            BatchNormOp { cache: None }
        }
    }

    impl Default for BatchNormOp {
        fn default() -> Self {
            Self::new()
        }
    }

    impl DiffOp<f64> for BatchNormOp {
        fn forward(&mut self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
            let channels = inputs[1].len();
            let mut bn = BatchNorm::<f64>::new(channels);
            bn.gamma = inputs[1].clone();
            bn.beta = inputs[2].clone();
            let bn = bn;
            let (y, cache) = bn.forward(&inputs[0], BnMode::Train)?;
            self.cache = Some((bn, cache));
            Ok(y)
        }
        fn backward(&mut self, upstream: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
            let (bn, cache) = self.cache.as_ref().expect("forward first");
            let (dx, dgamma, dbeta) = bn.backward(cache, upstream);
            Ok(vec![dx, dgamma, dbeta])
        }
    }
}
