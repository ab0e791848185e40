//! Self-test suites behind the `equiv-check` and `gradcheck` commands.
//! The acceptance tests run the same functions.

use crate::equivariant::{
    channel_pool, channel_pool_backward, collapse_group_kernel_grad, collapse_lift_kernel_grad,
    cyclic_shift, expand_group_kernel, expand_lift_kernel, group_conv, group_pool_max,
    group_pool_max_backward, lift_conv, CyclicGroup, KernelRotator,
};
use crate::geometry::{warp_image, RotTransform};
use crate::losses::{
    ip_loss, keypoint_loss, orientation_alignment_loss, total_loss, window_softmax, WindowGrid,
};
use crate::model::{Model, RekdConfig};
use crate::tensor::gradcheck::ops::{
    BatchNormOp, BilinearResizeOp, Conv2dOp, ReluOp, SoftmaxOp,
};
use crate::tensor::{
    grad_check, random_uniform, softmax, softmax_backward, BnMode, DiffOp, Scalar, Tensor,
};
use crate::Result;

/// One self-test measurement: passes when `value < bound`.
#[derive(Clone, Debug)]
pub struct CheckRow {
    pub name: String,
    pub value: f64,
    pub bound: f64,
}

impl CheckRow {
    pub fn pass(&self) -> bool {
        self.value < self.bound
    }
}

fn rand_t<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    random_uniform(shape, 1.0, &mut rng)
}

/// Exact 90-degree equivariance of the full network: for random weights,
/// `forward(rot90(img))` must equal the rotated (and, on group-carrying
/// maps, cyclically shifted) `forward(img)` within `1e-4` relative error in
/// 32-bit, for every layer output, every pooled map, `K` and `O`.
pub fn run_equiv_check(orders: &[usize], inits: usize, size: usize) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for &order in orders {
        for init in 0..inits as u64 {
            let cfg = RekdConfig {
                group_order: order,
                channels: 2,
                ..Default::default()
            };
            let model = Model::<f32>::new(cfg, 1000 + init)?;
            let img: Tensor<f32> = rand_t(&[size, size], 2000 + init);
            let t = RotTransform::rotation(90.0, (size, size));
            let (img_rot, _) = warp_image(&img, &t)?;
            let trace = model.forward(&img, BnMode::Eval)?;
            let trace_rot = model.forward(&img_rot, BnMode::Eval)?;
            let shift = (order / 4) as isize;
            let mut worst = 0.0f64;
            let mut worst_name = String::new();
            let mut check = |name: String, got: &Tensor<f32>, expect: &Tensor<f32>| {
                let rel = got.rel_error(expect);
                if rel > worst {
                    worst = rel;
                    worst_name = name;
                }
            };
            for (s, (sc, sc_rot)) in trace.scales.iter().zip(&trace_rot.scales).enumerate() {
                for l in 0..model.cfg.layers {
                    let h = sc.layer_output(l, order, model.cfg.channels);
                    let h_rot = sc_rot.layer_output(l, order, model.cfg.channels);
                    let (expect, _) = warp_image(&cyclic_shift(&h, shift), &RotTransform::rotation(90.0, (h.shape()[3], h.shape()[2])))?;
                    check(format!("G{order}/init{init}/scale{s}/layer{l}"), &h_rot, &expect);
                }
                let (p_expect, _) = warp_image(
                    &sc.p,
                    &RotTransform::rotation(90.0, (sc.p.shape()[2], sc.p.shape()[1])),
                )?;
                check(format!("G{order}/init{init}/scale{s}/P"), &sc_rot.p, &p_expect);
                let (q_expect, _) = warp_image(
                    &cyclic_shift(&sc.q, shift),
                    &RotTransform::rotation(90.0, (sc.q.shape()[2], sc.q.shape()[1])),
                )?;
                check(format!("G{order}/init{init}/scale{s}/Q"), &sc_rot.q, &q_expect);
            }
            let (k_expect, _) = warp_image(&trace.output.k, &t)?;
            check(format!("G{order}/init{init}/K"), &trace_rot.output.k, &k_expect);
            let (o_expect, _) = warp_image(&cyclic_shift(&trace.output.o, shift), &t)?;
            check(format!("G{order}/init{init}/O"), &trace_rot.output.o, &o_expect);
            rows.push(CheckRow {
                name: format!("equiv/G{order}/init{init} (worst: {worst_name})"),
                value: worst,
                bound: 1e-4,
            });
        }
    }
    Ok(rows)
}

/// Approximate equivariance away from quarter turns, measured at the bin
/// width of `C_36` on the border-eroded interior of `K` and `O`. Reported
/// for tracking; not a gate.
pub fn run_equiv_check_approx(size: usize) -> Result<Vec<CheckRow>> {
    let cfg = RekdConfig {
        group_order: 36,
        channels: 2,
        ..Default::default()
    };
    let model = Model::<f32>::new(cfg, 77)?;
    let img: Tensor<f32> = rand_t(&[size, size], 78);
    let base = model.forward(&img, BnMode::Eval)?;
    let mut rows = Vec::new();
    for step in 1..36usize {
        if step % 9 == 0 {
            continue; // quarter turns are covered by the exact check
        }
        let angle = step as f64 * 10.0;
        let t = RotTransform::rotation(angle, (size, size));
        let (img_rot, mask) = warp_image(&img, &t)?;
        let rot = model.forward(&img_rot, BnMode::Eval)?;
        let (k_expect, _) = warp_image(&base.output.k, &t)?;
        let (o_expect, _) = warp_image(&cyclic_shift(&base.output.o, step as isize), &t)?;
        // compare on the mask interior, away from the receptive-field halo
        let margin = 10usize;
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        let (h, w) = (size, size);
        for y in margin..h - margin {
            for x in margin..w - margin {
                if !mask.get(x, y) {
                    continue;
                }
                let d = (rot.output.k.at(&[y, x]) - k_expect.at(&[y, x])).abs() as f64;
                num = num.max(d);
                den = den.max(k_expect.at(&[y, x]).abs() as f64);
                for g in 0..36 {
                    let a = rot.output.o.data()[(g * h + y) * w + x];
                    let b = o_expect.data()[(g * h + y) * w + x];
                    num = num.max((a - b).abs() as f64);
                    den = den.max(b.abs() as f64);
                }
            }
        }
        rows.push(CheckRow {
            name: format!("equiv-approx/{angle}deg"),
            value: num / den.max(1e-12),
            bound: 0.1,
        });
    }
    Ok(rows)
}

struct LiftOp {
    group: CyclicGroup,
    cache: Option<(Tensor<f64>, Tensor<f64>)>,
}

impl DiffOp<f64> for LiftOp {
    fn forward(&mut self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        self.cache = Some((inputs[0].clone(), inputs[1].clone()));
        lift_conv(&inputs[0], &inputs[1], self.group)
    }
    fn backward(&mut self, upstream: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let (img, base) = self.cache.as_ref().unwrap();
        let rot = KernelRotator::new(base.shape()[2], self.group);
        let ek = expand_lift_kernel(base, &rot);
        let (g, c, h, w) = (
            upstream.shape()[0],
            upstream.shape()[1],
            upstream.shape()[2],
            upstream.shape()[3],
        );
        let flat = upstream.clone().reshape(&[g * c, h, w])?;
        let pad = (base.shape()[2] - 1) / 2;
        let (dimg, dek) = crate::tensor::conv2d_backward(img, &ek, pad, 1, &flat)?;
        let dbase = collapse_lift_kernel_grad(&dek, base.shape(), &rot);
        Ok(vec![dimg, dbase])
    }
}

struct GroupConvOp {
    group: CyclicGroup,
    cache: Option<(Tensor<f64>, Tensor<f64>)>,
}

impl DiffOp<f64> for GroupConvOp {
    fn forward(&mut self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        self.cache = Some((inputs[0].clone(), inputs[1].clone()));
        group_conv(&inputs[0], &inputs[1], self.group)
    }
    fn backward(&mut self, upstream: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let (hin, base) = self.cache.as_ref().unwrap();
        let rot = KernelRotator::new(base.shape()[2], self.group);
        let ek = expand_group_kernel(base, &rot);
        let (g, c, h, w) = (
            upstream.shape()[0],
            upstream.shape()[1],
            upstream.shape()[2],
            upstream.shape()[3],
        );
        let flat_up = upstream.clone().reshape(&[g * c, h, w])?;
        let (gin, cin) = (hin.shape()[0], hin.shape()[1]);
        let flat_in = hin.clone().reshape(&[gin * cin, h, w])?;
        let pad = (base.shape()[2] - 1) / 2;
        let (dflat, dek) = crate::tensor::conv2d_backward(&flat_in, &ek, pad, 1, &flat_up)?;
        let dbase = collapse_group_kernel_grad(&dek, base.shape(), &rot);
        Ok(vec![dflat.reshape(&[gin, cin, h, w])?, dbase])
    }
}

struct GroupPoolOp {
    cache: Option<(Vec<usize>, Vec<u16>)>,
}

impl DiffOp<f64> for GroupPoolOp {
    fn forward(&mut self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        let (out, arg) = group_pool_max(&inputs[0]);
        self.cache = Some((inputs[0].shape().to_vec(), arg));
        Ok(out)
    }
    fn backward(&mut self, upstream: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let (shape, arg) = self.cache.as_ref().unwrap();
        Ok(vec![group_pool_max_backward(shape, arg, upstream)])
    }
}

struct ChannelPoolOp {
    cache: Option<(Tensor<f64>, Tensor<f64>)>,
}

impl DiffOp<f64> for ChannelPoolOp {
    fn forward(&mut self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        self.cache = Some((inputs[0].clone(), inputs[1].clone()));
        channel_pool(&inputs[0], &inputs[1])
    }
    fn backward(&mut self, upstream: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let (h, w) = self.cache.as_ref().unwrap();
        let (dh, dw) = channel_pool_backward(h, w, upstream);
        Ok(vec![dh, dw])
    }
}

struct WindowSoftmaxOp {
    n: usize,
    cache: Option<Tensor<f64>>,
}

impl DiffOp<f64> for WindowSoftmaxOp {
    fn forward(&mut self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        self.cache = Some(inputs[0].clone());
        window_softmax(&inputs[0], self.n)
    }
    fn backward(&mut self, upstream: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let k = self.cache.as_ref().unwrap();
        let (h, w) = (k.shape()[0], k.shape()[1]);
        let grid = WindowGrid::new(h, w, self.n);
        let n = self.n;
        let m = window_softmax(k, n)?;
        let mut dk = Tensor::zeros(k.shape());
        for i in 0..grid.count() {
            let (x0, y0) = grid.corner(i);
            let ms = &m.data()[i * n * n..(i + 1) * n * n];
            let us = &upstream.data()[i * n * n..(i + 1) * n * n];
            let dot: f64 = ms.iter().zip(us).map(|(a, b)| a * b).sum();
            for v in 0..n {
                for u in 0..n {
                    dk.data_mut()[(y0 + v) * w + x0 + u] = ms[v * n + u] * (us[v * n + u] - dot);
                }
            }
        }
        Ok(vec![dk])
    }
}

/// Finite-difference check of the loss functions and the end-to-end total
/// loss through the full network in 64-bit.
fn loss_grad_rows(rows: &mut Vec<CheckRow>) -> Result<()> {
    // orientation loss through softmax heads
    {
        let z_a: Tensor<f64> = rand_t(&[6, 8, 8], 30);
        let z_b: Tensor<f64> = rand_t(&[6, 8, 8], 31);
        let t = RotTransform::rotation(40.0, (8, 8));
        let ones = Tensor::<f64>::full(&[8, 8], 1.0);
        let mask = warp_image(&ones, &t.inverse())?.1;
        let oa = softmax(&z_a, 0)?;
        let ob = softmax(&z_b, 0)?;
        let (_, d_oa, d_ob) = orientation_alignment_loss(&oa, &ob, &t, &mask)?;
        let dza = softmax_backward(&oa, &d_oa, 0);
        let dzb = softmax_backward(&ob, &d_ob, 0);
        let eval = |za: &Tensor<f64>, zb: &Tensor<f64>| -> f64 {
            let oa = softmax(za, 0).unwrap();
            let ob = softmax(zb, 0).unwrap();
            orientation_alignment_loss(&oa, &ob, &t, &mask).unwrap().0
        };
        let mut worst = 0.0f64;
        let eps = 1e-6;
        for probe in 0..5 {
            let idx = probe * 83 % z_a.len();
            for side in 0..2 {
                let (z, dz) = if side == 0 { (&z_a, &dza) } else { (&z_b, &dzb) };
                let mut p = z.clone();
                p.data_mut()[idx] += eps;
                let mut m = z.clone();
                m.data_mut()[idx] -= eps;
                let (lp, lm) = if side == 0 {
                    (eval(&p, &z_b), eval(&m, &z_b))
                } else {
                    (eval(&z_a, &p), eval(&z_a, &m))
                };
                let fd = (lp - lm) / (2.0 * eps);
                let an = dz.data()[idx];
                worst = worst.max((fd - an).abs() / (fd.abs() + an.abs()).max(1e-8));
            }
        }
        rows.push(CheckRow {
            name: "loss/orientation_alignment".into(),
            value: worst,
            bound: 1e-4,
        });
    }
    // ip loss on both operands
    {
        let k_a: Tensor<f64> = rand_t(&[16, 16], 32);
        let k_b: Tensor<f64> = rand_t(&[16, 16], 33);
        let t = RotTransform::rotation(25.0, (16, 16));
        let ones = Tensor::<f64>::full(&[16, 16], 1.0);
        let mask = warp_image(&ones, &t.inverse())?.1;
        let (_, dka, dkb) = ip_loss(&k_a, &k_b, &t, 8, &mask)?;
        let mut worst = 0.0f64;
        let eps = 1e-6;
        for probe in 0..5 {
            let idx = probe * 47 % k_a.len();
            for side in 0..2 {
                let (base, grad) = if side == 0 { (&k_a, &dka) } else { (&k_b, &dkb) };
                let mut p = base.clone();
                p.data_mut()[idx] += eps;
                let mut m = base.clone();
                m.data_mut()[idx] -= eps;
                let (lp, lm) = if side == 0 {
                    (ip_loss(&p, &k_b, &t, 8, &mask)?.0, ip_loss(&m, &k_b, &t, 8, &mask)?.0)
                } else {
                    (ip_loss(&k_a, &p, &t, 8, &mask)?.0, ip_loss(&k_a, &m, &t, 8, &mask)?.0)
                };
                let fd = (lp - lm) / (2.0 * eps);
                let an = grad.data()[idx];
                worst = worst.max((fd - an).abs() / (fd.abs() + an.abs()).max(1e-8));
            }
        }
        rows.push(CheckRow {
            name: "loss/ip".into(),
            value: worst,
            bound: 1e-4,
        });
    }
    // end-to-end total loss through the network on 5 probed weights
    {
        let cfg = RekdConfig {
            group_order: 8,
            channels: 2,
            ..Default::default()
        };
        let mut model = Model::<f64>::new(cfg, 40)?;
        let pair = crate::datagen::make_pair(41, 0, 32);
        let (_, grads, _, _) = crate::train::pair_gradients(&model, &pair, model.cfg.beta)?;
        let analytic = grads.tensors().iter().map(|t| t.data().to_vec()).collect::<Vec<_>>();
        let eval_loss = |model: &Model<f64>| -> f64 {
            let (losses, _, _, _) =
                crate::train::pair_gradients(model, &pair, model.cfg.beta).unwrap();
            losses.total
        };
        let mut worst = 0.0f64;
        let eps = 1e-5;
        let n_params = analytic.len();
        for probe in 0..5 {
            let pi = probe * 2 % n_params;
            let len = analytic[pi].len();
            let ci = (probe * 131) % len;
            let original = model.params()[pi].data()[ci];
            model.params_mut()[pi].data_mut()[ci] = original + eps;
            let lp = eval_loss(&model);
            model.params_mut()[pi].data_mut()[ci] = original - eps;
            let lm = eval_loss(&model);
            model.params_mut()[pi].data_mut()[ci] = original;
            let fd = (lp - lm) / (2.0 * eps);
            let an = analytic[pi][ci];
            worst = worst.max((fd - an).abs() / (fd.abs() + an.abs()).max(1e-8));
        }
        rows.push(CheckRow {
            name: "loss/total_end_to_end".into(),
            value: worst,
            bound: 1e-4,
        });
        // closed-form combination sanity
        let combo = total_loss(0.5, 2.0, 100.0);
        rows.push(CheckRow {
            name: "loss/total_combination".into(),
            value: (combo - 52.0f64).abs(),
            bound: 1e-9,
        });
        let _ = keypoint_loss::<f64>; // referenced via pair_gradients
    }
    Ok(())
}

/// Gradient checks for every differentiable op and the end-to-end loss.
pub fn run_grad_check() -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let mut push = |name: &str, value: f64, bound: f64, rows: &mut Vec<CheckRow>| {
        rows.push(CheckRow {
            name: format!("op/{name}"),
            value,
            bound,
        });
    };
    let v = grad_check(
        &mut Conv2dOp::new(1, 1),
        &[rand_t(&[2, 6, 5], 10), rand_t(&[3, 2, 3, 3], 11)],
        1e-4,
    )?;
    push("conv2d", v, 1e-7, &mut rows);
    let mut relu_in: Tensor<f64> = rand_t(&[50], 12);
    for x in relu_in.data_mut() {
        if x.abs() < 1e-2 {
            *x += 0.05;
        }
    }
    let v = grad_check(&mut ReluOp::default(), &[relu_in], 1e-4)?;
    push("relu", v, 1e-6, &mut rows);
    let v = grad_check(&mut SoftmaxOp::new(0), &[rand_t(&[9, 4], 13)], 1e-4)?;
    push("softmax", v, 1e-4, &mut rows);
    let v = grad_check(&mut BilinearResizeOp::new(7, 5), &[rand_t(&[2, 5, 6], 14)], 1e-4)?;
    push("bilinear_resize", v, 1e-6, &mut rows);
    let v = grad_check(
        &mut BatchNormOp::new(),
        &[rand_t(&[1, 4, 2, 5, 5], 15), rand_t(&[2], 16), rand_t(&[2], 17)],
        1e-4,
    )?;
    push("batchnorm_group", v, 1e-4, &mut rows);
    let group = CyclicGroup::new(8);
    let v = grad_check(
        &mut LiftOp { group, cache: None },
        &[rand_t(&[1, 7, 7], 18), rand_t(&[2, 1, 5, 5], 19)],
        1e-4,
    )?;
    push("lift_conv", v, 1e-6, &mut rows);
    let v = grad_check(
        &mut GroupConvOp { group, cache: None },
        &[rand_t(&[8, 1, 6, 6], 20), rand_t(&[1, 8, 3, 3], 21)],
        1e-4,
    )?;
    push("group_conv", v, 1e-6, &mut rows);
    let v = grad_check(&mut GroupPoolOp { cache: None }, &[rand_t(&[6, 2, 4, 4], 22)], 1e-4)?;
    push("group_pool_max", v, 1e-4, &mut rows);
    let v = grad_check(
        &mut ChannelPoolOp { cache: None },
        &[rand_t(&[4, 3, 4, 4], 23), rand_t(&[3], 24)],
        1e-4,
    )?;
    push("channel_pool", v, 1e-6, &mut rows);
    let v = grad_check(
        &mut WindowSoftmaxOp { n: 4, cache: None },
        &[rand_t(&[8, 8], 25)],
        1e-4,
    )?;
    push("window_softmax", v, 1e-4, &mut rows);
    loss_grad_rows(&mut rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equiv_check_passes_for_small_orders() {
        let rows = run_equiv_check(&[4, 8], 3, 24).unwrap();
        assert_eq!(rows.len(), 6);
        for row in &rows {
            assert!(row.pass(), "{}: {} >= {}", row.name, row.value, row.bound);
        }
    }

    #[test]
    fn grad_check_suite_passes() {
        for row in run_grad_check().unwrap() {
            assert!(row.pass(), "{}: {} >= {}", row.name, row.value, row.bound);
        }
    }

    #[test]
    fn approx_equiv_is_finite_and_reported() {
        let rows = run_equiv_check_approx(32).unwrap();
        assert_eq!(rows.len(), 32);
        for row in &rows {
            assert!(row.value.is_finite() && row.value >= 0.0);
        }
    }
}
