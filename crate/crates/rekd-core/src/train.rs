//! Training: the per-pair step and the epoch driver with learning-rate
//! decay and best-validation-checkpoint selection.

use crate::datagen::RigidPair;
use crate::geometry::{warp_image, ValidityMask};
use crate::losses::{keypoint_loss, orientation_alignment_loss, total_loss};
use crate::model::{ForwardTrace, Gradients, Model};
use crate::tensor::{AdamState, BnMode, Scalar, Tensor};
use crate::{Error, Result};

/// Loss values of one step.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepLosses {
    pub total: f64,
    pub ori: f64,
    pub kpts: f64,
}

/// Validity masks of both frames of a pair, derived from its transform.
fn pair_masks(pair: &RigidPair) -> Result<(ValidityMask, ValidityMask)> {
    let (w, h) = pair.t.src_size;
    let ones = Tensor::<f32>::full(&[h, w], 1.0);
    // a-frame: pixels whose forward-mapped point stays inside b
    let mask_a = warp_image(&ones, &pair.t.inverse())?.1;
    let (dw, dh) = pair.t.dst_size;
    let ones_b = Tensor::<f32>::full(&[dh, dw], 1.0);
    let mask_b = warp_image(&ones_b, &pair.t)?.1;
    Ok((mask_a, mask_b))
}

/// Forward both images, evaluate both losses and accumulate gradients.
/// Returns the losses, the gradients and the traces (whose batch statistics
/// still have to be folded into the model's running averages).
#[allow(clippy::type_complexity)]
pub fn pair_gradients<T: Scalar>(
    model: &Model<T>,
    pair: &RigidPair,
    beta: f64,
) -> Result<(StepLosses, Gradients<T>, ForwardTrace<T>, ForwardTrace<T>)> {
    let img_a = pair.img_a.cast::<T>();
    let img_b = pair.img_b.cast::<T>();
    let trace_a = model.forward(&img_a, BnMode::Train)?;
    let trace_b = model.forward(&img_b, BnMode::Train)?;
    let (mask_a, mask_b) = pair_masks(pair)?;
    let (l_ori, d_oa, d_ob) = orientation_alignment_loss(
        &trace_a.output.o,
        &trace_b.output.o,
        &pair.t,
        &mask_a,
    )?;
    let (l_kpts, dk_a, dk_b) = keypoint_loss(
        &trace_a.output.k,
        &trace_b.output.k,
        &pair.t,
        &model.cfg.window_sizes,
        &model.cfg.window_weights,
        &mask_a,
        &mask_b,
    )?;
    let l_total = total_loss(l_ori, l_kpts, beta);
    for (value, name) in [
        (l_ori.as_f64(), "orientation loss"),
        (l_kpts.as_f64(), "keypoint loss"),
    ] {
        if !value.is_finite() {
            return Err(Error::NonFinite { what: name.into() });
        }
    }
    let beta_t = T::from_f64(beta);
    let mut grads = Gradients::zeros_like(model);
    let mut d_oa_scaled = d_oa;
    d_oa_scaled.scale(beta_t);
    let mut d_ob_scaled = d_ob;
    d_ob_scaled.scale(beta_t);
    model.backward(&trace_a, &dk_a, &d_oa_scaled, &mut grads)?;
    model.backward(&trace_b, &dk_b, &d_ob_scaled, &mut grads)?;
    Ok((
        StepLosses {
            total: l_total.as_f64(),
            ori: l_ori.as_f64(),
            kpts: l_kpts.as_f64(),
        },
        grads,
        trace_a,
        trace_b,
    ))
}

/// One optimizer step on a single pair.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    pair: &RigidPair,
    opt: &mut AdamState<T>,
) -> Result<StepLosses> {
    let beta = model.cfg.beta;
    let (losses, grads, trace_a, trace_b) = pair_gradients(model, pair, beta)?;
    model.update_running_stats(&trace_a);
    model.update_running_stats(&trace_b);
    model.apply_gradients(&grads, opt)?;
    Ok(losses)
}

/// One optimizer step on a batch of pairs: per-pair gradients are computed
/// independently (in parallel when enabled) and averaged in pair order, so
/// the update is identical regardless of thread count.
pub fn train_batch<T: Scalar>(
    model: &mut Model<T>,
    pairs: &[&RigidPair],
    opt: &mut AdamState<T>,
) -> Result<StepLosses> {
    let beta = model.cfg.beta;
    let frozen: &Model<T> = model;
    let results = crate::par::map_indexed(pairs.len(), |i| pair_gradients(frozen, pairs[i], beta));
    let mut grads = Gradients::zeros_like(model);
    let mut sum = StepLosses::default();
    let mut count = 0usize;
    let mut traces = Vec::new();
    for r in results {
        let (losses, g, ta, tb) = r?;
        grads.add_assign(&g);
        sum.total += losses.total;
        sum.ori += losses.ori;
        sum.kpts += losses.kpts;
        count += 1;
        traces.push((ta, tb));
    }
    for (ta, tb) in &traces {
        model.update_running_stats(ta);
        model.update_running_stats(tb);
    }
    let inv = T::from_f64(1.0 / count as f64);
    grads.scale(inv);
    model.apply_gradients(&grads, opt)?;
    Ok(StepLosses {
        total: sum.total / count as f64,
        ori: sum.ori / count as f64,
        kpts: sum.kpts / count as f64,
    })
}

/// Per-epoch record of a training run.
#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: StepLosses,
    pub val_repeatability: f64,
    pub lr: f64,
}

/// Full training result: per-epoch stats and the parameters that scored the
/// best validation repeatability.
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_repeatability: f64,
}

/// Mean single-scale repeatability at 3 px over validation pairs; used for
/// best-checkpoint selection (the full pyramid would dominate epoch cost).
pub fn validation_repeatability(model: &Model<f32>, val: &[&RigidPair], kpts: usize) -> f64 {
    if val.is_empty() {
        return 0.0;
    }
    let scores = crate::par::map_indexed(val.len(), |i| {
        let pair = val[i];
        let a = crate::inference::detect_single_scale(model, &pair.img_a, kpts);
        let b = crate::inference::detect_single_scale(model, &pair.img_b, kpts);
        match (a, b) {
            (Ok(a), Ok(b)) => crate::evalkit::repeatability(&a, &b, &pair.t, 3.0),
            _ => 0.0,
        }
    });
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// Train for `cfg.epochs` epochs over the training split, decaying the
/// learning rate by `cfg.lr_decay` every `cfg.lr_decay_every` epochs, and
/// keep the model state with the highest validation repeatability.
/// `on_epoch` observes each epoch as it completes.
pub fn train(
    model: &mut Model<f32>,
    train_pairs: &[RigidPair],
    val_pairs: &[RigidPair],
    seed: u64,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let cfg = model.cfg.clone();
    let mut opt = AdamState::<f32>::new(
        &model.params().iter().map(|t| t.shape()).collect::<Vec<_>>(),
        cfg.lr as f32,
    );
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Vec<Tensor<f32>>)> = None;
    let val_refs: Vec<&RigidPair> = val_pairs.iter().collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr * cfg.lr_decay.powi((epoch / cfg.lr_decay_every.max(1)) as i32);
        opt.lr = lr as f32;
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = StepLosses::default();
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let batch: Vec<&RigidPair> = chunk.iter().map(|&i| &train_pairs[i]).collect();
            let losses = train_batch(model, &batch, &mut opt)?;
            sums.total += losses.total;
            sums.ori += losses.ori;
            sums.kpts += losses.kpts;
            steps += 1;
        }
        let loss = StepLosses {
            total: sums.total / steps.max(1) as f64,
            ori: sums.ori / steps.max(1) as f64,
            kpts: sums.kpts / steps.max(1) as f64,
        };
        let val_rep = validation_repeatability(model, &val_refs, 300);
        let stats = EpochStats {
            epoch,
            loss,
            val_repeatability: val_rep,
            lr,
        };
        on_epoch(&stats);
        epochs.push(stats);
        let better = match &best {
            None => true,
            Some((_, best_rep, _)) => val_rep > *best_rep,
        };
        if better {
            let snapshot = model.params().iter().map(|&t| t.clone()).collect();
            best = Some((epoch, val_rep, snapshot));
        }
    }
    let (best_epoch, best_rep, snapshot) = best.expect("at least one epoch");
    for (slot, saved) in model.params_mut().into_iter().zip(snapshot) {
        *slot = saved;
    }
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_val_repeatability: best_rep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::make_pair;
    use crate::model::RekdConfig;

    fn small_cfg() -> RekdConfig {
        RekdConfig {
            group_order: 8,
            channels: 2,
            batch: 4,
            epochs: 2,
            ..Default::default()
        }
    }

    #[test]
    fn identical_pair_identity_transform_losses() {
        let model = Model::<f64>::new(small_cfg(), 1).unwrap();
        let base = make_pair(3, 0, 64);
        let same = RigidPair {
            img_a: base.img_a.clone(),
            img_b: base.img_a.clone(),
            t: crate::geometry::RotTransform::identity((64, 64)),
            mask: crate::geometry::ValidityMask::all_valid(64, 64),
        };
        let (losses, _, _, _) = pair_gradients(&model, &same, 100.0).unwrap();
        // orientation: cross-entropy of a distribution with itself is its
        // entropy, not zero; what must hold exactly is that a mismatched
        // pair scores no better, and that the keypoint loss is minimal
        let other = make_pair(3, 1, 64);
        let mismatched = RigidPair {
            img_a: base.img_a.clone(),
            img_b: other.img_a.clone(),
            t: crate::geometry::RotTransform::identity((64, 64)),
            mask: crate::geometry::ValidityMask::all_valid(64, 64),
        };
        let (worse, _, _, _) = pair_gradients(&model, &mismatched, 100.0).unwrap();
        assert!(losses.kpts <= worse.kpts, "{} vs {}", losses.kpts, worse.kpts);
        assert!(losses.total.is_finite() && worse.total.is_finite());
    }

    #[test]
    fn train_step_decreases_loss_on_repeated_pair() {
        let mut model = Model::<f32>::new(small_cfg(), 2).unwrap();
        let pair = make_pair(7, 0, 64);
        let shapes: Vec<&[usize]> = model.params().iter().map(|t| t.shape()).collect();
        let mut opt = AdamState::<f32>::new(&shapes, 0.005);
        let first = train_step(&mut model, &pair, &mut opt).unwrap();
        let mut last = first;
        for _ in 0..20 {
            last = train_step(&mut model, &pair, &mut opt).unwrap();
        }
        assert!(
            last.total < first.total,
            "no descent: {} -> {}",
            first.total,
            last.total
        );
    }

    #[test]
    fn two_hundred_steps_on_fifty_pairs_descend_by_thirty_percent() {
        let mut model = Model::<f32>::new(small_cfg(), 5).unwrap();
        let pairs: Vec<RigidPair> = (0..50).map(|i| make_pair(21, i, 64)).collect();
        let shapes: Vec<&[usize]> = model.params().iter().map(|t| t.shape()).collect();
        let mut opt = AdamState::<f32>::new(&shapes, model.cfg.lr as f32);
        let mut first = None;
        let mut last = 0.0;
        for step in 0..200 {
            let losses = train_step(&mut model, &pairs[step % 50], &mut opt).unwrap();
            if step == 0 {
                first = Some(losses.total);
            }
            last = losses.total;
        }
        let first = first.unwrap();
        assert!(
            last < 0.7 * first,
            "expected a 30% drop: step 1 {first}, step 200 {last}"
        );
    }

    #[test]
    fn batch_step_is_thread_count_invariant() {
        let pairs: Vec<RigidPair> = (0..3).map(|i| make_pair(9, i, 64)).collect();
        let refs: Vec<&RigidPair> = pairs.iter().collect();
        let run = |sequential: bool| -> Vec<f32> {
            crate::par::set_sequential(sequential);
            let mut model = Model::<f32>::new(small_cfg(), 4).unwrap();
            let shapes: Vec<&[usize]> = model.params().iter().map(|t| t.shape()).collect();
            let mut opt = AdamState::<f32>::new(&shapes, 0.001);
            train_batch(&mut model, &refs, &mut opt).unwrap();
            let out: Vec<f32> = model
                .params()
                .iter()
                .flat_map(|t| t.data().iter().copied())
                .collect();
            crate::par::set_sequential(false);
            out
        };
        assert_eq!(run(false), run(true));
    }
}
