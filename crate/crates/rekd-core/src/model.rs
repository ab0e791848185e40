//! The full detector: three equivariant conv-bn-relu layers over an
//! internal scale-space, a keypoint head producing the rotation-invariant
//! score map `K` and an orientation head producing the histogram map `O`,
//! plus checkpoint save/load.

use crate::equivariant::{
    channel_pool, channel_pool_backward, collapse_group_kernel_grad, collapse_lift_kernel_grad,
    expand_group_kernel, expand_lift_kernel, group_pool_max,
    group_pool_max_backward, CyclicGroup, KernelRotator,
};
use crate::tensor::{
    bilinear_resize, bilinear_resize_backward, conv2d, conv2d_backward, relu, relu_backward,
    softmax, softmax_backward, BatchNorm, BnCache, BnMode, Scalar, Tensor,
};
use crate::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

/// Hyperparameters. Defaults follow the reference configuration:
/// cyclic group of order 36, 2 channels per group element, 3 layers of 5x5
/// kernels with padding 2, a 3-level internal scale-space at factor
/// 1/sqrt(2), Adam at lr 0.001 with decay 0.5 every 10 epochs, batch 16,
/// loss balance beta = 100 and window levels [8,16,24,32,40] weighted
/// [256,64,16,4,1].
#[derive(Clone, Debug, PartialEq)]
pub struct RekdConfig {
    pub group_order: usize,
    pub channels: usize,
    pub layers: usize,
    pub kernel: usize,
    pub padding: usize,
    pub scales: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub beta: f64,
    pub window_sizes: Vec<usize>,
    pub window_weights: Vec<f64>,
}

impl Default for RekdConfig {
    fn default() -> Self {
        RekdConfig {
            group_order: 36,
            channels: 2,
            layers: 3,
            kernel: 5,
            padding: 2,
            scales: 3,
            lr: 0.001,
            batch: 16,
            epochs: 20,
            lr_decay: 0.5,
            lr_decay_every: 10,
            beta: 100.0,
            window_sizes: vec![8, 16, 24, 32, 40],
            window_weights: vec![256.0, 64.0, 16.0, 4.0, 1.0],
        }
    }
}

impl RekdConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.group_order,
            self.channels,
            self.layers,
            self.kernel,
            self.scales,
            self.batch,
        ];
        if positive.iter().any(|&v| v == 0) || self.lr <= 0.0 || self.beta < 0.0 {
            return Err(Error::InvalidArgument("config fields must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidArgument("kernel size must be odd".into()));
        }
        if self.window_sizes.len() != self.window_weights.len() {
            return Err(Error::InvalidArgument(
                "window_sizes and window_weights must have equal length".into(),
            ));
        }
        Ok(())
    }

    /// key=value serialization used by checkpoints and config echoes.
    pub fn to_text(&self) -> String {
        let ws: Vec<String> = self.window_sizes.iter().map(|v| v.to_string()).collect();
        let ww: Vec<String> = self.window_weights.iter().map(|v| v.to_string()).collect();
        format!(
            "group_order={}\nchannels={}\nlayers={}\nkernel={}\npadding={}\nscales={}\n\
             lr={}\nbatch={}\nepochs={}\nlr_decay={}\nlr_decay_every={}\nbeta={}\n\
             window_sizes={}\nwindow_weights={}\n",
            self.group_order,
            self.channels,
            self.layers,
            self.kernel,
            self.padding,
            self.scales,
            self.lr,
            self.batch,
            self.epochs,
            self.lr_decay,
            self.lr_decay_every,
            self.beta,
            ws.join(","),
            ww.join(",")
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RekdConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad config line: {line}")))?;
            macro_rules! field {
                ($slot:expr) => {
                    $slot = value
                        .parse()
                        .map_err(|_| Error::Parse(format!("bad config value: {line}")))?
                };
            }
            match key {
                "group_order" => field!(cfg.group_order),
                "channels" => field!(cfg.channels),
                "layers" => field!(cfg.layers),
                "kernel" => field!(cfg.kernel),
                "padding" => field!(cfg.padding),
                "scales" => field!(cfg.scales),
                "lr" => field!(cfg.lr),
                "batch" => field!(cfg.batch),
                "epochs" => field!(cfg.epochs),
                "lr_decay" => field!(cfg.lr_decay),
                "lr_decay_every" => field!(cfg.lr_decay_every),
                "beta" => field!(cfg.beta),
                "window_sizes" => {
                    cfg.window_sizes = value
                        .split(',')
                        .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad windows: {value}"))))
                        .collect::<Result<_>>()?
                }
                "window_weights" => {
                    cfg.window_weights = value
                        .split(',')
                        .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad weights: {value}"))))
                        .collect::<Result<_>>()?
                }
                _ => return Err(Error::Parse(format!("unknown config key: {key}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Side length of internal scale level `s` for a base extent `n`
    /// (factor `1/sqrt(2)` per level, rounded to nearest).
    pub fn scale_extent(&self, n: usize, s: usize) -> usize {
        ((n as f64) * (0.5f64).powf(s as f64 / 2.0)).round() as usize
    }

    /// Total learnable parameter count (running statistics excluded):
    /// lift `C*k^2` + `(M-1) * C * (C*|G|) * k^2` + `2*C` gamma/beta per
    /// layer + `C` channel-pool weights + `S*C + 1` for the score head.
    pub fn param_count(&self) -> usize {
        let (g, c, m, k2, s) = (
            self.group_order,
            self.channels,
            self.layers,
            self.kernel * self.kernel,
            self.scales,
        );
        c * k2 + (m - 1) * c * c * g * k2 + m * 2 * c + c + (s * c + 1)
    }
}

struct ConvBnLayer<T> {
    base: Tensor<T>,
    bn: BatchNorm<T>,
}

/// The detector network.
pub struct Model<T = f32> {
    pub cfg: RekdConfig,
    layers: Vec<ConvBnLayer<T>>,
    head_k_w: Tensor<T>,
    head_k_b: Tensor<T>,
    head_o_w: Tensor<T>,
    rotator: KernelRotator,
}

/// Final maps of one forward pass.
#[derive(Clone)]
pub struct ModelOutput<T = f32> {
    /// Keypoint score map `[H, W]`.
    pub k: Tensor<T>,
    /// Orientation probability map `[|G|, H, W]`, softmax over the group.
    pub o: Tensor<T>,
}

/// Per-scale intermediates kept for the backward pass and for tests.
pub struct ScaleTrace<T> {
    /// Conv input per layer (flattened channels); `[1, h, w]` for layer 0,
    /// `[|G|*C, h, w]` afterwards. Entry `l+1` is layer `l`'s relu output.
    pub conv_inputs: Vec<Tensor<T>>,
    bn_caches: Vec<BnCache<T>>,
    /// Pre-relu normalized maps `[|G|, C, h, w]` per layer.
    pub bn_outs: Vec<Tensor<T>>,
    /// Post-relu output of the last layer, `[|G|, C, h, w]`.
    pub h_final: Tensor<T>,
    /// Group-pooled map `[C, h, w]` and its argmax routing.
    pub p: Tensor<T>,
    p_arg: Vec<u16>,
    /// Channel-pooled histogram map `[|G|, h, w]`.
    pub q: Tensor<T>,
}

impl<T: Scalar> ScaleTrace<T> {
    /// Relu output of layer `l` as `[|G|, C, h, w]`.
    pub fn layer_output(&self, l: usize, group: usize, channels: usize) -> Tensor<T> {
        if l + 1 < self.conv_inputs.len() {
            let t = self.conv_inputs[l + 1].clone();
            let (h, w) = (t.shape()[1], t.shape()[2]);
            t.reshape(&[group, channels, h, w]).unwrap()
        } else {
            self.h_final.clone()
        }
    }
}

pub struct ForwardTrace<T> {
    pub scales: Vec<ScaleTrace<T>>,
    /// Channel concatenation of the per-scale resized `P` maps.
    concat: Tensor<T>,
    pub output: ModelOutput<T>,
}

/// Gradients for every learnable parameter, in the model's canonical
/// parameter order.
pub struct Gradients<T> {
    pub base: Vec<Tensor<T>>,
    pub gamma: Vec<Tensor<T>>,
    pub beta: Vec<Tensor<T>>,
    pub head_k_w: Tensor<T>,
    pub head_k_b: Tensor<T>,
    pub head_o_w: Tensor<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(model: &Model<T>) -> Self {
        Gradients {
            base: model.layers.iter().map(|l| Tensor::zeros(l.base.shape())).collect(),
            gamma: model.layers.iter().map(|l| Tensor::zeros(l.bn.gamma.shape())).collect(),
            beta: model.layers.iter().map(|l| Tensor::zeros(l.bn.beta.shape())).collect(),
            head_k_w: Tensor::zeros(model.head_k_w.shape()),
            head_k_b: Tensor::zeros(model.head_k_b.shape()),
            head_o_w: Tensor::zeros(model.head_o_w.shape()),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.base.iter_mut().zip(&other.base) {
            a.add_assign(b);
        }
        for (a, b) in self.gamma.iter_mut().zip(&other.gamma) {
            a.add_assign(b);
        }
        for (a, b) in self.beta.iter_mut().zip(&other.beta) {
            a.add_assign(b);
        }
        self.head_k_w.add_assign(&other.head_k_w);
        self.head_k_b.add_assign(&other.head_k_b);
        self.head_o_w.add_assign(&other.head_o_w);
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            t.scale(s);
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for ((b, g), e) in self
            .base
            .iter_mut()
            .zip(self.gamma.iter_mut())
            .zip(self.beta.iter_mut())
        {
            out.push(b);
            out.push(g);
            out.push(e);
        }
        out.push(&mut self.head_k_w);
        out.push(&mut self.head_k_b);
        out.push(&mut self.head_o_w);
        out
    }

    /// Tensors in the same order as [`Model::param_names`].
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = Vec::new();
        for ((b, g), e) in self.base.iter().zip(&self.gamma).zip(&self.beta) {
            out.push(b);
            out.push(g);
            out.push(e);
        }
        out.push(&self.head_k_w);
        out.push(&self.head_k_b);
        out.push(&self.head_o_w);
        out
    }
}

impl<T: Scalar> Model<T> {
    /// Random initialization (uniform, fan-in scaled) from a seed.
    pub fn new(cfg: RekdConfig, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        cfg.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let group = CyclicGroup::new(cfg.group_order);
        let (c, k) = (cfg.channels, cfg.kernel);
        let mut layers = Vec::new();
        for l in 0..cfg.layers {
            let cin_total = if l == 0 { 1 } else { c * cfg.group_order };
            let fan_in = (cin_total * k * k) as f64;
            let bound = (2.0 / fan_in).sqrt();
            let base = crate::tensor::random_uniform(&[c, cin_total, k, k], bound, &mut rng);
            layers.push(ConvBnLayer {
                base,
                bn: BatchNorm::new(c),
            });
        }
        let head_in = cfg.scales * c;
        let head_k_w =
            crate::tensor::random_uniform(&[1, head_in, 1, 1], (1.0 / head_in as f64).sqrt(), &mut rng);
        let head_k_b = Tensor::zeros(&[1]);
        let head_o_w = crate::tensor::random_uniform(&[c], (1.0 / c as f64).sqrt(), &mut rng);
        Ok(Model {
            rotator: KernelRotator::new(k, group),
            cfg,
            layers,
            head_k_w,
            head_k_b,
            head_o_w,
        })
    }

    pub fn group(&self) -> CyclicGroup {
        CyclicGroup::new(self.cfg.group_order)
    }

    /// Canonical parameter order: layer bases, then gammas, betas, then the
    /// heads. Checkpoints, gradients and optimizer state all follow it.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.layers.len() {
            names.push(format!("layer{l}.base"));
            names.push(format!("layer{l}.bn.gamma"));
            names.push(format!("layer{l}.bn.beta"));
        }
        names.push("head_k.weight".into());
        names.push("head_k.bias".into());
        names.push("head_o.weight".into());
        names
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = Vec::new();
        for l in &self.layers {
            out.push(&l.base);
            out.push(&l.bn.gamma);
            out.push(&l.bn.beta);
        }
        out.push(&self.head_k_w);
        out.push(&self.head_k_b);
        out.push(&self.head_o_w);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for l in self.layers.iter_mut() {
            out.push(&mut l.base);
            out.push(&mut l.bn.gamma);
            out.push(&mut l.bn.beta);
        }
        out.push(&mut self.head_k_w);
        out.push(&mut self.head_k_b);
        out.push(&mut self.head_o_w);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Forward pass. `mode` selects batch statistics (training) or running
    /// statistics (inference); training-mode batch statistics are recorded
    /// in the trace and folded into the running averages by
    /// [`Model::update_running_stats`], which keeps this method `&self`.
    pub fn forward(&self, img: &Tensor<T>, mode: BnMode) -> Result<ForwardTrace<T>> {
        let img = match img.rank() {
            2 => img.clone().reshape(&[1, img.shape()[0], img.shape()[1]])?,
            3 => img.clone(),
            r => {
                return Err(Error::ShapeMismatch(format!(
                    "forward expects [H, W] or [1, H, W], got rank {r}"
                )))
            }
        };
        if img.shape()[0] != 1 {
            return Err(Error::ShapeMismatch("forward expects a grayscale image".into()));
        }
        let (h0, w0) = (img.shape()[1], img.shape()[2]);
        let coarse = self
            .cfg
            .scale_extent(h0.min(w0), self.cfg.scales - 1);
        if coarse < 2 * self.cfg.kernel {
            return Err(Error::InvalidArgument(format!(
                "image {h0}x{w0} is smaller than 2*kernel at the coarsest scale ({coarse} < {})",
                2 * self.cfg.kernel
            )));
        }
        let (g, c) = (self.cfg.group_order, self.cfg.channels);
        let mut scales = Vec::with_capacity(self.cfg.scales);
        let mut p_ups = Vec::with_capacity(self.cfg.scales);
        let mut q_sum: Option<Tensor<T>> = None;
        for s in 0..self.cfg.scales {
            let hs = self.cfg.scale_extent(h0, s);
            let ws = self.cfg.scale_extent(w0, s);
            let x = bilinear_resize(&img, hs, ws)?;
            let mut conv_inputs = vec![x];
            let mut bn_caches = Vec::new();
            let mut bn_outs = Vec::new();
            let mut h_cur: Option<Tensor<T>> = None;
            for (l, layer) in self.layers.iter().enumerate() {
                let ek = if l == 0 {
                    expand_lift_kernel(&layer.base, &self.rotator)
                } else {
                    expand_group_kernel(&layer.base, &self.rotator)
                };
                let pre = conv2d(conv_inputs.last().unwrap(), &ek, self.cfg.padding, 1)?;
                let pre5 = pre.reshape(&[1, g, c, hs, ws])?;
                let (post, cache) = layer.bn.forward(&pre5, mode)?;
                let bn_out = post.reshape(&[g, c, hs, ws])?;
                let activated = relu(&bn_out);
                bn_caches.push(cache);
                bn_outs.push(bn_out);
                if l + 1 < self.layers.len() {
                    conv_inputs.push(activated.clone().reshape(&[g * c, hs, ws])?);
                } else {
                    h_cur = Some(activated);
                }
            }
            let h_final = h_cur.expect("at least one layer");
            let (p, p_arg) = group_pool_max(&h_final);
            let q = channel_pool(&h_final, &self.head_o_w)?;
            let p_up = bilinear_resize(&p, h0, w0)?;
            let q_up = bilinear_resize(&q, h0, w0)?;
            match &mut q_sum {
                None => q_sum = Some(q_up),
                Some(acc) => acc.add_assign(&q_up),
            }
            p_ups.push(p_up);
            scales.push(ScaleTrace {
                conv_inputs,
                bn_caches,
                bn_outs,
                h_final,
                p,
                p_arg,
                q,
            });
        }
        // K head: 1x1 convolution over the concatenated per-scale P maps
        let mut concat = Tensor::zeros(&[self.cfg.scales * c, h0, w0]);
        for (s, p_up) in p_ups.iter().enumerate() {
            concat.data_mut()[s * c * h0 * w0..(s + 1) * c * h0 * w0]
                .copy_from_slice(p_up.data());
        }
        let mut k = conv2d(&concat, &self.head_k_w, 0, 1)?;
        let bias = self.head_k_b.data()[0];
        for v in k.data_mut() {
            *v += bias;
        }
        let k = k.reshape(&[h0, w0])?;
        // O head: softmax over the group of the summed per-scale Q maps
        let o = softmax(&q_sum.expect("at least one scale"), 0)?;
        Ok(ForwardTrace {
            scales,
            concat,
            output: ModelOutput { k, o },
        })
    }

    /// Fold the batch statistics recorded in a training-mode trace into the
    /// running averages. Call once per forward, in a fixed order across a
    /// batch, to keep training deterministic.
    pub fn update_running_stats(&mut self, trace: &ForwardTrace<T>) {
        for scale in &trace.scales {
            for (layer, cache) in self.layers.iter_mut().zip(&scale.bn_caches) {
                layer.bn.update_running(cache);
            }
        }
    }

    /// Backward pass: accumulate parameter gradients for upstream gradients
    /// `dk` on the score map and `do_` on the (post-softmax) orientation map.
    pub fn backward(
        &self,
        trace: &ForwardTrace<T>,
        dk: &Tensor<T>,
        do_: &Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> Result<()> {
        let (g, c) = (self.cfg.group_order, self.cfg.channels);
        let (h0, w0) = (trace.output.k.shape()[0], trace.output.k.shape()[1]);
        // K head
        let dk3 = dk.clone().reshape(&[1, h0, w0])?;
        grads.head_k_b.data_mut()[0] += dk.data().iter().copied().sum();
        let (dconcat, dhead_w) = conv2d_backward(&trace.concat, &self.head_k_w, 0, 1, &dk3)?;
        grads.head_k_w.add_assign(&dhead_w);
        // O head: softmax backward, the same upstream for every scale
        let dz = softmax_backward(&trace.output.o, do_, 0);
        for (s, scale) in trace.scales.iter().enumerate() {
            let hs = scale.p.shape()[1];
            let ws = scale.p.shape()[2];
            // heads -> per-scale pooled maps
            let dp_up = Tensor::from_vec(
                &[c, h0, w0],
                dconcat.data()[s * c * h0 * w0..(s + 1) * c * h0 * w0].to_vec(),
            )?;
            let dp = bilinear_resize_backward(&[c, hs, ws], &dp_up);
            let dq = bilinear_resize_backward(&[g, hs, ws], &dz);
            // pooled maps -> last layer output
            let mut dh = group_pool_max_backward(scale.h_final.shape(), &scale.p_arg, &dp);
            let (dh_q, dw_o) = channel_pool_backward(&scale.h_final, &self.head_o_w, &dq);
            dh.add_assign(&dh_q);
            grads.head_o_w.add_assign(&dw_o);
            // conv-bn-relu chain, last layer to first
            for l in (0..self.layers.len()).rev() {
                let layer = &self.layers[l];
                let dpost = relu_backward(&scale.bn_outs[l], &dh);
                let dpost5 = dpost.reshape(&[1, g, c, hs, ws])?;
                let (dx5, dgamma, dbeta) = layer.bn.backward(&scale.bn_caches[l], &dpost5);
                grads.gamma[l].add_assign(&dgamma);
                grads.beta[l].add_assign(&dbeta);
                let dpre = dx5.reshape(&[g * c, hs, ws])?;
                let ek = if l == 0 {
                    expand_lift_kernel(&layer.base, &self.rotator)
                } else {
                    expand_group_kernel(&layer.base, &self.rotator)
                };
                let (dinput, dek) =
                    conv2d_backward(&scale.conv_inputs[l], &ek, self.cfg.padding, 1, &dpre)?;
                let dbase = if l == 0 {
                    collapse_lift_kernel_grad(&dek, layer.base.shape(), &self.rotator)
                } else {
                    collapse_group_kernel_grad(&dek, layer.base.shape(), &self.rotator)
                };
                grads.base[l].add_assign(&dbase);
                if l > 0 {
                    dh = dinput.reshape(&[g, c, hs, ws])?;
                }
            }
        }
        Ok(())
    }

    /// Apply one optimizer step from accumulated gradients.
    pub fn apply_gradients(
        &mut self,
        grads: &Gradients<T>,
        opt: &mut crate::tensor::AdamState<T>,
    ) -> Result<()> {
        let names = self.param_names();
        let mut params = self.params_mut();
        let mut named: Vec<(&str, &mut Tensor<T>)> = names
            .iter()
            .map(|n| n.as_str())
            .zip(params.drain(..))
            .collect();
        crate::tensor::adam_step(&mut named, &grads.tensors(), opt)
    }
}

const CHECKPOINT_MAGIC: &[u8; 5] = b"REKD1";
const DTYPE_F32: u8 = 0;
const DTYPE_TEXT: u8 = 2;

fn write_record(
    out: &mut impl Write,
    name: &str,
    dtype: u8,
    shape: &[usize],
    payload: &[u8],
) -> Result<()> {
    out.write_all(&(name.len() as u32).to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    out.write_all(&[dtype])?;
    out.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &e in shape {
        out.write_all(&(e as u32).to_le_bytes())?;
    }
    out.write_all(payload)?;
    Ok(())
}

struct Record {
    name: String,
    dtype: u8,
    shape: Vec<usize>,
    payload: Vec<u8>,
}

fn read_records(raw: &[u8]) -> Result<Vec<Record>> {
    if raw.len() < 5 {
        return Err(Error::Truncated);
    }
    if &raw[..5] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic);
    }
    let mut pos = 5usize;
    let mut records = Vec::new();
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > raw.len() {
            return Err(Error::Truncated);
        }
        let s = &raw[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    while pos < raw.len() {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Parse("bad record name".into()))?;
        let dtype = take(&mut pos, 1)?[0];
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let elems: usize = shape.iter().product();
        let bytes = match dtype {
            DTYPE_F32 => elems * 4,
            DTYPE_TEXT => elems,
            other => {
                return Err(Error::Parse(format!("unknown dtype tag {other}")));
            }
        };
        let payload = take(&mut pos, bytes)?.to_vec();
        records.push(Record {
            name,
            dtype,
            shape,
            payload,
        });
    }
    Ok(records)
}

fn tensor_payload(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn tensor_from_record(rec: &Record) -> Result<Tensor<f32>> {
    if rec.dtype != DTYPE_F32 {
        return Err(Error::Parse(format!("record {} is not f32", rec.name)));
    }
    let data: Vec<f32> = rec
        .payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::from_vec(&rec.shape, data)
}

impl Model<f32> {
    /// Serialize parameters, running statistics and the config.
    ///
    /// Format: magic `REKD1`, then records of
    /// `u32 name_len, name, u8 dtype (0 = f32, 2 = utf-8 text), u32 rank,
    /// u32 extents..., little-endian row-major payload`. The final record
    /// is named `__config` and carries the config as key=value text.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(CHECKPOINT_MAGIC)?;
        let names = self.param_names();
        for (name, tensor) in names.iter().zip(self.params()) {
            write_record(&mut out, name, DTYPE_F32, tensor.shape(), &tensor_payload(tensor))?;
        }
        for (l, layer) in self.layers.iter().enumerate() {
            write_record(
                &mut out,
                &format!("layer{l}.bn.running_mean"),
                DTYPE_F32,
                layer.bn.running_mean.shape(),
                &tensor_payload(&layer.bn.running_mean),
            )?;
            write_record(
                &mut out,
                &format!("layer{l}.bn.running_var"),
                DTYPE_F32,
                layer.bn.running_var.shape(),
                &tensor_payload(&layer.bn.running_var),
            )?;
        }
        let cfg_text = self.cfg.to_text();
        write_record(
            &mut out,
            "__config",
            DTYPE_TEXT,
            &[cfg_text.len()],
            cfg_text.as_bytes(),
        )?;
        Ok(())
    }

    /// Load a checkpoint saved by [`Model::save_checkpoint`].
    pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
        let mut raw = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut raw)?;
        let records = read_records(&raw)?;
        let cfg_rec = records
            .iter()
            .find(|r| r.name == "__config")
            .ok_or(Error::Truncated)?;
        let cfg_text = String::from_utf8(cfg_rec.payload.clone())
            .map_err(|_| Error::Parse("bad config text".into()))?;
        let cfg = RekdConfig::from_text(&cfg_text)?;
        let mut model = Model::<f32>::new(cfg, 0)?;
        let names = model.param_names();
        {
            let mut params = model.params_mut();
            for (name, slot) in names.iter().zip(params.iter_mut()) {
                let rec = records
                    .iter()
                    .find(|r| &r.name == name)
                    .ok_or_else(|| Error::ConfigMismatch(format!("missing record {name}")))?;
                let tensor = tensor_from_record(rec)?;
                if tensor.shape() != slot.shape() {
                    return Err(Error::ConfigMismatch(format!(
                        "record {name} has shape {:?}, config wants {:?}",
                        tensor.shape(),
                        slot.shape()
                    )));
                }
                **slot = tensor;
            }
        }
        for l in 0..model.layers.len() {
            for (field, is_mean) in [("running_mean", true), ("running_var", false)] {
                let name = format!("layer{l}.bn.{field}");
                let rec = records
                    .iter()
                    .find(|r| r.name == name)
                    .ok_or_else(|| Error::ConfigMismatch(format!("missing record {name}")))?;
                let tensor = tensor_from_record(rec)?;
                let slot = if is_mean {
                    &mut model.layers[l].bn.running_mean
                } else {
                    &mut model.layers[l].bn.running_var
                };
                if tensor.shape() != slot.shape() {
                    return Err(Error::ConfigMismatch(format!("record {name} shape mismatch")));
                }
                *slot = tensor;
            }
        }
        Ok(model)
    }
}
