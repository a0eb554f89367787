use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layers::*;
use super::tensor::Tensor;
use crate::error::{MffError, Result};
use crate::mff_builder::MffSample;
use crate::rng::{derive_seed_indexed, labeled_rng, rng_from_seed, Rng};
use crate::scalar::Scalar;

fn default_kernel() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlock {
    pub out_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// 2×2 max pool after the ReLU.
    #[serde(default)]
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub conv_blocks: Vec<ConvBlock>,
    pub segments: usize,
    pub fc6_units: usize,
    pub fc7_units: usize,
    pub num_classes: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_size: 32,
            in_channels: 5,
            conv_blocks: vec![
                ConvBlock { out_channels: 16, kernel: 3, pool: true },
                ConvBlock { out_channels: 32, kernel: 3, pool: true },
                ConvBlock { out_channels: 64, kernel: 3, pool: false },
            ],
            segments: 1,
            fc6_units: 256,
            fc7_units: 512,
            num_classes: 4,
        }
    }
}

impl ArchConfig {
    /// Default backbone sized for `segments` MFFs with `flow_frames` flow pairs each.
    pub fn for_mff(flow_frames: usize, segments: usize, num_classes: usize) -> Self {
        ArchConfig {
            in_channels: 3 + 2 * flow_frames,
            segments,
            num_classes,
            ..Default::default()
        }
    }

    /// Per-segment feature width after global average pooling.
    pub fn feature_dim(&self) -> usize {
        self.conv_blocks.last().map_or(self.in_channels, |b| b.out_channels)
    }

    pub fn flow_frames(&self) -> Option<usize> {
        (self.in_channels >= 3 && (self.in_channels - 3) % 2 == 0).then(|| (self.in_channels - 3) / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(MffError::config("arch", key, msg));
        if self.input_size == 0 {
            return bad("input_size", "must be >= 1");
        }
        if self.flow_frames().is_none() {
            return bad("in_channels", "must equal 3 + 2n for some n >= 0");
        }
        if self.conv_blocks.is_empty() {
            return bad("conv_blocks", "at least one block is required");
        }
        let mut size = self.input_size;
        for b in &self.conv_blocks {
            if b.out_channels == 0 {
                return bad("conv_blocks", "out_channels must be >= 1");
            }
            if b.kernel % 2 == 0 {
                return bad("conv_blocks", "kernel must be odd");
            }
            if b.pool {
                size /= 2;
            }
            if size == 0 {
                return bad("conv_blocks", "too many pooling stages for input_size");
            }
        }
        if self.segments == 0 {
            return bad("segments", "must be >= 1");
        }
        if self.fc6_units == 0 || self.fc7_units == 0 {
            return bad("fc6_units", "hidden widths must be >= 1");
        }
        if self.num_classes < 2 {
            return bad("num_classes", "must be >= 2");
        }
        Ok(())
    }

    fn layer_in_channels(&self, i: usize) -> usize {
        if i == 0 {
            self.in_channels
        } else {
            self.conv_blocks[i - 1].out_channels
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    /// `[out, in, k, k]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `[out, in]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    fn out_dim(&self) -> usize {
        self.bias.len()
    }
}

/// Weights of the shared per-segment CNN plus the fusion head.
/// Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    pub arch: ArchConfig,
    pub conv: Vec<ConvLayer<T>>,
    pub fc6: Linear<T>,
    pub fc7: Linear<T>,
    pub fc8: Linear<T>,
}

impl<T: Scalar> NetworkParams<T> {
    pub fn zeros(arch: &ArchConfig) -> Self {
        let conv = arch
            .conv_blocks
            .iter()
            .enumerate()
            .map(|(i, b)| ConvLayer {
                weight: Tensor::zeros(&[b.out_channels, arch.layer_in_channels(i), b.kernel, b.kernel]),
                bias: Tensor::zeros(&[b.out_channels]),
            })
            .collect();
        NetworkParams {
            arch: arch.clone(),
            conv,
            fc6: Linear::zeros(arch.fc6_units, arch.segments * arch.feature_dim()),
            fc7: Linear::zeros(arch.fc7_units, arch.fc6_units),
            fc8: Linear::zeros(arch.num_classes, arch.fc7_units),
        }
    }

    /// Tensor names in canonical order.
    pub fn tensor_names(arch: &ArchConfig) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..arch.conv_blocks.len() {
            names.push(format!("conv{}.weight", i + 1));
            names.push(format!("conv{}.bias", i + 1));
        }
        for fc in ["fc6", "fc7", "fc8"] {
            names.push(format!("{fc}.weight"));
            names.push(format!("{fc}.bias"));
        }
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for c in &self.conv {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        for fc in [&self.fc6, &self.fc7, &self.fc8] {
            out.push(&fc.weight);
            out.push(&fc.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for c in &mut self.conv {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for fc in [&mut self.fc6, &mut self.fc7, &mut self.fc8] {
            out.push(&mut fc.weight);
            out.push(&mut fc.bias);
        }
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        Self::tensor_names(&self.arch).into_iter().zip(self.tensors()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &NetworkParams<T>) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, k: T) {
        for t in self.tensors_mut() {
            t.scale(k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Converts to another scalar type.
    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        let mut out = NetworkParams::<U>::zeros(&self.arch);
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = U::of(s.to_f64_lossy());
            }
        }
        out
    }
}

/// He-normal weights, zero biases.
pub fn init_network<T: Scalar>(arch: &ArchConfig, seed: u64) -> Result<NetworkParams<T>> {
    arch.validate()?;
    let mut params = NetworkParams::<T>::zeros(arch);
    let mut rng = labeled_rng(seed, "init", &[]);
    let names = NetworkParams::<T>::tensor_names(arch);
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        if name.ends_with(".bias") {
            continue;
        }
        let fan_in: usize = t.shape()[1..].iter().product();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        for v in t.data_mut() {
            *v = T::of(normal.sample(&mut rng));
        }
    }
    Ok(params)
}

/// Expands first-layer weights trained on RGB input to `3 + 2n` input
/// channels: every new flow channel receives the per-filter mean of the RGB
/// kernels.
pub fn adapt_first_layer<T: Scalar>(weight: &Tensor<T>, flow_frames: usize) -> Result<Tensor<T>> {
    let s = weight.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(MffError::Shape(format!(
            "first-layer adaptation needs a [out, 3, k, k] weight, got {s:?}"
        )));
    }
    let (out_c, kh, kw) = (s[0], s[2], s[3]);
    let in_c = 3 + 2 * flow_frames;
    let kk = kh * kw;
    let three = T::of(3.0);
    let mut data = Vec::with_capacity(out_c * in_c * kk);
    for o in 0..out_c {
        let src = &weight.data()[o * 3 * kk..(o + 1) * 3 * kk];
        data.extend_from_slice(src);
        let mean: Vec<T> = (0..kk).map(|j| (src[j] + src[kk + j] + src[2 * kk + j]) / three).collect();
        for _ in 0..2 * flow_frames {
            data.extend_from_slice(&mean);
        }
    }
    Tensor::from_vec(&[out_c, in_c, kh, kw], data)
}

/// Network input: `segments × channels × size × size`, values in `[-0.5, 0.5]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetInput<T> {
    pub segments: usize,
    pub channels: usize,
    pub size: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> NetInput<T> {
    pub fn zeros(segments: usize, channels: usize, size: usize) -> Self {
        NetInput {
            segments,
            channels,
            size,
            data: vec![T::zero(); segments * channels * size * size],
        }
    }

    pub fn segment(&self, s: usize) -> &[T] {
        let n = self.channels * self.size * self.size;
        &self.data[s * n..(s + 1) * n]
    }
}

/// Maps byte codes to `code/255 − 0.5`. The sample must be square.
pub fn normalize_input<T: Scalar>(sample: &MffSample) -> Result<NetInput<T>> {
    let first = sample
        .mffs
        .first()
        .ok_or_else(|| MffError::Shape("sample has no segments".into()))?;
    let (w, h) = (first.width(), first.height());
    if w != h {
        return Err(MffError::Shape(format!("network input must be square, got {w}x{h}")));
    }
    let channels = first.channel_count();
    let mut data = Vec::with_capacity(sample.mffs.len() * channels * w * h);
    let inv = T::of(1.0 / 255.0);
    let half = T::of(0.5);
    for mff in &sample.mffs {
        if mff.channel_count() != channels || mff.width() != w || mff.height() != h {
            return Err(MffError::Shape("segments differ in shape".into()));
        }
        for p in &mff.channels {
            data.extend(p.data().iter().map(|&c| T::of(c as f64) * inv - half));
        }
    }
    Ok(NetInput {
        segments: sample.mffs.len(),
        channels,
        size: w,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutRates {
    /// Drop rate on each segment's pooled features before concatenation.
    pub pool: f64,
    /// Drop rate after fc7.
    pub fc7: f64,
}

/// Inverted-dropout multipliers (`0` or `1/(1-p)`); empty means identity.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks<T> {
    pub pool: Vec<Vec<T>>,
    pub fc7: Vec<T>,
}

fn draw_mask<T: Scalar>(len: usize, p: f64, rng: &mut Rng) -> Vec<T> {
    if p <= 0.0 {
        return Vec::new();
    }
    let keep = T::of(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect()
}

pub fn draw_masks<T: Scalar>(arch: &ArchConfig, rates: DropoutRates, rng: &mut Rng) -> DropoutMasks<T> {
    let pool = (0..arch.segments)
        .map(|_| draw_mask(arch.feature_dim(), rates.pool, rng))
        .collect();
    let fc7 = draw_mask(arch.fc7_units, rates.fc7, rng);
    DropoutMasks { pool, fc7 }
}

fn apply_mask<T: Scalar>(x: &mut [T], mask: &[T]) {
    if mask.is_empty() {
        return;
    }
    for (v, &m) in x.iter_mut().zip(mask) {
        *v *= m;
    }
}

struct BlockCache<T> {
    input: Vec<T>,
    h: usize,
    w: usize,
    activated: Vec<T>,
    pool_idx: Option<Vec<u32>>,
}

struct SegmentCache<T> {
    blocks: Vec<BlockCache<T>>,
    final_hw: usize,
}

/// Activations retained for the backward pass of one item.
pub struct ItemCache<T> {
    segments: Vec<SegmentCache<T>>,
    masks: Option<DropoutMasks<T>>,
    concat: Vec<T>,
    /// fc6 output before its ReLU.
    pub fc6_pre: Vec<T>,
    fc6_act: Vec<T>,
    fc7_act: Vec<T>,
    fc7_out: Vec<T>,
    pub logits: Vec<T>,
}

impl<T: Scalar> ItemCache<T> {
    /// Which ReLUs are active and which element each max pool picked. Two
    /// forward passes with the same pattern lie on the same linear piece of
    /// the network, which finite-difference checks rely on.
    pub fn activation_pattern(&self) -> Vec<u32> {
        let on = |v: &T| u32::from(*v > T::zero());
        let mut out = Vec::new();
        for seg in &self.segments {
            for b in &seg.blocks {
                out.extend(b.activated.iter().map(on));
                if let Some(idx) = &b.pool_idx {
                    out.extend_from_slice(idx);
                }
            }
        }
        out.extend(self.fc6_pre.iter().map(on));
        out.extend(self.fc7_act.iter().map(on));
        out
    }
}

pub fn check_input<T: Scalar>(arch: &ArchConfig, input: &NetInput<T>) -> Result<()> {
    if input.channels != arch.in_channels {
        return Err(MffError::Shape(format!(
            "input has {} channels per segment but the network expects {} (3 + 2n with n = {})",
            input.channels,
            arch.in_channels,
            arch.flow_frames().unwrap_or(0)
        )));
    }
    if input.segments != arch.segments {
        return Err(MffError::Shape(format!(
            "input has {} segments but the network expects {}",
            input.segments, arch.segments
        )));
    }
    if input.size != arch.input_size {
        return Err(MffError::Shape(format!(
            "input is {0}x{0} but the network expects {1}x{1}",
            input.size, arch.input_size
        )));
    }
    if input.data.len() != input.segments * input.channels * input.size * input.size {
        return Err(MffError::Shape("input buffer length does not match its shape".into()));
    }
    Ok(())
}

fn segment_forward<T: Scalar>(params: &NetworkParams<T>, x: &[T]) -> (SegmentCache<T>, Vec<T>) {
    let arch = &params.arch;
    let mut cur = x.to_vec();
    let (mut h, mut w) = (arch.input_size, arch.input_size);
    let mut blocks = Vec::with_capacity(arch.conv_blocks.len());
    for (i, b) in arch.conv_blocks.iter().enumerate() {
        let c_in = arch.layer_in_channels(i);
        let layer = &params.conv[i];
        let mut act = vec![T::zero(); b.out_channels * h * w];
        conv2d_forward(&cur, c_in, h, w, layer.weight.data(), layer.bias.data(), b.out_channels, b.kernel, &mut act);
        relu_in_place(&mut act);
        let (next, pool_idx, nh, nw) = if b.pool {
            let (p, idx) = maxpool2_forward(&act, b.out_channels, h, w);
            (p, Some(idx), h / 2, w / 2)
        } else {
            (act.clone(), None, h, w)
        };
        blocks.push(BlockCache {
            input: std::mem::replace(&mut cur, next),
            h,
            w,
            activated: act,
            pool_idx,
        });
        h = nh;
        w = nw;
    }
    let hw = h * w;
    let inv = T::one() / T::of(hw as f64);
    let gap: Vec<T> = cur.chunks(hw).map(|c| c.iter().copied().sum::<T>() * inv).collect();
    (SegmentCache { blocks, final_hw: hw }, gap)
}

/// Runs one item forward, caching activations. `masks = None` is eval mode.
pub fn item_forward<T: Scalar>(params: &NetworkParams<T>, input: &NetInput<T>, masks: Option<DropoutMasks<T>>) -> ItemCache<T> {
    let arch = &params.arch;
    let mut segments = Vec::with_capacity(arch.segments);
    let mut concat = Vec::with_capacity(arch.segments * arch.feature_dim());
    for s in 0..arch.segments {
        let (cache, mut gap) = segment_forward(params, input.segment(s));
        if let Some(m) = &masks {
            apply_mask(&mut gap, &m.pool[s]);
        }
        concat.extend_from_slice(&gap);
        segments.push(cache);
    }
    let fc6_pre = linear_forward(&concat, params.fc6.weight.data(), params.fc6.bias.data(), params.fc6.out_dim());
    let mut fc6_act = fc6_pre.clone();
    relu_in_place(&mut fc6_act);
    let mut fc7_act = linear_forward(&fc6_act, params.fc7.weight.data(), params.fc7.bias.data(), params.fc7.out_dim());
    relu_in_place(&mut fc7_act);
    let mut fc7_out = fc7_act.clone();
    if let Some(m) = &masks {
        apply_mask(&mut fc7_out, &m.fc7);
    }
    let logits = linear_forward(&fc7_out, params.fc8.weight.data(), params.fc8.bias.data(), params.fc8.out_dim());
    ItemCache {
        segments,
        masks,
        concat,
        fc6_pre,
        fc6_act,
        fc7_act,
        fc7_out,
        logits,
    }
}

/// Accumulates parameter gradients of one item into `grads`. With
/// `only_segment = Some(s)` the CNN gradient is restricted to segment `s`
/// (the head still receives its full gradient).
pub fn item_backward<T: Scalar>(
    params: &NetworkParams<T>,
    cache: &ItemCache<T>,
    dlogits: &[T],
    grads: &mut NetworkParams<T>,
    only_segment: Option<usize>,
) {
    let arch = &params.arch;
    let mut d = linear_backward(&cache.fc7_out, params.fc8.weight.data(), dlogits, grads.fc8.weight.data_mut(), grads.fc8.bias.data_mut());
    if let Some(m) = &cache.masks {
        apply_mask(&mut d, &m.fc7);
    }
    relu_backward_in_place(&cache.fc7_act, &mut d);
    let mut d = linear_backward(&cache.fc6_act, params.fc7.weight.data(), &d, grads.fc7.weight.data_mut(), grads.fc7.bias.data_mut());
    relu_backward_in_place(&cache.fc6_act, &mut d);
    let dconcat = linear_backward(&cache.concat, params.fc6.weight.data(), &d, grads.fc6.weight.data_mut(), grads.fc6.bias.data_mut());

    let fdim = arch.feature_dim();
    for (s, seg) in cache.segments.iter().enumerate() {
        if only_segment.is_some_and(|o| o != s) {
            continue;
        }
        let mut dgap = dconcat[s * fdim..(s + 1) * fdim].to_vec();
        if let Some(m) = &cache.masks {
            apply_mask(&mut dgap, &m.pool[s]);
        }
        let inv = T::one() / T::of(seg.final_hw as f64);
        let mut dx: Vec<T> = dgap.iter().flat_map(|&g| std::iter::repeat_n(g * inv, seg.final_hw)).collect();
        for (i, b) in arch.conv_blocks.iter().enumerate().rev() {
            let bc = &seg.blocks[i];
            let mut dact = match &bc.pool_idx {
                Some(idx) => maxpool2_backward(&dx, idx, b.out_channels, bc.h, bc.w),
                None => dx,
            };
            relu_backward_in_place(&bc.activated, &mut dact);
            let c_in = arch.layer_in_channels(i);
            let g = &mut grads.conv[i];
            let mut din = (i > 0).then(|| vec![T::zero(); c_in * bc.h * bc.w]);
            conv2d_backward(
                &bc.input,
                c_in,
                bc.h,
                bc.w,
                params.conv[i].weight.data(),
                b.out_channels,
                b.kernel,
                &dact,
                g.weight.data_mut(),
                g.bias.data_mut(),
                din.as_deref_mut(),
            );
            dx = din.unwrap_or_default();
        }
    }
}

pub struct LossOutput<T> {
    /// Mean cross-entropy over the batch.
    pub loss: T,
    /// Gradient of `loss`.
    pub grads: NetworkParams<T>,
    pub logits: Vec<Vec<T>>,
}

/// Items per gradient-accumulation chunk. Chunks are reduced in index order,
/// so the result does not depend on the rayon pool size.
const CHUNK: usize = 4;

/// Mean cross-entropy and its gradient. With `rates = Some(..)` dropout
/// masks are drawn from per-item streams derived from one value of `rng`.
pub fn loss_and_grad<T: Scalar>(
    params: &NetworkParams<T>,
    inputs: &[NetInput<T>],
    labels: &[usize],
    rates: Option<DropoutRates>,
    rng: &mut Rng,
) -> Result<LossOutput<T>> {
    if inputs.is_empty() || inputs.len() != labels.len() {
        return Err(MffError::Shape(format!(
            "batch has {} inputs and {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    for (x, &y) in inputs.iter().zip(labels) {
        check_input(&params.arch, x)?;
        if y >= params.arch.num_classes {
            return Err(MffError::Shape(format!(
                "label {y} out of range for {} classes",
                params.arch.num_classes
            )));
        }
    }
    let base = rng.random::<u64>();
    let inv_b = T::one() / T::of(inputs.len() as f64);
    let chunks: Vec<(T, NetworkParams<T>, Vec<Vec<T>>)> = (0..inputs.len())
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|idx| {
            let mut grads = NetworkParams::zeros(&params.arch);
            let mut loss = T::zero();
            let mut logits = Vec::with_capacity(idx.len());
            for &i in idx {
                let masks = rates.map(|r| {
                    let mut item_rng = rng_from_seed(derive_seed_indexed(base, "dropout", &[i as u64]));
                    draw_masks(&params.arch, r, &mut item_rng)
                });
                let cache = item_forward(params, &inputs[i], masks);
                let logp = log_softmax(&cache.logits);
                loss -= logp[labels[i]];
                let mut d: Vec<T> = logp.iter().map(|&lp| lp.exp() * inv_b).collect();
                d[labels[i]] -= inv_b;
                item_backward(params, &cache, &d, &mut grads, None);
                logits.push(cache.logits);
            }
            (loss, grads, logits)
        })
        .collect();
    let mut iter = chunks.into_iter();
    let (mut loss, mut grads, mut logits) = iter.next().expect("non-empty batch");
    for (l, g, lg) in iter {
        loss += l;
        grads.add_assign(&g);
        logits.extend(lg);
    }
    let loss = loss * inv_b;
    if !loss.is_finite() || !grads.is_finite() {
        return Err(MffError::NonFinite(format!("loss became {loss}")));
    }
    Ok(LossOutput { loss, grads, logits })
}

/// Eval-mode logits.
pub fn forward_logits<T: Scalar>(params: &NetworkParams<T>, input: &NetInput<T>) -> Result<Vec<T>> {
    check_input(&params.arch, input)?;
    Ok(item_forward(params, input, None).logits)
}

/// Eval-mode class probabilities.
pub fn predict<T: Scalar>(params: &NetworkParams<T>, input: &NetInput<T>) -> Result<Vec<T>> {
    Ok(softmax(&forward_logits(params, input)?))
}

pub fn predict_batch<T: Scalar>(params: &NetworkParams<T>, inputs: &[NetInput<T>]) -> Result<Vec<Vec<T>>> {
    inputs.par_iter().map(|x| predict(params, x)).collect()
}
