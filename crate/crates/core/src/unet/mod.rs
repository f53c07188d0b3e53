//! A small, fully explicit 3D U-Net with optional residual encoder blocks.
//!
//! Encoder block l: conv3 (stride 2 for l > 0) -> instance norm -> [+ skip]
//! -> leaky ReLU, where the residual skip is the block input, projected by a
//! 1x1x1 conv when channel counts or stride differ. The decoder upsamples
//! with kernel-2 stride-2 transposed convolutions, concatenates the encoder
//! skip, and applies a plain conv block. A 1x1x1 head produces class logits;
//! probabilities are channel softmax.

pub mod ops;

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::scalar::Real;
use crate::tensor::Tensor;
use ops::*;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub out_classes: usize,
    /// Encoder levels; spatial extents must divide 2^(depth-1).
    pub depth: usize,
    /// Channels at level 0; level l has base_width << l.
    pub base_width: usize,
    pub residual_encoder: bool,
}

impl NetworkConfig {
    pub fn new(in_channels: usize, out_classes: usize, residual_encoder: bool) -> Self {
        NetworkConfig { in_channels, out_classes, depth: 3, base_width: 8, residual_encoder }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("network depth {} < 2", self.depth)));
        }
        if self.base_width < 2 {
            return Err(Error::Config(format!("base width {} < 2", self.base_width)));
        }
        if self.out_classes < 2 {
            return Err(Error::Config(format!("out classes {} < 2", self.out_classes)));
        }
        if self.in_channels < 1 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Spatial divisibility required of inputs.
    pub fn stride_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub conv: ConvParams<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    /// 1x1x1 residual projection; present only on encoder blocks of
    /// residual networks where input/output shapes differ.
    pub proj: Option<ConvParams<T>>,
}

/// The network: configuration plus named parameter tensors. The same
/// structure doubles as the gradient and optimizer-velocity container.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub config: NetworkConfig,
    pub enc: Vec<BlockParams<T>>,
    pub up: Vec<ConvParams<T>>,
    pub dec: Vec<BlockParams<T>>,
    pub head: ConvParams<T>,
}

/// One optimization batch: inputs (n, c, d0, d1, d2) and per-voxel class
/// codes (n * d0 * d1 * d2, values < out_classes).
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub inputs: Tensor<T>,
    pub targets: Vec<u8>,
}

impl<T: Real> Batch<T> {
    pub fn validate(&self, config: &NetworkConfig) -> Result<()> {
        if self.inputs.shape.len() != 5 || self.inputs.shape[1] != config.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "batch inputs {:?}, expected (n, {}, ...)",
                self.inputs.shape, config.in_channels
            )));
        }
        let m = self.inputs.shape[0] * self.inputs.spatial();
        if self.targets.len() != m {
            return Err(Error::ShapeMismatch(format!(
                "targets length {} != {} voxels",
                self.targets.len(),
                m
            )));
        }
        let s = config.stride_multiple();
        for d in &self.inputs.shape[2..] {
            if d % s != 0 {
                return Err(Error::ShapeMismatch(format!(
                    "spatial extent {d} not divisible by {s}"
                )));
            }
        }
        if let Some(&bad) = self.targets.iter().find(|&&t| (t as usize) >= config.out_classes) {
            return Err(Error::ShapeMismatch(format!(
                "target code {bad} >= {} classes",
                config.out_classes
            )));
        }
        Ok(())
    }
}

fn init_conv<T: Real>(
    rng: &mut impl Rng,
    co: usize,
    ci: usize,
    k: usize,
) -> ConvParams<T> {
    // fan-in-scaled uniform draws; draws happen in f64 so f32 and f64
    // networks built from the same seed hold identical values
    let fan_in = (ci * k * k * k) as f64;
    let bound = (1.0 / fan_in).sqrt();
    let w = Tensor::from_vec(
        &[co, ci, k, k, k],
        (0..co * ci * k * k * k)
            .map(|_| T::of(rng.random_range(-bound..bound)))
            .collect(),
    );
    ConvParams { w, b: Tensor::zeros(&[co]) }
}

fn init_block<T: Real>(
    rng: &mut impl Rng,
    ci: usize,
    co: usize,
    with_proj: bool,
) -> BlockParams<T> {
    let conv = init_conv(rng, co, ci, 3);
    let proj = with_proj.then(|| init_conv(rng, co, ci, 1));
    BlockParams {
        conv,
        gamma: Tensor::from_vec(&[co], vec![T::one(); co]),
        beta: Tensor::zeros(&[co]),
        proj,
    }
}

/// Build a network with seeded, fan-in-scaled uniform initialization.
/// Identical (config, seed) pairs produce bit-identical parameters.
pub fn build_network<T: Real>(config: &NetworkConfig, seed: u64) -> Result<Network<T>> {
    config.validate()?;
    let mut rng = rng_for(seed, stream::INIT);
    let d = config.depth;

    let mut enc = Vec::with_capacity(d);
    for l in 0..d {
        let ci = if l == 0 { config.in_channels } else { config.width(l - 1) };
        let co = config.width(l);
        // the projection exists whenever the skip cannot be an identity:
        // channel change at any level, stride 2 at levels > 0
        let needs_proj = config.residual_encoder && (ci != co || l > 0);
        enc.push(init_block(&mut rng, ci, co, needs_proj));
    }
    let mut up = Vec::with_capacity(d - 1);
    let mut dec = Vec::with_capacity(d - 1);
    for l in 0..d - 1 {
        // tconv level l: width(l+1) -> width(l)
        let ci = config.width(l + 1);
        let co = config.width(l);
        let fan_in = (ci * 8) as f64;
        let bound = (1.0 / fan_in).sqrt();
        let w = Tensor::from_vec(
            &[ci, co, 2, 2, 2],
            (0..ci * co * 8).map(|_| T::of(rng.random_range(-bound..bound))).collect(),
        );
        up.push(ConvParams { w, b: Tensor::zeros(&[co]) });
        dec.push(init_block(&mut rng, 2 * co, co, false));
    }
    let head = init_conv(&mut rng, config.out_classes, config.width(0), 1);
    Ok(Network { config: config.clone(), enc, up, dec, head })
}

impl<T: Real> Network<T> {
    /// Same-shaped network with all parameters zero (gradient/velocity
    /// container).
    pub fn zeros_like(&self) -> Network<T> {
        let zc = |c: &ConvParams<T>| ConvParams {
            w: Tensor::zeros(&c.w.shape),
            b: Tensor::zeros(&c.b.shape),
        };
        let zb = |b: &BlockParams<T>| BlockParams {
            conv: zc(&b.conv),
            gamma: Tensor::zeros(&b.gamma.shape),
            beta: Tensor::zeros(&b.beta.shape),
            proj: b.proj.as_ref().map(zc),
        };
        Network {
            config: self.config.clone(),
            enc: self.enc.iter().map(zb).collect(),
            up: self.up.iter().map(zc).collect(),
            dec: self.dec.iter().map(zb).collect(),
            head: zc(&self.head),
        }
    }

    /// Named views of every parameter tensor, in a stable order.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        fn block<'a, T>(
            out: &mut Vec<(String, &'a Tensor<T>)>,
            prefix: String,
            b: &'a BlockParams<T>,
        ) {
            out.push((format!("{prefix}.conv.w"), &b.conv.w));
            out.push((format!("{prefix}.conv.b"), &b.conv.b));
            out.push((format!("{prefix}.norm.gamma"), &b.gamma));
            out.push((format!("{prefix}.norm.beta"), &b.beta));
            if let Some(p) = &b.proj {
                out.push((format!("{prefix}.proj.w"), &p.w));
                out.push((format!("{prefix}.proj.b"), &p.b));
            }
        }
        for (l, b) in self.enc.iter().enumerate() {
            block(&mut out, format!("enc{l}"), b);
        }
        for (l, u) in self.up.iter().enumerate() {
            out.push((format!("up{l}.w"), &u.w));
            out.push((format!("up{l}.b"), &u.b));
        }
        for (l, b) in self.dec.iter().enumerate() {
            block(&mut out, format!("dec{l}"), b);
        }
        out.push(("head.w".into(), &self.head.w));
        out.push(("head.b".into(), &self.head.b));
        out
    }

    pub fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        fn block<'a, T>(
            out: &mut Vec<(String, &'a mut Tensor<T>)>,
            prefix: String,
            b: &'a mut BlockParams<T>,
        ) {
            out.push((format!("{prefix}.conv.w"), &mut b.conv.w));
            out.push((format!("{prefix}.conv.b"), &mut b.conv.b));
            out.push((format!("{prefix}.norm.gamma"), &mut b.gamma));
            out.push((format!("{prefix}.norm.beta"), &mut b.beta));
            if let Some(p) = &mut b.proj {
                out.push((format!("{prefix}.proj.w"), &mut p.w));
                out.push((format!("{prefix}.proj.b"), &mut p.b));
            }
        }
        for (l, b) in self.enc.iter_mut().enumerate() {
            block(&mut out, format!("enc{l}"), b);
        }
        for (l, u) in self.up.iter_mut().enumerate() {
            out.push((format!("up{l}.w"), &mut u.w));
            out.push((format!("up{l}.b"), &mut u.b));
        }
        for (l, b) in self.dec.iter_mut().enumerate() {
            block(&mut out, format!("dec{l}"), b);
        }
        out.push(("head.w".into(), &mut self.head.w));
        out.push(("head.b".into(), &mut self.head.b));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_parameters().iter().all(|(_, t)| t.is_finite())
    }

    /// Cast every parameter to another precision.
    pub fn cast<U: Real>(&self) -> Network<U> {
        let cc = |c: &ConvParams<T>| ConvParams { w: c.w.cast(), b: c.b.cast() };
        let cb = |b: &BlockParams<T>| BlockParams {
            conv: cc(&b.conv),
            gamma: b.gamma.cast(),
            beta: b.beta.cast(),
            proj: b.proj.as_ref().map(cc),
        };
        Network {
            config: self.config.clone(),
            enc: self.enc.iter().map(cb).collect(),
            up: self.up.iter().map(cc).collect(),
            dec: self.dec.iter().map(cb).collect(),
            head: cc(&self.head),
        }
    }
}

struct BlockCache<T> {
    input: Tensor<T>,
    conv_out: Tensor<T>,
    norm: NormCache<T>,
    /// Pre-activation (after norm, after any residual add).
    pre_act: Tensor<T>,
    out: Tensor<T>,
}

fn block_forward<T: Real>(
    b: &BlockParams<T>,
    input: &Tensor<T>,
    stride: usize,
    residual: bool,
) -> BlockCache<T> {
    let conv_out = conv3d(input, &b.conv.w, &b.conv.b, stride);
    let (normed, norm) = instance_norm(&conv_out, &b.gamma, &b.beta);
    let pre_act = if residual {
        let mut sum = normed;
        match &b.proj {
            Some(p) => sum.add_assign(&conv3d(input, &p.w, &p.b, stride)),
            None => sum.add_assign(input),
        }
        sum
    } else {
        normed
    };
    let out = leaky_relu(&pre_act);
    BlockCache { input: input.clone(), conv_out, norm, pre_act, out }
}

/// Returns grads w.r.t. block input; parameter grads accumulate into `g`.
fn block_backward<T: Real>(
    b: &BlockParams<T>,
    g: &mut BlockParams<T>,
    cache: &BlockCache<T>,
    stride: usize,
    residual: bool,
    g_out: &Tensor<T>,
    need_input: bool,
) -> Tensor<T> {
    let g_pre = leaky_relu_backward(&cache.pre_act, g_out);
    let (g_conv_out, g_gamma, g_beta) =
        instance_norm_backward(&cache.conv_out, &b.gamma, &cache.norm, &g_pre);
    g.gamma.add_assign(&g_gamma);
    g.beta.add_assign(&g_beta);
    let (mut g_in, g_w, g_b) =
        conv3d_backward_ext(&cache.input, &b.conv.w, stride, &g_conv_out, need_input);
    g.conv.w.add_assign(&g_w);
    g.conv.b.add_assign(&g_b);
    if residual {
        match (&b.proj, &mut g.proj) {
            (Some(p), Some(gp)) => {
                let (g_skip_in, g_pw, g_pb) =
                    conv3d_backward_ext(&cache.input, &p.w, stride, &g_pre, need_input);
                gp.w.add_assign(&g_pw);
                gp.b.add_assign(&g_pb);
                if need_input {
                    g_in.add_assign(&g_skip_in);
                }
            }
            _ => {
                if need_input {
                    g_in.add_assign(&g_pre);
                }
            }
        }
    }
    g_in
}

struct ForwardCache<T> {
    enc: Vec<BlockCache<T>>,
    dec: Vec<BlockCache<T>>,
    probs: Tensor<T>,
}

fn forward_cached<T: Real>(net: &Network<T>, inputs: &Tensor<T>) -> Result<ForwardCache<T>> {
    if inputs.shape.len() != 5 || inputs.shape[1] != net.config.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "inputs {:?}, expected (n, {}, d0, d1, d2)",
            inputs.shape, net.config.in_channels
        )));
    }
    let s = net.config.stride_multiple();
    for d in &inputs.shape[2..] {
        if d % s != 0 || *d == 0 {
            return Err(Error::ShapeMismatch(format!("spatial extent {d} not divisible by {s}")));
        }
    }
    let depth = net.config.depth;
    let residual = net.config.residual_encoder;

    let mut enc: Vec<BlockCache<T>> = Vec::with_capacity(depth);
    for l in 0..depth {
        let stride = if l == 0 { 1 } else { 2 };
        let x = if l == 0 { inputs } else { &enc[l - 1].out };
        // the level-0 identity skip needs matching channels
        let res_here = residual && (net.enc[l].proj.is_some() || x.shape[1] == net.config.width(l));
        enc.push(block_forward(&net.enc[l], x, stride, res_here));
    }

    let mut dec: Vec<Option<BlockCache<T>>> = (0..depth - 1).map(|_| None).collect();
    let mut carry = enc[depth - 1].out.clone();
    for l in (0..depth - 1).rev() {
        let upsampled = tconv3d(&carry, &net.up[l].w, &net.up[l].b);
        let cat = concat_channels(&enc[l].out, &upsampled);
        let cache = block_forward(&net.dec[l], &cat, 1, false);
        carry = cache.out.clone();
        dec[l] = Some(cache);
    }
    let dec: Vec<BlockCache<T>> = dec.into_iter().map(|c| c.expect("decoder level")).collect();

    let logits = conv3d(&dec[0].out, &net.head.w, &net.head.b, 1);
    let probs = softmax_channels(&logits);
    Ok(ForwardCache { enc, dec, probs })
}

/// Per-voxel class probabilities, shape (n, out_classes, d0, d1, d2).
pub fn forward<T: Real>(net: &Network<T>, inputs: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(forward_cached(net, inputs)?.probs)
}

/// Signs of every leaky-ReLU pre-activation, in forward order. Two nearby
/// parameter points with identical signatures share a smooth branch of the
/// loss, which is the domain where a finite-difference probe is valid.
pub fn preactivation_signs<T: Real>(net: &Network<T>, inputs: &Tensor<T>) -> Result<Vec<bool>> {
    let cache = forward_cached(net, inputs)?;
    let mut signs = Vec::new();
    for b in cache.enc.iter().chain(cache.dec.iter()) {
        signs.extend(b.pre_act.data.iter().map(|v| *v > T::zero()));
    }
    Ok(signs)
}

/// Smoothing for the soft-Dice term.
pub const DICE_EPS: f64 = 1e-5;

/// Compound loss: w_ce * mean voxel cross-entropy + w_dice * (1 - mean
/// foreground-class soft Dice), Dice pooled over the whole batch.
pub fn loss<T: Real>(probs: &Tensor<T>, targets: &[u8], weights: (T, T)) -> T {
    let (w_dice, w_ce) = weights;
    let (n, c) = (probs.shape[0], probs.shape[1]);
    let m = probs.spatial();
    debug_assert_eq!(targets.len(), n * m);
    let eps = T::of(DICE_EPS);

    let mut ce = T::zero();
    for ni in 0..n {
        for v in 0..m {
            let t = targets[ni * m + v] as usize;
            ce -= probs.data[(ni * c + t) * m + v].max(T::min_positive_value()).ln();
        }
    }
    ce /= T::of((n * m) as f64);

    let mut dice_sum = T::zero();
    for cc in 1..c {
        let mut inter = T::zero();
        let mut psum = T::zero();
        let mut tsum = T::zero();
        for ni in 0..n {
            for v in 0..m {
                let p = probs.data[(ni * c + cc) * m + v];
                psum += p;
                if targets[ni * m + v] as usize == cc {
                    inter += p;
                    tsum += T::one();
                }
            }
        }
        dice_sum += (T::of(2.0) * inter + eps) / (psum + tsum + eps);
    }
    let dice_term = T::one() - dice_sum / T::of((c - 1) as f64);

    w_ce * ce + w_dice * dice_term
}

/// Per-sample sums feeding the batch-pooled loss: cross-entropy total plus
/// per-foreground-class (intersection, prob sum, target sum).
struct LossPartials<T> {
    ce_sum: T,
    per_class: Vec<[T; 3]>,
}

fn loss_partials<T: Real>(probs: &Tensor<T>, targets: &[u8]) -> LossPartials<T> {
    let (n, c) = (probs.shape[0], probs.shape[1]);
    let m = probs.spatial();
    let mut ce_sum = T::zero();
    for ni in 0..n {
        for v in 0..m {
            let t = targets[ni * m + v] as usize;
            ce_sum -= probs.data[(ni * c + t) * m + v].max(T::min_positive_value()).ln();
        }
    }
    let mut per_class = vec![[T::zero(); 3]; c - 1];
    for (cc, acc) in per_class.iter_mut().enumerate() {
        let cc = cc + 1;
        for ni in 0..n {
            for v in 0..m {
                let p = probs.data[(ni * c + cc) * m + v];
                acc[1] += p;
                if targets[ni * m + v] as usize == cc {
                    acc[0] += p;
                    acc[2] += T::one();
                }
            }
        }
    }
    LossPartials { ce_sum, per_class }
}

/// dL/dprobs of one sample, given the pooled (numerator, denominator) of
/// every foreground class and the batch-wide voxel count.
fn loss_backward_sample<T: Real>(
    probs: &Tensor<T>,
    targets: &[u8],
    weights: (T, T),
    class_nd: &[(T, T)],
    total_voxels: usize,
) -> Tensor<T> {
    let (w_dice, w_ce) = weights;
    let (n, c) = (probs.shape[0], probs.shape[1]);
    let m = probs.spatial();
    let mut g = Tensor::zeros(&probs.shape);

    // cross-entropy part: -w_ce / (M * p_t) on the target channel
    let scale = w_ce / T::of(total_voxels as f64);
    for ni in 0..n {
        for v in 0..m {
            let t = targets[ni * m + v] as usize;
            let idx = (ni * c + t) * m + v;
            g.data[idx] -= scale / probs.data[idx].max(T::min_positive_value());
        }
    }

    // dice part: d(1 - mean_c dice_c)/dp = -(2 t D - N) / ((C-1) D^2)
    let class_scale = w_dice / T::of((c - 1) as f64);
    for cc in 1..c {
        let (num, den) = class_nd[cc - 1];
        let den2 = den * den;
        for ni in 0..n {
            for v in 0..m {
                let idx = (ni * c + cc) * m + v;
                let t_here = if targets[ni * m + v] as usize == cc { T::of(2.0) } else { T::zero() };
                let ddice = (t_here * den - num) / den2;
                g.data[idx] -= class_scale * ddice;
            }
        }
    }
    g
}

/// Backward through one sample's cached forward pass; parameter gradients
/// accumulate into `g`.
fn backward_sample<T: Real>(
    net: &Network<T>,
    g: &mut Network<T>,
    cache: &ForwardCache<T>,
    g_logits: &Tensor<T>,
) {
    let (mut g_d0, g_hw, g_hb) = conv3d_backward(&cache.dec[0].out, &net.head.w, 1, g_logits);
    g.head.w.add_assign(&g_hw);
    g.head.b.add_assign(&g_hb);

    let depth = net.config.depth;
    let residual = net.config.residual_encoder;
    let mut g_enc_skip: Vec<Option<Tensor<T>>> = (0..depth - 1).map(|_| None).collect();

    // decoder backward, shallowest level first (reverse of the forward
    // loop); after the loop g_d0 holds the gradient w.r.t. the deepest
    // encoder output
    for l in 0..depth - 1 {
        let g_cat =
            block_backward(&net.dec[l], &mut g.dec[l], &cache.dec[l], 1, false, &g_d0, true);
        let skip_channels = cache.enc[l].out.shape[1];
        let (g_skip, g_up) = split_channels(&g_cat, skip_channels);
        g_enc_skip[l] = Some(g_skip);
        let carry_src =
            if l == depth - 2 { &cache.enc[depth - 1].out } else { &cache.dec[l + 1].out };
        let (g_below, g_uw, g_ub) = tconv3d_backward(carry_src, &net.up[l].w, &g_up);
        g.up[l].w.add_assign(&g_uw);
        g.up[l].b.add_assign(&g_ub);
        g_d0 = g_below;
    }

    // encoder backward, deepest level first
    let mut g_e = g_d0;
    for l in (0..depth).rev() {
        let stride = if l == 0 { 1 } else { 2 };
        let x_ch = cache.enc[l].input.shape[1];
        let res_here =
            residual && (net.enc[l].proj.is_some() || x_ch == net.config.width(l));
        let mut g_in =
            block_backward(&net.enc[l], &mut g.enc[l], &cache.enc[l], stride, res_here, &g_e, l > 0);
        if l == 0 {
            break;
        }
        if let Some(gs) = g_enc_skip[l - 1].take() {
            g_in.add_assign(&gs);
        }
        g_e = g_in;
    }
}

/// Exact reverse-mode gradients of `loss(forward(net, batch))` w.r.t. every
/// parameter. Returns the loss value alongside a same-shaped gradient
/// network.
///
/// Samples run in parallel; per-sample results are combined in sample order,
/// so the output is bit-deterministic for a fixed input regardless of
/// scheduling.
pub fn gradients<T: Real>(
    net: &Network<T>,
    batch: &Batch<T>,
    weights: (T, T),
) -> Result<(T, Network<T>)> {
    use rayon::prelude::*;
    batch.validate(&net.config)?;
    let (w_dice, w_ce) = weights;
    let n = batch.inputs.shape[0];
    let c = net.config.out_classes;
    let chans = batch.inputs.shape[1];
    let spatial: Vec<usize> = batch.inputs.shape[2..].to_vec();
    let m: usize = spatial.iter().product();

    // split into per-sample batches
    let samples: Vec<(Tensor<T>, &[u8])> = (0..n)
        .map(|ni| {
            let mut shape = vec![1usize, chans];
            shape.extend_from_slice(&spatial);
            let src = &batch.inputs.data[ni * chans * m..(ni + 1) * chans * m];
            (Tensor::from_vec(&shape, src.to_vec()), &batch.targets[ni * m..(ni + 1) * m])
        })
        .collect();

    let forwards: Vec<Result<(ForwardCache<T>, LossPartials<T>)>> = samples
        .par_iter()
        .map(|(inputs, targets)| {
            let cache = forward_cached(net, inputs)?;
            let partials = loss_partials(&cache.probs, targets);
            Ok((cache, partials))
        })
        .collect();
    let mut caches = Vec::with_capacity(n);
    let mut partials = Vec::with_capacity(n);
    for f in forwards {
        let (cache, p) = f?;
        caches.push(cache);
        partials.push(p);
    }

    // pool the partials in sample order
    let eps = T::of(DICE_EPS);
    let mut ce = T::zero();
    let mut class_nd = vec![(T::zero(), T::zero()); c - 1];
    let mut class_sums = vec![[T::zero(); 3]; c - 1];
    for p in &partials {
        ce += p.ce_sum;
        for (acc, s) in class_sums.iter_mut().zip(p.per_class.iter()) {
            acc[0] += s[0];
            acc[1] += s[1];
            acc[2] += s[2];
        }
    }
    ce /= T::of((n * m) as f64);
    let mut dice_sum = T::zero();
    for (nd, s) in class_nd.iter_mut().zip(class_sums.iter()) {
        let num = T::of(2.0) * s[0] + eps;
        let den = s[1] + s[2] + eps;
        *nd = (num, den);
        dice_sum += num / den;
    }
    let dice_term = T::one() - dice_sum / T::of((c - 1) as f64);
    let loss_value = w_ce * ce + w_dice * dice_term;
    if !loss_value.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0 });
    }

    let grads: Vec<Network<T>> = caches
        .par_iter()
        .zip(samples.par_iter())
        .map(|(cache, (_, targets))| {
            let g_probs =
                loss_backward_sample(&cache.probs, targets, weights, &class_nd, n * m);
            let g_logits = softmax_backward(&cache.probs, &g_probs);
            let mut g = net.zeros_like();
            backward_sample(net, &mut g, cache, &g_logits);
            g
        })
        .collect();

    let mut total = net.zeros_like();
    for g in &grads {
        for ((_, t), (_, s)) in
            total.named_parameters_mut().into_iter().zip(g.named_parameters())
        {
            t.add_assign(s);
        }
    }
    Ok((loss_value, total))
}


/// Finite-difference verification harness, shared by unit and acceptance
/// tests.
pub mod check {
    use super::*;

    /// Central finite differences on sampled parameters, double precision.
    /// Probes whose +-h interval crosses a leaky-ReLU kink are redrawn: the
    /// difference quotient only estimates the derivative on a smooth branch,
    /// and instance-normalized activations always have mass near zero.
    pub fn run_gradient_check(
        residual: bool,
        step: f64,
        tol: f64,
        denom_floor: f64,
        min_checked: usize,
    ) {
        use rand::Rng;
        let cfg = NetworkConfig {
            in_channels: 2,
            out_classes: 3,
            depth: 2,
            base_width: 4,
            residual_encoder: residual,
        };
        let net: Network<f64> = build_network(&cfg, 13).unwrap();
        let mut rng = crate::rng::rng_for(99, 0x6AD);
        let batch = Batch {
            inputs: Tensor::from_vec(
                &[1, 2, 8, 8, 8],
                (0..1024).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ),
            targets: (0..512).map(|_| rng.random_range(0..3u8)).collect(),
        };
        let weights = (1.0f64, 1.0f64);
        let (_, g) = gradients(&net, &batch, weights).unwrap();

        let flat: Vec<(String, usize)> = net
            .named_parameters()
            .iter()
            .map(|(n, t)| (n.clone(), t.numel()))
            .collect();
        let total: usize = flat.iter().map(|(_, n)| n).sum();
        let coord = |k: usize| -> (String, usize) {
            let mut k = k % total;
            for (name, n) in &flat {
                if k < *n {
                    return (name.clone(), k);
                }
                k -= n;
            }
            unreachable!()
        };

        let mut checked = 0;
        let mut draws = 0;
        let mut probe_rng = crate::rng::rng_for(101, 0x6AE);
        while checked < min_checked {
            draws += 1;
            assert!(draws < 40 * min_checked, "too many kink redraws");
            let (name, idx) = coord(probe_rng.random_range(0..total));
            let analytic = {
                let t = g
                    .named_parameters()
                    .into_iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, t)| t)
                    .unwrap();
                t.data[idx]
            };
            let mut pert = net.clone();
            let eval = |pert: &mut Network<f64>, delta: f64| -> (f64, Vec<bool>) {
                {
                    let mut ps = pert.named_parameters_mut();
                    let t = ps.iter_mut().find(|(n, _)| *n == name).map(|(_, t)| t).unwrap();
                    t.data[idx] += delta;
                }
                let probs = forward(pert, &batch.inputs).unwrap();
                let l = loss(&probs, &batch.targets, weights);
                let signs = preactivation_signs(pert, &batch.inputs).unwrap();
                (l, signs)
            };
            let (up, s_up) = eval(&mut pert, step);
            let (dn, s_dn) = eval(&mut pert, -2.0 * step);
            if s_up != s_dn {
                continue; // kink inside the probe interval
            }
            let fd = (up - dn) / (2.0 * step);
            // the floor absorbs f64 roundoff in the difference quotient
            // (~eps * |loss| / step) on parameters whose true gradient is 0,
            // e.g. conv biases that instance norm cancels exactly
            let denom = analytic.abs().max(fd.abs()).max(denom_floor);
            let rel = (fd - analytic).abs() / denom;
            assert!(
                rel < tol,
                "residual={residual} {name}[{idx}]: analytic {analytic}, fd {fd}, rel {rel}"
            );
            checked += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> NetworkConfig {
        NetworkConfig { in_channels: 2, out_classes: 3, depth: 2, base_width: 4, residual_encoder: true }
    }

    fn param_checksum(net: &Network<f32>) -> f64 {
        net.named_parameters()
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .map(|&v| v as f64)
            .sum()
    }

    #[test]
    fn test_build_is_deterministic() {
        let cfg = NetworkConfig::new(4, 5, true);
        let a: Network<f32> = build_network(&cfg, 7).unwrap();
        let b: Network<f32> = build_network(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(param_checksum(&a), param_checksum(&b));
        let c: Network<f32> = build_network(&cfg, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn test_residual_adds_only_projection_parameters() {
        let plain: Network<f32> =
            build_network(&NetworkConfig::new(4, 5, false), 7).unwrap();
        let res: Network<f32> = build_network(&NetworkConfig::new(4, 5, true), 7).unwrap();
        // count projection parameters by shape arithmetic: level 0 projects
        // in_channels->w0, deeper levels w(l-1)->w(l), each 1x1x1 + bias
        let cfg = &res.config;
        let mut proj_params = cfg.in_channels * cfg.width(0) + cfg.width(0);
        for l in 1..cfg.depth {
            proj_params += cfg.width(l - 1) * cfg.width(l) + cfg.width(l);
        }
        assert_eq!(res.parameter_count(), plain.parameter_count() + proj_params);
    }

    #[test]
    fn test_depth_one_rejected() {
        let cfg = NetworkConfig { depth: 1, ..NetworkConfig::new(4, 5, true) };
        assert!(build_network::<f32>(&cfg, 1).is_err());
    }

    #[test]
    fn test_zero_parameters_give_uniform_probabilities() {
        let cfg = small_config();
        let net: Network<f64> = build_network(&cfg, 3).unwrap().zeros_like();
        let inputs = Tensor::from_vec(
            &[1, 2, 4, 4, 4],
            (0..128).map(|i| (i as f64).sin()).collect(),
        );
        let probs = forward(&net, &inputs).unwrap();
        for &p in &probs.data {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn test_probabilities_sum_to_one() {
        let cfg = NetworkConfig::new(4, 5, true);
        let net: Network<f32> = build_network(&cfg, 11).unwrap();
        let inputs = Tensor::from_vec(
            &[1, 4, 8, 8, 8],
            (0..4 * 512).map(|i| ((i * 31 + 7) % 13) as f32 * 0.1).collect(),
        );
        let probs = forward(&net, &inputs).unwrap();
        let m = 512;
        for v in 0..m {
            let s: f32 = (0..5).map(|c| probs.data[c * m + v]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn test_unet_symmetry_16_cubed() {
        let cfg = NetworkConfig::new(4, 5, true); // depth 3
        let net: Network<f32> = build_network(&cfg, 2).unwrap();
        let inputs = Tensor::zeros(&[1, 4, 16, 16, 16]);
        let probs = forward(&net, &inputs).unwrap();
        assert_eq!(probs.shape, vec![1, 5, 16, 16, 16]);
    }

    #[test]
    fn test_indivisible_extent_rejected() {
        let cfg = NetworkConfig::new(4, 5, true);
        let net: Network<f32> = build_network(&cfg, 2).unwrap();
        let inputs = Tensor::zeros(&[1, 4, 10, 16, 16]);
        assert!(matches!(forward(&net, &inputs), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn test_perfect_prediction_loss_is_tiny() {
        // one-hot probabilities equal to targets
        let (n, c, m) = (1usize, 3usize, 64usize);
        let targets: Vec<u8> = (0..m).map(|v| (v % 3) as u8).collect();
        let mut probs = Tensor::<f64>::zeros(&[n, c, 4, 4, 4]);
        for v in 0..m {
            probs.data[(targets[v] as usize) * m + v] = 1.0;
        }
        let l = loss(&probs, &targets, (1.0, 1.0));
        assert!(l < 1e-4, "loss {l}");
    }

    #[test]
    fn test_uniform_two_class_ce_is_ln2() {
        let (n, c, m) = (1usize, 2usize, 27usize);
        let probs = Tensor::<f64>::from_vec(&[n, c, 3, 3, 3], vec![0.5; n * c * m]);
        let targets = vec![0u8; m];
        let ce_only = loss(&probs, &targets, (0.0, 1.0));
        assert!((ce_only - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn test_all_background_dice_defined() {
        let (n, c, m) = (1usize, 3usize, 8usize);
        let mut probs = Tensor::<f64>::zeros(&[n, c, 2, 2, 2]);
        for v in 0..m {
            probs.data[v] = 1.0; // all mass on BG
        }
        let targets = vec![0u8; m];
        let l = loss(&probs, &targets, (1.0, 0.0));
        assert!(l.is_finite());
        assert!(l.abs() < 1e-9, "eps/eps dice should be 1, loss {l}");
    }

    #[test]
    fn test_loss_is_deterministic() {
        let cfg = small_config();
        let net: Network<f32> = build_network(&cfg, 5).unwrap();
        let batch = Batch {
            inputs: Tensor::from_vec(
                &[2, 2, 4, 4, 4],
                (0..256).map(|i| ((i * 17 + 3) % 23) as f32 * 0.04).collect(),
            ),
            targets: (0..128).map(|v| (v % 3) as u8).collect(),
        };
        let (l1, _) = gradients(&net, &batch, (1.0, 1.0)).unwrap();
        let (l2, _) = gradients(&net, &batch, (1.0, 1.0)).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
    }

    #[test]
    fn test_ce_weight_linearity() {
        let cfg = small_config();
        let net: Network<f64> = build_network(&cfg, 6).unwrap();
        let batch = Batch {
            inputs: Tensor::from_vec(
                &[1, 2, 4, 4, 4],
                (0..128).map(|i| ((i * 29 + 1) % 31) as f64 * 0.03).collect(),
            ),
            targets: (0..64).map(|v| ((v * 7) % 3) as u8).collect(),
        };
        let (_, g1) = gradients(&net, &batch, (0.0, 1.0)).unwrap();
        let (_, g2) = gradients(&net, &batch, (0.0, 2.0)).unwrap();
        for ((_, a), (_, b)) in g1.named_parameters().iter().zip(g2.named_parameters().iter()) {
            for (x, y) in a.data.iter().zip(b.data.iter()) {
                let denom = x.abs().max(1e-12);
                assert!(((2.0 * x - y) / denom).abs() < 1e-6, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn test_disabled_residual_projections_get_zero_grads() {
        // build with projections, then run with the residual path disabled
        let mut net: Network<f64> = build_network(&small_config(), 9).unwrap();
        net.config.residual_encoder = false;
        let batch = Batch {
            inputs: Tensor::from_vec(
                &[1, 2, 4, 4, 4],
                (0..128).map(|i| ((i * 13 + 5) % 17) as f64 * 0.06).collect(),
            ),
            targets: (0..64).map(|v| ((v * 5) % 3) as u8).collect(),
        };
        let (_, g) = gradients(&net, &batch, (1.0, 1.0)).unwrap();
        for (name, t) in g.named_parameters() {
            if name.contains(".proj.") {
                assert!(t.data.iter().all(|&v| v == 0.0), "{name} has nonzero grad");
            }
        }
    }

    /// Shifting input and target together by one stride multiple should
    /// leave the loss roughly unchanged; logged, not asserted tightly,
    /// since padding effects make the tolerance approximate.
    #[test]
    fn test_translation_consistency_smoke() {
        use rand::Rng;
        let cfg = NetworkConfig::new(2, 3, true); // depth 3: stride multiple 4
        let net: Network<f32> = build_network(&cfg, 17).unwrap();
        let mut rng = crate::rng::rng_for(55, 0x717);
        let d = 16usize;
        let m = d * d * d;
        let inputs: Vec<f32> = (0..2 * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let targets: Vec<u8> = (0..m).map(|_| rng.random_range(0..3u8)).collect();
        let shift = cfg.stride_multiple();
        // cyclic shift along the first spatial axis
        let shift_plane = |data: &[f32], ch: usize| -> Vec<f32> {
            let mut out = vec![0.0f32; ch * m];
            let plane = d * d;
            for c in 0..ch {
                for z in 0..d {
                    let zs = (z + shift) % d;
                    out[c * m + z * plane..c * m + (z + 1) * plane]
                        .copy_from_slice(&data[c * m + zs * plane..c * m + (zs + 1) * plane]);
                }
            }
            out
        };
        let plane = d * d;
        let mut shifted_targets = vec![0u8; m];
        for z in 0..d {
            let zs = (z + shift) % d;
            shifted_targets[z * plane..(z + 1) * plane]
                .copy_from_slice(&targets[zs * plane..(zs + 1) * plane]);
        }
        let batch = Batch {
            inputs: Tensor::from_vec(&[1, 2, d, d, d], inputs.clone()),
            targets: targets.clone(),
        };
        let shifted = Batch {
            inputs: Tensor::from_vec(&[1, 2, d, d, d], shift_plane(&inputs, 2)),
            targets: shifted_targets,
        };
        let l0 = loss(&forward(&net, &batch.inputs).unwrap(), &batch.targets, (1.0, 1.0));
        let l1 = loss(&forward(&net, &shifted.inputs).unwrap(), &shifted.targets, (1.0, 1.0));
        let delta = ((l1 - l0) / l0).abs();
        println!("translation smoke: loss {l0:.6} -> {l1:.6}, relative delta {delta:.4}");
        assert!(l0.is_finite() && l1.is_finite());
    }

    #[test]
    fn test_gradient_check_residual_config() {
        check::run_gradient_check(true, 1e-3, 1e-4, 1e-8, 20);
    }

    #[test]
    fn test_gradient_check_plain_config() {
        check::run_gradient_check(false, 1e-3, 1e-4, 1e-8, 20);
    }

    /// Tighter step keeps truncation and kink noise far below tolerance.
    #[test]
    fn test_gradient_check_small_step() {
        check::run_gradient_check(true, 1e-5, 1e-6, 1e-4, 20);
    }
}
