//! The two segmentation networks and the per-voxel critic.
//!
//! The segmentation network is a residual encoder-decoder in the V-Net style:
//! every resolution level has a stage of 3×3×3 convolutions with PReLU and a
//! residual connection, levels are joined by stride-2 convolutions on the way
//! down and stride-2 transposed convolutions on the way up, and decoder
//! stages see the matching encoder features through concatenation. A 1×1×1
//! head and a channel softmax produce class probabilities.
//!
//! The critic is the encoder half of that design applied to a K-channel
//! probability map, projected to one channel at its coarsest level, upsampled
//! trilinearly to the input resolution and squashed by a sigmoid.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    sigmoid, sigmoid_backward, softmax, softmax_backward, upsample_trilinear, upsample_trilinear_backward, Conv3,
    Conv3Cache, Down2, ParamLayout, Pointwise, PRelu, Real, Tensor, Up2,
};
use crate::volume::Shape3;
use crate::NUM_CLASSES;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Channels at full resolution; doubled at every level below.
    pub base_width: usize,
    pub levels: usize,
    /// Convolutions per residual stage.
    pub stage_convs: usize,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self { in_channels: 1, num_classes: NUM_CLASSES, base_width: 16, levels: 4, stage_convs: 2 }
    }
}

impl SegNetConfig {
    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes < 2 || self.base_width == 0 || self.levels == 0 || self.stage_convs == 0 {
            return Err(Error::Config(format!("degenerate network config {self:?}")));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    ///
    /// With `w_l = base * 2^l`, `n` convolutions per stage, `L` levels, `C`
    /// input channels and `K` classes:
    /// input conv `27·C·w0 + w0` and its PReLU `w0`; encoder stage `l`
    /// `n·(27·w_l² + 2·w_l)`; down-sampling `8·w_{l-1}·w_l + 2·w_l`; per
    /// decoder level `8·w_{l+1}·w_l + 2·w_l` for the up-sampling,
    /// `27·2w_l·w_l + 27·(n-1)·w_l² + n·w_l` for the stage convolutions and
    /// `n·w_l` for its PReLUs; head `w0·K + K`.
    pub fn parameter_count(&self) -> usize {
        let n = self.stage_convs;
        let w = |l: usize| self.width(l);
        let w0 = w(0);
        let mut total = 27 * self.in_channels * w0 + w0 + w0;
        for l in 0..self.levels {
            total += n * (27 * w(l) * w(l) + 2 * w(l));
            if l > 0 {
                total += 8 * w(l - 1) * w(l) + 2 * w(l);
            }
        }
        for l in 0..self.levels - 1 {
            total += 8 * w(l + 1) * w(l) + 2 * w(l);
            total += 27 * 2 * w(l) * w(l) + 27 * (n - 1) * w(l) * w(l) + n * w(l);
            total += n * w(l);
        }
        total + w0 * self.num_classes + self.num_classes
    }

    pub fn check_input(&self, channels: usize, shape: Shape3) -> Result<()> {
        check_divisible(shape, self.levels)?;
        if channels != self.in_channels {
            return Err(Error::Shape(format!("expected {} input channel(s), got {channels}", self.in_channels)));
        }
        Ok(())
    }
}

fn check_divisible(shape: Shape3, levels: usize) -> Result<()> {
    let factor = 1usize << (levels - 1);
    if shape.iter().any(|&n| n == 0 || n % factor != 0) {
        return Err(Error::Shape(format!(
            "spatial extent {shape:?} is not divisible by {factor} ({levels} levels)"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
struct ResStage {
    convs: Vec<Conv3>,
    acts: Vec<PRelu>,
    out_act: PRelu,
}

struct StageCache<T> {
    convs: Vec<Conv3Cache<T>>,
    act_inputs: Vec<Tensor<T>>,
    sum: Tensor<T>,
}

impl ResStage {
    fn new(layout: &mut ParamLayout, name: &str, cin: usize, width: usize, convs: usize) -> Self {
        let mut c = Vec::with_capacity(convs);
        let mut a = Vec::with_capacity(convs);
        for i in 0..convs {
            let input = if i == 0 { cin } else { width };
            c.push(Conv3::new(layout, &format!("{name}.conv{i}"), input, width));
            if i + 1 < convs {
                a.push(PRelu::new(layout, &format!("{name}.act{i}"), width));
            }
        }
        let out_act = PRelu::new(layout, &format!("{name}.out_act"), width);
        Self { convs: c, acts: a, out_act }
    }

    fn forward<T: Real>(&self, p: &[T], x: &Tensor<T>, residual: &Tensor<T>) -> (Tensor<T>, StageCache<T>) {
        let mut h = x.clone();
        let mut convs = Vec::with_capacity(self.convs.len());
        let mut act_inputs = Vec::with_capacity(self.acts.len());
        for (i, conv) in self.convs.iter().enumerate() {
            let (y, cache) = conv.forward(p, &h);
            convs.push(cache);
            h = y;
            if let Some(act) = self.acts.get(i) {
                let y = act.forward(p, &h);
                act_inputs.push(h);
                h = y;
            }
        }
        h.add_assign(residual);
        let out = self.out_act.forward(p, &h);
        (out, StageCache { convs, act_inputs, sum: h })
    }

    /// Returns gradients for the stage input and for the residual branch.
    fn backward<T: Real>(&self, p: &[T], cache: &StageCache<T>, dout: &Tensor<T>, g: &mut [T]) -> (Tensor<T>, Tensor<T>) {
        let dsum = self.out_act.backward(p, &cache.sum, dout, g);
        let mut dh = dsum.clone();
        for i in (0..self.convs.len()).rev() {
            if let Some(act) = self.acts.get(i) {
                dh = act.backward(p, &cache.act_inputs[i], &dh, g);
            }
            dh = self.convs[i].backward(p, &cache.convs[i], &dh, g, true).expect("input gradient");
        }
        (dh, dsum)
    }
}

/// Layer structure of a segmentation network; parameters live elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct SegNetArch {
    pub config: SegNetConfig,
    pub layout: ParamLayout,
    conv_in: Conv3,
    act_in: PRelu,
    encoder: Vec<ResStage>,
    down: Vec<(Down2, PRelu)>,
    up: Vec<(Up2, PRelu)>,
    decoder: Vec<ResStage>,
    head: Pointwise,
}

impl SegNetArch {
    pub fn new(config: SegNetConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = ParamLayout::default();
        let w0 = config.width(0);
        let conv_in = Conv3::new(&mut layout, "input.conv", config.in_channels, w0);
        let act_in = PRelu::new(&mut layout, "input.act", w0);
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for l in 0..config.levels {
            if l > 0 {
                let d = Down2::new(&mut layout, &format!("down{l}"), config.width(l - 1), config.width(l));
                let a = PRelu::new(&mut layout, &format!("down{l}.act"), config.width(l));
                down.push((d, a));
            }
            encoder.push(ResStage::new(&mut layout, &format!("enc{l}"), config.width(l), config.width(l), config.stage_convs));
        }
        let mut up = Vec::new();
        let mut decoder = Vec::new();
        for l in 0..config.levels - 1 {
            let u = Up2::new(&mut layout, &format!("up{l}"), config.width(l + 1), config.width(l));
            let a = PRelu::new(&mut layout, &format!("up{l}.act"), config.width(l));
            up.push((u, a));
            decoder.push(ResStage::new(&mut layout, &format!("dec{l}"), 2 * config.width(l), config.width(l), config.stage_convs));
        }
        let head = Pointwise::new(&mut layout, "head", w0, config.num_classes);
        Ok(Self { config, layout, conv_in, act_in, encoder, down, up, decoder, head })
    }
}

/// Intermediate activations kept for the backward pass.
pub struct SegCache<T> {
    conv_in: Conv3Cache<T>,
    act_in_input: Tensor<T>,
    encoder: Vec<StageCache<T>>,
    down: Vec<(Tensor<T>, Tensor<T>)>,
    up: Vec<(Tensor<T>, Tensor<T>)>,
    decoder: Vec<StageCache<T>>,
    head_input: Tensor<T>,
    probs: Tensor<T>,
}

/// A segmentation network: architecture plus a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SegNet<T> {
    pub arch: SegNetArch,
    pub params: Vec<T>,
}

impl<T: Real> SegNet<T> {
    /// Fresh network with He-normal weights drawn from `seed`.
    pub fn new(config: SegNetConfig, seed: u64) -> Result<Self> {
        let arch = SegNetArch::new(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch.layout.initialize(&mut rng);
        Ok(Self { arch, params })
    }

    pub fn with_params(config: SegNetConfig, params: Vec<T>) -> Result<Self> {
        let arch = SegNetArch::new(config)?;
        if params.len() != arch.layout.len {
            return Err(Error::Shape(format!(
                "{} parameters for a network that needs {}",
                params.len(),
                arch.layout.len
            )));
        }
        Ok(Self { arch, params })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.arch.config
    }

    /// Class probabilities for one input sample.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_train(x)?.0)
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, SegCache<T>)> {
        let a = &self.arch;
        a.config.check_input(x.channels, x.shape)?;
        let p = &self.params;
        let (h, conv_in) = a.conv_in.forward(p, x);
        let h0 = a.act_in.forward(p, &h);
        let act_in_input = h;

        let mut skips = Vec::with_capacity(a.config.levels);
        let mut encoder = Vec::with_capacity(a.config.levels);
        let mut down = Vec::with_capacity(a.down.len());
        let (e0, c0) = a.encoder[0].forward(p, &h0, &h0);
        skips.push(e0);
        encoder.push(c0);
        for l in 1..a.config.levels {
            let (d, act) = &a.down[l - 1];
            let (pre, xs) = d.forward(p, &skips[l - 1]);
            let h = act.forward(p, &pre);
            let (e, c) = a.encoder[l].forward(p, &h, &h);
            down.push((xs, pre));
            skips.push(e);
            encoder.push(c);
        }

        let mut h = skips.pop().expect("at least one level");
        let mut up = Vec::with_capacity(a.up.len());
        let mut decoder = Vec::with_capacity(a.decoder.len());
        for l in (0..a.config.levels - 1).rev() {
            let (u, act) = &a.up[l];
            let pre = u.forward(p, &h);
            let uh = act.forward(p, &pre);
            let skip = skips.pop().expect("matching encoder level");
            let joined = uh.concat(&skip);
            let (out, c) = a.decoder[l].forward(p, &joined, &uh);
            up.push((h, pre));
            decoder.push(c);
            h = out;
        }
        // Caches were pushed bottom-up; store them by level.
        up.reverse();
        decoder.reverse();

        let logits = a.head.forward(p, &h);
        let probs = softmax(&logits);
        let cache = SegCache {
            conv_in,
            act_in_input,
            encoder,
            down,
            up,
            decoder,
            head_input: h,
            probs: probs.clone(),
        };
        Ok((probs, cache))
    }

    /// Parameter gradient of a loss whose gradient w.r.t. the output
    /// probabilities is `dprobs`; accumulated into `g`.
    pub fn backward(&self, cache: &SegCache<T>, dprobs: &Tensor<T>, g: &mut [T]) {
        let dlogits = softmax_backward(&cache.probs, dprobs);
        self.backward_logits(cache, &dlogits, g);
    }

    /// Same as [`SegNet::backward`] starting from the pre-softmax logits.
    pub fn backward_logits(&self, cache: &SegCache<T>, dlogits: &Tensor<T>, g: &mut [T]) {
        let a = &self.arch;
        let p = &self.params;
        let levels = a.config.levels;
        assert_eq!(g.len(), p.len(), "gradient buffer length");
        let mut dh = a.head.backward(p, &cache.head_input, dlogits, g);
        let mut dskips: Vec<Option<Tensor<T>>> = (0..levels).map(|_| None).collect();
        for l in 0..levels - 1 {
            let (dx, dres) = a.decoder[l].backward(p, &cache.decoder[l], &dh, g);
            let (mut du, dskip) = dx.split(a.config.width(l));
            du.add_assign(&dres);
            dskips[l] = Some(dskip);
            let (u, act) = &a.up[l];
            let (h_in, pre) = &cache.up[l];
            let dpre = act.backward(p, pre, &du, g);
            dh = u.backward(p, h_in, &dpre, g);
        }
        let mut de = dh;
        for l in (0..levels).rev() {
            if let Some(extra) = dskips[l].take() {
                de.add_assign(&extra);
            }
            let (mut dx, dres) = a.encoder[l].backward(p, &cache.encoder[l], &de, g);
            dx.add_assign(&dres);
            if l > 0 {
                let (d, act) = &a.down[l - 1];
                let (xs, pre) = &cache.down[l - 1];
                let dpre = act.backward(p, pre, &dx, g);
                de = d.backward(p, xs, &dpre, g);
            } else {
                let dh0 = a.act_in.backward(p, &cache.act_in_input, &dx, g);
                a.conv_in.backward(p, &cache.conv_in, &dh0, g, false);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticConfig {
    pub in_channels: usize,
    pub base_width: usize,
    /// Encoder depth; the coarsest map is `2^(levels-1)` times smaller.
    pub levels: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self { in_channels: NUM_CLASSES, base_width: 16, levels: 4 }
    }
}

impl CriticConfig {
    pub fn upsample_factor(&self) -> usize {
        1 << (self.levels - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticArch {
    pub config: CriticConfig,
    pub layout: ParamLayout,
    conv_in: Conv3,
    act_in: PRelu,
    down: Vec<(Down2, PRelu)>,
    project: Pointwise,
}

impl CriticArch {
    pub fn new(config: CriticConfig) -> Result<Self> {
        if config.in_channels == 0 || config.base_width == 0 || config.levels == 0 {
            return Err(Error::Config(format!("degenerate critic config {config:?}")));
        }
        let mut layout = ParamLayout::default();
        let w = |l: usize| config.base_width << l;
        let conv_in = Conv3::new(&mut layout, "critic.input.conv", config.in_channels, w(0));
        let act_in = PRelu::new(&mut layout, "critic.input.act", w(0));
        let down = (1..config.levels)
            .map(|l| {
                (
                    Down2::new(&mut layout, &format!("critic.down{l}"), w(l - 1), w(l)),
                    PRelu::new(&mut layout, &format!("critic.down{l}.act"), w(l)),
                )
            })
            .collect();
        let project = Pointwise::new(&mut layout, "critic.project", w(config.levels - 1), 1);
        Ok(Self { config, layout, conv_in, act_in, down, project })
    }
}

pub struct CriticCache<T> {
    conv_in: Conv3Cache<T>,
    act_in_input: Tensor<T>,
    down: Vec<(Tensor<T>, Tensor<T>)>,
    project_input: Tensor<T>,
    /// Shape of the coarsest encoder map before up-sampling.
    pub coarse_shape: Shape3,
    output: Tensor<T>,
}

/// The per-voxel critic. Every forward evaluation is counted.
#[derive(Debug)]
pub struct Critic<T> {
    pub arch: CriticArch,
    pub params: Vec<T>,
    evaluations: AtomicUsize,
}

impl<T: Clone> Clone for Critic<T> {
    fn clone(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            params: self.params.clone(),
            evaluations: AtomicUsize::new(self.evaluations()),
        }
    }
}

impl<T> Critic<T> {
    /// Number of forward passes run so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }
}

impl<T: Real> Critic<T> {
    pub fn new(config: CriticConfig, seed: u64) -> Result<Self> {
        let arch = CriticArch::new(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch.layout.initialize(&mut rng);
        Ok(Self { arch, params, evaluations: AtomicUsize::new(0) })
    }

    pub fn with_params(config: CriticConfig, params: Vec<T>) -> Result<Self> {
        let arch = CriticArch::new(config)?;
        if params.len() != arch.layout.len {
            return Err(Error::Shape(format!(
                "{} parameters for a critic that needs {}",
                params.len(),
                arch.layout.len
            )));
        }
        Ok(Self { arch, params, evaluations: AtomicUsize::new(0) })
    }

    pub fn forward(&self, probs: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_train(probs)?.0)
    }

    pub fn forward_train(&self, probs: &Tensor<T>) -> Result<(Tensor<T>, CriticCache<T>)> {
        let a = &self.arch;
        if probs.channels != a.config.in_channels {
            return Err(Error::Shape(format!(
                "critic expects {} channels, got {}",
                a.config.in_channels, probs.channels
            )));
        }
        check_divisible(probs.shape, a.config.levels)?;
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        let p = &self.params;
        let (h, conv_in) = a.conv_in.forward(p, probs);
        let mut x = a.act_in.forward(p, &h);
        let act_in_input = h;
        let mut down = Vec::with_capacity(a.down.len());
        for (d, act) in &a.down {
            let (pre, xs) = d.forward(p, &x);
            x = act.forward(p, &pre);
            down.push((xs, pre));
        }
        let coarse_shape = x.shape;
        let logits = upsample_trilinear(&a.project.forward(p, &x), a.config.upsample_factor());
        let output = sigmoid(&logits);
        let cache = CriticCache { conv_in, act_in_input, down, project_input: x, coarse_shape, output: output.clone() };
        Ok((output, cache))
    }

    /// Accumulates parameter gradients into `g` (when given) and returns the
    /// gradient w.r.t. the input probability map.
    pub fn backward(&self, cache: &CriticCache<T>, dconf: &Tensor<T>, g: Option<&mut [T]>) -> Tensor<T> {
        let a = &self.arch;
        let p = &self.params;
        let mut scratch;
        let g = match g {
            Some(g) => g,
            None => {
                scratch = vec![T::zero(); p.len()];
                &mut scratch[..]
            }
        };
        let dlogits = sigmoid_backward(&cache.output, dconf);
        let dproj = upsample_trilinear_backward(&dlogits, a.config.upsample_factor());
        let mut dx = a.project.backward(p, &cache.project_input, &dproj, g);
        for (l, (d, act)) in a.down.iter().enumerate().rev() {
            let (xs, pre) = &cache.down[l];
            let dpre = act.backward(p, pre, &dx, g);
            dx = d.backward(p, xs, &dpre, g);
        }
        let dh = a.act_in.backward(p, &cache.act_in_input, &dx, g);
        a.conv_in.backward(p, &cache.conv_in, &dh, g, true).expect("input gradient")
    }
}
