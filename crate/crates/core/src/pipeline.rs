//! Dual-view co-training and ensembled inference.
//!
//! One training step updates, in order, the original-view network, the
//! high-frequency-view network and the critic. The critic sees ground truth
//! as real and both networks' predictions from the same step (taken before
//! their updates, detached) as fake. Inference averages the two networks'
//! probabilities; the critic is not involved.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frequency::{build_filter, high_frequency_view, rescale_unit, FilterGeometry, HighPassFilter};
use crate::losses::{
    adv_loss_grad, ce_loss_grad, critic_loss_grad, dice_loss_grad, masked_ce_loss_grad, LossBreakdown, LossWeights,
};
use crate::metrics::dsc;
use crate::models::{Critic, CriticConfig, SegNet, SegNetConfig};
use crate::nn::Tensor;
use crate::optim::{AdamW, CosineSchedule, Sgd};
use crate::preprocess::{argmax_labels, crop_or_pad, minmax_normalize, one_hot, CropWindow, PatchSpec};
use crate::volume::{LabelMask, ProbabilityMap, Volume};
use crate::{LEFT_LABEL, NUM_CLASSES, RIGHT_LABEL};

/// How the voxel-summed adversarial and masked terms enter the training
/// gradient. Logged loss values are always the summed form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TermScale {
    /// Gradients of the summed terms, unscaled.
    Sum,
    /// Gradients divided by the patch voxel count, matching the voxel-mean
    /// cross-entropy.
    #[default]
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub seg_lr: f64,
    pub seg_momentum: f64,
    pub critic_lr: f64,
    pub critic_weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub cutoff: f64,
    pub filter_geometry: FilterGeometry,
    pub split_fraction: f64,
    pub weights: LossWeights,
    /// Gate each view's masked loss with the critic's response to the other
    /// view's prediction instead of its own.
    pub peer_mask: bool,
    pub term_scale: TermScale,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub patch: PatchSpec,
    pub network: SegNetConfig,
    pub critic: CriticConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            seg_lr: 0.01,
            seg_momentum: 0.9,
            critic_lr: 1e-4,
            critic_weight_decay: 0.01,
            epochs: 300,
            seed: 0,
            cutoff: 0.10,
            filter_geometry: FilterGeometry::Radial,
            split_fraction: 0.76,
            weights: LossWeights::default(),
            peer_mask: false,
            term_scale: TermScale::default(),
            clip_lo: 0.5,
            clip_hi: 99.5,
            patch: PatchSpec::default(),
            network: SegNetConfig::default(),
            critic: CriticConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.seg_lr > 0.0 && self.critic_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.seg_momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.seg_momentum)));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(format!("split_fraction {} outside (0, 1)", self.split_fraction)));
        }
        if !(0.0 <= self.clip_lo && self.clip_lo < self.clip_hi && self.clip_hi <= 100.0) {
            return Err(Error::Config(format!("clip percentiles ({}, {})", self.clip_lo, self.clip_hi)));
        }
        if self.network.in_channels != 1 || self.network.num_classes != NUM_CLASSES {
            return Err(Error::Config("networks take one input channel and emit three classes".into()));
        }
        if self.critic.in_channels != NUM_CLASSES {
            return Err(Error::Config("critic takes three input channels".into()));
        }
        self.weights.validate()?;
        self.patch.validate()?;
        self.network.validate()?;
        self.network.check_input(1, self.patch.target_shape)?;
        if self.patch.target_shape.iter().any(|&n| n % self.critic.upsample_factor() != 0) {
            return Err(Error::Config(format!(
                "patch {:?} not divisible by the critic's {}",
                self.patch.target_shape,
                self.critic.upsample_factor()
            )));
        }
        build_filter(self.patch.target_shape, self.cutoff, self.filter_geometry)?;
        Ok(())
    }

    pub fn filter(&self) -> Result<HighPassFilter> {
        build_filter(self.patch.target_shape, self.cutoff, self.filter_geometry)
    }
}

/// `x1` unchanged and `x2` = high-frequency view of `x1`, rescaled to [0, 1].
pub fn make_views(x1: &Volume, filter: &HighPassFilter) -> Result<(Volume, Volume)> {
    let x2 = rescale_unit(&high_frequency_view(x1, filter)?);
    Ok((x1.clone(), x2))
}

/// Network-ready inputs of one case.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCase {
    pub id: String,
    pub views: [Tensor<f32>; 2],
    pub window: CropWindow,
}

/// Preprocessed case plus its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub case: PreparedCase,
    /// One-hot labels on the patch grid.
    pub target: Tensor<f32>,
    /// Labels on the original grid.
    pub label: LabelMask,
}

fn prepare_parts(
    image: &Volume,
    label: Option<&LabelMask>,
    cfg: &TrainConfig,
    filter: &HighPassFilter,
) -> Result<(PreparedCase, Option<LabelMask>)> {
    image.validate_finite()?;
    let normalized = minmax_normalize(image, cfg.clip_lo, cfg.clip_hi)?;
    let (patch, patch_label, window) = crop_or_pad(&normalized, label, &cfg.patch)?;
    let (x1, x2) = make_views(&patch, filter)?;
    let shape = patch.shape();
    let views = [Tensor::from_vec(1, shape, x1.data), Tensor::from_vec(1, shape, x2.data)];
    Ok((PreparedCase { id: image.id.clone(), views, window }, patch_label))
}

/// Normalizes, crops and builds both views of an unlabelled case.
pub fn prepare_case(image: &Volume, cfg: &TrainConfig, filter: &HighPassFilter) -> Result<PreparedCase> {
    Ok(prepare_parts(image, None, cfg, filter)?.0)
}

pub fn prepare_sample(image: &Volume, label: &LabelMask, cfg: &TrainConfig, filter: &HighPassFilter) -> Result<Sample> {
    let (case, patch_label) = prepare_parts(image, Some(label), cfg, filter)?;
    let patch_label = patch_label.expect("label was provided");
    let encoded = one_hot(&patch_label, NUM_CLASSES)?;
    let target = Tensor::from_vec(NUM_CLASSES, encoded.shape, encoded.data);
    Ok(Sample { case, target, label: label.clone() })
}

/// Indices of the training and validation cases: a seeded shuffle, then the
/// first `round(n * fraction)` cases train.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = libm::round(n as f64 * fraction) as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::Config(format!(
            "{n} cases at split fraction {fraction} leave an empty split"
        )));
    }
    let val = order.split_off(n_train);
    Ok((order, val))
}

/// Both segmentation networks and the critic.
#[derive(Debug, Clone)]
pub struct DualViewModel {
    pub nets: [SegNet<f32>; 2],
    pub critic: Critic<f32>,
}

impl DualViewModel {
    /// Seeds `seed`, `seed + 1` and `seed + 2` initialize the two networks
    /// and the critic.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        Ok(Self {
            nets: [
                SegNet::new(cfg.network.clone(), cfg.seed)?,
                SegNet::new(cfg.network.clone(), cfg.seed.wrapping_add(1))?,
            ],
            critic: Critic::new(cfg.critic.clone(), cfg.seed.wrapping_add(2))?,
        })
    }
}

/// Mean per-view losses of a batch and the critic loss.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepLosses {
    pub views: [LossBreakdown; 2],
    pub critic: f64,
}

fn mean_breakdown(items: &[LossBreakdown], w: &LossWeights) -> LossBreakdown {
    let n = items.len() as f64;
    let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
    LossBreakdown::compose(avg(|b| b.seg_ce), avg(|b| b.seg_dice), avg(|b| b.adv), avg(|b| b.masked), w)
}

fn check_finite(b: &LossBreakdown) -> Result<()> {
    match b.non_finite_term() {
        Some(term) => Err(Error::NonFiniteLoss { term }),
        None => Ok(()),
    }
}

/// Networks, optimizer states and configuration of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: DualViewModel,
    pub seg_opt: [Sgd<f32>; 2],
    pub critic_opt: AdamW<f32>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = DualViewModel::new(&config)?;
        let seg_opt = [0, 1].map(|v| Sgd::new(model.nets[v].params.len(), config.seg_lr, config.seg_momentum));
        let mut critic_opt = AdamW::new(model.critic.params.len(), config.critic_lr);
        critic_opt.weight_decay = config.critic_weight_decay;
        Ok(Self { config, model, seg_opt, critic_opt })
    }

    /// Sets every optimizer to the scheduled learning rate of `epoch`.
    pub fn set_epoch(&mut self, epoch: usize) {
        let seg = CosineSchedule::new(self.config.seg_lr, self.config.epochs).lr(epoch);
        for opt in &mut self.seg_opt {
            opt.lr = seg;
        }
        self.critic_opt.lr = CosineSchedule::new(self.config.critic_lr, self.config.epochs).lr(epoch);
    }

    fn term_scale(&self, voxels: usize) -> f32 {
        match self.config.term_scale {
            TermScale::Sum => 1.0,
            TermScale::Mean => 1.0 / voxels as f32,
        }
    }

    /// One update of network `view` on the batch. Returns the mean loss terms
    /// and the predictions made before the update.
    pub fn seg_step(&mut self, view: usize, batch: &[&Sample]) -> Result<(LossBreakdown, Vec<Tensor<f32>>)> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let w = self.config.weights.clone();
        let net = &self.model.nets[view];
        let peer = &self.model.nets[1 - view];
        let critic = &self.model.critic;
        let mut grad = vec![0.0f32; net.params.len()];
        let mut terms = Vec::with_capacity(batch.len());
        let mut preds = Vec::with_capacity(batch.len());
        for s in batch {
            let (p, cache) = net.forward_train(&s.case.views[view])?;
            // The clamped logs would hide a NaN prediction from the loss values.
            if p.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss { term: "seg_ce" });
            }
            let y = &s.target.data;
            let (ce, mut dp) = ce_loss_grad(&p.data, y, NUM_CLASSES)?;
            let (dice, d_dice) = dice_loss_grad(&p.data, y, NUM_CLASSES, w.dice_smooth)?;
            dp.iter_mut().zip(&d_dice).for_each(|(a, b)| *a += b);

            let (conf, conf_cache) = critic.forward_train(&p)?;
            if conf.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss { term: "adv" });
            }
            let (adv, d_conf) = adv_loss_grad(&conf.data)?;
            let gate = if self.config.peer_mask {
                critic.forward(&peer.forward(&s.case.views[1 - view])?)?
            } else {
                conf.clone()
            };
            let (masked, d_masked) = masked_ce_loss_grad(&p.data, y, &gate.data, w.threshold, NUM_CLASSES)?;
            let scale = self.term_scale(p.voxels());
            if w.lambda_m != 0.0 {
                let k = w.lambda_m as f32 * scale;
                dp.iter_mut().zip(&d_masked).for_each(|(a, b)| *a += k * b);
            }
            if w.lambda_c != 0.0 {
                let k = w.lambda_c as f32 * scale;
                let d_conf = Tensor::from_vec(1, conf.shape, d_conf.iter().map(|g| k * g).collect());
                let d_adv = critic.backward(&conf_cache, &d_conf, None);
                dp.iter_mut().zip(&d_adv.data).for_each(|(a, b)| *a += b);
            }

            let b = LossBreakdown::compose(ce as f64, dice as f64, adv as f64, masked as f64, &w);
            check_finite(&b)?;
            terms.push(b);
            net.backward(&cache, &Tensor::from_vec(NUM_CLASSES, p.shape, dp), &mut grad);
            preds.push(p);
        }
        let inv = 1.0 / batch.len() as f32;
        grad.iter_mut().for_each(|g| *g *= inv);
        self.seg_opt[view].step(&mut self.model.nets[view].params, &grad)?;
        Ok((mean_breakdown(&terms, &w), preds))
    }

    /// Critic loss over the batch without updating anything.
    pub fn critic_loss(&self, batch: &[&Sample], preds: [&[Tensor<f32>]; 2]) -> Result<f64> {
        let critic = &self.model.critic;
        let mut total = 0.0;
        for (i, s) in batch.iter().enumerate() {
            let real = critic.forward(&s.target)?;
            let f1 = critic.forward(&preds[0][i])?;
            let f2 = critic.forward(&preds[1][i])?;
            total += crate::losses::critic_loss(&real.data, &f1.data, &real.data, &f2.data)? as f64;
        }
        Ok(total / batch.len() as f64)
    }

    /// One critic update with ground truth as real and `preds` as fake.
    pub fn critic_step(&mut self, batch: &[&Sample], preds: [&[Tensor<f32>]; 2]) -> Result<f64> {
        if batch.is_empty() || preds[0].len() != batch.len() || preds[1].len() != batch.len() {
            return Err(Error::Shape("critic batch and predictions differ in length".into()));
        }
        let critic = &self.model.critic;
        let mut grad = vec![0.0f32; critic.params.len()];
        let mut total = 0.0;
        for (i, s) in batch.iter().enumerate() {
            // Both views share the ground truth, so one pass serves both real terms.
            let (real, real_cache) = critic.forward_train(&s.target)?;
            let (f1, c1) = critic.forward_train(&preds[0][i])?;
            let (f2, c2) = critic.forward_train(&preds[1][i])?;
            if [&real, &f1, &f2].iter().any(|t| t.data.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFiniteLoss { term: "critic" });
            }
            let (loss, g) = critic_loss_grad(&real.data, &f1.data, &real.data, &f2.data)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { term: "critic" });
            }
            total += loss as f64;
            let d_real: Vec<f32> = g.real_1.iter().zip(&g.real_2).map(|(a, b)| a + b).collect();
            let shape = real.shape;
            critic.backward(&real_cache, &Tensor::from_vec(1, shape, d_real), Some(&mut grad));
            critic.backward(&c1, &Tensor::from_vec(1, shape, g.fake_1), Some(&mut grad));
            critic.backward(&c2, &Tensor::from_vec(1, shape, g.fake_2), Some(&mut grad));
        }
        let inv = 1.0 / batch.len() as f32;
        grad.iter_mut().for_each(|g| *g *= inv);
        self.critic_opt.step(&mut self.model.critic.params, &grad)?;
        Ok(total / batch.len() as f64)
    }

    /// Network 1, network 2, then the critic.
    pub fn train_step(&mut self, batch: &[&Sample]) -> Result<StepLosses> {
        let (l1, p1) = self.seg_step(0, batch)?;
        let (l2, p2) = self.seg_step(1, batch)?;
        let critic = self.critic_step(batch, [&p1, &p2])?;
        Ok(StepLosses { views: [l1, l2], critic })
    }

    /// Cross-entropy plus Dice update of network `view` alone.
    pub fn supervised_step(&mut self, view: usize, batch: &[&Sample]) -> Result<f64> {
        let net = &self.model.nets[view];
        let mut grad = vec![0.0f32; net.params.len()];
        let mut total = 0.0;
        for s in batch {
            let (p, cache) = net.forward_train(&s.case.views[view])?;
            let y = &s.target.data;
            let (ce, mut dp) = ce_loss_grad(&p.data, y, NUM_CLASSES)?;
            let (dice, d_dice) = dice_loss_grad(&p.data, y, NUM_CLASSES, self.config.weights.dice_smooth)?;
            dp.iter_mut().zip(&d_dice).for_each(|(a, b)| *a += b);
            total += (ce + dice) as f64;
            net.backward(&cache, &Tensor::from_vec(NUM_CLASSES, p.shape, dp), &mut grad);
        }
        let inv = 1.0 / batch.len() as f32;
        grad.iter_mut().for_each(|g| *g *= inv);
        self.seg_opt[view].step(&mut self.model.nets[view].params, &grad)?;
        Ok(total / batch.len() as f64)
    }

    pub fn checkpoint(&self, epoch: usize, best_val_dsc: f64) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            epoch,
            best_val_dsc,
            seg_params: [self.model.nets[0].params.clone(), self.model.nets[1].params.clone()],
            critic_params: self.model.critic.params.clone(),
            seg_opt: self.seg_opt.clone(),
            critic_opt: self.critic_opt.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut trainer = Trainer::new(ck.config.clone())?;
        trainer.model = ck.model()?;
        let lens = [trainer.model.nets[0].params.len(), trainer.model.nets[1].params.len()];
        if ck.seg_opt[0].velocity.len() != lens[0]
            || ck.seg_opt[1].velocity.len() != lens[1]
            || ck.critic_opt.m.len() != trainer.model.critic.params.len()
        {
            return Err(Error::Shape("optimizer state does not match the networks".into()));
        }
        trainer.seg_opt = ck.seg_opt.clone();
        trainer.critic_opt = ck.critic_opt.clone();
        Ok(trainer)
    }
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub best_val_dsc: f64,
    pub seg_params: [Vec<f32>; 2],
    pub critic_params: Vec<f32>,
    pub seg_opt: [Sgd<f32>; 2],
    pub critic_opt: AdamW<f32>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<DualViewModel> {
        Ok(DualViewModel {
            nets: [
                SegNet::with_params(self.config.network.clone(), self.seg_params[0].clone())?,
                SegNet::with_params(self.config.network.clone(), self.seg_params[1].clone())?,
            ],
            critic: Critic::with_params(self.config.critic.clone(), self.critic_params.clone())?,
        })
    }
}

fn to_probability_map(t: Tensor<f32>) -> Result<ProbabilityMap> {
    ProbabilityMap::new(t.channels, t.shape, t.data)
}

/// Per-view and ensembled probabilities on the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPredictions {
    pub views: [ProbabilityMap; 2],
    pub ensemble: ProbabilityMap,
}

/// Runs both segmentation networks on a prepared case.
pub fn predict_views(nets: &[SegNet<f32>; 2], case: &PreparedCase) -> Result<ViewPredictions> {
    let p1 = to_probability_map(nets[0].forward(&case.views[0])?)?;
    let p2 = to_probability_map(nets[1].forward(&case.views[1])?)?;
    let ensemble = p1.average(&p2)?;
    Ok(ViewPredictions { views: [p1, p2], ensemble })
}

/// Labels from patch probabilities, mapped back onto the original grid.
pub fn restore_labels(p: &ProbabilityMap, case: &PreparedCase) -> Result<LabelMask> {
    if p.shape != case.window.shape {
        return Err(Error::Geometry(format!(
            "prediction {:?} does not match the crop window {:?}",
            p.shape, case.window.shape
        )));
    }
    let labels = case.window.restore(&argmax_labels(p)?, 0u8);
    LabelMask::new(case.id.clone(), case.window.source.clone(), labels)
}

/// Dual-view ensembled segmentation of one image on its original grid, plus
/// the ensembled probabilities on the patch grid.
pub fn predict(image: &Volume, nets: &[SegNet<f32>; 2], cfg: &TrainConfig) -> Result<(LabelMask, ProbabilityMap)> {
    let case = prepare_case(image, cfg, &cfg.filter()?)?;
    let preds = predict_views(nets, &case)?;
    let labels = restore_labels(&preds.ensemble, &case)?;
    Ok((labels, preds.ensemble))
}

/// Mean of the left and right structure DSC.
pub fn mean_structure_dsc(pred: &LabelMask, gt: &LabelMask) -> Result<f64> {
    let l = dsc(&pred.binary(LEFT_LABEL), &gt.binary(LEFT_LABEL))?;
    let r = dsc(&pred.binary(RIGHT_LABEL), &gt.binary(RIGHT_LABEL))?;
    Ok(0.5 * (l + r))
}

/// Mean DSC over cases of view 1, view 2 and the ensemble, on original grids.
pub fn evaluate_dsc(nets: &[SegNet<f32>; 2], samples: &[Sample]) -> Result<[f64; 3]> {
    let mut acc = [0.0; 3];
    for s in samples {
        let preds = predict_views(nets, &s.case)?;
        for (slot, p) in acc.iter_mut().zip([&preds.views[0], &preds.views[1], &preds.ensemble]) {
            *slot += mean_structure_dsc(&restore_labels(p, &s.case)?, &s.label)?;
        }
    }
    let n = samples.len().max(1) as f64;
    Ok(acc.map(|a| a / n))
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub seg_lr: f64,
    pub critic_lr: f64,
    pub views: [LossBreakdown; 2],
    pub critic: f64,
    /// Validation DSC of view 1, view 2 and the ensemble.
    pub val_dsc: [f64; 3],
    pub best_val_dsc: f64,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Best checkpoint of this run; `None` when a resumed run never beat the
    /// best validation DSC it started from.
    pub best: Option<Checkpoint>,
    pub last: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Trains on `train` for `cfg.epochs` epochs, validating on `val` after every
/// epoch and keeping the checkpoint with the best ensembled validation DSC.
pub fn fit(
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<FitOutcome> {
    fit_from(Trainer::new(cfg.clone())?, None, train, val, on_epoch)
}

/// Continues a run from `resume` (its epoch is taken as completed), or starts
/// fresh from `trainer` when `resume` is `None`. A resumed run shuffles
/// batches exactly as the uninterrupted run would have.
pub fn fit_from(
    mut trainer: Trainer,
    resume: Option<&Checkpoint>,
    train: &[Sample],
    val: &[Sample],
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<FitOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(format!(
            "empty split: {} training and {} validation cases",
            train.len(),
            val.len()
        )));
    }
    let cfg = trainer.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<Checkpoint> = None;
    let mut best_dsc = f64::NEG_INFINITY;
    let mut start = 0;
    if let Some(ck) = resume {
        trainer = Trainer::from_checkpoint(ck)?;
        start = ck.epoch + 1;
        best_dsc = ck.best_val_dsc;
        for _ in 0..start {
            order.shuffle(&mut rng);
        }
    }
    let mut log = Vec::with_capacity(cfg.epochs.saturating_sub(start));
    for epoch in start..cfg.epochs {
        trainer.set_epoch(epoch);
        order.shuffle(&mut rng);
        let mut sums = [Vec::new(), Vec::new()];
        let mut critic = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let losses = trainer.train_step(&batch)?;
            sums[0].push(losses.views[0]);
            sums[1].push(losses.views[1]);
            critic += losses.critic;
            steps += 1;
        }
        let val_dsc = evaluate_dsc(&trainer.model.nets, val)?;
        let improved = val_dsc[2] > best_dsc;
        if improved {
            best_dsc = val_dsc[2];
            best = Some(trainer.checkpoint(epoch, best_dsc));
        }
        let row = EpochLog {
            epoch,
            seg_lr: trainer.seg_opt[0].lr,
            critic_lr: trainer.critic_opt.lr,
            views: [mean_breakdown(&sums[0], &cfg.weights), mean_breakdown(&sums[1], &cfg.weights)],
            critic: critic / steps as f64,
            val_dsc,
            best_val_dsc: best_dsc,
            improved,
        };
        log::info!(
            "epoch {epoch}: loss {:.4}/{:.4} critic {:.2} val dsc {:.3}/{:.3}/{:.3}",
            row.views[0].total,
            row.views[1].total,
            row.critic,
            val_dsc[0],
            val_dsc[1],
            val_dsc[2]
        );
        on_epoch(&row);
        log.push(row);
    }
    let last = trainer.checkpoint(cfg.epochs.saturating_sub(1).max(start.saturating_sub(1)), best_dsc);
    Ok(FitOutcome { best, last, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, PhantomSpec};

    fn small_config() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            epochs: 4,
            patch: PatchSpec { target_shape: [16; 3], background_threshold: 0.5 },
            network: SegNetConfig { base_width: 4, levels: 2, ..SegNetConfig::default() },
            critic: CriticConfig { base_width: 4, levels: 2, ..CriticConfig::default() },
            ..TrainConfig::default()
        }
    }

    fn phantom(seed: u64) -> (Volume, LabelMask) {
        let spec = PhantomSpec {
            shape: [24; 3],
            left_center: [7.0, 11.5, 11.5],
            semi_axes: [2.5, 3.5, 3.0],
            seed,
            ..PhantomSpec::default()
        };
        generate("p", &spec).unwrap()
    }

    fn samples(cfg: &TrainConfig, n: u64) -> Vec<Sample> {
        let filter = cfg.filter().unwrap();
        (0..n)
            .map(|s| {
                let (v, m) = phantom(s);
                prepare_sample(&v, &m, cfg, &filter).unwrap()
            })
            .collect()
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let (a, b) = split_indices(16, 0.76, 4).unwrap();
        assert_eq!((a.len(), b.len()), (12, 4));
        assert_eq!(split_indices(16, 0.76, 4).unwrap(), (a.clone(), b.clone()));
        let mut all: Vec<usize> = a.into_iter().chain(b).collect();
        all.sort();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
        assert!(matches!(split_indices(1, 0.76, 0), Err(Error::Config(_))));
    }

    #[test]
    fn identity_filter_views_match() {
        let (v, _) = phantom(0);
        let x1 = minmax_normalize(&v, 0.0, 100.0).unwrap();
        let (a, b) = make_views(&x1, &HighPassFilter::identity(x1.shape())).unwrap();
        assert_eq!(a, x1);
        for (p, q) in a.data.iter().zip(&b.data) {
            assert!((p - q).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_input_gives_zero_high_frequency_view() {
        let g = crate::Geometry::new([16; 3], [1.0; 3]).unwrap();
        let v = Volume::filled("c", g, 0.7);
        let filter = build_filter([16; 3], 0.1, FilterGeometry::Radial).unwrap();
        let (_, x2) = make_views(&v, &filter).unwrap();
        assert!(x2.data.iter().all(|x| x.abs() < 1e-6));
    }

    #[test]
    fn critic_step_leaves_segmentation_untouched() {
        let cfg = small_config();
        let data = samples(&cfg, 2);
        let batch: Vec<&Sample> = data.iter().collect();
        let mut t = Trainer::new(cfg).unwrap();
        let (_, p1) = t.seg_step(0, &batch).unwrap();
        let (_, p2) = t.seg_step(1, &batch).unwrap();
        let nets = t.model.nets.clone();
        let critic_before = t.model.critic.params.clone();
        t.critic_step(&batch, [&p1, &p2]).unwrap();
        assert_eq!(t.model.nets, nets);
        assert_ne!(t.model.critic.params, critic_before);
    }

    #[test]
    fn seg_step_leaves_critic_and_peer_untouched() {
        let cfg = small_config();
        let data = samples(&cfg, 2);
        let batch: Vec<&Sample> = data.iter().collect();
        let mut t = Trainer::new(cfg).unwrap();
        let before = t.clone();
        t.seg_step(0, &batch).unwrap();
        assert_eq!(t.model.critic.params, before.model.critic.params);
        assert_eq!(t.model.nets[1], before.model.nets[1]);
        assert_ne!(t.model.nets[0], before.model.nets[0]);
    }

    #[test]
    fn predict_restores_original_grid_without_critic() {
        let cfg = small_config();
        let t = Trainer::new(cfg.clone()).unwrap();
        let (v, _) = phantom(3);
        let (labels, probs) = predict(&v, &t.model.nets, &cfg).unwrap();
        assert_eq!(labels.geometry, v.geometry);
        assert_eq!(probs.shape, [16; 3]);
        assert_eq!(t.model.critic.evaluations(), 0);
    }

    #[test]
    fn ensemble_of_identical_views_is_either_view() {
        let cfg = small_config();
        let t = Trainer::new(cfg.clone()).unwrap();
        let case = prepare_case(&phantom(1).0, &cfg, &cfg.filter().unwrap()).unwrap();
        let same = PreparedCase { views: [case.views[0].clone(), case.views[0].clone()], ..case };
        let nets = [t.model.nets[0].clone(), t.model.nets[0].clone()];
        let preds = predict_views(&nets, &same).unwrap();
        assert_eq!(preds.ensemble, preds.views[0]);
    }

    #[test]
    fn ensemble_tie_goes_to_lower_class() {
        let a = ProbabilityMap::new(3, [1, 1, 1], vec![0.1, 0.9, 0.0]).unwrap();
        let b = ProbabilityMap::new(3, [1, 1, 1], vec![0.1, 0.0, 0.9]).unwrap();
        assert_eq!(argmax_labels(&a.average(&b).unwrap()).unwrap(), vec![1]);
    }

    #[test]
    fn fit_rejects_empty_split() {
        let cfg = small_config();
        let data = samples(&cfg, 1);
        assert!(matches!(fit(&data, &[], &cfg, &mut |_| {}), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip_restores_trainer() {
        let cfg = small_config();
        let t = Trainer::new(cfg).unwrap();
        let restored = Trainer::from_checkpoint(&t.checkpoint(0, 0.5)).unwrap();
        assert_eq!(restored.model.nets, t.model.nets);
        assert_eq!(restored.model.critic.params, t.model.critic.params);
    }
}
