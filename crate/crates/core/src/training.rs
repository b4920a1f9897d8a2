//! Data augmentation, parameter initialization strategies and the
//! single-generation training loop.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::analysis::segmentation_metrics;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nets::{init_tensor, is_backbone_param, predict_chunked, Generation};
use crate::rng::{self, Stream};
use crate::tensor::kernels::ResizePlan;
use crate::tensor::{Graph, LabelMap, LrSchedule, OptimizerState, ProbabilityMap, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip_prob: f64,
    pub resize_range: (f64, f64),
    /// `(height, width)` of the training crop.
    pub crop: (usize, usize),
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams { flip_prob: 0.5, resize_range: (0.5, 2.0), crop: (32, 32) }
    }
}

impl AugmentParams {
    /// No-op augmentation for `h×w` samples.
    pub fn identity(h: usize, w: usize) -> Self {
        AugmentParams { flip_prob: 0.0, resize_range: (1.0, 1.0), crop: (h, w) }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.resize_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!("resize range ({}, {}) must satisfy 0 < low <= high", lo, hi)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::InvalidArgument(format!("flip probability {} outside [0, 1]", self.flip_prob)));
        }
        if self.crop.0 == 0 || self.crop.1 == 0 {
            return Err(Error::InvalidArgument("crop size must be positive".into()));
        }
        Ok(())
    }
}

pub fn hflip_image(image: &Tensor<f32>) -> Tensor<f32> {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    Tensor::from_fn(s, |i| {
        let x = i % w;
        let rest = i / w;
        let _ = (c, h);
        image.data()[rest * w + (w - 1 - x)]
    })
}

pub fn hflip_label(label: &LabelMap) -> LabelMap {
    let (h, w) = (label.height(), label.width());
    let data = (0..h * w).map(|i| label.data()[(i / w) * w + (w - 1 - i % w)]).collect();
    LabelMap::new(h, w, data).expect("same size")
}

/// Nearest-neighbor resize of a label map (half-pixel centers).
pub fn resize_label_nearest(label: &LabelMap, oh: usize, ow: usize) -> LabelMap {
    let (h, w) = (label.height(), label.width());
    let src = |o: usize, out: usize, input: usize| (((o as f64 + 0.5) * input as f64 / out as f64) as usize).min(input - 1);
    let mut data = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = src(y, oh, h);
        for x in 0..ow {
            data.push(label.get(sy, src(x, ow, w)));
        }
    }
    LabelMap::new(oh, ow, data).expect("sized")
}

/// Applies one random resize → flip → crop to an image (`[3, H, W]`) and its
/// labels. Crops larger than the resized sample are padded with zeros
/// (image) and `ignore_label` (labels; class 0 when there is none).
pub fn augment_sample(
    image: &Tensor<f32>,
    label: &LabelMap,
    params: &AugmentParams,
    rng: &mut Stream,
    ignore_label: Option<u8>,
) -> Result<(Tensor<f32>, LabelMap)> {
    params.validate()?;
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if label.height() != h || label.width() != w {
        return Err(Error::Shape { op: "augment_sample", detail: format!("image {}x{} vs label {}x{}", h, w, label.height(), label.width()) });
    }
    let (lo, hi) = params.resize_range;
    let scale = if lo == hi { lo } else { rng.random_range(lo..hi) };
    let nh = (libm::round(h as f64 * scale) as usize).max(1);
    let nw = (libm::round(w as f64 * scale) as usize).max(1);
    let plan = ResizePlan::new(h, w, nh, nw);
    let mut img = Tensor::new(vec![c, nh, nw], plan.forward(image.data(), c))?;
    let mut lab = if (nh, nw) == (h, w) { label.clone() } else { resize_label_nearest(label, nh, nw) };

    let flip = rng.random::<f64>() < params.flip_prob;
    if flip {
        img = hflip_image(&img);
        lab = hflip_label(&lab);
    }

    let (ch, cw) = params.crop;
    let oy = if nh > ch { rng.random_range(0..=nh - ch) } else { 0 };
    let ox = if nw > cw { rng.random_range(0..=nw - cw) } else { 0 };
    let pad_label = ignore_label.unwrap_or(0);
    let mut out = vec![0.0f32; c * ch * cw];
    let mut out_lab = vec![pad_label; ch * cw];
    for y in 0..ch.min(nh - oy) {
        for x in 0..cw.min(nw - ox) {
            for k in 0..c {
                out[(k * ch + y) * cw + x] = img.data()[(k * nh + y + oy) * nw + x + ox];
            }
            out_lab[y * cw + x] = lab.get(y + oy, x + ox);
        }
    }
    Ok((Tensor::new(vec![c, ch, cw], out)?, LabelMap::new(ch, cw, out_lab)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitStrategy {
    Random,
    Warmstart,
}

impl InitStrategy {
    pub fn name(self) -> &'static str {
        match self {
            InitStrategy::Random => "random",
            InitStrategy::Warmstart => "warmstart",
        }
    }
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(InitStrategy::Random),
            "warmstart" => Ok(InitStrategy::Warmstart),
            _ => Err(Error::InvalidArgument(format!("unknown init strategy '{}'", s))),
        }
    }
}

/// Re-initializes `g`. `Random` re-draws every parameter from `seed`;
/// `Warmstart` copies the backbone (stem and layers) from `warmstart` and
/// re-draws the head and ADON blocks.
pub fn init_parameters(
    g: &mut Generation,
    strategy: InitStrategy,
    warmstart: Option<&BTreeMap<String, Tensor<f32>>>,
    seed: u64,
) -> Result<()> {
    match (strategy, warmstart) {
        (InitStrategy::Warmstart, None) => {
            return Err(Error::InvalidArgument("warmstart initialization needs a checkpoint".into()));
        }
        (InitStrategy::Random, Some(_)) => {
            return Err(Error::InvalidArgument("random initialization takes no checkpoint".into()));
        }
        _ => {}
    }
    if let Some(src) = warmstart {
        for (name, t) in g.params().iter().filter(|(n, _)| is_backbone_param(n)) {
            match src.get(name) {
                Some(s) if s.shape() == t.shape() => {}
                Some(s) => {
                    return Err(Error::Architecture(format!(
                        "warmstart {}: checkpoint shape {:?}, model {:?}",
                        name,
                        s.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Architecture(format!("warmstart checkpoint lacks {}", name))),
            }
        }
    }
    for (name, t) in g.params_mut().iter_mut() {
        let fresh = match warmstart {
            Some(src) if is_backbone_param(name) => src[name].clone(),
            _ => init_tensor(name, t.shape(), seed),
        };
        *t = fresh;
    }
    Ok(())
}

/// Supplies conditioning probability maps during training (`step` is the
/// optimizer step) and evaluation (`step` is `None`). Implementations must not
/// mutate the models they evaluate.
pub trait ConditionSource {
    fn condition(&self, images: &Tensor<f32>, step: Option<usize>) -> Result<ProbabilityMap>;
}

impl<F> ConditionSource for F
where
    F: Fn(&Tensor<f32>, Option<usize>) -> Result<ProbabilityMap>,
{
    fn condition(&self, images: &Tensor<f32>, step: Option<usize>) -> Result<ProbabilityMap> {
        self(images, step)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub seed: u64,
    pub init_strategy: InitStrategy,
    /// Resolved by the harness; the core only sees the loaded tensors.
    pub warmstart_checkpoint: Option<String>,
    pub augment: AugmentParams,
    pub ignore_label: Option<u8>,
    /// Validate every `val_every` epochs (and after the last one); 0 disables.
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 8,
            lr0: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            poly_power: 0.9,
            seed: 0,
            init_strategy: InitStrategy::Random,
            warmstart_checkpoint: None,
            augment: AugmentParams::default(),
            ignore_label: Some(255),
            val_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be positive".into()));
        }
        if !(self.lr0 >= 0.0) || !(self.poly_power > 0.0) {
            return Err(Error::InvalidArgument(format!("lr0 {} / poly_power {} invalid", self.lr0, self.poly_power)));
        }
        self.augment.validate()
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub step_loss: Vec<f64>,
    /// `(epoch, mIoU)` after each validated epoch (1-based epochs).
    pub val_miou: Vec<(usize, f64)>,
    pub final_lr: f64,
}

const EVAL_CHUNK: usize = 16;

/// Mean IoU of `g` on `data`, conditioning through `cond` when the model needs it.
pub fn evaluate_miou(g: &Generation, data: &Dataset, cond: Option<&dyn ConditionSource>, ignore: Option<u8>) -> Result<f64> {
    let preds = predict_dataset(g, data, cond)?;
    Ok(segmentation_metrics(&preds, &data.labels(), g.num_classes(), ignore)?.miou)
}

/// Label maps of `g` over the whole dataset, in dataset order.
pub fn predict_dataset(g: &Generation, data: &Dataset, cond: Option<&dyn ConditionSource>) -> Result<Vec<LabelMap>> {
    let mut labels = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let images = data.images(chunk)?;
        let p = match (g.conditioning().needs_input(), cond) {
            (true, Some(c)) => Some(c.condition(&images, None)?),
            (true, None) => return Err(Error::Conditioning("evaluation needs a conditioning source".into())),
            (false, _) => None,
        };
        labels.extend(predict_chunked(g, &images, p.as_ref(), EVAL_CHUNK)?.labels);
    }
    Ok(labels)
}

fn order_stream(seed: u64, epoch: usize) -> Stream {
    rng::stream(rng::key(&[seed, 0x0bde]), epoch as u64)
}

fn augment_stream(seed: u64, epoch: usize, sample: usize) -> Stream {
    rng::stream(rng::key(&[seed, 0xa06, epoch as u64]), sample as u64)
}

/// Trains `g` in place with SGD + momentum under a polynomial schedule,
/// minimizing per-pixel cross-entropy. Batches, augmentation draws and
/// conditioning requests are all determined by `cfg.seed`.
pub fn train_generation(
    g: &mut Generation,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    cond: Option<&dyn ConditionSource>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    if train.num_classes() != g.num_classes() {
        return Err(Error::Architecture(format!(
            "dataset has {} classes, model {}",
            train.num_classes(),
            g.num_classes()
        )));
    }
    match (g.conditioning().needs_input(), cond.is_some()) {
        (true, false) => {
            return Err(Error::Conditioning(format!("generation {} ({}) needs a condition source", g.index(), g.conditioning())))
        }
        (false, true) => {
            return Err(Error::Conditioning(format!("generation {} ({}) takes no condition source", g.index(), g.conditioning())))
        }
        _ => {}
    }

    let n = train.len();
    let steps_per_epoch = cfg.steps_per_epoch(n);
    let total_steps = cfg.epochs * steps_per_epoch;
    let schedule = (cfg.lr0 > 0.0).then(|| LrSchedule::new(cfg.lr0, total_steps, cfg.poly_power)).transpose()?;
    let lr_at = |step: usize| schedule.map_or(0.0, |s| s.at(step));
    let mut opt = OptimizerState::new(cfg.lr0 as f32, cfg.momentum as f32, cfg.weight_decay as f32)?;
    let mut history = TrainHistory::default();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut order_stream(cfg.seed, epoch));
        for batch in order.chunks(cfg.batch_size) {
            let mut images = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &train.samples()[i];
                let mut r = augment_stream(cfg.seed, epoch, i);
                let (img, lab) = augment_sample(&s.image, &s.label, &cfg.augment, &mut r, cfg.ignore_label)?;
                images.push(img);
                labels.push(lab);
            }
            let refs: Vec<&Tensor<f32>> = images.iter().collect();
            let x = Tensor::stack(&refs)?;
            let p_prev = cond.map(|c| c.condition(&x, Some(step))).transpose()?;

            let mut graph = Graph::<f32>::new();
            let params = g.bind(&mut graph, true);
            let xv = graph.constant(x);
            let cv = p_prev.map(|p| graph.constant(p.into_tensor()));
            let logits = g.forward(&mut graph, &params, xv, cv)?;
            let probs = graph.channel_softmax(logits)?;
            let loss = graph.pixel_cross_entropy(probs, &labels, cfg.ignore_label)?;
            graph.backward(loss.loss)?;
            history.step_loss.push(graph.value(loss.loss).data()[0] as f64);

            let grads: BTreeMap<&String, Vec<f32>> = params
                .iter()
                .map(|(name, &v)| (name, graph.grad(v).map_or_else(|| vec![0.0; graph.value(v).numel()], <[f32]>::to_vec)))
                .collect();
            let lr = lr_at(step) as f32;
            let mut names_and_params: Vec<&mut Tensor<f32>> = Vec::with_capacity(grads.len());
            for (name, t) in g.params_mut().iter_mut() {
                t.set_grad(grads[name].clone())?;
                names_and_params.push(t);
            }
            opt.step(&mut names_and_params, lr)?;
            for t in names_and_params {
                t.clear_grad();
            }
            step += 1;
        }
        let last = epoch + 1 == cfg.epochs;
        if let Some(val) = val.filter(|v| !v.is_empty()) {
            if cfg.val_every > 0 && ((epoch + 1) % cfg.val_every == 0 || last) {
                history.val_miou.push((epoch + 1, evaluate_miou(g, val, cond, cfg.ignore_label)?));
            }
        }
    }
    history.final_lr = lr_at(step);
    Ok(history)
}
