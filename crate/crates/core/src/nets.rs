//! The toy segmentation backbone, ADON conditioning blocks and the
//! conditioning variants used by later ensemble generations.
//!
//! Backbone layout (all 3×3 convolutions followed by ReLU):
//!
//! ```text
//! stem (in→c1, s1) → layer1 (c1→c1, s2) → layer2 (c1→c2, s2) → layer3 (c2→c3, s1)
//!   → head 1×1 (c3→C) → bilinear upsample to input size
//! ```
//!
//! ADON blocks modulate the output of layer1 (`early`), layer2 (`middle`) or
//! layer3 (`late`). A block maps the previous generation's probabilities,
//! resized to the feature resolution, through `F_shared` (3×3 conv C→K, ReLU,
//! 3×3 conv K→K) to a latent `e`, then predicts `σ = 1 + F_scale(e)` and
//! `β = F_bias(e)` with 1×1 convolutions and returns `σ·x + β`. The final
//! layers of `F_scale` and `F_bias` start at zero, so a fresh block is the
//! identity.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::rng;
use crate::tensor::{Graph, LabelMap, ProbabilityMap, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Placement {
    Early,
    Middle,
    Late,
}

impl Placement {
    pub const ALL: [Placement; 3] = [Placement::Early, Placement::Middle, Placement::Late];

    pub fn name(self) -> &'static str {
        match self {
            Placement::Early => "early",
            Placement::Middle => "middle",
            Placement::Late => "late",
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Placement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Placement::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ADON placement '{}'", s)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Conditioning {
    None,
    Adon,
    EarlyFusion,
    LateFusion,
    FixedEmbedding,
}

impl Conditioning {
    pub const ALL: [Conditioning; 5] = [
        Conditioning::None,
        Conditioning::Adon,
        Conditioning::EarlyFusion,
        Conditioning::LateFusion,
        Conditioning::FixedEmbedding,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Conditioning::None => "none",
            Conditioning::Adon => "adon",
            Conditioning::EarlyFusion => "early_fusion",
            Conditioning::LateFusion => "late_fusion",
            Conditioning::FixedEmbedding => "fixed_embedding",
        }
    }

    /// Whether predictions need the previous generation's probability map.
    pub fn needs_input(self) -> bool {
        matches!(self, Conditioning::Adon | Conditioning::EarlyFusion | Conditioning::LateFusion)
    }

    /// Whether the model carries ADON blocks.
    pub fn uses_adon(self) -> bool {
        matches!(self, Conditioning::Adon | Conditioning::FixedEmbedding)
    }
}

impl fmt::Display for Conditioning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Conditioning {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Conditioning::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown conditioning '{}'", s)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub layer_channels: [usize; 3],
    pub adon_latent: usize,
    /// Sorted, duplicate-free.
    pub adon_placements: Vec<Placement>,
    pub conditioning: Conditioning,
    /// Spatial size of the stored random embedding (fixed-embedding mode).
    pub embedding_size: (usize, usize),
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            num_classes: 4,
            layer_channels: [16, 32, 64],
            adon_latent: 32,
            adon_placements: Vec::new(),
            conditioning: Conditioning::None,
            embedding_size: (64, 64),
        }
    }
}

impl BackboneConfig {
    /// Default backbone with ADON blocks at `placements`.
    pub fn adon(num_classes: usize, placements: &[Placement]) -> Self {
        BackboneConfig {
            num_classes,
            adon_placements: placements.to_vec(),
            conditioning: Conditioning::Adon,
            ..Default::default()
        }
    }

    pub fn with_conditioning(mut self, conditioning: Conditioning, placements: &[Placement]) -> Self {
        self.conditioning = conditioning;
        self.adon_placements = placements.to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.layer_channels.contains(&0) {
            return Err(Error::InvalidArgument("channel counts must be positive".into()));
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(Error::InvalidArgument(format!("num_classes {} outside [2, 256]", self.num_classes)));
        }
        if self.adon_latent == 0 {
            return Err(Error::InvalidArgument("ADON latent size must be >= 1".into()));
        }
        let sorted = self.adon_placements.windows(2).all(|w| w[0] < w[1]);
        if !sorted {
            return Err(Error::InvalidArgument(format!(
                "ADON placements {:?} must be sorted and distinct",
                self.adon_placements
            )));
        }
        if self.adon_placements.is_empty() == self.conditioning.uses_adon() {
            return Err(Error::InvalidArgument(format!(
                "conditioning '{}' with placements {:?}: ADON placements are required exactly for adon and fixed_embedding",
                self.conditioning, self.adon_placements
            )));
        }
        if self.conditioning == Conditioning::FixedEmbedding && (self.embedding_size.0 == 0 || self.embedding_size.1 == 0) {
            return Err(Error::InvalidArgument("embedding size must be positive".into()));
        }
        Ok(())
    }

    fn depth_at(&self, p: Placement) -> usize {
        match p {
            Placement::Early => self.layer_channels[0],
            Placement::Middle => self.layer_channels[1],
            Placement::Late => self.layer_channels[2],
        }
    }

    /// `(name, shape)` of every parameter tensor, name-sorted.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let [c1, c2, c3] = self.layer_channels;
        let c = self.num_classes;
        let k = self.adon_latent;
        let stem_in = self.in_channels + if self.conditioning == Conditioning::EarlyFusion { c } else { 0 };
        let head_in = c3 + if self.conditioning == Conditioning::LateFusion { c } else { 0 };
        let mut out = Vec::new();
        let mut conv = |name: String, cout: usize, cin: usize, ksz: usize| {
            out.push((format!("{}.weight", name), vec![cout, cin, ksz, ksz]));
            out.push((format!("{}.bias", name), vec![cout]));
        };
        conv("stem".into(), c1, stem_in, 3);
        conv("layer1".into(), c1, c1, 3);
        conv("layer2".into(), c2, c1, 3);
        conv("layer3".into(), c3, c2, 3);
        conv("head".into(), c, head_in, 1);
        for &p in &self.adon_placements {
            let d = self.depth_at(p);
            conv(format!("adon.{}.f_shared0", p), k, c, 3);
            conv(format!("adon.{}.f_shared1", p), k, k, 3);
            conv(format!("adon.{}.f_scale", p), d, k, 1);
            conv(format!("adon.{}.f_bias", p), d, k, 1);
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Backbone parameters: everything a warm start copies.
pub fn is_backbone_param(name: &str) -> bool {
    ["stem.", "layer1.", "layer2.", "layer3."].iter().any(|p| name.starts_with(p))
}

fn is_zero_init(name: &str) -> bool {
    name.starts_with("adon.") && (name.contains(".f_scale.") || name.contains(".f_bias."))
}

/// Draws a parameter tensor from its own stream: He-uniform weights
/// (`U(-√(6/fan_in), √(6/fan_in))`), zero biases, zero ADON output layers.
pub fn init_tensor(name: &str, shape: &[usize], seed: u64) -> Tensor<f32> {
    if name.ends_with(".bias") || is_zero_init(name) {
        return Tensor::zeros(shape);
    }
    let fan_in: usize = shape[1..].iter().product();
    let bound = libm::sqrt(6.0 / fan_in as f64) as f32;
    let mut r = rng::stream(seed, rng::name_key(name));
    Tensor::from_fn(shape, |_| r.random_range(-bound..bound))
}

/// One model `G_i` of an ensemble.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    config: BackboneConfig,
    params: BTreeMap<String, Tensor<f32>>,
    fixed_embedding: Option<Tensor<f32>>,
    index: usize,
}

/// Graph handles of a generation's parameters, keyed by name.
pub type ParamVars = BTreeMap<String, Var>;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBundle {
    pub logits: Tensor<f32>,
    pub probs: ProbabilityMap,
    pub labels: Vec<LabelMap>,
}

impl PredictionBundle {
    pub fn from_logits(logits: Tensor<f32>) -> Result<Self> {
        let probs = crate::tensor::channel_softmax(&logits)?;
        let labels = probs.argmax_labels();
        Ok(PredictionBundle { logits, probs, labels })
    }
}

/// Builds generation `index` with parameters drawn deterministically from `seed`.
pub fn build_generation(config: &BackboneConfig, seed: u64, index: usize) -> Result<Generation> {
    config.validate()?;
    if (index == 0) != (config.conditioning == Conditioning::None) {
        return Err(Error::Conditioning(format!(
            "generation {} cannot use conditioning '{}' (only generation 0 is unconditioned)",
            index, config.conditioning
        )));
    }
    let params = config
        .parameter_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let t = init_tensor(&name, &shape, seed);
            (name, t)
        })
        .collect();
    let fixed_embedding = (config.conditioning == Conditioning::FixedEmbedding).then(|| {
        let (h, w) = config.embedding_size;
        random_embedding(config.num_classes, h, w, seed)
    });
    Ok(Generation { config: config.clone(), params, fixed_embedding, index })
}

/// Uniform random values normalized per pixel to sum one, `[1, C, H, W]`.
fn random_embedding(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut r = rng::stream(seed, rng::name_key("fixed_embedding"));
    let mut t = Tensor::from_fn(&[1, c, h, w], |_| r.random_range(0.0f32..1.0));
    let hw = h * w;
    let d = t.data_mut();
    for p in 0..hw {
        let s: f32 = (0..c).map(|k| d[k * hw + p]).sum();
        for k in 0..c {
            d[k * hw + p] /= s;
        }
    }
    t
}

impl Generation {
    /// Reassembles a generation from stored parts (e.g. a checkpoint).
    pub fn from_parts(
        config: BackboneConfig,
        params: BTreeMap<String, Tensor<f32>>,
        fixed_embedding: Option<Tensor<f32>>,
        index: usize,
    ) -> Result<Self> {
        config.validate()?;
        if (index == 0) != (config.conditioning == Conditioning::None) {
            return Err(Error::Conditioning(format!("generation {} with conditioning '{}'", index, config.conditioning)));
        }
        let expected = config.parameter_shapes();
        if expected.len() != params.len() {
            return Err(Error::Architecture(format!("expected {} parameter tensors, got {}", expected.len(), params.len())));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Architecture(format!("{}: shape {:?}, expected {:?}", name, t.shape(), shape)));
                }
                None => return Err(Error::Architecture(format!("missing parameter {}", name))),
            }
        }
        let wants_embedding = config.conditioning == Conditioning::FixedEmbedding;
        match &fixed_embedding {
            Some(e) if wants_embedding => {
                let (h, w) = config.embedding_size;
                if e.shape() != [1, config.num_classes, h, w] {
                    return Err(Error::Architecture(format!("fixed embedding shape {:?}", e.shape())));
                }
            }
            None if !wants_embedding => {}
            _ => return Err(Error::Architecture("fixed embedding present iff conditioning is fixed_embedding".into())),
        }
        Ok(Generation { config, params, fixed_embedding, index })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn conditioning(&self) -> Conditioning {
        self.config.conditioning
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<f32>> {
        &mut self.params
    }

    pub fn fixed_embedding(&self) -> Option<&Tensor<f32>> {
        self.fixed_embedding.as_ref()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// All parameters concatenated in name order.
    pub fn flatten_parameters(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for t in self.params.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Names of the ADON parameter groups, e.g. `adon.middle`.
    pub fn adon_groups(&self) -> Vec<String> {
        let mut groups: Vec<String> = self
            .params
            .keys()
            .filter(|n| n.starts_with("adon."))
            .map(|n| n.splitn(3, '.').take(2).collect::<Vec<_>>().join("."))
            .collect();
        groups.dedup();
        groups
    }

    /// Records every parameter as a graph leaf (cast to `R`).
    pub fn bind<R: Real>(&self, g: &mut Graph<R>, trainable: bool) -> ParamVars {
        self.params
            .iter()
            .map(|(name, t)| {
                let v = if trainable { g.param(t.cast()) } else { g.constant(t.cast()) };
                (name.clone(), v)
            })
            .collect()
    }

    fn check_input(&self, image: &[usize]) -> Result<[usize; 4]> {
        match *image {
            [n, c, h, w] if c == self.config.in_channels && n > 0 => Ok([n, c, h, w]),
            _ => Err(shape_err(
                "predict",
                format!("image shape {:?}, expected [N, {}, H, W]", image, self.config.in_channels),
            )),
        }
    }

    /// Validates a conditioning input against the image batch `[n, _, h, w]`.
    pub fn check_condition(&self, dims: [usize; 4], cond: Option<&[usize]>) -> Result<()> {
        let needs = self.config.conditioning.needs_input();
        match (needs, cond) {
            (true, None) => Err(Error::Conditioning(format!(
                "generation {} ({}) needs a conditioning probability map",
                self.index, self.config.conditioning
            ))),
            (false, Some(_)) if self.config.conditioning == Conditioning::None => Err(Error::Conditioning(format!(
                "generation {} is unconditioned but received a probability map",
                self.index
            ))),
            (true, Some(s)) => match *s {
                [n, c, _, _] if n == dims[0] && c == self.config.num_classes => Ok(()),
                _ => Err(shape_err(
                    "condition",
                    format!("probability map {:?} for batch {} with {} classes", s, dims[0], self.config.num_classes),
                )),
            },
            _ => Ok(()),
        }
    }

    /// Builds the forward pass and returns the full-resolution logits.
    /// `cond` is the previous generation's probability map (ignored in
    /// fixed-embedding mode, which uses the stored embedding).
    pub fn forward<R: Real>(&self, g: &mut Graph<R>, params: &ParamVars, image: Var, cond: Option<Var>) -> Result<Var> {
        self.forward_opts(g, params, image, cond, false)
    }

    fn forward_opts<R: Real>(
        &self,
        g: &mut Graph<R>,
        params: &ParamVars,
        image: Var,
        cond: Option<Var>,
        bypass_adon: bool,
    ) -> Result<Var> {
        let dims = self.check_input(g.value(image).shape())?;
        let [n, _, h, w] = dims;
        let cond = match self.config.conditioning {
            Conditioning::FixedEmbedding => {
                let e = self.fixed_embedding.as_ref().ok_or(Error::Conditioning("missing fixed embedding".into()))?;
                let tiled: Vec<&Tensor<f32>> = (0..n).map(|_| e).collect();
                Some(g.constant(Tensor::cat_batch(&tiled)?.cast()))
            }
            _ => {
                self.check_condition(dims, cond.map(|c| g.value(c).shape()))?;
                cond
            }
        };
        let p = |name: &str| -> Result<Var> {
            params.get(name).copied().ok_or_else(|| Error::Architecture(format!("unbound parameter {}", name)))
        };
        let conv = |g: &mut Graph<R>, name: &str, x: Var, stride: usize| -> Result<Var> {
            let w = p(&format!("{}.weight", name))?;
            let b = p(&format!("{}.bias", name))?;
            let pad = g.value(w).shape()[2] / 2;
            g.conv2d(x, w, b, stride, pad)
        };
        let adon = |g: &mut Graph<R>, site: Placement, x: Var| -> Result<Var> {
            if bypass_adon || !self.config.adon_placements.contains(&site) {
                return Ok(x);
            }
            let cond = cond.ok_or(Error::Conditioning("ADON block without conditioning input".into()))?;
            let [_, _, fh, fw] = g.value(x).dims4()?;
            let pr = g.bilinear_resize(cond, fh, fw)?;
            let e0 = conv(g, &format!("adon.{}.f_shared0", site), pr, 1)?;
            let e0 = g.relu(e0);
            let e = conv(g, &format!("adon.{}.f_shared1", site), e0, 1)?;
            let raw_scale = conv(g, &format!("adon.{}.f_scale", site), e, 1)?;
            let sigma = g.scale_shift(raw_scale, 1.0, 1.0);
            let beta = conv(g, &format!("adon.{}.f_bias", site), e, 1)?;
            g.affine_modulate(x, sigma, beta)
        };

        let mut x = image;
        if self.config.conditioning == Conditioning::EarlyFusion {
            let c = cond.ok_or(Error::Conditioning("early fusion without conditioning input".into()))?;
            let c = g.bilinear_resize(c, h, w)?;
            x = g.concat_channels(&[x, c])?;
        }
        let x = conv(g, "stem", x, 1)?;
        let x = g.relu(x);
        let x = conv(g, "layer1", x, 2)?;
        let x = g.relu(x);
        let x = adon(g, Placement::Early, x)?;
        let x = conv(g, "layer2", x, 2)?;
        let x = g.relu(x);
        let x = adon(g, Placement::Middle, x)?;
        let x = conv(g, "layer3", x, 1)?;
        let x = g.relu(x);
        let mut x = adon(g, Placement::Late, x)?;
        if self.config.conditioning == Conditioning::LateFusion {
            let c = cond.ok_or(Error::Conditioning("late fusion without conditioning input".into()))?;
            let [_, _, fh, fw] = g.value(x).dims4()?;
            let c = g.bilinear_resize(c, fh, fw)?;
            x = g.concat_channels(&[x, c])?;
        }
        let logits = conv(g, "head", x, 1)?;
        g.bilinear_resize(logits, h, w)
    }

    fn run(&self, image: &Tensor<f32>, p_prev: Option<&ProbabilityMap>, bypass_adon: bool) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let params = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let c = p_prev.map(|p| g.constant(p.tensor().clone()));
        let logits = self.forward_opts(&mut g, &params, x, c, bypass_adon)?;
        Ok(g.value(logits).clone())
    }

    /// Segments a batch `[N, in_channels, H, W]`. `p_prev` is required iff the
    /// conditioning mode consumes the previous generation's output.
    pub fn predict(&self, image: &Tensor<f32>, p_prev: Option<&ProbabilityMap>) -> Result<PredictionBundle> {
        let dims = self.check_input(image.shape())?;
        self.check_condition(dims, p_prev.map(|p| p.shape()))?;
        PredictionBundle::from_logits(self.run(image, p_prev, false)?)
    }

    /// Logits of the same parameters with every ADON block skipped.
    pub fn logits_bypassing_adon(&self, image: &Tensor<f32>, p_prev: Option<&ProbabilityMap>) -> Result<Tensor<f32>> {
        self.run(image, p_prev, true)
    }
}

/// Runs `predict` over a large batch in chunks of `chunk` images.
pub fn predict_chunked(
    g: &Generation,
    images: &Tensor<f32>,
    p_prev: Option<&ProbabilityMap>,
    chunk: usize,
) -> Result<PredictionBundle> {
    let [n, _, _, _] = images.dims4()?;
    let chunk = chunk.max(1);
    if n <= chunk {
        return g.predict(images, p_prev);
    }
    let mut logits = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let img = slice_batch(images, start, end)?;
        let cond = p_prev.map(|p| slice_batch(p.tensor(), start, end).and_then(ProbabilityMap::from_tensor)).transpose()?;
        logits.push(g.predict(&img, cond.as_ref())?.logits);
        start = end;
    }
    let refs: Vec<&Tensor<f32>> = logits.iter().collect();
    PredictionBundle::from_logits(Tensor::cat_batch(&refs)?)
}

/// Items `start..end` of the leading axis.
pub fn slice_batch<R: Real>(t: &Tensor<R>, start: usize, end: usize) -> Result<Tensor<R>> {
    let lead = t.shape()[0];
    if start > end || end > lead {
        return Err(shape_err("slice_batch", format!("{}..{} of {}", start, end, lead)));
    }
    let per = t.numel() / lead.max(1);
    let mut shape = t.shape().to_vec();
    shape[0] = end - start;
    Tensor::new(shape, t.data()[start * per..end * per].to_vec())
}

pub fn placements_to_string(p: &[Placement]) -> String {
    p.iter().map(ToString::to_string).collect::<Vec<_>>().join("+")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn image(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut r = rng::stream(seed, 99);
        Tensor::from_fn(&[n, 3, h, w], |_| r.random_range(0.0..1.0))
    }

    fn probs(n: usize, c: usize, h: usize, w: usize, seed: u64) -> ProbabilityMap {
        let mut r = rng::stream(seed, 98);
        let logits = Tensor::from_fn(&[n, c, h, w], |_| r.random_range(-3.0f32..3.0));
        crate::tensor::channel_softmax(&logits).unwrap()
    }

    #[test]
    fn default_parameter_count_closed_form() {
        // stem 16·3·9+16, layer1 16·16·9+16, layer2 32·16·9+32, layer3 64·32·9+64, head 4·64+4
        let cfg = BackboneConfig::default();
        let expected = (16 * 27 + 16) + (16 * 144 + 16) + (32 * 144 + 32) + (64 * 288 + 64) + (4 * 64 + 4);
        assert_eq!(expected, 26164);
        let g = build_generation(&cfg, 7, 0).unwrap();
        assert_eq!(g.parameter_count(), expected);
        assert_eq!(cfg.parameter_count(), expected);
        // one ADON block at `middle` (D = 32, K = 32): 32·4·9+32 + 32·32·9+32 + 2·(32·32+32)
        let adon = BackboneConfig::adon(4, &[Placement::Middle]);
        let block = (32 * 36 + 32) + (32 * 288 + 32) + 2 * (32 * 32 + 32);
        assert_eq!(build_generation(&adon, 7, 1).unwrap().parameter_count(), expected + block);
    }

    #[test]
    fn builds_are_deterministic() {
        let cfg = BackboneConfig::adon(4, &[Placement::Early, Placement::Late]);
        let a = build_generation(&cfg, 11, 1).unwrap();
        let b = build_generation(&cfg, 11, 1).unwrap();
        let c = build_generation(&cfg, 12, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.flatten_parameters(), b.flatten_parameters());
        assert_ne!(a.flatten_parameters(), c.flatten_parameters());
        assert_eq!(a.flatten_parameters().len(), a.parameter_count());
    }

    #[test]
    fn unconditioned_has_no_adon_groups() {
        let g = build_generation(&BackboneConfig::default(), 1, 0).unwrap();
        assert!(g.adon_groups().is_empty());
        let cfg = BackboneConfig::adon(4, &[Placement::Early, Placement::Middle]);
        let g = build_generation(&cfg, 1, 1).unwrap();
        assert_eq!(g.adon_groups(), vec!["adon.early".to_string(), "adon.middle".to_string()]);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = BackboneConfig::adon(4, &[]);
        assert!(build_generation(&cfg, 0, 1).is_err());
        cfg.adon_placements = vec![Placement::Late, Placement::Early];
        assert!(build_generation(&cfg, 0, 1).is_err());
        let none_with_blocks = BackboneConfig::default().with_conditioning(Conditioning::None, &[Placement::Early]);
        assert!(build_generation(&none_with_blocks, 0, 0).is_err());
        // generation 0 must be unconditioned and vice versa
        assert!(build_generation(&BackboneConfig::adon(4, &[Placement::Early]), 0, 0).is_err());
        assert!(build_generation(&BackboneConfig::default(), 0, 1).is_err());
    }

    #[test]
    fn fresh_adon_is_identity() {
        let cfg = BackboneConfig::adon(4, &[Placement::Early, Placement::Middle, Placement::Late]);
        let g = build_generation(&cfg, 3, 1).unwrap();
        let img = image(2, 16, 16, 1);
        let p = probs(2, 4, 16, 16, 2);
        let with = g.predict(&img, Some(&p)).unwrap();
        let without = g.logits_bypassing_adon(&img, Some(&p)).unwrap();
        assert_eq!(with.logits, without);
    }

    #[test]
    fn conditioning_matters_after_update() {
        let cfg = BackboneConfig::adon(4, &[Placement::Middle]);
        let mut g = build_generation(&cfg, 3, 1).unwrap();
        for (name, t) in g.params_mut().iter_mut() {
            if name.contains("f_scale.weight") || name.contains("f_bias.weight") {
                t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.01 * ((i % 7) as f32 - 3.0));
            }
        }
        let img = image(1, 16, 16, 1);
        let a = g.predict(&img, Some(&probs(1, 4, 16, 16, 5))).unwrap();
        let b = g.predict(&img, Some(&probs(1, 4, 16, 16, 6))).unwrap();
        assert_ne!(a.logits, b.logits);
    }

    #[test]
    fn uniform_condition_gives_constant_modulation() {
        // Random (nonzero) ADON weights and a constant probability map: σ and β
        // are constant on every pixel whose two-conv receptive field avoids the
        // zero padding.
        let cfg = BackboneConfig { layer_channels: [4, 4, 4], adon_latent: 4, ..BackboneConfig::adon(3, &[Placement::Late]) };
        let mut gen = build_generation(&cfg, 5, 1).unwrap();
        for (name, t) in gen.params_mut().iter_mut() {
            if name.starts_with("adon.") {
                let mut r = rng::stream(9, rng::name_key(name));
                t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
            }
        }
        let mut g = Graph::<f32>::new();
        let params = gen.bind(&mut g, false);
        let cond = g.constant(Tensor::full(&[1, 3, 16, 16], 1.0 / 3.0));
        let pr = g.bilinear_resize(cond, 8, 8).unwrap();
        let conv = |g: &mut Graph<f32>, name: &str, x: Var, pad: usize| {
            let w = params[&format!("adon.late.{}.weight", name)];
            let b = params[&format!("adon.late.{}.bias", name)];
            g.conv2d(x, w, b, 1, pad).unwrap()
        };
        let e0 = conv(&mut g, "f_shared0", pr, 1);
        let e0 = g.relu(e0);
        let e = conv(&mut g, "f_shared1", e0, 1);
        let sigma = conv(&mut g, "f_scale", e, 0);
        let beta = conv(&mut g, "f_bias", e, 0);
        for v in [sigma, beta] {
            let d = g.value(v).data();
            for ch in 0..4 {
                let reference = d[ch * 64 + 2 * 8 + 2];
                for y in 2..6 {
                    for x in 2..6 {
                        assert_eq!(d[ch * 64 + y * 8 + x], reference);
                    }
                }
            }
        }
    }

    #[test]
    fn predict_validates_conditioning() {
        let g0 = build_generation(&BackboneConfig::default(), 1, 0).unwrap();
        let img = image(1, 16, 16, 1);
        let p = probs(1, 4, 16, 16, 2);
        assert!(matches!(g0.predict(&img, Some(&p)), Err(Error::Conditioning(_))));
        let g1 = build_generation(&BackboneConfig::adon(4, &[Placement::Early]), 1, 1).unwrap();
        assert!(matches!(g1.predict(&img, None), Err(Error::Conditioning(_))));
        let wrong_c = probs(1, 3, 16, 16, 2);
        assert!(g1.predict(&img, Some(&wrong_c)).is_err());
    }

    #[test]
    fn every_mode_preserves_resolution_and_normalizes() {
        let img = image(2, 20, 12, 4);
        let p = probs(2, 4, 20, 12, 5);
        for mode in Conditioning::ALL {
            let placements: &[Placement] = if mode.uses_adon() { &[Placement::Early, Placement::Late] } else { &[] };
            let cfg = BackboneConfig {
                embedding_size: (20, 12),
                ..BackboneConfig::default().with_conditioning(mode, placements)
            };
            let index = usize::from(mode != Conditioning::None);
            let g = build_generation(&cfg, 2, index).unwrap();
            let cond = mode.needs_input().then_some(&p);
            let out = g.predict(&img, cond).unwrap();
            assert_eq!(out.logits.shape(), &[2, 4, 20, 12], "{}", mode);
            assert!(out.probs.max_sum_deviation().unwrap() < 1e-6);
            assert_eq!(out.labels.len(), 2);
        }
    }

    #[test]
    fn adon_parameters_pass_grad_check() {
        let cfg = BackboneConfig { layer_channels: [3, 3, 3], adon_latent: 3, ..BackboneConfig::adon(3, &[Placement::Middle]) };
        let mut gen = build_generation(&cfg, 8, 1).unwrap();
        for (name, t) in gen.params_mut().iter_mut() {
            if name.ends_with(".weight") {
                let mut r = rng::stream(4, rng::name_key(name));
                t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.6..0.6));
            }
        }
        let img = image(1, 8, 8, 3).cast::<f64>();
        let p = probs(1, 3, 8, 8, 3).into_tensor().cast::<f64>();
        let names: Vec<String> = gen.params().keys().filter(|n| n.contains("f_scale") || n.contains("f_bias")).cloned().collect();
        let inputs: Vec<Tensor<f64>> = names.iter().map(|n| gen.params()[n].cast()).collect();
        let err = grad_check(
            |g, vars| {
                let mut params = gen.bind(g, false);
                for (n, &v) in names.iter().zip(vars) {
                    params.insert(n.clone(), v);
                }
                let x = g.constant(img.clone());
                let c = g.constant(p.clone());
                let logits = gen.forward(g, &params, x, Some(c))?;
                let sq = g.mul(logits, logits)?;
                Ok(g.sum(sq))
            },
            &inputs,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "{}", err);
    }
}
