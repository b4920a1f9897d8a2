//! Combination rules for simple ensembles, sequential chains with
//! self-refinement, forests of chains and generalized (pool) conditioning.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nets::{build_generation, BackboneConfig, Conditioning, Generation, PredictionBundle};
use crate::rng;
use crate::tensor::{LabelMap, ProbabilityMap, Tensor};
use crate::training::{init_parameters, train_generation, ConditionSource, InitStrategy, TrainConfig, TrainHistory};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CombineStrategy {
    #[default]
    Uniform,
    /// Per-pixel weights proportional to each member's max probability.
    ConfidenceWeighted,
    /// Per-pixel, per-class median; `renormalize` rescales each pixel to sum one.
    Median { renormalize: bool },
    /// One-hot of the most frequent member argmax, ties to the lowest class.
    Vote,
}

impl CombineStrategy {
    pub const ALL: [CombineStrategy; 4] = [
        CombineStrategy::Uniform,
        CombineStrategy::ConfidenceWeighted,
        CombineStrategy::Median { renormalize: true },
        CombineStrategy::Vote,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CombineStrategy::Uniform => "uniform",
            CombineStrategy::ConfidenceWeighted => "weighted",
            CombineStrategy::Median { renormalize: true } => "median",
            CombineStrategy::Median { renormalize: false } => "median_raw",
            CombineStrategy::Vote => "vote",
        }
    }
}

impl fmt::Display for CombineStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CombineStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "uniform" => CombineStrategy::Uniform,
            "weighted" | "confidence_weighted" => CombineStrategy::ConfidenceWeighted,
            "median" => CombineStrategy::Median { renormalize: true },
            "median_raw" => CombineStrategy::Median { renormalize: false },
            "vote" => CombineStrategy::Vote,
            _ => return Err(Error::InvalidArgument(format!("unknown combine strategy '{}'", s))),
        })
    }
}

/// Merges member probability maps pixel by pixel.
pub fn combine(maps: &[ProbabilityMap], strategy: CombineStrategy) -> Result<ProbabilityMap> {
    let first = maps.first().ok_or(Error::Empty("combine inputs"))?;
    if let Some(m) = maps.iter().find(|m| m.shape() != first.shape()) {
        return Err(Error::Shape { op: "combine", detail: format!("{:?} vs {:?}", m.shape(), first.shape()) });
    }
    let [n, c, h, w] = first.dims();
    let hw = h * w;
    let mut out = vec![0.0f32; n * c * hw];
    let mut column = vec![0.0f64; maps.len()];
    let mut acc = vec![0.0f64; c];
    for b in 0..n {
        for p in 0..hw {
            let at = |k: usize| (b * c + k) * hw + p;
            let value = |m: &ProbabilityMap, k: usize| m.tensor().data()[at(k)] as f64;
            match strategy {
                CombineStrategy::Uniform => {
                    for (k, a) in acc.iter_mut().enumerate() {
                        *a = maps.iter().map(|m| value(m, k)).sum::<f64>() / maps.len() as f64;
                    }
                }
                CombineStrategy::ConfidenceWeighted => {
                    for (i, m) in maps.iter().enumerate() {
                        column[i] = (0..c).map(|k| value(m, k)).fold(f64::MIN, f64::max);
                    }
                    let total: f64 = column.iter().sum();
                    for (k, a) in acc.iter_mut().enumerate() {
                        *a = maps.iter().zip(&column).map(|(m, wt)| wt * value(m, k)).sum::<f64>() / total;
                    }
                }
                CombineStrategy::Median { renormalize } => {
                    for (k, a) in acc.iter_mut().enumerate() {
                        for (i, m) in maps.iter().enumerate() {
                            column[i] = value(m, k);
                        }
                        *a = median(&mut column);
                    }
                    if renormalize {
                        let s: f64 = acc.iter().sum();
                        if s > 0.0 {
                            acc.iter_mut().for_each(|a| *a /= s);
                        } else {
                            acc.iter_mut().for_each(|a| *a = 1.0 / c as f64);
                        }
                    }
                }
                CombineStrategy::Vote => {
                    let mut votes = vec![0usize; c];
                    for m in maps {
                        votes[argmax((0..c).map(|k| value(m, k)))] += 1;
                    }
                    let winner = argmax(votes.iter().map(|&v| v as f64));
                    for (k, a) in acc.iter_mut().enumerate() {
                        *a = if k == winner { 1.0 } else { 0.0 };
                    }
                }
            }
            for (k, &a) in acc.iter().enumerate() {
                out[at(k)] = a as f32;
            }
        }
    }
    ProbabilityMap::from_tensor(Tensor::new(first.shape().to_vec(), out)?)
}

/// First index of the maximum.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Middle value; the mean of the two middle values for even lengths.
fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// A sequential ensemble `G_0 → G_1 → … → G_{N-1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Chain {
    generations: Vec<Generation>,
    pub self_loops: usize,
}

impl Chain {
    pub fn new(generations: Vec<Generation>, self_loops: usize) -> Result<Self> {
        if generations.is_empty() {
            return Err(Error::Empty("chain"));
        }
        for (i, g) in generations.iter().enumerate() {
            if g.index() != i {
                return Err(Error::Conditioning(format!("chain position {} holds generation {}", i, g.index())));
            }
            if (i == 0) != (g.conditioning() == Conditioning::None) {
                return Err(Error::Conditioning(format!("generation {} has conditioning '{}'", i, g.conditioning())));
            }
            if g.num_classes() != generations[0].num_classes() {
                return Err(Error::Architecture(format!("generation {} class count differs", i)));
            }
        }
        Ok(Chain { generations, self_loops })
    }

    pub fn generations(&self) -> &[Generation] {
        &self.generations
    }

    pub fn len(&self) -> usize {
        self.generations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.generations.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.generations[0].num_classes()
    }

    pub fn into_generations(self) -> Vec<Generation> {
        self.generations
    }

    /// The first `n` generations without self-loops.
    pub fn prefix(&self, n: usize) -> Result<Chain> {
        Chain::new(self.generations[..n.min(self.len())].to_vec(), 0)
    }
}

fn step(g: &Generation, image: &Tensor<f32>, prev: Option<&PredictionBundle>) -> Result<PredictionBundle> {
    let cond = if g.conditioning().needs_input() { prev.map(|b| &b.probs) } else { None };
    g.predict(image, cond)
}

/// Bundles of every generation in order, followed by `self_loops` re-applications
/// of the last generation to its own output. The last bundle is the answer.
pub fn chain_predict(chain: &Chain, image: &Tensor<f32>) -> Result<Vec<PredictionBundle>> {
    let mut out: Vec<PredictionBundle> = Vec::with_capacity(chain.len() + chain.self_loops);
    for g in &chain.generations {
        let b = step(g, image, out.last())?;
        out.push(b);
    }
    let last = chain.generations.last().expect("nonempty");
    for _ in 0..chain.self_loops {
        let b = step(last, image, out.last())?;
        out.push(b);
    }
    Ok(out)
}

/// Final bundle of `chain_predict`, evaluated in chunks of `chunk` images.
pub fn chain_final(chain: &Chain, images: &Tensor<f32>, chunk: usize) -> Result<PredictionBundle> {
    let [n, _, _, _] = images.dims4()?;
    let chunk = chunk.max(1);
    let mut logits = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let img = crate::nets::slice_batch(images, start, end)?;
        logits.push(chain_predict(chain, &img)?.pop().expect("nonempty").logits);
        start = end;
    }
    let refs: Vec<&Tensor<f32>> = logits.iter().collect();
    PredictionBundle::from_logits(Tensor::cat_batch(&refs)?)
}

/// Several independently trained chains whose final maps are combined.
#[derive(Clone, Debug, PartialEq)]
pub struct Forest {
    chains: Vec<Chain>,
}

impl Forest {
    pub fn new(chains: Vec<Chain>) -> Result<Self> {
        let first = chains.first().ok_or(Error::Empty("forest"))?;
        if chains.iter().any(|c| c.num_classes() != first.num_classes()) {
            return Err(Error::Architecture("forest chains differ in class count".into()));
        }
        Ok(Forest { chains })
    }

    pub fn chains(&self) -> &[Chain] {
        &self.chains
    }
}

/// Combines each chain's final probability map. The returned bundle carries
/// the combined map with logits set to its natural log.
pub fn forest_predict(forest: &Forest, image: &Tensor<f32>, strategy: CombineStrategy) -> Result<PredictionBundle> {
    let finals = forest
        .chains
        .iter()
        .map(|c| Ok(chain_predict(c, image)?.pop().expect("nonempty").probs))
        .collect::<Result<Vec<_>>>()?;
    bundle_from_probs(combine(&finals, strategy)?)
}

/// Wraps a probability map as a bundle (logits = ln p, floored at 1e-12).
pub fn bundle_from_probs(probs: ProbabilityMap) -> Result<PredictionBundle> {
    let t = probs.tensor();
    let logits = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&p| libm::logf(p.max(1e-12))).collect())?;
    let labels: Vec<LabelMap> = probs.argmax_labels();
    Ok(PredictionBundle { logits, probs, labels })
}

/// Conditioning source that runs a frozen chain prefix.
pub struct ChainSource<'a> {
    chain: &'a Chain,
}

impl<'a> ChainSource<'a> {
    pub fn new(chain: &'a Chain) -> Self {
        ChainSource { chain }
    }
}

impl ConditionSource for ChainSource<'_> {
    fn condition(&self, images: &Tensor<f32>, _step: Option<usize>) -> Result<ProbabilityMap> {
        Ok(chain_predict(self.chain, images)?.pop().expect("nonempty").probs)
    }
}

/// Builds generation `index` from `arch` and `cfg`: parameters drawn from
/// `cfg.seed`, or the backbone copied from `warmstart` when requested.
pub fn prepare_generation(
    arch: &BackboneConfig,
    cfg: &TrainConfig,
    index: usize,
    warmstart: Option<&BTreeMap<String, Tensor<f32>>>,
) -> Result<Generation> {
    let mut g = build_generation(arch, cfg.seed, index)?;
    if cfg.init_strategy == InitStrategy::Warmstart {
        init_parameters(&mut g, InitStrategy::Warmstart, warmstart, cfg.seed)?;
    }
    Ok(g)
}

/// Trains `G_0` unconditioned and each later generation conditioned on the
/// frozen chain before it.
pub fn train_chain(
    train: &Dataset,
    val: Option<&Dataset>,
    configs: &[TrainConfig],
    archs: &[BackboneConfig],
    warmstart: Option<&BTreeMap<String, Tensor<f32>>>,
) -> Result<(Chain, Vec<TrainHistory>)> {
    if configs.len() != archs.len() || configs.is_empty() {
        return Err(Error::InvalidArgument(format!("{} configs for {} architectures", configs.len(), archs.len())));
    }
    let mut gens: Vec<Generation> = Vec::with_capacity(configs.len());
    let mut histories = Vec::with_capacity(configs.len());
    for (i, (cfg, arch)) in configs.iter().zip(archs).enumerate() {
        let mut g = prepare_generation(arch, cfg, i, warmstart)?;
        let history = if i == 0 {
            train_generation(&mut g, train, val, cfg, None)?
        } else {
            let prefix = Chain::new(gens.clone(), 0)?;
            let source = ChainSource::new(&prefix);
            let cond: Option<&dyn ConditionSource> = g.conditioning().needs_input().then_some(&source as _);
            train_generation(&mut g, train, val, cfg, cond)?
        };
        gens.push(g);
        histories.push(history);
    }
    Ok((Chain::new(gens, 0)?, histories))
}

/// Conditioning source drawing a pool member uniformly per training step;
/// evaluation uses member 0.
pub struct PoolSource<'a> {
    pool: &'a [Generation],
    seed: u64,
}

const POOL_STREAM: u64 = 0x9001;

/// Pool member supplying the condition at training `step`.
pub fn pool_draw(seed: u64, step: usize, pool_size: usize) -> usize {
    rng::stream(rng::key(&[seed, POOL_STREAM]), step as u64).random_range(0..pool_size)
}

impl<'a> PoolSource<'a> {
    pub fn new(pool: &'a [Generation], seed: u64) -> Result<Self> {
        let first = pool.first().ok_or(Error::Empty("generalization pool"))?;
        for g in pool {
            if g.conditioning() != Conditioning::None {
                return Err(Error::Conditioning(format!("pool member {} is conditioned", g.index())));
            }
            if g.num_classes() != first.num_classes() {
                return Err(Error::Architecture("pool members differ in class count".into()));
            }
        }
        Ok(PoolSource { pool, seed })
    }
}

impl ConditionSource for PoolSource<'_> {
    fn condition(&self, images: &Tensor<f32>, step: Option<usize>) -> Result<ProbabilityMap> {
        let i = step.map_or(0, |s| pool_draw(self.seed, s, self.pool.len()));
        Ok(self.pool[i].predict(images, None)?.probs)
    }
}

/// Trains one `G_1` conditioned on a randomly chosen pool member at each step.
pub fn train_generalized(
    pool: &[Generation],
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    arch: &BackboneConfig,
) -> Result<(Generation, TrainHistory)> {
    let source = PoolSource::new(pool, cfg.seed)?;
    if arch.num_classes != pool[0].num_classes() {
        return Err(Error::Architecture("generalized generation class count differs from pool".into()));
    }
    let mut g = prepare_generation(arch, cfg, 1, None)?;
    let cond: Option<&dyn ConditionSource> = g.conditioning().needs_input().then_some(&source as _);
    let history = train_generation(&mut g, train, val, cfg, cond)?;
    Ok((g, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSpec;
    use crate::nets::Placement;
    use crate::training::AugmentParams;

    fn pm(c: usize, vals: &[f32]) -> ProbabilityMap {
        ProbabilityMap::from_tensor(Tensor::new(vec![1, c, 1, vals.len() / c], vals.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn uniform_and_singletons() {
        let out = combine(&[pm(2, &[0.8, 0.2]), pm(2, &[0.6, 0.4])], CombineStrategy::Uniform).unwrap();
        assert!((out.tensor().data()[0] - 0.7).abs() < 1e-7 && (out.tensor().data()[1] - 0.3).abs() < 1e-7);
        let one = pm(3, &[0.2, 0.5, 0.3]);
        for s in CombineStrategy::ALL {
            let r = combine(&[one.clone()], s).unwrap();
            if s == CombineStrategy::Vote {
                assert_eq!(r.tensor().data(), &[0.0, 1.0, 0.0]);
            } else {
                assert!(r.tensor().max_abs_diff(one.tensor()).unwrap() < 1e-7, "{}", s);
            }
        }
        assert_eq!(combine(&[], CombineStrategy::Uniform), Err(Error::Empty("combine inputs")));
        assert!(combine(&[one, pm(2, &[0.5, 0.5])], CombineStrategy::Uniform).is_err());
    }

    #[test]
    fn median_picks_middle() {
        let maps = [pm(2, &[0.2, 0.8]), pm(2, &[0.9, 0.1]), pm(2, &[0.5, 0.5])];
        let raw = combine(&maps, CombineStrategy::Median { renormalize: false }).unwrap();
        assert_eq!(raw.tensor().data(), &[0.5, 0.5]);
        let maps = [pm(2, &[0.2, 0.8]), pm(2, &[0.9, 0.1]), pm(2, &[0.5, 0.4])];
        let raw = combine(&maps, CombineStrategy::Median { renormalize: false }).unwrap();
        assert_eq!(raw.tensor().data(), &[0.5, 0.4]);
        let norm = combine(&maps, CombineStrategy::Median { renormalize: true }).unwrap();
        assert!((norm.tensor().data()[0] - 5.0 / 9.0).abs() < 1e-7);
    }

    #[test]
    fn vote_and_weighting() {
        let maps = [pm(3, &[0.6, 0.3, 0.1]), pm(3, &[0.1, 0.5, 0.4]), pm(3, &[0.1, 0.2, 0.7])];
        assert_eq!(combine(&maps, CombineStrategy::Vote).unwrap().tensor().data(), &[1.0, 0.0, 0.0]);
        let maps = [pm(2, &[0.9, 0.1]), pm(2, &[0.4, 0.6])];
        let w = combine(&maps, CombineStrategy::ConfidenceWeighted).unwrap();
        let expect = (0.9 * 0.9 + 0.6 * 0.4) / 1.5;
        assert!((w.tensor().data()[0] as f64 - expect).abs() < 1e-7);
    }

    fn small_arch(conditioning: Conditioning, placements: &[Placement]) -> BackboneConfig {
        BackboneConfig {
            layer_channels: [4, 8, 8],
            adon_latent: 4,
            embedding_size: (16, 16),
            ..BackboneConfig::default().with_conditioning(conditioning, placements)
        }
    }

    fn images(n: usize) -> Tensor<f32> {
        let mut r = rng::stream(5, 5);
        Tensor::from_fn(&[n, 3, 16, 16], |_| r.random_range(0.0..1.0))
    }

    #[test]
    fn chain_lengths_and_identity() {
        let g0 = build_generation(&small_arch(Conditioning::None, &[]), 1, 0).unwrap();
        let g1 = build_generation(&small_arch(Conditioning::Adon, &[Placement::Middle]), 2, 1).unwrap();
        let x = images(2);
        let single = chain_predict(&Chain::new(vec![g0.clone()], 0).unwrap(), &x).unwrap();
        assert_eq!(single, vec![g0.predict(&x, None).unwrap()]);
        let mut chain = Chain::new(vec![g0.clone(), g1.clone()], 0).unwrap();
        let plain = chain_predict(&chain, &x).unwrap();
        assert_eq!(plain.len(), 2);
        assert_eq!(plain[1].logits, g1.logits_bypassing_adon(&x, Some(&plain[0].probs)).unwrap());
        chain.self_loops = 3;
        let looped = chain_predict(&chain, &x).unwrap();
        assert_eq!(looped.len(), 5);
        assert_eq!(&looped[..2], &plain[..]);
        assert!(Chain::new(vec![g1.clone()], 0).is_err());
        assert!(Chain::new(vec![g0, g1.clone(), g1], 0).is_err());
    }

    #[test]
    fn forest_cases() {
        let g0 = build_generation(&small_arch(Conditioning::None, &[]), 1, 0).unwrap();
        let h0 = build_generation(&small_arch(Conditioning::None, &[]), 2, 0).unwrap();
        let x = images(1);
        let c = Chain::new(vec![g0.clone()], 0).unwrap();
        let one = forest_predict(&Forest::new(vec![c.clone()]).unwrap(), &x, CombineStrategy::Uniform).unwrap();
        let direct = g0.predict(&x, None).unwrap();
        assert!(one.probs.tensor().max_abs_diff(direct.probs.tensor()).unwrap() < 1e-7);
        assert_eq!(one.labels, direct.labels);
        let many = forest_predict(&Forest::new(vec![c.clone(); 4]).unwrap(), &x, CombineStrategy::Uniform).unwrap();
        assert!(many.probs.tensor().max_abs_diff(direct.probs.tensor()).unwrap() < 1e-7);
        let two = Forest::new(vec![c, Chain::new(vec![h0.clone()], 0).unwrap()]).unwrap();
        let sim = combine(&[direct.probs, h0.predict(&x, None).unwrap().probs], CombineStrategy::Uniform).unwrap();
        assert_eq!(forest_predict(&two, &x, CombineStrategy::Uniform).unwrap().probs, sim);
        assert!(Forest::new(vec![]).is_err());
    }

    fn quick_cfg(seed: u64) -> TrainConfig {
        TrainConfig { epochs: 1, batch_size: 4, seed, augment: AugmentParams::identity(16, 16), val_every: 0, ..Default::default() }
    }

    #[test]
    fn chain_training_freezes_prefix() {
        let data = Dataset::from_spec(&DatasetSpec { count: 4, height: 16, width: 16, ..Default::default() }, 0..4).unwrap();
        let archs = [small_arch(Conditioning::None, &[]), small_arch(Conditioning::Adon, &[Placement::Late])];
        let cfgs = [quick_cfg(1), quick_cfg(2)];
        let (single, _) = train_chain(&data, None, &cfgs[..1], &archs[..1], None).unwrap();
        let (chain, hist) = train_chain(&data, None, &cfgs, &archs, None).unwrap();
        assert_eq!(hist.len(), 2);
        assert_eq!(chain.generations()[0], single.generations()[0]);
        let mut g0 = build_generation(&archs[0], 1, 0).unwrap();
        train_generation(&mut g0, &data, None, &cfgs[0], None).unwrap();
        assert_eq!(g0, single.generations()[0]);

        let pool = vec![single.generations()[0].clone()];
        let (g1, _) = train_generalized(&pool, &data, None, &cfgs[1], &archs[1]).unwrap();
        assert_eq!(&g1, &chain.generations()[1]);
        assert!(train_generalized(&[], &data, None, &cfgs[1], &archs[1]).is_err());
    }

    #[test]
    fn pool_draws_are_seeded() {
        let a: Vec<usize> = (0..50).map(|s| pool_draw(3, s, 4)).collect();
        let b: Vec<usize> = (0..50).map(|s| pool_draw(3, s, 4)).collect();
        assert_eq!(a, b);
        assert!((0..4).all(|k| a.contains(&k)));
    }
}
