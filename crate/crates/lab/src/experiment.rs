//! Trained-model bookkeeping for multi-seed experiments.
//!
//! A [`Study`] trains models on demand and caches them. Models are addressed
//! by seed group and slot; the training seed of slot `k` in group `g` is
//! `member_seed(g, k)`. Simple-ensemble member `k`, generation `k` of chain 0
//! and the fixed-embedding member `k` share that seed, so paired comparisons
//! differ only in how a model is conditioned.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use seqens_core::analysis::{segmentation_metrics, MetricsReport};
use seqens_core::data::{Dataset, DatasetSpec};
use seqens_core::ensembling::{chain_final, combine, prepare_generation, train_generalized, Chain, ChainSource, CombineStrategy};
use seqens_core::nets::{predict_chunked, BackboneConfig, Conditioning, Generation, Placement, PredictionBundle};
use seqens_core::rng;
use seqens_core::training::{train_generation, ConditionSource, InitStrategy, TrainConfig, TrainHistory};
use seqens_core::{LabelMap, ProbabilityMap, Tensor};

use crate::config::RunConfig;
use crate::error::Result;

const EVAL_CHUNK: usize = 20;
/// Slot offset between the chains of a forest.
pub const CHAIN_STRIDE: usize = 100;
const PRETRAIN_SLOT: usize = 99_999;

pub fn member_seed(group: u64, slot: usize) -> u64 {
    rng::key(&[group, slot as u64])
}

/// Worker count: `SEQENS_THREADS` when set, otherwise the machine's parallelism.
pub fn thread_count() -> usize {
    std::env::var("SEQENS_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Key {
    kind: &'static str,
    group: u64,
    slot: usize,
    arch: String,
}

fn arch_tag(a: &BackboneConfig) -> String {
    format!("{}:{:?}:{}:{:?}", a.conditioning, a.adon_placements, a.adon_latent, a.layer_channels)
}

/// Models a [`Study`] can train ahead of use.
#[derive(Clone, Debug)]
pub enum Job {
    Base { group: u64, slot: usize },
    Warm { group: u64, slot: usize },
    Fixed { group: u64, slot: usize },
    Chain { group: u64, chain: usize, len: usize, arch: BackboneConfig },
}

pub struct Study {
    cfg: RunConfig,
    train: Dataset,
    val: Dataset,
    val_images: Tensor<f32>,
    val_labels: Vec<LabelMap>,
    models: Mutex<BTreeMap<Key, Arc<Generation>>>,
    histories: Mutex<BTreeMap<String, TrainHistory>>,
}

impl Study {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let (train, val) = crate::io::load_splits(&cfg)?;
        Study::with_data(cfg, train, val)
    }

    pub fn with_data(cfg: RunConfig, train: Dataset, val: Dataset) -> Result<Self> {
        let val_images = val.all_images()?;
        let val_labels = val.labels();
        Ok(Study { cfg, train, val, val_images, val_labels, models: Mutex::default(), histories: Mutex::default() })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn val(&self) -> &Dataset {
        &self.val
    }

    pub fn val_images(&self) -> &Tensor<f32> {
        &self.val_images
    }

    pub fn val_labels(&self) -> &[LabelMap] {
        &self.val_labels
    }

    /// Training histories recorded so far, keyed by a readable model name.
    pub fn histories(&self) -> BTreeMap<String, TrainHistory> {
        self.histories.lock().expect("history lock").clone()
    }

    fn cached(&self, key: &Key, train: impl FnOnce() -> Result<(Generation, TrainHistory)>) -> Result<Arc<Generation>> {
        if let Some(g) = self.models.lock().expect("model lock").get(key) {
            return Ok(g.clone());
        }
        let (g, h) = train()?;
        let g = Arc::new(g);
        let name = format!("{}/g{}/s{}/{}", key.kind, key.group, key.slot, key.arch);
        self.histories.lock().expect("history lock").insert(name, h);
        Ok(self.models.lock().expect("model lock").entry(key.clone()).or_insert(g).clone())
    }

    /// Unconditioned model trained from scratch.
    pub fn base(&self, group: u64, slot: usize) -> Result<Arc<Generation>> {
        let key = Key { kind: "base", group, slot, arch: String::new() };
        self.cached(&key, || {
            let cfg = scratch(self.cfg.train_config(member_seed(group, slot)));
            let mut g = prepare_generation(&self.cfg.base_arch(), &cfg, 0, None)?;
            let h = train_generation(&mut g, &self.train, None, &cfg, None)?;
            Ok((g, h))
        })
    }

    /// Unconditioned model trained on an independent dataset; the shared
    /// backbone source for warm-started members.
    pub fn pretrained(&self, group: u64) -> Result<Arc<Generation>> {
        let key = Key { kind: "pretrain", group, slot: PRETRAIN_SLOT, arch: String::new() };
        self.cached(&key, || {
            let spec = DatasetSpec { seed: rng::key(&[self.cfg.data.seed, 0x9e7a]), ..self.cfg.data.clone() };
            let data = Dataset::from_spec(&spec, 0..self.cfg.train_count)?;
            let cfg = scratch(self.cfg.train_config(member_seed(group, PRETRAIN_SLOT)));
            let mut g = prepare_generation(&self.cfg.base_arch(), &cfg, 0, None)?;
            let h = train_generation(&mut g, &data, None, &cfg, None)?;
            Ok((g, h))
        })
    }

    /// Unconditioned model whose backbone starts from [`Study::pretrained`].
    pub fn warm(&self, group: u64, slot: usize) -> Result<Arc<Generation>> {
        let source = self.pretrained(group)?;
        let key = Key { kind: "warm", group, slot, arch: String::new() };
        self.cached(&key, || {
            let mut cfg = self.cfg.train_config(member_seed(group, slot));
            cfg.init_strategy = InitStrategy::Warmstart;
            let mut g = prepare_generation(&self.cfg.base_arch(), &cfg, 0, Some(source.params()))?;
            let h = train_generation(&mut g, &self.train, None, &cfg, None)?;
            Ok((g, h))
        })
    }

    /// Parameter-matched control: the conditioned architecture fed a fixed
    /// random embedding instead of predictions.
    pub fn fixed(&self, group: u64, slot: usize) -> Result<Arc<Generation>> {
        let arch = BackboneConfig { conditioning: Conditioning::FixedEmbedding, ..self.adon_arch() };
        let key = Key { kind: "fixed", group, slot, arch: arch_tag(&arch) };
        self.cached(&key, || {
            let cfg = scratch(self.cfg.train_config(member_seed(group, slot)));
            let mut g = prepare_generation(&arch, &cfg, 1, None)?;
            let h = train_generation(&mut g, &self.train, None, &cfg, None)?;
            Ok((g, h))
        })
    }

    /// The configured conditioned architecture, forced to ADON when the
    /// config names another mode.
    pub fn adon_arch(&self) -> BackboneConfig {
        let a = self.cfg.conditioned_arch();
        let placements = if a.adon_placements.is_empty() { vec![Placement::Early, Placement::Middle] } else { a.adon_placements.clone() };
        BackboneConfig { conditioning: Conditioning::Adon, adon_placements: placements, ..a }
    }

    /// Chain `chain` of group `group` with `len` generations; later
    /// generations use `arch`.
    pub fn chain(&self, group: u64, chain: usize, len: usize, arch: &BackboneConfig) -> Result<Chain> {
        let mut gens: Vec<Generation> = vec![(*self.base(group, chain * CHAIN_STRIDE)?).clone()];
        for i in 1..len {
            let slot = chain * CHAIN_STRIDE + i;
            let key = Key { kind: "gen", group, slot, arch: arch_tag(arch) };
            let prefix = Chain::new(gens.clone(), 0)?;
            let g = self.cached(&key, || {
                let cfg = scratch(self.cfg.train_config(member_seed(group, slot)));
                let mut g = prepare_generation(arch, &cfg, i, None)?;
                let source = ChainSource::new(&prefix);
                let cond: Option<&dyn ConditionSource> = g.conditioning().needs_input().then_some(&source as _);
                let h = train_generation(&mut g, &self.train, None, &cfg, cond)?;
                Ok((g, h))
            })?;
            gens.push((*g).clone());
        }
        Ok(Chain::new(gens, 0)?)
    }

    /// One conditioned generation trained on a pool of base models.
    pub fn generalized(&self, group: u64, pool_slots: &[usize], arch: &BackboneConfig) -> Result<Arc<Generation>> {
        let slot = 50_000 + pool_slots.len();
        let key = Key { kind: "generalized", group, slot, arch: format!("{}:{:?}", arch_tag(arch), pool_slots) };
        let pool = pool_slots.iter().map(|&s| self.base(group, s).map(|g| (*g).clone())).collect::<Result<Vec<_>>>()?;
        self.cached(&key, || {
            let cfg = scratch(self.cfg.train_config(member_seed(group, slot)));
            Ok(train_generalized(&pool, &self.train, None, &cfg, arch)?)
        })
    }

    /// Trains independent models concurrently on up to [`thread_count`] workers.
    pub fn prefetch(&self, jobs: &[Job]) -> Result<()> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(thread_count()).build().expect("thread pool");
        pool.install(|| {
            jobs.par_iter()
                .map(|j| match j {
                    Job::Base { group, slot } => self.base(*group, *slot).map(drop),
                    Job::Warm { group, slot } => self.warm(*group, *slot).map(drop),
                    Job::Fixed { group, slot } => self.fixed(*group, *slot).map(drop),
                    Job::Chain { group, chain, len, arch } => self.chain(*group, *chain, *len, arch).map(drop),
                })
                .collect::<Result<Vec<()>>>()
        })?;
        Ok(())
    }

    pub fn predict_member(&self, g: &Generation) -> Result<PredictionBundle> {
        Ok(predict_chunked(g, &self.val_images, None, EVAL_CHUNK)?)
    }

    /// Final bundle of the chain (including its self-loops) on the validation split.
    pub fn predict_chain(&self, chain: &Chain) -> Result<PredictionBundle> {
        Ok(chain_final(chain, &self.val_images, EVAL_CHUNK)?)
    }

    pub fn combine_members(&self, members: &[&Generation], strategy: CombineStrategy) -> Result<ProbabilityMap> {
        let maps = members.iter().map(|g| Ok(self.predict_member(g)?.probs)).collect::<Result<Vec<_>>>()?;
        Ok(combine(&maps, strategy)?)
    }

    pub fn metrics(&self, labels: &[LabelMap]) -> Result<MetricsReport> {
        Ok(segmentation_metrics(labels, &self.val_labels, self.cfg.data.num_classes, self.cfg.train.ignore_label)?)
    }

    pub fn miou_of(&self, probs: &ProbabilityMap) -> Result<f64> {
        Ok(self.metrics(&probs.argmax_labels())?.miou)
    }
}

/// Train config for a model initialized from its own seed.
fn scratch(cfg: TrainConfig) -> TrainConfig {
    TrainConfig { init_strategy: InitStrategy::Random, warmstart_checkpoint: None, ..cfg }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
