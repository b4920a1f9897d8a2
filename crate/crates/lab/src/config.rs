//! Flat `section.key = value` run configuration.
//!
//! Every key has a default; a file only lists the keys it changes. Lines
//! starting with `#` are comments. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use seqens_core::data::{DatasetSpec, ShapeKind};
use seqens_core::ensembling::CombineStrategy;
use seqens_core::nets::{BackboneConfig, Conditioning, Placement};
use seqens_core::training::{AugmentParams, InitStrategy, TrainConfig};

use crate::error::{LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnsembleMode {
    Sim,
    Seq,
}

impl EnsembleMode {
    pub fn name(self) -> &'static str {
        match self {
            EnsembleMode::Sim => "sim",
            EnsembleMode::Seq => "seq",
        }
    }
}

impl FromStr for EnsembleMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sim" => Ok(EnsembleMode::Sim),
            "seq" => Ok(EnsembleMode::Seq),
            _ => Err(format!("unknown ensemble mode '{}'", s)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleConfig {
    pub n: usize,
    pub mode: EnsembleMode,
    pub strategy: CombineStrategy,
    pub self_loops: usize,
    pub forest_size: usize,
    pub pool_size: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig { n: 2, mode: EnsembleMode::Seq, strategy: CombineStrategy::Uniform, self_loops: 0, forest_size: 1, pool_size: 1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DatasetSpec,
    /// The first `train_count` images train; the rest validate.
    pub train_count: usize,
    pub data_dir: Option<PathBuf>,
    /// Conditioned architecture used for generations after the first.
    pub arch: BackboneConfig,
    pub train: TrainConfig,
    pub ensemble: EnsembleConfig,
    pub num_bins: usize,
    pub grid: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DatasetSpec::default(),
            train_count: 200,
            data_dir: None,
            arch: BackboneConfig::adon(4, &[Placement::Early, Placement::Middle]),
            train: TrainConfig::default(),
            ensemble: EnsembleConfig::default(),
            num_bins: 10,
            grid: vec![0.5, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0],
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

fn list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    if v.is_empty() || v == "none" {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| s.trim().parse::<T>().map_err(|e| format!("'{}': {}", s.trim(), e))).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    if v.is_empty() {
        return "none".into();
    }
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn one<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("'{}': {}", v, e))
}

fn opt_u8(v: &str) -> std::result::Result<Option<u8>, String> {
    if v == "none" {
        Ok(None)
    } else {
        one(v).map(Some)
    }
}

fn size(v: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = v.split_once('x').ok_or_else(|| format!("'{}': expected HxW", v))?;
    Ok((one(h)?, one(w)?))
}

fn bool_value(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(format!("'{}': expected true or false", v)),
    }
}

fn core_err(e: seqens_core::Error) -> String {
    e.to_string()
}

/// Architecture keys shared by run configs and checkpoint metadata.
pub fn arch_pairs(a: &BackboneConfig) -> Vec<(&'static str, String)> {
    vec![
        ("in_channels", a.in_channels.to_string()),
        ("num_classes", a.num_classes.to_string()),
        ("layer_channels", join(&a.layer_channels)),
        ("adon_latent", a.adon_latent.to_string()),
        ("adon_placements", join(&a.adon_placements)),
        ("conditioning", a.conditioning.to_string()),
        ("embedding_size", format!("{}x{}", a.embedding_size.0, a.embedding_size.1)),
    ]
}

pub fn set_arch(a: &mut BackboneConfig, key: &str, v: &str) -> std::result::Result<bool, String> {
    match key {
        "in_channels" => a.in_channels = one(v)?,
        "num_classes" => a.num_classes = one(v)?,
        "layer_channels" => {
            let c: Vec<usize> = list(v)?;
            a.layer_channels = c.try_into().map_err(|_| format!("'{}': expected three channel counts", v))?;
        }
        "adon_latent" => a.adon_latent = one(v)?,
        "adon_placements" => a.adon_placements = list::<Placement>(v)?,
        "conditioning" => a.conditioning = Conditioning::from_str(v).map_err(core_err)?,
        "embedding_size" => a.embedding_size = size(v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl RunConfig {
    pub fn pairs(&self) -> Vec<(String, String)> {
        let d = &self.data;
        let t = &self.train;
        let e = &self.ensemble;
        let mut out: Vec<(String, String)> = Vec::new();
        let mut push = |section: &str, key: &str, value: String| out.push((format!("{}.{}", section, key), value));
        push("data", "count", d.count.to_string());
        push("data", "height", d.height.to_string());
        push("data", "width", d.width.to_string());
        push("data", "num_classes", d.num_classes.to_string());
        push("data", "shapes_min", d.shapes_per_image.0.to_string());
        push("data", "shapes_max", d.shapes_per_image.1.to_string());
        push("data", "shape_kinds", join(&d.shape_kinds.iter().map(|k| k.name()).collect::<Vec<_>>()));
        push("data", "noise_std", d.noise_std.to_string());
        push("data", "texture", d.texture.to_string());
        push("data", "seed", d.seed.to_string());
        push("data", "train_count", self.train_count.to_string());
        push("data", "dir", self.data_dir.as_ref().map_or("none".into(), |p| p.display().to_string()));
        for (k, v) in arch_pairs(&self.arch) {
            if k != "num_classes" {
                push("arch", k, v);
            }
        }
        push("train", "epochs", t.epochs.to_string());
        push("train", "batch_size", t.batch_size.to_string());
        push("train", "lr0", t.lr0.to_string());
        push("train", "momentum", t.momentum.to_string());
        push("train", "weight_decay", t.weight_decay.to_string());
        push("train", "poly_power", t.poly_power.to_string());
        push("train", "seed", t.seed.to_string());
        push("train", "init_strategy", t.init_strategy.to_string());
        push("train", "warmstart_checkpoint", t.warmstart_checkpoint.clone().unwrap_or_else(|| "none".into()));
        push("train", "flip_prob", t.augment.flip_prob.to_string());
        push("train", "resize_min", t.augment.resize_range.0.to_string());
        push("train", "resize_max", t.augment.resize_range.1.to_string());
        push("train", "crop", format!("{}x{}", t.augment.crop.0, t.augment.crop.1));
        push("train", "ignore_label", t.ignore_label.map_or("none".into(), |v| v.to_string()));
        push("train", "val_every", t.val_every.to_string());
        push("ensemble", "n", e.n.to_string());
        push("ensemble", "mode", e.mode.name().into());
        push("ensemble", "strategy", e.strategy.to_string());
        push("ensemble", "self_loops", e.self_loops.to_string());
        push("ensemble", "forest_size", e.forest_size.to_string());
        push("ensemble", "pool_size", e.pool_size.to_string());
        push("calibration", "num_bins", self.num_bins.to_string());
        push("calibration", "grid", join(&self.grid));
        push("recipe", "seeds", join(&self.seeds));
        out
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let (section, name) = key.split_once('.').ok_or_else(|| format!("key '{}' lacks a section", key))?;
        let d = &mut self.data;
        let t = &mut self.train;
        let e = &mut self.ensemble;
        match (section, name) {
            ("data", "count") => d.count = one(v)?,
            ("data", "height") => d.height = one(v)?,
            ("data", "width") => d.width = one(v)?,
            ("data", "num_classes") => d.num_classes = one(v)?,
            ("data", "shapes_min") => d.shapes_per_image.0 = one(v)?,
            ("data", "shapes_max") => d.shapes_per_image.1 = one(v)?,
            ("data", "shape_kinds") => d.shape_kinds = list::<ShapeKind>(v)?,
            ("data", "noise_std") => d.noise_std = one(v)?,
            ("data", "texture") => d.texture = bool_value(v)?,
            ("data", "seed") => d.seed = one(v)?,
            ("data", "train_count") => self.train_count = one(v)?,
            ("data", "dir") => self.data_dir = (v != "none").then(|| PathBuf::from(v)),
            ("arch", "num_classes") => return Err("arch.num_classes follows data.num_classes".into()),
            ("arch", k) => {
                if !set_arch(&mut self.arch, k, v)? {
                    return Err(format!("unknown key '{}'", key));
                }
            }
            ("train", "epochs") => t.epochs = one(v)?,
            ("train", "batch_size") => t.batch_size = one(v)?,
            ("train", "lr0") => t.lr0 = one(v)?,
            ("train", "momentum") => t.momentum = one(v)?,
            ("train", "weight_decay") => t.weight_decay = one(v)?,
            ("train", "poly_power") => t.poly_power = one(v)?,
            ("train", "seed") => t.seed = one(v)?,
            ("train", "init_strategy") => t.init_strategy = InitStrategy::from_str(v).map_err(core_err)?,
            ("train", "warmstart_checkpoint") => t.warmstart_checkpoint = (v != "none").then(|| v.to_string()),
            ("train", "flip_prob") => t.augment.flip_prob = one(v)?,
            ("train", "resize_min") => t.augment.resize_range.0 = one(v)?,
            ("train", "resize_max") => t.augment.resize_range.1 = one(v)?,
            ("train", "crop") => t.augment.crop = size(v)?,
            ("train", "ignore_label") => t.ignore_label = opt_u8(v)?,
            ("train", "val_every") => t.val_every = one(v)?,
            ("ensemble", "n") => e.n = one(v)?,
            ("ensemble", "mode") => e.mode = one(v)?,
            ("ensemble", "strategy") => e.strategy = CombineStrategy::from_str(v).map_err(core_err)?,
            ("ensemble", "self_loops") => e.self_loops = one(v)?,
            ("ensemble", "forest_size") => e.forest_size = one(v)?,
            ("ensemble", "pool_size") => e.pool_size = one(v)?,
            ("calibration", "num_bins") => self.num_bins = one(v)?,
            ("calibration", "grid") => self.grid = list(v)?,
            ("recipe", "seeds") => self.seeds = list(v)?,
            _ => return Err(format!("unknown key '{}'", key)),
        }
        Ok(())
    }

    /// Applies `text` on top of `self`; `origin` names the source in errors.
    pub fn apply(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fail = |message: String| LabError::Config { path: origin.to_path_buf(), line: i + 1, message };
            let (k, v) = line.split_once('=').ok_or_else(|| fail("expected 'section.key = value'".into()))?;
            self.set(k.trim(), v.trim()).map_err(fail)?;
        }
        self.arch.num_classes = self.data.num_classes;
        self.validate().map_err(|message| LabError::Config { path: origin.to_path_buf(), line: 0, message })
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply(text, origin)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(LabError::io(path))?;
        RunConfig::parse(&text, path)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        self.data.validate().map_err(core_err)?;
        self.train.validate().map_err(core_err)?;
        self.arch.validate().map_err(core_err)?;
        if self.train_count > self.data.count {
            return Err(format!("train_count {} exceeds data.count {}", self.train_count, self.data.count));
        }
        let e = &self.ensemble;
        if e.n == 0 || e.forest_size == 0 || e.pool_size == 0 {
            return Err("ensemble.n, forest_size and pool_size must be positive".into());
        }
        if self.seeds.is_empty() {
            return Err("recipe.seeds must not be empty".into());
        }
        Ok(())
    }

    /// Canonical text listing every key, which parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut section = String::new();
        for (k, v) in self.pairs() {
            let sec = k.split_once('.').map_or("", |p| p.0);
            if sec != section {
                if !section.is_empty() {
                    s.push('\n');
                }
                section = sec.to_string();
            }
            writeln!(s, "{} = {}", k, v).expect("string write");
        }
        s
    }

    /// Unconditioned architecture for the first generation.
    pub fn base_arch(&self) -> BackboneConfig {
        BackboneConfig {
            adon_placements: Vec::new(),
            conditioning: Conditioning::None,
            num_classes: self.data.num_classes,
            ..self.arch.clone()
        }
    }

    /// Architecture for generations after the first.
    pub fn conditioned_arch(&self) -> BackboneConfig {
        BackboneConfig { num_classes: self.data.num_classes, ..self.arch.clone() }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train.clone() }
    }

    pub fn augment(&self) -> AugmentParams {
        self.train.augment
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let c = RunConfig::default();
        let back = RunConfig::parse(&c.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, c);
        let custom = RunConfig::parse("train.epochs = 3\narch.adon_placements = late\ndata.shape_kinds = disk,rectangle\n", Path::new("x")).unwrap();
        assert_eq!(RunConfig::parse(&custom.to_text(), Path::new("x")).unwrap(), custom);
        assert_eq!(custom.train.epochs, 3);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let e = RunConfig::parse("# ok\ntrain.epochz = 3\n", Path::new("c.cfg")).unwrap_err();
        assert!(matches!(e, LabError::Config { line: 2, .. }), "{}", e);
        assert!(RunConfig::parse("train.epochs 3", Path::new("c")).is_err());
        assert!(RunConfig::parse("train.epochs = three", Path::new("c")).is_err());
        assert!(RunConfig::parse("bogus.key = 1", Path::new("c")).is_err());
        assert!(RunConfig::parse("data.train_count = 400", Path::new("c")).is_err());
    }
}
