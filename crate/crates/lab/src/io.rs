//! Sample files, dataset directories and the split manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use seqens_core::data::{generate_range, Dataset, Sample};

use crate::config::RunConfig;
use crate::error::{FormatError, LabError, Result};
use crate::pnm;

pub const MANIFEST: &str = "manifest.csv";
pub const DATASET_CONFIG: &str = "dataset.cfg";

fn format_err(path: &Path, e: FormatError) -> LabError {
    LabError::Format { path: path.into(), offset: e.offset, message: e.message }
}

fn image_name(index: usize) -> String {
    format!("images/{:05}.ppm", index)
}

fn label_name(index: usize) -> String {
    format!("labels/{:05}.pgm", index)
}

pub fn write_sample(dir: &Path, index: usize, sample: &Sample) -> Result<()> {
    for sub in ["images", "labels"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(LabError::io(d))?;
    }
    let img = dir.join(image_name(index));
    std::fs::write(&img, pnm::encode_ppm(&sample.image)).map_err(LabError::io(img))?;
    let lab = dir.join(label_name(index));
    std::fs::write(&lab, pnm::encode_pgm(&sample.label)).map_err(LabError::io(lab))
}

fn read_pair(image: &Path, label: &Path) -> Result<Sample> {
    let bytes = std::fs::read(image).map_err(LabError::io(image))?;
    let image_t = pnm::decode_ppm(&bytes).map_err(|e| format_err(image, e))?;
    let bytes = std::fs::read(label).map_err(LabError::io(label))?;
    let label_m = pnm::decode_pgm(&bytes).map_err(|e| format_err(label, e))?;
    if image_t.shape()[1] != label_m.height() || image_t.shape()[2] != label_m.width() {
        return Err(LabError::Format { path: label.into(), offset: 0, message: "label size differs from image".into() });
    }
    Ok(Sample { image: image_t, label: label_m })
}

pub fn read_sample(dir: &Path, index: usize) -> Result<Sample> {
    read_pair(&dir.join(image_name(index)), &dir.join(label_name(index)))
}

/// Writes every sample of `cfg.data`, the manifest and the dataset config.
pub fn write_dataset(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(LabError::io(dir))?;
    let samples = generate_range(&cfg.data, 0..cfg.data.count)?;
    let mut manifest = String::from("index,split,image_path,label_path\n");
    for (i, s) in samples.iter().enumerate() {
        write_sample(dir, i, s)?;
        let split = if i < cfg.train_count { "train" } else { "val" };
        writeln!(manifest, "{},{},{},{}", i, split, image_name(i), label_name(i)).expect("string write");
    }
    let m = dir.join(MANIFEST);
    std::fs::write(&m, manifest).map_err(LabError::io(m))?;
    let c = dir.join(DATASET_CONFIG);
    std::fs::write(&c, cfg.to_text()).map_err(LabError::io(c))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub index: usize,
    pub split: String,
    pub image: PathBuf,
    pub label: PathBuf,
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(LabError::io(&path))?;
    let bad = |line: usize, message: String| LabError::Config { path: path.clone(), line, message };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "index,split,image_path,label_path")) => {}
        _ => return Err(bad(1, "missing or wrong manifest header".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad(i + 1, format!("expected 4 fields, got {}", f.len())));
        }
        let index = f[0].parse().map_err(|_| bad(i + 1, format!("bad index '{}'", f[0])))?;
        if f[1] != "train" && f[1] != "val" {
            return Err(bad(i + 1, format!("unknown split '{}'", f[1])));
        }
        rows.push(ManifestRow { index, split: f[1].into(), image: dir.join(f[2]), label: dir.join(f[3]) });
    }
    Ok(rows)
}

/// Loads one split of a dataset directory.
pub fn read_split(dir: &Path, split: &str) -> Result<Dataset> {
    let cfg = RunConfig::load(&dir.join(DATASET_CONFIG))?;
    let samples = read_manifest(dir)?
        .iter()
        .filter(|r| r.split == split)
        .map(|r| read_pair(&r.image, &r.label))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(samples, cfg.data.num_classes)?)
}

/// Train and validation splits, from `cfg.data_dir` when set, otherwise
/// generated in memory from `cfg.data`.
pub fn load_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.data_dir {
        Some(dir) => Ok((read_split(dir, "train")?, read_split(dir, "val")?)),
        None => Ok((
            Dataset::from_spec(&cfg.data, 0..cfg.train_count)?,
            Dataset::from_spec(&cfg.data, cfg.train_count..cfg.data.count)?,
        )),
    }
}
