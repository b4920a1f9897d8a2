//! Deterministic synthetic segmentation scenes.
//!
//! Each image is a (optionally textured) background with a few filled shapes.
//! Every shape kind has a fixed class id and a color family; families overlap
//! so that color alone does not identify the class. Sample `i` depends only on
//! `(spec, i)`: all draws come from stream `i` of the generator keyed by
//! `spec.seed`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;
use core::ops::Range;
use core::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{LabelMap, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ShapeKind {
    Rectangle,
    Disk,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Rectangle, ShapeKind::Disk, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Disk => "disk",
            ShapeKind::Triangle => "triangle",
        }
    }

    /// Center of the kind's color family (RGB in [0, 1]).
    fn palette(self) -> [f64; 3] {
        match self {
            ShapeKind::Rectangle => [0.72, 0.48, 0.38],
            ShapeKind::Disk => [0.58, 0.58, 0.40],
            ShapeKind::Triangle => [0.62, 0.50, 0.58],
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown shape kind '{}'", s)))
    }
}

/// Half-width of the per-channel color jitter around a family center.
const COLOR_JITTER: f64 = 0.16;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Class 0 is background; shape kind `k` (position in `shape_kinds`) is class `k + 1`.
    pub num_classes: usize,
    pub shapes_per_image: (usize, usize),
    pub shape_kinds: Vec<ShapeKind>,
    pub noise_std: f64,
    pub texture: bool,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            count: 300,
            height: 64,
            width: 64,
            num_classes: 4,
            shapes_per_image: (1, 4),
            shape_kinds: ShapeKind::ALL.to_vec(),
            noise_std: 0.08,
            texture: true,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::InvalidArgument(m));
        if self.height == 0 || self.width == 0 {
            return bad(format!("image size {}x{} must be positive", self.height, self.width));
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return bad(format!("num_classes {} outside [2, 256]", self.num_classes));
        }
        if self.shapes_per_image.0 > self.shapes_per_image.1 {
            return bad(format!("shapes_per_image min {} > max {}", self.shapes_per_image.0, self.shapes_per_image.1));
        }
        if self.shapes_per_image.1 > 0 && self.shape_kinds.is_empty() {
            return bad("shapes requested but no shape kinds enabled".into());
        }
        let mut kinds = self.shape_kinds.clone();
        kinds.sort();
        kinds.dedup();
        if kinds.len() != self.shape_kinds.len() {
            return bad("duplicate shape kinds".into());
        }
        if self.num_classes - 1 < self.shape_kinds.len() {
            return bad(format!("{} foreground classes cannot hold {} shape kinds", self.num_classes - 1, self.shape_kinds.len()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be finite and >= 0", self.noise_std));
        }
        Ok(())
    }

    pub fn class_of(&self, kind: ShapeKind) -> Option<u8> {
        self.shape_kinds.iter().position(|&k| k == kind).map(|p| p as u8 + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Geometry {
    /// Pixels `x0..x0+w` × `y0..y0+h` (may extend past the image).
    Rect { x0: i64, y0: i64, w: i64, h: i64 },
    Disk { cx: f64, cy: f64, r: f64 },
    Triangle { verts: [(f64, f64); 3] },
}

impl Geometry {
    /// Whether the pixel whose center is `(x + ½, y + ½)` is covered.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        match *self {
            Geometry::Rect { x0, y0, w, h } => {
                let (x, y) = (x as i64, y as i64);
                x >= x0 && x < x0 + w && y >= y0 && y < y0 + h
            }
            Geometry::Disk { cx, cy, r } => (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r,
            Geometry::Triangle { verts } => {
                let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0);
                let d0 = edge(verts[0], verts[1]);
                let d1 = edge(verts[1], verts[2]);
                let d2 = edge(verts[2], verts[0]);
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeInstance {
    pub kind: ShapeKind,
    pub class: u8,
    pub color: [f64; 3],
    pub geometry: Geometry,
}

/// Everything drawn for one image before rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub background: [f64; 3],
    /// `(amplitude, frequency, angle, phase)` of the background stripes.
    pub stripes: Option<(f64, f64, f64, f64)>,
    pub shapes: Vec<ShapeInstance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: LabelMap,
}

pub fn draw_scene(spec: &DatasetSpec, index: usize) -> Result<Scene> {
    spec.validate()?;
    let mut r = rng::stream(spec.seed, index as u64);
    let background = [r.random_range(0.15..0.45), r.random_range(0.15..0.45), r.random_range(0.2..0.5)];
    let stripes = spec.texture.then(|| {
        let amp = r.random_range(0.05..0.15);
        let freq = r.random_range(0.15..0.6);
        let angle = r.random_range(0.0..PI);
        let phase = r.random_range(0.0..2.0 * PI);
        (amp, freq, angle, phase)
    });
    let (lo, hi) = spec.shapes_per_image;
    let count = r.random_range(lo..=hi);
    let scale = spec.height.min(spec.width) as f64;
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = spec.shape_kinds[r.random_range(0..spec.shape_kinds.len())];
        let base = kind.palette();
        let color = core::array::from_fn(|c| (base[c] + r.random_range(-COLOR_JITTER..COLOR_JITTER)).clamp(0.0, 1.0));
        let cx = r.random_range(0.0..spec.width as f64);
        let cy = r.random_range(0.0..spec.height as f64);
        let size = r.random_range(0.10..0.24) * scale;
        let geometry = match kind {
            ShapeKind::Rectangle => {
                let aspect: f64 = r.random_range(0.6..1.6);
                let w = libm::round(2.0 * size * aspect.min(1.0)).max(2.0) as i64;
                let h = libm::round(2.0 * size / aspect.max(1.0)).max(2.0) as i64;
                Geometry::Rect { x0: (cx as i64) - w / 2, y0: (cy as i64) - h / 2, w, h }
            }
            ShapeKind::Disk => Geometry::Disk { cx, cy, r: size },
            ShapeKind::Triangle => {
                let theta = r.random_range(0.0..2.0 * PI);
                let rr = size * 1.25;
                let verts = core::array::from_fn(|k| {
                    let a = theta + 2.0 * PI * k as f64 / 3.0;
                    (cx + rr * libm::cos(a), cy + rr * libm::sin(a))
                });
                Geometry::Triangle { verts }
            }
        };
        let class = spec.class_of(kind).expect("kind enabled");
        shapes.push(ShapeInstance { kind, class, color, geometry });
    }
    Ok(Scene { background, stripes, shapes })
}

/// Renders sample `index`; later shapes occlude earlier ones.
pub fn generate_sample(spec: &DatasetSpec, index: usize) -> Result<Sample> {
    let scene = draw_scene(spec, index)?;
    let (h, w) = (spec.height, spec.width);
    let mut img = vec![0.0f64; 3 * h * w];
    let mut labels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut color = scene.background;
            if let Some((amp, freq, angle, phase)) = scene.stripes {
                let t = (x as f64 * libm::cos(angle) + y as f64 * libm::sin(angle)) * freq + phase;
                let v = amp * libm::sin(t);
                color.iter_mut().for_each(|c| *c += v);
            }
            for s in &scene.shapes {
                if s.geometry.covers(x, y) {
                    color = s.color;
                    labels[y * w + x] = s.class;
                }
            }
            for c in 0..3 {
                img[(c * h + y) * w + x] = color[c];
            }
        }
    }
    // Noise comes from a separate stream so scene draws do not depend on it.
    if spec.noise_std > 0.0 {
        let mut r = rng::stream(rng::mix(spec.seed ^ 0x6e01_5e00), index as u64);
        let normal = Normal::new(0.0, spec.noise_std).map_err(|e| Error::InvalidArgument(format!("{:?}", e)))?;
        img.iter_mut().for_each(|v| *v += normal.sample(&mut r));
    }
    let image = Tensor::new(vec![3, h, w], img.iter().map(|v| v.clamp(0.0, 1.0) as f32).collect())?;
    Ok(Sample { image, label: LabelMap::new(h, w, labels)? })
}

pub fn generate_range(spec: &DatasetSpec, range: Range<usize>) -> Result<Vec<Sample>> {
    range.map(|i| generate_sample(spec, i)).collect()
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    generate_range(spec, 0..spec.count)
}

/// A set of equally sized samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, num_classes: usize) -> Result<Self> {
        if let Some(first) = samples.first() {
            for s in &samples {
                if s.image.shape() != first.image.shape()
                    || s.image.shape()[0] != 3
                    || s.label.height() != s.image.shape()[1]
                    || s.label.width() != s.image.shape()[2]
                {
                    return Err(Error::Shape {
                        op: "dataset",
                        detail: format!("sample image {:?} / label {}x{}", s.image.shape(), s.label.height(), s.label.width()),
                    });
                }
            }
        }
        Ok(Dataset { samples, num_classes })
    }

    pub fn from_spec(spec: &DatasetSpec, range: Range<usize>) -> Result<Self> {
        Dataset::new(generate_range(spec, range)?, spec.num_classes)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn labels(&self) -> Vec<LabelMap> {
        self.samples.iter().map(|s| s.label.clone()).collect()
    }

    /// Images `indices` stacked into `[N, 3, H, W]`.
    pub fn images(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let refs: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.samples[i].image).collect();
        Tensor::stack(&refs)
    }

    pub fn all_images(&self) -> Result<Tensor<f32>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.images(&idx)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset { samples: indices.iter().map(|&i| self.samples[i].clone()).collect(), num_classes: self.num_classes }
    }
}
