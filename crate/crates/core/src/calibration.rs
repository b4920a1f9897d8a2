//! Temperature scaling, expected calibration error and confidence histograms.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::ensembling::{combine, CombineStrategy};
use crate::error::{Error, Result};
use crate::tensor::{channel_softmax, LabelMap, ProbabilityMap, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationConfig {
    pub num_bins: usize,
    /// Strictly positive, ascending.
    pub temperature_grid: Vec<f64>,
    pub ignore_label: Option<u8>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            num_bins: 10,
            temperature_grid: vec![0.5, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0],
            ignore_label: Some(255),
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_bins == 0 {
            return Err(Error::InvalidArgument("num_bins must be at least 1".into()));
        }
        let g = &self.temperature_grid;
        if g.iter().any(|&t| !(t > 0.0 && t.is_finite())) || g.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!("temperature grid {:?} must be positive and strictly ascending", g)));
        }
        Ok(())
    }
}

/// `channel_softmax(logits / t)`.
pub fn temperature_scale(logits: &Tensor<f32>, t: f64) -> Result<ProbabilityMap> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature {} must be positive", t)));
    }
    if t == 1.0 {
        return channel_softmax(logits);
    }
    let inv = 1.0 / t;
    let scaled = Tensor::new(logits.shape().to_vec(), logits.data().iter().map(|&v| (v as f64 * inv) as f32).collect())?;
    channel_softmax(&scaled)
}

/// Index of the right-closed bin `((m)/M, (m+1)/M]` holding `conf`; zero
/// confidence falls in the first bin.
pub fn bin_index(conf: f64, num_bins: usize) -> usize {
    let m = num_bins as f64;
    let mut b = (libm::ceil(conf * m) as isize - 1).clamp(0, num_bins as isize - 1) as usize;
    while b > 0 && conf <= b as f64 / m {
        b -= 1;
    }
    while b + 1 < num_bins && conf > (b + 1) as f64 / m {
        b += 1;
    }
    b
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BinStat {
    pub count: u64,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

/// Per-bin `(count, confidence sum, correct count)` over valid pixels.
fn accumulate(probs: &[ProbabilityMap], labels: &[LabelMap], num_bins: usize, ignore: Option<u8>) -> Result<Vec<(u64, f64, u64)>> {
    let mut bins = vec![(0u64, 0.0f64, 0u64); num_bins];
    let mut label_iter = labels.iter();
    for p in probs {
        let [n, c, h, w] = p.dims();
        let hw = h * w;
        for b in 0..n {
            let gt = label_iter.next().ok_or_else(|| Error::Shape {
                op: "calibration",
                detail: format!("fewer label maps than probability items ({})", labels.len()),
            })?;
            if gt.height() != h || gt.width() != w {
                return Err(Error::Shape { op: "calibration", detail: format!("label {}x{} vs probs {}x{}", gt.height(), gt.width(), h, w) });
            }
            let d = &p.tensor().data()[b * c * hw..(b + 1) * c * hw];
            for (px, &y) in gt.data().iter().enumerate() {
                if Some(y) == ignore {
                    continue;
                }
                let mut best = 0;
                for k in 1..c {
                    if d[k * hw + px] > d[best * hw + px] {
                        best = k;
                    }
                }
                let conf = d[best * hw + px] as f64;
                let bin = &mut bins[bin_index(conf, num_bins)];
                bin.0 += 1;
                bin.1 += conf;
                bin.2 += (best == y as usize) as u64;
            }
        }
    }
    if label_iter.next().is_some() {
        return Err(Error::Shape { op: "calibration", detail: "more label maps than probability items".into() });
    }
    Ok(bins)
}

fn bin_stats(raw: &[(u64, f64, u64)]) -> Vec<BinStat> {
    raw.iter()
        .map(|&(n, s, k)| {
            if n == 0 {
                BinStat::default()
            } else {
                BinStat { count: n, mean_confidence: s / n as f64, accuracy: k as f64 / n as f64 }
            }
        })
        .collect()
}

fn ece_from_stats(stats: &[BinStat]) -> Result<f64> {
    let total: u64 = stats.iter().map(|b| b.count).sum();
    if total == 0 {
        return Err(Error::Empty("valid pixels"));
    }
    Ok(stats.iter().map(|b| b.count as f64 / total as f64 * (b.accuracy - b.mean_confidence).abs()).sum())
}

/// `probs` may hold batches; labels pair with batch items in order.
pub fn expected_calibration_error(probs: &[ProbabilityMap], labels: &[LabelMap], cfg: &CalibrationConfig) -> Result<f64> {
    cfg.validate()?;
    ece_from_stats(&bin_stats(&accumulate(probs, labels, cfg.num_bins, cfg.ignore_label)?))
}

/// Per-bin counts of correctly and incorrectly classified pixels.
pub fn confidence_histogram(probs: &[ProbabilityMap], labels: &[LabelMap], cfg: &CalibrationConfig) -> Result<(Vec<u64>, Vec<u64>)> {
    cfg.validate()?;
    let raw = accumulate(probs, labels, cfg.num_bins, cfg.ignore_label)?;
    Ok((raw.iter().map(|b| b.2).collect(), raw.iter().map(|b| b.0 - b.2).collect()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemperatureRow {
    pub temperature: f64,
    pub ece: f64,
    pub bins: Vec<BinStat>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationReport {
    pub rows: Vec<TemperatureRow>,
    pub best_t: f64,
}

impl CalibrationReport {
    pub fn ece_at(&self, t: f64) -> Option<f64> {
        self.rows.iter().find(|r| r.temperature == t).map(|r| r.ece)
    }

    pub fn best_ece(&self) -> f64 {
        self.ece_at(self.best_t).expect("best_t is a grid value")
    }
}

/// ECE for every grid temperature on cached logits `[N, C, H, W]`; the best
/// temperature minimizes ECE, ties going to the temperature nearest 1.
pub fn temperature_sweep(logits: &Tensor<f32>, labels: &[LabelMap], cfg: &CalibrationConfig) -> Result<CalibrationReport> {
    ensemble_temperature_sweep(core::slice::from_ref(logits), labels, cfg, CombineStrategy::Uniform)
}

/// [`temperature_sweep`] over the combination of several members' scaled maps.
pub fn ensemble_temperature_sweep(
    member_logits: &[Tensor<f32>],
    labels: &[LabelMap],
    cfg: &CalibrationConfig,
    strategy: CombineStrategy,
) -> Result<CalibrationReport> {
    cfg.validate()?;
    if !cfg.temperature_grid.contains(&1.0) {
        return Err(Error::InvalidArgument("temperature grid must contain 1".into()));
    }
    let mut rows = Vec::with_capacity(cfg.temperature_grid.len());
    for &t in &cfg.temperature_grid {
        let p = match member_logits {
            [one] => temperature_scale(one, t)?,
            many => calibrated_combine(many, t, strategy)?,
        };
        let bins = bin_stats(&accumulate(core::slice::from_ref(&p), labels, cfg.num_bins, cfg.ignore_label)?);
        rows.push(TemperatureRow { temperature: t, ece: ece_from_stats(&bins)?, bins });
    }
    let best = rows
        .iter()
        .min_by(|a, b| a.ece.total_cmp(&b.ece).then((a.temperature - 1.0).abs().total_cmp(&(b.temperature - 1.0).abs())))
        .ok_or(Error::Empty("temperature grid"))?;
    let best_t = best.temperature;
    Ok(CalibrationReport { rows, best_t })
}

/// Temperature-scales each member's logits, then combines.
pub fn calibrated_combine(logit_maps: &[Tensor<f32>], t: f64, strategy: CombineStrategy) -> Result<ProbabilityMap> {
    let probs = logit_maps.iter().map(|l| temperature_scale(l, t)).collect::<Result<Vec<_>>>()?;
    combine(&probs, strategy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pixels(conf_correct: &[(f32, bool)]) -> (ProbabilityMap, LabelMap) {
        let n = conf_correct.len();
        let mut d = vec![0.0f32; 2 * n];
        for (i, &(c, _)) in conf_correct.iter().enumerate() {
            d[i] = c;
            d[n + i] = 1.0 - c;
        }
        let labels = conf_correct.iter().map(|&(_, ok)| if ok { 0 } else { 1 }).collect();
        (ProbabilityMap::from_tensor(Tensor::new(vec![1, 2, 1, n], d).unwrap()).unwrap(), LabelMap::new(1, n, labels).unwrap())
    }

    fn cfg(bins: usize) -> CalibrationConfig {
        CalibrationConfig { num_bins: bins, temperature_grid: vec![1.0], ignore_label: None }
    }

    #[test]
    fn hand_ece_and_histogram() {
        let (p, l) = pixels(&[(0.9, true), (0.8, false), (0.6, true), (0.55, true)]);
        let ece = expected_calibration_error(&[p.clone()], &[l.clone()], &cfg(2)).unwrap();
        assert!((ece - 0.0375).abs() < 1e-7, "{}", ece);
        assert_eq!(confidence_histogram(&[p.clone()], &[l.clone()], &cfg(2)).unwrap(), (vec![0, 3], vec![0, 1]));
        let dup = expected_calibration_error(&[p.clone(), p], &[l.clone(), l], &cfg(2)).unwrap();
        assert_eq!(dup, ece);
    }

    #[test]
    fn perfect_and_empty() {
        let (p, l) = pixels(&[(1.0, true), (1.0, true)]);
        assert_eq!(expected_calibration_error(&[p.clone()], &[l], &cfg(10)).unwrap(), 0.0);
        let ignored = LabelMap::filled(1, 2, 7);
        let c = CalibrationConfig { ignore_label: Some(7), ..cfg(10) };
        assert_eq!(expected_calibration_error(&[p], &[ignored], &c), Err(Error::Empty("valid pixels")));
    }

    #[test]
    fn bins_are_right_closed() {
        assert_eq!(bin_index(0.5, 2), 0);
        assert_eq!(bin_index(0.5000001, 2), 1);
        assert_eq!(bin_index(1.0, 10), 9);
        assert_eq!(bin_index(0.0, 10), 0);
        assert_eq!(bin_index(0.3, 10), 2);
        assert_eq!(bin_index(0.7, 10), 6);
    }

    #[test]
    fn temperature_closed_form() {
        let l = Tensor::new(vec![1, 2, 1, 1], vec![2.0, 0.0]).unwrap();
        let p = temperature_scale(&l, 2.0).unwrap();
        assert!((p.tensor().data()[0] - 0.731_058_6).abs() < 1e-6);
        assert_eq!(temperature_scale(&l, 1.0).unwrap(), channel_softmax(&l).unwrap());
        assert!(temperature_scale(&l, 0.0).is_err());
        assert!(temperature_scale(&l, -1.0).is_err());
    }

    #[test]
    fn sweep_singleton_and_bounds() {
        let l = Tensor::new(vec![1, 2, 1, 3], vec![2.0, -1.0, 0.5, 0.0, 0.3, 0.1]).unwrap();
        let gt = LabelMap::new(1, 3, vec![0, 1, 1]).unwrap();
        let r = temperature_sweep(&l, &[gt.clone()], &cfg(10)).unwrap();
        assert_eq!(r.best_t, 1.0);
        let wide = CalibrationConfig { temperature_grid: vec![0.5, 1.0, 2.0, 4.0], ..cfg(10) };
        let r = temperature_sweep(&l, &[gt.clone()], &wide).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert!(r.best_ece() <= r.ece_at(1.0).unwrap());
        let bad = CalibrationConfig { temperature_grid: vec![2.0, 4.0], ..cfg(10) };
        assert!(temperature_sweep(&l, &[gt.clone()], &bad).is_err());
        let unsorted = CalibrationConfig { temperature_grid: vec![2.0, 1.0], ..cfg(10) };
        assert!(temperature_sweep(&l, &[gt], &unsorted).is_err());
    }

    #[test]
    fn scaling_can_flip_an_averaged_argmax() {
        // Member A is confidently class 0; member B mildly prefers class 1.
        let a = Tensor::new(vec![1, 2, 1, 1], vec![4.0, 0.0]).unwrap();
        let b = Tensor::new(vec![1, 2, 1, 1], vec![0.0, 1.0]).unwrap();
        let sm = |x: f64| 1.0 / (1.0 + libm::exp(-x));
        for t in [1.0, 8.0] {
            let p0 = 0.5 * (sm(4.0 / t) + sm(-1.0 / t));
            let got = calibrated_combine(&[a.clone(), b.clone()], t, CombineStrategy::Uniform).unwrap();
            assert!((got.tensor().data()[0] as f64 - p0).abs() < 1e-6);
        }
        // A single class-0-confident member and two mild class-1 members.
        let members = [a, b.clone(), b];
        let label = |t| calibrated_combine(&members, t, CombineStrategy::Uniform).unwrap().argmax_labels()[0].data()[0];
        let oracle = |t: f64| {
            let p0 = (sm(4.0 / t) + 2.0 * sm(-1.0 / t)) / 3.0;
            (p0 < 0.5) as u8
        };
        assert_eq!(label(0.25), oracle(0.25));
        assert_eq!(label(8.0), oracle(8.0));
        assert_ne!(oracle(0.25), oracle(8.0));
    }
}
