//! Accuracy metrics, prediction/parameter diversity and the four-case
//! error-transition table.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nets::Generation;
use crate::tensor::{LabelMap, ProbabilityMap};

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub miou: f64,
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub pixel_accuracy: f64,
    /// `confusion[gt][pred]` over valid pixels.
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    pub fn valid_pixels(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

fn check_aligned(op: &'static str, a: &[LabelMap], b: &[LabelMap]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape { op, detail: format!("{} vs {} maps", a.len(), b.len()) });
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if !x.same_dims(y) {
            return Err(Error::Shape {
                op,
                detail: format!("map {}: {}x{} vs {}x{}", i, x.height(), x.width(), y.height(), y.width()),
            });
        }
    }
    Ok(())
}

/// Confusion matrix, per-class IoU, mIoU and pixel accuracy over all pixels
/// whose ground truth differs from `ignore_label`.
pub fn segmentation_metrics(pred: &[LabelMap], gt: &[LabelMap], num_classes: usize, ignore_label: Option<u8>) -> Result<MetricsReport> {
    check_aligned("segmentation_metrics", pred, gt)?;
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    for (p, g) in pred.iter().zip(gt) {
        for (&pv, &gv) in p.data().iter().zip(g.data()) {
            if Some(gv) == ignore_label {
                continue;
            }
            for v in [gv, pv] {
                if v as usize >= num_classes {
                    return Err(Error::LabelOutOfRange { label: v, classes: num_classes });
                }
            }
            confusion[gv as usize][pv as usize] += 1;
        }
    }
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::Empty("valid pixels"));
    }
    let per_class_iou: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let tp = confusion[c][c];
            let fn_ = confusion[c].iter().sum::<u64>() - tp;
            let fp = (0..num_classes).map(|r| confusion[r][c]).sum::<u64>() - tp;
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    let trace: u64 = (0..num_classes).map(|c| confusion[c][c]).sum();
    Ok(MetricsReport { miou, per_class_iou, pixel_accuracy: trace as f64 / total as f64, confusion })
}

/// Symmetric `n×n` matrix of cosine similarities with a unit diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.n)
    }

    pub fn mean_off_diagonal(&self) -> f64 {
        if self.n < 2 {
            return 1.0;
        }
        let mut sum = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                if i != j {
                    sum += self.get(i, j);
                }
            }
        }
        sum / (self.n * (self.n - 1)) as f64
    }

    fn from_vectors<T: Copy + Into<f64>>(vectors: &[&[T]]) -> Result<Self> {
        let n = vectors.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!("similarity needs at least 2 members, got {}", n)));
        }
        let len = vectors[0].len();
        if let Some(v) = vectors.iter().find(|v| v.len() != len) {
            return Err(Error::Shape { op: "similarity", detail: format!("vector length {} vs {}", v.len(), len) });
        }
        let norms: Vec<f64> = vectors.iter().map(|v| libm::sqrt(dot(v, v))).collect();
        if let Some(i) = norms.iter().position(|&x| x == 0.0) {
            return Err(Error::InvalidArgument(format!("member {} has a zero-norm vector", i)));
        }
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
            for j in i + 1..n {
                let c = (dot(vectors[i], vectors[j]) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
                data[i * n + j] = c;
                data[j * n + i] = c;
            }
        }
        Ok(SimilarityMatrix { n, data })
    }
}

fn dot<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.into() * y.into()).sum()
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    Ok(SimilarityMatrix::from_vectors(&[a, b])?.get(0, 1))
}

/// `members[i]` holds member `i`'s probability maps over the evaluation set in
/// a fixed image order; each member's maps are flattened into one vector.
pub fn prediction_similarity_matrix(members: &[Vec<ProbabilityMap>]) -> Result<SimilarityMatrix> {
    let flat: Vec<Vec<f32>> = members
        .iter()
        .map(|maps| maps.iter().flat_map(|m| m.tensor().data().iter().copied()).collect())
        .collect();
    let refs: Vec<&[f32]> = flat.iter().map(Vec::as_slice).collect();
    SimilarityMatrix::from_vectors(&refs)
}

pub fn parameter_similarity_matrix(members: &[Generation]) -> Result<SimilarityMatrix> {
    if let Some(first) = members.first() {
        let shapes = first.config().parameter_shapes();
        if let Some(m) = members.iter().find(|m| m.config().parameter_shapes() != shapes) {
            return Err(Error::Architecture(format!("generation {} differs in architecture", m.index())));
        }
    }
    let flat: Vec<Vec<f32>> = members.iter().map(Generation::flatten_parameters).collect();
    let refs: Vec<&[f32]> = flat.iter().map(Vec::as_slice).collect();
    SimilarityMatrix::from_vectors(&refs)
}

/// Pixel counts by correctness of two predictors, `[g0 right][g1 right]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FourCaseTable {
    pub both_correct: u64,
    pub only_first_correct: u64,
    pub only_second_correct: u64,
    pub both_wrong: u64,
}

impl FourCaseTable {
    pub fn total(&self) -> u64 {
        self.both_correct + self.only_first_correct + self.only_second_correct + self.both_wrong
    }

    pub fn counts(&self) -> [u64; 4] {
        [self.both_correct, self.only_first_correct, self.only_second_correct, self.both_wrong]
    }

    /// Fractions in the order of [`FourCaseTable::counts`]; zeros when empty.
    pub fn fractions(&self) -> [f64; 4] {
        let t = self.total();
        if t == 0 {
            return [0.0; 4];
        }
        self.counts().map(|c| c as f64 / t as f64)
    }
}

pub fn four_case_table(p0: &[LabelMap], p1: &[LabelMap], gt: &[LabelMap], ignore_label: Option<u8>) -> Result<FourCaseTable> {
    check_aligned("four_case_table", p0, gt)?;
    check_aligned("four_case_table", p1, gt)?;
    let mut t = FourCaseTable::default();
    for ((a, b), g) in p0.iter().zip(p1).zip(gt) {
        for ((&x, &y), &z) in a.data().iter().zip(b.data()).zip(g.data()) {
            if Some(z) == ignore_label {
                continue;
            }
            match (x == z, y == z) {
                (true, true) => t.both_correct += 1,
                (true, false) => t.only_first_correct += 1,
                (false, true) => t.only_second_correct += 1,
                (false, false) => t.both_wrong += 1,
            }
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn lm(h: usize, w: usize, d: &[u8]) -> LabelMap {
        LabelMap::new(h, w, d.to_vec()).unwrap()
    }

    #[test]
    fn hand_confusion() {
        let r = segmentation_metrics(&[lm(2, 2, &[0, 1, 1, 1])], &[lm(2, 2, &[0, 0, 1, 1])], 2, None).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((r.miou - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(r.pixel_accuracy, 0.75);
        assert_eq!(r.confusion, vec![vec![1, 1], vec![0, 2]]);
    }

    #[test]
    fn perfect_inverted_and_absent() {
        let gt = lm(1, 4, &[0, 1, 1, 0]);
        let r = segmentation_metrics(&[gt.clone()], &[gt.clone()], 4, None).unwrap();
        assert_eq!((r.miou, r.pixel_accuracy), (1.0, 1.0));
        assert_eq!(r.per_class_iou[2], None);
        let inv = lm(1, 4, &[1, 0, 0, 1]);
        assert_eq!(segmentation_metrics(&[inv], &[gt.clone()], 2, None).unwrap().miou, 0.0);
        let all_ignored = lm(1, 4, &[255; 4]);
        assert_eq!(segmentation_metrics(&[gt], &[all_ignored], 2, Some(255)), Err(Error::Empty("valid pixels")));
    }

    #[test]
    fn cosine_hand_cases() {
        let s = core::f32::consts::FRAC_1_SQRT_2;
        assert!((cosine_similarity(&[1.0, 0.0], &[s, s]).unwrap() - core::f64::consts::FRAC_1_SQRT_2).abs() < 1e-7);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        let a = ProbabilityMap::from_tensor(Tensor::new(vec![1, 2, 1, 1], vec![0.3, 0.7]).unwrap()).unwrap();
        let m = prediction_similarity_matrix(&[vec![a.clone()], vec![a.clone()], vec![a]]).unwrap();
        assert!(m.rows().flatten().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(prediction_similarity_matrix(&[vec![]]).is_err());
    }

    #[test]
    fn parameter_self_and_negation() {
        let cfg = crate::nets::BackboneConfig { layer_channels: [4, 4, 4], ..Default::default() };
        let g = crate::nets::build_generation(&cfg, 1, 0).unwrap();
        let mut neg = g.clone();
        for t in neg.params_mut().values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = -*v);
        }
        let m = parameter_similarity_matrix(&[g.clone(), g.clone(), neg]).unwrap();
        assert!((m.get(0, 1) - 1.0).abs() < 1e-12);
        assert!((m.get(0, 2) + 1.0).abs() < 1e-12);
        let other = crate::nets::build_generation(&crate::nets::BackboneConfig { layer_channels: [4, 4, 8], ..cfg }, 1, 0).unwrap();
        assert!(matches!(parameter_similarity_matrix(&[g, other]), Err(Error::Architecture(_))));
    }

    #[test]
    fn four_cases() {
        let gt = lm(1, 3, &[0, 1, 2]);
        let t = four_case_table(&[lm(1, 3, &[0, 0, 0])], &[lm(1, 3, &[0, 1, 1])], &[gt.clone()], None).unwrap();
        assert_eq!(t.counts(), [1, 0, 1, 1]);
        let f = t.fractions();
        assert_eq!(f, [1.0 / 3.0, 0.0, 1.0 / 3.0, 1.0 / 3.0]);
        let t = four_case_table(&[gt.clone()], &[gt.clone()], &[gt], None).unwrap();
        assert_eq!(t.fractions(), [1.0, 0.0, 0.0, 0.0]);
    }
}
