use std::fmt;

use crate::autodiff::Tensor;
use crate::data::{N_CLASSES, TUMOR};
use crate::error::{Error, Result};

/// Tumor-vs-rest pixel counts of one slice.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Per-pixel argmax over the class axis; ties go to the lowest index.
pub fn argmax_classes(probs: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = probs.shape();
    if s.len() != 3 || s[0] != N_CLASSES {
        return Err(Error::Shape(format!("expected [{N_CLASSES}, H, W] probabilities, got {s:?}")));
    }
    let hw = s[1] * s[2];
    let d = probs.data();
    Ok((0..hw)
        .map(|p| {
            let mut best = 0;
            for c in 1..N_CLASSES {
                if d[c * hw + p] > d[best * hw + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect())
}

pub fn confusion_counts(pred_probs: &Tensor<f32>, gt_onehot: &Tensor<f32>) -> Result<Confusion> {
    if pred_probs.shape() != gt_onehot.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} and reference {:?} differ in shape",
            pred_probs.shape(),
            gt_onehot.shape()
        )));
    }
    let pred = argmax_classes(pred_probs)?;
    let hw = pred.len();
    let gt = &gt_onehot.data()[TUMOR * hw..(TUMOR + 1) * hw];
    let mut c = Confusion::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p as usize == TUMOR, g == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `2 tp / (2 tp + fp + fn)`, and 1 when both masks are empty.
pub fn dice(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

pub fn sensitivity(tp: u64, fn_: u64) -> Option<f64> {
    (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64)
}

pub fn specificity(tn: u64, fp: u64) -> Option<f64> {
    (tn + fp > 0).then(|| tn as f64 / (tn + fp) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SliceMetrics {
    pub subject_id: u32,
    pub slice_id: u32,
    pub dice: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub counts: Confusion,
}

impl SliceMetrics {
    pub fn from_counts(subject_id: u32, slice_id: u32, counts: Confusion) -> Self {
        SliceMetrics {
            subject_id,
            slice_id,
            dice: Some(dice(counts.tp, counts.fp, counts.fn_)),
            sensitivity: sensitivity(counts.tp, counts.fn_),
            specificity: specificity(counts.tn, counts.fp),
            counts,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Dice,
    Sensitivity,
    Specificity,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Dice, Metric::Sensitivity, Metric::Specificity];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Dice => "dice",
            Metric::Sensitivity => "sensitivity",
            Metric::Specificity => "specificity",
        }
    }

    pub fn of(self, m: &SliceMetrics) -> Option<f64> {
        match self {
            Metric::Dice => m.dice,
            Metric::Sensitivity => m.sensitivity,
            Metric::Specificity => m.specificity,
        }
    }
}

/// Mean, population standard deviation and median.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SummaryStats {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub n: usize,
}

impl fmt::Display for SummaryStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

pub fn summarize(values: &[f64]) -> Result<SummaryStats> {
    if values.is_empty() {
        return Err(Error::InsufficientData("cannot summarize an empty list".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(SummaryStats {
        mean,
        std: var.sqrt(),
        median: median(values).expect("non-empty"),
        n: values.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onehot(classes: &[u8], h: usize, w: usize) -> Tensor<f32> {
        let hw = h * w;
        let mut d = vec![0f32; 4 * hw];
        for (p, &c) in classes.iter().enumerate() {
            d[c as usize * hw + p] = 1.0;
        }
        Tensor::from_vec(&[4, h, w], d).unwrap()
    }

    #[test]
    fn identical_maps_have_no_errors() {
        let t = onehot(&[0, 3, 3, 1, 2, 3], 2, 3);
        let c = confusion_counts(&t, &t).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (3, 0, 0, 3));
    }

    #[test]
    fn all_background_misses_every_tumor_pixel() {
        let mut gt = vec![0u8; 25];
        gt[..10].fill(3);
        let c = confusion_counts(&onehot(&[0; 25], 5, 5), &onehot(&gt, 5, 5)).unwrap();
        assert_eq!((c.tp, c.fn_, c.fp, c.tn), (0, 10, 0, 15));
    }

    #[test]
    fn argmax_ties_prefer_lowest_class() {
        let t = Tensor::from_vec(&[4, 1, 1], vec![0.25; 4]).unwrap();
        assert_eq!(argmax_classes(&t).unwrap(), vec![0]);
        let t = Tensor::from_vec(&[4, 1, 1], vec![0.1, 0.3, 0.3, 0.3]).unwrap();
        assert_eq!(argmax_classes(&t).unwrap(), vec![1]);
    }

    #[test]
    fn dice_cases() {
        assert_eq!(dice(7, 0, 0), 1.0);
        assert_eq!(dice(2, 2, 2), 0.5);
        assert_eq!(dice(0, 4, 4), 0.0);
        assert_eq!(dice(0, 0, 0), 1.0);
    }

    #[test]
    fn rates_and_undefined_denominators() {
        assert_eq!(sensitivity(5, 0), Some(1.0));
        assert_eq!(specificity(9, 0), Some(1.0));
        assert_eq!(sensitivity(0, 0), None);
        let m = SliceMetrics::from_counts(0, 0, Confusion { tp: 0, fp: 1, tn: 9, fn_: 0 });
        assert_eq!(m.sensitivity, None);
        assert_eq!(m.specificity, Some(0.9));
    }

    #[test]
    fn summaries() {
        let s = summarize(&[0.5]).unwrap();
        assert_eq!((s.mean, s.std, s.median), (0.5, 0.0, 0.5));
        let s = summarize(&[0.0, 1.0]).unwrap();
        assert_eq!((s.mean, s.std, s.median), (0.5, 0.5, 0.5));
        let s = summarize(&[0.41, 0.1, 0.9, 0.23]).unwrap();
        assert_eq!(s.median, (0.23 + 0.41) / 2.0);
        assert!(summarize(&[]).is_err());
        let t = SummaryStats { mean: 0.414, std: 0.2849, median: 0.0, n: 1 };
        assert_eq!(t.to_string(), "0.41 ± 0.28");
    }
}
