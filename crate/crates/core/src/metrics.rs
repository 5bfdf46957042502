//! Dice, voxel accuracy, and the accuracy-per-parameter ratio.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelVolume;

/// Every tumour class; the "whole tumour" set.
pub const WHOLE_TUMOR: [u8; 4] = [1, 2, 3, 4];

/// Overlap counts for one binarisation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    /// `2|P∩T| / (|P| + |T|)`, or 1 when both sets are empty.
    pub fn dice(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    fn add(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn check_pair(pred: &LabelVolume, truth: &LabelVolume) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape("metric", truth.shape(), pred.shape()));
    }
    Ok(())
}

/// Overlap counts after binarising both volumes by membership in `classes`.
pub fn overlap(pred: &LabelVolume, truth: &LabelVolume, classes: &[u8]) -> Result<Counts> {
    check_pair(pred, truth)?;
    let mut member = [false; 256];
    for &c in classes {
        member[c as usize] = true;
    }
    let mut counts = Counts::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (member[p as usize], member[t as usize]) {
            (true, true) => counts.tp += 1,
            (true, false) => counts.fp += 1,
            (false, true) => counts.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(counts)
}

pub fn dice(pred: &LabelVolume, truth: &LabelVolume, classes: &[u8]) -> Result<f64> {
    Ok(overlap(pred, truth, classes)?.dice())
}

/// Number of voxels where the labels agree.
pub fn correct_voxels(pred: &LabelVolume, truth: &LabelVolume) -> Result<u64> {
    check_pair(pred, truth)?;
    Ok(pred
        .data()
        .iter()
        .zip(truth.data())
        .filter(|(p, t)| p == t)
        .count() as u64)
}

pub fn accuracy(pred: &LabelVolume, truth: &LabelVolume) -> Result<f64> {
    let correct = correct_voxels(pred, truth)?;
    Ok(if pred.is_empty() { 1.0 } else { correct as f64 / pred.len() as f64 })
}

/// `(acc_f / params_f) / (acc_b / params_b)`: accuracy per parameter relative
/// to the baseline.
pub fn memory_accuracy_ratio(acc_f: f64, params_f: usize, acc_b: f64, params_b: usize) -> Result<f64> {
    if params_f == 0 || params_b == 0 {
        return Err(Error::Config("parameter counts must be positive".into()));
    }
    if !(acc_f.is_finite() && acc_b.is_finite()) || acc_f < 0.0 || acc_b <= 0.0 {
        return Err(Error::Config(format!(
            "accuracies must be finite and positive, got {acc_f} and {acc_b}"
        )));
    }
    Ok((acc_f / params_f as f64) / (acc_b / params_b as f64))
}

/// Pooled evaluation over any number of predicted/true label pairs.
///
/// Counts are summed over every pair before dice is taken, so a patch with
/// no tumour does not count as a perfect score on its own.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dice_whole_tumor: f64,
    pub per_class_dice: Vec<f64>,
    pub accuracy: f64,
    pub whole_tumor: Counts,
    pub per_class: Vec<Counts>,
    pub voxels: u64,
    pub correct: u64,
}

impl EvalReport {
    pub fn new(classes: usize) -> Self {
        let mut r = EvalReport {
            per_class: vec![Counts::default(); classes],
            ..Default::default()
        };
        r.refresh();
        r
    }

    pub fn from_pair(pred: &LabelVolume, truth: &LabelVolume, classes: usize) -> Result<Self> {
        let mut r = Self::new(classes);
        r.add(pred, truth)?;
        Ok(r)
    }

    pub fn add(&mut self, pred: &LabelVolume, truth: &LabelVolume) -> Result<()> {
        self.whole_tumor.add(&overlap(pred, truth, &WHOLE_TUMOR)?);
        for (c, counts) in self.per_class.iter_mut().enumerate() {
            counts.add(&overlap(pred, truth, &[c as u8])?);
        }
        self.correct += correct_voxels(pred, truth)?;
        self.voxels += pred.len() as u64;
        self.refresh();
        Ok(())
    }

    pub fn merge(&mut self, other: &EvalReport) {
        self.whole_tumor.add(&other.whole_tumor);
        for (a, b) in self.per_class.iter_mut().zip(&other.per_class) {
            a.add(b);
        }
        self.correct += other.correct;
        self.voxels += other.voxels;
        self.refresh();
    }

    fn refresh(&mut self) {
        self.dice_whole_tumor = self.whole_tumor.dice();
        self.per_class_dice = self.per_class.iter().map(Counts::dice).collect();
        self.accuracy = if self.voxels == 0 {
            1.0
        } else {
            self.correct as f64 / self.voxels as f64
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(data: Vec<u8>) -> LabelVolume {
        let n = data.len();
        LabelVolume::new(&[1, 1, n], data).unwrap()
    }

    #[test]
    fn dice_examples() {
        let t = vol(vec![0, 1, 2, 3, 4, 0]);
        assert_eq!(dice(&t, &t, &WHOLE_TUMOR).unwrap(), 1.0);
        assert_eq!(dice(&vol(vec![1, 1, 0, 0]), &vol(vec![0, 0, 2, 2]), &WHOLE_TUMOR).unwrap(), 0.0);
        let mut p = vec![0u8; 16];
        let mut q = vec![0u8; 16];
        p[..8].fill(1);
        q[4..12].fill(3);
        assert_eq!(dice(&vol(p), &vol(q), &WHOLE_TUMOR).unwrap(), 0.5);
        let z = vol(vec![0; 5]);
        assert_eq!(dice(&z, &z, &WHOLE_TUMOR).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_examples() {
        let a = vol(vec![0, 1, 0, 1]);
        assert_eq!(accuracy(&a, &a).unwrap(), 1.0);
        assert_eq!(accuracy(&a, &vol(vec![1, 0, 1, 0])).unwrap(), 0.0);
        let truth = vol(vec![0; 729]);
        let mut p = vec![0u8; 729];
        p[..29].fill(2);
        assert!((accuracy(&vol(p), &truth).unwrap() - 700.0 / 729.0).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_error() {
        assert!(dice(&vol(vec![0; 3]), &vol(vec![0; 4]), &WHOLE_TUMOR).is_err());
        assert!(accuracy(&vol(vec![0; 3]), &vol(vec![0; 4])).is_err());
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(memory_accuracy_ratio(98.2, 1000, 98.2, 1000).unwrap(), 1.0);
        let r = memory_accuracy_ratio(98.33, 2000, 98.20, 1000).unwrap();
        assert!((r - 0.50066).abs() < 1e-5, "{r}");
        assert!(memory_accuracy_ratio(0.9, 3000, 0.9, 1000).unwrap() < r);
        assert!(memory_accuracy_ratio(0.9, 0, 0.9, 1000).is_err());
    }

    #[test]
    fn pooled_report_counts_are_consistent() {
        let mut r = EvalReport::new(5);
        r.add(&vol(vec![0, 1, 2]), &vol(vec![0, 1, 1])).unwrap();
        r.add(&vol(vec![0, 0]), &vol(vec![0, 0])).unwrap();
        assert_eq!(r.voxels, 5);
        assert_eq!(r.correct, 4);
        assert_eq!(r.dice_whole_tumor, 1.0);
        assert_eq!(r.per_class[1], Counts { tp: 1, fp: 0, fn_: 1 });
        assert!((r.per_class_dice[1] - 2.0 / 3.0).abs() < 1e-15);
    }
}
