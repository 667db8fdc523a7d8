use serde::{Deserialize, Serialize};

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `K × K` pixel counts indexed `(true, predicted)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    /// Reference pixels of this class.
    pub support: u64,
    /// `None` when the class is absent from the reference.
    pub recall: Option<f64>,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "MA")]
    pub ma: f64,
    #[serde(rename = "OA")]
    pub oa: f64,
    #[serde(rename = "mIoU")]
    pub miou: f64,
    pub per_class: Vec<ClassMetrics>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn at(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.num_classes + pred] += 1;
    }

    /// Per-pixel argmax of an `[H, W, K]` probability map against labels.
    pub fn add_map<S: Scalar>(&mut self, probs: &Tensor<S>, labels: &LabelMap) -> Result<()> {
        let k = self.num_classes;
        if probs.shape() != [labels.height(), labels.width(), k] {
            return Err(Error::dim(
                "confusion",
                format!("map {:?} for {}×{}×{k}", probs.shape(), labels.height(), labels.width()),
            ));
        }
        for (p, &c) in labels.classes().iter().enumerate() {
            if c as usize >= k {
                return Err(Error::Data(format!("label {c} outside {k} classes")));
            }
            let pred = argmax(&probs.data()[p * k..(p + 1) * k]);
            self.add(c as usize, pred);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        assert_eq!(self.num_classes, other.num_classes, "merging unequal confusion matrices");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|j| self.at(c, j)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|i| self.at(i, c)).sum()
    }

    pub fn overall_accuracy(&self) -> Option<f64> {
        let total = self.total();
        let trace: u64 = (0..self.num_classes).map(|c| self.at(c, c)).sum();
        (total > 0).then(|| trace as f64 / total as f64)
    }

    pub fn recall(&self, c: usize) -> Option<f64> {
        let row = self.row_sum(c);
        (row > 0).then(|| self.at(c, c) as f64 / row as f64)
    }

    /// Defined for classes present in the reference.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let row = self.row_sum(c);
        let tp = self.at(c, c);
        (row > 0).then(|| tp as f64 / (row + self.col_sum(c) - tp) as f64)
    }

    /// MA, OA and mIoU, averaging over classes present in the reference.
    pub fn metrics(&self) -> Result<Metrics> {
        let oa = self
            .overall_accuracy()
            .ok_or_else(|| Error::Contract("no pixels evaluated".into()))?;
        let per_class: Vec<ClassMetrics> = (0..self.num_classes)
            .map(|c| ClassMetrics {
                class: c,
                support: self.row_sum(c),
                recall: self.recall(c),
                iou: self.iou(c),
            })
            .collect();
        let present = per_class.iter().filter(|m| m.support > 0).count() as f64;
        let ma = per_class.iter().filter_map(|m| m.recall).sum::<f64>() / present;
        let miou = per_class.iter().filter_map(|m| m.iou).sum::<f64>() / present;
        Ok(Metrics { ma, oa, miou, per_class })
    }
}
