//! Confusion matrix, per-class IoU, mIoU and pixel accuracy.

use serde::Serialize;

use crate::error::{Error, Result};

/// `counts[g * n + p]` is the number of pixels with ground truth `g`
/// predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub miou: f64,
    pub pixel_acc: f64,
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class: Vec<Option<f64>>,
    pub pixels: u64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            n: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one pixel per position whose ground truth is not `ignore_index`.
    /// Nothing is recorded if any label is out of range.
    pub fn update(&mut self, pred: &[u32], gt: &[u32], ignore_index: u32) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Data(format!(
                "{} predictions for {} ground-truth pixels",
                pred.len(),
                gt.len()
            )));
        }
        let n = self.n as u32;
        for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            if g == ignore_index {
                continue;
            }
            if g >= n {
                return Err(Error::Data(format!("pixel {i}: ground-truth class {g} out of range 0..{n}")));
            }
            if p >= n {
                return Err(Error::Data(format!("pixel {i}: predicted class {p} out of range 0..{n}")));
            }
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g != ignore_index {
                self.counts[g as usize * self.n + p as usize] += 1;
            }
        }
        Ok(())
    }

    /// Element-wise sum, used to merge per-shard matrices.
    pub fn add(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::contract(
                "confusion_add",
                format!("{} classes vs {}", self.n, other.n),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU per class; `None` where the union is empty.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.n)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..self.n).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..self.n).map(|g| self.get(g, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes with a non-empty union.
    pub fn miou(&self) -> Result<f64> {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(Error::Data("mIoU is undefined for an empty confusion matrix".into()));
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Data("pixel accuracy is undefined for an empty confusion matrix".into()));
        }
        let correct: u64 = (0..self.n).map(|c| self.get(c, c)).sum();
        Ok(correct as f64 / total as f64)
    }

    pub fn metrics(&self) -> Result<Metrics> {
        Ok(Metrics {
            miou: self.miou()?,
            pixel_acc: self.pixel_accuracy()?,
            per_class: self.iou(),
            pixels: self.total(),
        })
    }
}
