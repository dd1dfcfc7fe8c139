use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Class-by-class counts; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, pred: usize, truth: usize) -> Result<()> {
        ensure!(pred < self.classes, Data, "prediction {} out of {} classes", pred, self.classes);
        ensure!(truth < self.classes, Data, "label {} out of {} classes", truth, self.classes);
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    /// Adds aligned predictions and labels; negative labels are ignored.
    pub fn add_all(&mut self, preds: &[usize], labels: &[i32]) -> Result<()> {
        ensure!(preds.len() == labels.len(), Shape, "{} predictions for {} labels", preds.len(), labels.len());
        for (&p, &l) in preds.iter().zip(labels) {
            if l >= 0 {
                self.add(p, l as usize)?;
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.chunks(self.classes.max(1)).map(|r| r.iter().sum()).collect()
    }

    /// `TP / (TP + FP + FN)`, or `None` for a class absent from both
    /// predictions and ground truth.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let tp = self.get(c, c);
        let fn_: u64 = (0..self.classes).map(|p| self.get(c, p)).sum::<u64>() - tp;
        let fp: u64 = (0..self.classes).map(|t| self.get(t, c)).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes).map(|c| self.iou(c)).collect()
    }

    /// Mean IoU over the classes that occur; 0 when none do.
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.classes).map(|c| self.get(c, c)).sum::<u64>() as f64 / total as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
    pub points: u64,
}

impl From<&ConfusionMatrix> for MiouReport {
    fn from(cm: &ConfusionMatrix) -> Self {
        Self {
            miou: cm.miou(),
            per_class: cm.per_class_iou(),
            points: cm.total(),
        }
    }
}

/// mIoU of `preds` against `labels` over `classes` classes.
pub fn miou(preds: &[usize], labels: &[usize], classes: usize) -> Result<MiouReport> {
    ensure!(preds.len() == labels.len(), Shape, "{} predictions for {} labels", preds.len(), labels.len());
    let mut cm = ConfusionMatrix::new(classes);
    for (&p, &l) in preds.iter().zip(labels) {
        cm.add(p, l)?;
    }
    Ok(MiouReport::from(&cm))
}
