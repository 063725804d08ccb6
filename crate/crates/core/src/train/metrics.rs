use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Confusion-matrix summary. Rows of `confusion` are ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_classes: usize,
    pub total: u64,
    pub confusion: Vec<Vec<u64>>,
    pub oa: f64,
    /// `None` for classes absent from both truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean over the defined entries of `per_class_iou`.
    pub miou: f64,
}

/// Running confusion counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Confusion {
    num_classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn add(&mut self, pred: &[usize], truth: &[usize]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::contract(format!(
                "prediction count {} does not match label count {}",
                pred.len(),
                truth.len()
            )));
        }
        let n = self.num_classes;
        for (&p, &t) in pred.iter().zip(truth) {
            if p >= n || t >= n {
                return Err(Error::contract(format!("class id out of range for {n} classes")));
            }
            self.counts[t * n + p] += 1;
        }
        Ok(())
    }

    pub fn report(&self) -> MetricsReport {
        let n = self.num_classes;
        let total: u64 = self.counts.iter().sum();
        let trace: u64 = (0..n).map(|c| self.counts[c * n + c]).sum();
        let per_class_iou: Vec<Option<f64>> = (0..n)
            .map(|c| {
                let tp = self.counts[c * n + c];
                let row: u64 = self.counts[c * n..(c + 1) * n].iter().sum();
                let col: u64 = (0..n).map(|t| self.counts[t * n + c]).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let defined: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let miou = if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        MetricsReport {
            num_classes: n,
            total,
            confusion: self.counts.chunks(n.max(1)).map(<[u64]>::to_vec).collect(),
            oa: if total == 0 { 0.0 } else { trace as f64 / total as f64 },
            per_class_iou,
            miou,
        }
    }
}

pub fn evaluate(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<MetricsReport> {
    let mut c = Confusion::new(num_classes);
    c.add(pred, truth)?;
    Ok(c.report())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let labels = [0, 1, 2, 2, 1];
        let r = evaluate(&labels, &labels, 3).unwrap();
        assert_eq!(r.oa, 1.0);
        assert_eq!(r.per_class_iou, vec![Some(1.0); 3]);
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.total, 5);
    }

    #[test]
    fn all_one_class() {
        let r = evaluate(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(r.oa, 0.5);
        assert_eq!(r.per_class_iou, vec![Some(0.5), Some(0.0)]);
        assert_eq!(r.miou, 0.25);
        assert_eq!(r.confusion, vec![vec![2, 0], vec![2, 0]]);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let r = evaluate(&[0, 1], &[0, 1], 4).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(1.0), Some(1.0), None, None]);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn mismatches_are_contract_errors() {
        assert!(evaluate(&[0], &[0, 1], 2).is_err());
        assert!(evaluate(&[2], &[0], 2).is_err());
    }

    #[test]
    fn report_serializes() {
        let r = evaluate(&[0, 1, 1], &[0, 1, 0], 3).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
