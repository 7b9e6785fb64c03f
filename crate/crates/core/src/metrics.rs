//! Hard-label overlap metrics.
//!
//! A class absent from both prediction and target scores DSC, IoU and
//! recall of 1. Recall for a class with no target voxels is 1 (nothing was
//! missed) even if it was predicted; the miss shows up in DSC instead.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub dsc: f64,
    pub iou: f64,
    pub recall: f64,
    /// Target voxels over total voxels.
    pub target_fraction: f64,
}

impl ClassMetrics {
    fn from_counts(class: usize, tp: u64, fp: u64, fn_: u64, total: u64) -> Self {
        let (t, p, n) = (tp as f64, fp as f64, fn_ as f64);
        let (dsc, iou) = if tp + fp + fn_ == 0 {
            (1.0, 1.0)
        } else {
            (2.0 * t / (2.0 * t + p + n), t / (t + p + n))
        };
        let recall = if tp + fn_ == 0 { 1.0 } else { t / (t + n) };
        Self {
            class,
            tp,
            fp,
            fn_,
            dsc,
            iou,
            recall,
            target_fraction: (tp + fn_) as f64 / total as f64,
        }
    }

    /// Whether the class occurs in the prediction or the target.
    pub fn present(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// Every class, background included.
    pub classes: Vec<ClassMetrics>,
}

impl Metrics {
    fn foreground(&self) -> impl Iterator<Item = &ClassMetrics> {
        self.classes.iter().skip(1)
    }

    fn present_mean(&self, f: impl Fn(&ClassMetrics) -> f64) -> f64 {
        let vals: Vec<f64> = self.foreground().filter(|c| c.present()).map(f).collect();
        if vals.is_empty() {
            1.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    /// Mean foreground DSC over classes present in prediction or target.
    pub fn mean_dsc(&self) -> f64 {
        self.present_mean(|c| c.dsc)
    }

    pub fn miou(&self) -> f64 {
        self.present_mean(|c| c.iou)
    }

    pub fn mean_recall(&self) -> f64 {
        self.present_mean(|c| c.recall)
    }

    /// Fraction of voxels carrying any foreground label.
    pub fn target_fraction(&self) -> f64 {
        self.foreground().map(|c| c.target_fraction).sum()
    }

    /// CSV with header `class,dsc,iou,recall,tw`; one row per class and a
    /// final `mean` row over present foreground classes.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for c in &self.classes {
            w.write_record([
                c.class.to_string(),
                c.dsc.to_string(),
                c.iou.to_string(),
                c.recall.to_string(),
                c.target_fraction.to_string(),
            ])?;
        }
        w.write_record([
            "mean".to_string(),
            self.mean_dsc().to_string(),
            self.miou().to_string(),
            self.mean_recall().to_string(),
            self.target_fraction().to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }
}

pub const CSV_HEADER: [&str; 5] = ["class", "dsc", "iou", "recall", "tw"];

/// Per-class confusion counts of two label volumes of equal length.
pub fn metrics(pred: &[usize], target: &[usize], classes: usize) -> Result<Metrics> {
    if pred.len() != target.len() {
        return Err(Error::shape(format!(
            "prediction has {} voxels, target {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::shape("empty label volumes"));
    }
    if let Some(&l) = pred.iter().chain(target).find(|&&l| l >= classes) {
        return Err(Error::Data(format!("label {l} out of range for {classes} classes")));
    }
    let mut tp = vec![0u64; classes];
    let mut fp = vec![0u64; classes];
    let mut fn_ = vec![0u64; classes];
    for (&p, &t) in pred.iter().zip(target) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let total = pred.len() as u64;
    Ok(Metrics {
        classes: (0..classes)
            .map(|c| ClassMetrics::from_counts(c, tp[c], fp[c], fn_[c], total))
            .collect(),
    })
}

/// Argmax over axis 1 of `[N, C, spatial...]` scores.
pub fn argmax_labels(scores: &crate::tensor::Tensor) -> Result<Vec<usize>> {
    let s = scores.shape();
    if s.len() < 2 || s[1] == 0 {
        return Err(Error::shape(format!("argmax needs [N, C, ...], got {s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    let vol: usize = s[2..].iter().product();
    let d = scores.data();
    let mut out = Vec::with_capacity(n * vol);
    for b in 0..n {
        for v in 0..vol {
            let mut best = 0;
            for k in 1..c {
                if d[(b * c + k) * vol + v] > d[(b * c + best) * vol + v] {
                    best = k;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counts() {
        let m = metrics(&[1, 1, 0], &[1, 0, 0], 2).unwrap();
        let c = m.classes[1];
        assert!((c.dsc - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.iou, 0.5);
        assert_eq!(c.recall, 1.0);
        assert!((c.target_fraction - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn identical_volumes_score_one() {
        let v = [0, 2, 1, 1, 0, 2];
        let m = metrics(&v, &v, 4).unwrap();
        assert_eq!((m.mean_dsc(), m.miou(), m.mean_recall()), (1.0, 1.0, 1.0));
        assert!(!m.classes[3].present());
        assert_eq!(m.classes[3].dsc, 1.0);
    }

    #[test]
    fn empty_prediction_has_zero_recall() {
        let m = metrics(&[0, 0, 0, 0], &[0, 1, 1, 0], 2).unwrap();
        assert_eq!(m.classes[1].recall, 0.0);
        assert_eq!(m.mean_dsc(), 0.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(metrics(&[0, 1], &[0], 2), Err(Error::Shape(_))));
        assert!(matches!(metrics(&[0, 3], &[0, 1], 2), Err(Error::Data(_))));
    }

    #[test]
    fn csv_layout() {
        let m = metrics(&[1, 1, 0], &[1, 0, 0], 2).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "class,dsc,iou,recall,tw");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("mean,"));
    }

    #[test]
    fn argmax_picks_first_maximum() {
        let t = crate::tensor::Tensor::new(&[1, 3, 2], vec![0.1, 0.5, 0.7, 0.5, 0.2, 0.0]).unwrap();
        assert_eq!(argmax_labels(&t).unwrap(), vec![1, 0]);
    }
}
