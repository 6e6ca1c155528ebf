use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// `C × C` counts, row = true class, column = predicted class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_predictions(classes: usize, truth: &[usize], pred: &[usize]) -> Self {
        let mut c = Confusion::new(classes);
        for (&t, &p) in truth.iter().zip(pred) {
            c.counts[t * classes + p] += 1;
        }
        c
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.classes).map(|c| self.get(c, c)).sum::<u64>() as f64 / total as f64
    }

    /// Unweighted mean of per-class F1 over classes that occur in the
    /// truth or the predictions.
    pub fn macro_f1(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0;
        for c in 0..self.classes {
            let tp = self.get(c, c) as f64;
            let support: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
            let predicted: u64 = (0..self.classes).map(|t| self.get(t, c)).sum();
            if support == 0 && predicted == 0 {
                continue;
            }
            n += 1;
            sum += 2.0 * tp / (support + predicted) as f64;
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = String::from("true\\pred");
        for n in names {
            write!(out, ",{n}").unwrap();
        }
        out.push('\n');
        for (t, name) in names.iter().enumerate().take(self.classes) {
            out.push_str(name);
            for p in 0..self.classes {
                write!(out, ",{}", self.get(t, p)).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

pub fn accuracy(truth: &[usize], pred: &[usize]) -> f64 {
    let classes = truth.iter().chain(pred).max().map_or(0, |m| m + 1);
    Confusion::from_predictions(classes, truth, pred).accuracy()
}

pub fn macro_f1(truth: &[usize], pred: &[usize]) -> f64 {
    let classes = truth.iter().chain(pred).max().map_or(0, |m| m + 1);
    Confusion::from_predictions(classes, truth, pred).macro_f1()
}

/// One metrics CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub acc: f64,
    pub f1: f64,
}

/// Rows with columns `epoch, split, loss, acc, f1`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn push(&mut self, epoch: usize, split: impl Into<String>, loss: f64, acc: f64, f1: f64) {
        self.rows.push(MetricsRow { epoch, split: split.into(), loss, acc, f1 });
    }

    pub fn extend(&mut self, other: MetricsLog) {
        self.rows.extend(other.rows);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss,acc,f1\n");
        for r in &self.rows {
            writeln!(out, "{},{},{:.10},{:.10},{:.10}", r.epoch, r.split, r.loss, r.acc, r.f1).unwrap();
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Mean and (population) standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_predictor_on_balanced_set() {
        let truth: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let pred = vec![2; 40];
        assert_eq!(accuracy(&truth, &pred), 0.25);
        // F1 is 0 for three classes and 2·10/(10+40) for the predicted one
        assert!((macro_f1(&truth, &pred) - 0.4 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions() {
        let truth = vec![0, 1, 2, 3, 1];
        assert_eq!(accuracy(&truth, &truth), 1.0);
        assert_eq!(macro_f1(&truth, &truth), 1.0);
    }

    #[test]
    fn confusion_layout() {
        let c = Confusion::from_predictions(2, &[0, 0, 1], &[0, 1, 1]);
        assert_eq!(c.counts, vec![1, 1, 0, 1]);
        assert_eq!(c.to_csv(&["a".into(), "b".into()]), "true\\pred,a,b\na,1,1\nb,0,1\n");
    }

    #[test]
    fn csv_rows() {
        let mut log = MetricsLog::default();
        log.push(1, "train", 0.5, 0.75, 0.7);
        assert_eq!(log.to_csv(), "epoch,split,loss,acc,f1\n1,train,0.5000000000,0.7500000000,0.7000000000\n");
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    }
}
