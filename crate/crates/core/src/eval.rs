//! Image-level AUROC, accuracy and F1.
//!
//! Accuracy and F1 are reported at the threshold that maximizes F1 over the
//! evaluated scores (an image is predicted anomalous when `score >= t`; ties
//! between thresholds go to the smaller `t`). Numbers computed under a
//! different threshold convention are not directly comparable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::ImageResult;

/// `(score, is_anomaly)` pairs with the positive and negative counts.
type Labelled = (Vec<(f64, bool)>, usize, usize);

fn labelled(results: &[ImageResult]) -> Result<Labelled> {
    let pairs: Vec<(f64, bool)> = results
        .iter()
        .filter_map(|r| r.label.map(|l| (r.score, l == 1)))
        .collect();
    if pairs.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::NonFinite("scores"));
    }
    let positives = pairs.iter().filter(|(_, y)| *y).count();
    let negatives = pairs.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass);
    }
    Ok((pairs, positives, negatives))
}

/// Mann–Whitney AUROC with average ranks for tied scores. Unlabelled results
/// are ignored.
pub fn auroc(results: &[ImageResult]) -> Result<f64> {
    let (mut pairs, pos, neg) = labelled(results)?;
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j + 1 < pairs.len() && pairs[j + 1].0 == pairs[i].0 {
            j += 1;
        }
        // ranks are 1-based: i+1 ..= j+1
        let avg_rank = (i + j + 2) as f64 / 2.0;
        let tied_pos = pairs[i..=j].iter().filter(|(_, y)| *y).count();
        rank_sum += avg_rank * tied_pos as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub threshold: f64,
    pub accuracy: f64,
    pub f1: f64,
}

/// Confusion counts when predicting anomalous for `score >= threshold`.
pub fn classify_at(results: &[ImageResult], threshold: f64) -> Result<Classification> {
    let (pairs, pos, neg) = labelled(results)?;
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(s, y) in &pairs {
        if s >= threshold {
            if y {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    Ok(metrics(tp, fp, pos, neg, threshold))
}

fn metrics(tp: usize, fp: usize, pos: usize, neg: usize, threshold: f64) -> Classification {
    let fn_ = pos - tp;
    let tn = neg - fp;
    let accuracy = (tp + tn) as f64 / (pos + neg) as f64;
    let f1 = if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    Classification {
        threshold,
        accuracy,
        f1,
    }
}

/// Sweeps every distinct score as a threshold and keeps the F1-maximizing
/// one.
pub fn threshold_and_classify(results: &[ImageResult]) -> Result<Classification> {
    let (mut pairs, pos, neg) = labelled(results)?;
    // Descending; lowering the threshold through each distinct score adds
    // that score's group to the predicted positives.
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best: Option<Classification> = None;
    let mut i = 0;
    while i < pairs.len() {
        let t = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == t {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let m = metrics(tp, fp, pos, neg, t);
        // `>=`: later candidates have smaller thresholds
        if best.is_none_or(|b| m.f1 >= b.f1) {
            best = Some(m);
        }
    }
    Ok(best.expect("labelled() guarantees at least two results"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub auroc: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSpread {
    pub auroc: f64,
    pub accuracy: f64,
    pub f1: f64,
}

/// Metrics of one run, or the mean (with sample standard deviation in
/// `std`) over repeated runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub threshold: f64,
    pub n_normal: usize,
    pub n_anomaly: usize,
    pub std: MetricSpread,
    pub runs: Vec<RunMetrics>,
}

pub fn evaluate(results: &[ImageResult]) -> Result<EvalReport> {
    let auc = auroc(results)?;
    let cls = threshold_and_classify(results)?;
    let n_anomaly = results.iter().filter(|r| r.label == Some(1)).count();
    let n_normal = results.iter().filter(|r| r.label == Some(0)).count();
    let run = RunMetrics {
        auroc: auc,
        accuracy: cls.accuracy,
        f1: cls.f1,
        threshold: cls.threshold,
    };
    Ok(EvalReport {
        auroc: auc,
        accuracy: cls.accuracy,
        f1: cls.f1,
        threshold: cls.threshold,
        n_normal,
        n_anomaly,
        std: MetricSpread {
            auroc: 0.0,
            accuracy: 0.0,
            f1: 0.0,
        },
        runs: vec![run],
    })
}

/// `(mean, sample std)`; std is 0 for a single value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Pools the runs of several reports into mean ± sample std.
pub fn aggregate_runs(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Config("no reports to aggregate".into()))?;
    let runs: Vec<RunMetrics> = reports
        .iter()
        .flat_map(|r| r.runs.iter().copied())
        .collect();
    let col = |f: fn(&RunMetrics) -> f64| mean_std(&runs.iter().map(f).collect::<Vec<_>>());
    let (auroc, auroc_sd) = col(|r| r.auroc);
    let (accuracy, acc_sd) = col(|r| r.accuracy);
    let (f1, f1_sd) = col(|r| r.f1);
    let (threshold, _) = col(|r| r.threshold);
    Ok(EvalReport {
        auroc,
        accuracy,
        f1,
        threshold,
        n_normal: first.n_normal,
        n_anomaly: first.n_anomaly,
        std: MetricSpread {
            auroc: auroc_sd,
            accuracy: acc_sd,
            f1: f1_sd,
        },
        runs,
    })
}

/// Markdown table with one row per labelled report, metrics in percent as
/// `mean±std`.
pub fn markdown_table(rows: &[(&str, &EvalReport)]) -> String {
    let mut out = String::from("| | AUROC | ACC | F1 |\n|---|---|---|---|\n");
    for (name, r) in rows {
        out.push_str(&format!(
            "| {name} | {:.1}±{:.1} | {:.1}±{:.1} | {:.1}±{:.1} |\n",
            100.0 * r.auroc,
            100.0 * r.std.auroc,
            100.0 * r.accuracy,
            100.0 * r.std.accuracy,
            100.0 * r.f1,
            100.0 * r.std.f1,
        ));
    }
    out
}
