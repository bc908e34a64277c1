//! Confusion counts and the derived metric suite.
//!
//! A positive is an item flagged anomalous; a true positive is a malicious
//! item flagged anomalous, a false positive a benign item flagged anomalous.
//! Metrics with a zero denominator are reported as undefined rather than
//! coerced to 0 or 1, and print as "-" in tables.

use crate::detector::TaskVerdict;
use crate::error::{Error, Result};
use crate::ingest::LogKey;
use crate::par::par_map;
use crate::predictor::NextKeyModel;
use crate::sequencer::Window;

/// Evaluation granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Trace,
    Task,
    NextKey,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Trace => "trace",
            Mode::Task => "task",
            Mode::NextKey => "next-key",
        })
    }
}

/// Confusion counts plus the six derived metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mode: Mode,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
    pub recall: Option<f64>,
    pub fpr: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub gmean: Option<f64>,
    /// Tasks skipped because their trace was shorter than one window.
    pub unevaluated: u64,
}

fn ratio(num: u64, denom: u64) -> Option<f64> {
    if denom == 0 {
        None
    } else {
        Some(num as f64 / denom as f64)
    }
}

impl MetricsReport {
    /// Derive every metric from the four confusion counts.
    pub fn from_counts(mode: Mode, tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        let recall = ratio(tp, tp + fn_);
        let fpr = ratio(fp, fp + tn);
        let specificity = fpr.map(|f| 1.0 - f);
        let accuracy = ratio(tp + tn, tp + tn + fp + fn_);
        let precision = ratio(tp, tp + fp);
        let gmean = match (recall, specificity) {
            (Some(r), Some(s)) => Some((r * s).sqrt()),
            _ => None,
        };
        MetricsReport {
            mode,
            tp,
            fp,
            tn,
            fn_,
            recall,
            fpr,
            specificity,
            accuracy,
            precision,
            gmean,
            unevaluated: 0,
        }
    }

    pub fn labeled(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn unlabeled(&self) -> u64 {
        self.fp + self.tn
    }
}

fn confusion(predictions: &[bool], labels: &[bool], mode: Mode) -> Result<MetricsReport> {
    if predictions.len() != labels.len() {
        return Err(Error::LabelMismatch { predictions: predictions.len(), labels: labels.len() });
    }
    let mut tp = 0;
    let mut fp = 0;
    let mut tn = 0;
    let mut fn_ = 0;
    for (&predicted, &malicious) in predictions.iter().zip(labels) {
        match (malicious, predicted) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(MetricsReport::from_counts(mode, tp, fp, tn, fn_))
}

/// Score per-window verdicts against per-window ground truth.
pub fn score_trace_based(predictions: &[bool], labels: &[bool]) -> Result<MetricsReport> {
    confusion(predictions, labels, Mode::Trace)
}

/// Score task verdicts: one confusion entry per evaluated task; unevaluated
/// tasks are counted separately, never folded into the confusion matrix.
pub fn score_task_based(verdicts: &[TaskVerdict]) -> Result<MetricsReport> {
    let evaluated: Vec<&TaskVerdict> = verdicts.iter().filter(|v| !v.unevaluated).collect();
    let predictions: Vec<bool> = evaluated.iter().map(|v| v.malicious_predicted).collect();
    let labels: Vec<bool> = evaluated.iter().map(|v| v.true_label).collect();
    let mut report = confusion(&predictions, &labels, Mode::Task)?;
    report.unevaluated = (verdicts.len() - evaluated.len()) as u64;
    Ok(report)
}

/// Fraction of windows whose observed next key lies in the model's top-t
/// candidates (unlabeled-corpus accuracy). Returns `None` for an empty
/// window set.
pub fn score_next_key<M: NextKeyModel>(
    model: &M,
    windows: &[Window],
    t: usize,
    unknown: LogKey,
) -> Result<Option<f64>> {
    if windows.is_empty() {
        return Ok(None);
    }
    let verdicts: Result<Vec<bool>> = par_map(windows, |win| {
        crate::detector::classify_window(model, win, t, unknown).map(|v| !v.anomalous)
    })
    .into_iter()
    .collect();
    let hits = verdicts?.iter().filter(|&&ok| ok).count();
    Ok(Some(hits as f64 / windows.len() as f64))
}

fn fmt_metric(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "-".to_string(),
    }
}

/// One row of the evaluation table: a report at a given candidate count.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub candidate: usize,
    pub report: MetricsReport,
}

/// CSV with one row per (candidate, mode) report.
pub fn write_reports_csv<W: std::io::Write>(mut w: W, rows: &[ReportRow]) -> Result<()> {
    writeln!(
        w,
        "candidate,type,labeled,unlabeled,tp,fp,tn,fn,recall,fp_rate,specificity,accuracy,precision,gmean,unevaluated"
    )?;
    for row in rows {
        let r = &row.report;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            row.candidate,
            r.mode,
            r.labeled(),
            r.unlabeled(),
            r.tp,
            r.fp,
            r.tn,
            r.fn_,
            fmt_metric(r.recall),
            fmt_metric(r.fpr),
            fmt_metric(r.specificity),
            fmt_metric(r.accuracy),
            fmt_metric(r.precision),
            fmt_metric(r.gmean),
            r.unevaluated,
        )?;
    }
    Ok(())
}

/// Aligned text table mirroring the CSV columns.
pub fn format_reports_table(rows: &[ReportRow]) -> String {
    let header = ["candidate", "type", "#labeled", "#unlabeled", "recall", "FP rate", "specificity", "accuracy"];
    let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for row in rows {
        let r = &row.report;
        cells.push(vec![
            row.candidate.to_string(),
            r.mode.to_string(),
            r.labeled().to_string(),
            r.unlabeled().to_string(),
            fmt_metric(r.recall),
            fmt_metric(r.fpr),
            fmt_metric(r.specificity),
            fmt_metric(r.accuracy),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| cells.iter().map(|row| row[c].len()).max().unwrap())
        .collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> =
            row.iter().zip(&widths).map(|(cell, &w)| format!("{cell:>w$}")).collect();
        out.push_str(&line.join("  "));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasktree::NodeKey;

    #[test]
    fn paper_confusion_counts_reproduce_published_rates() {
        // FP = 24971 of 471596 unlabeled, FN = 8493 of 53461 labeled
        let report = MetricsReport::from_counts(
            Mode::Trace,
            53461 - 8493,
            24971,
            471596 - 24971,
            8493,
        );
        assert!((report.fpr.unwrap() - 0.0529).abs() < 0.0005);
        assert!((report.recall.unwrap() - 0.8411).abs() < 0.0005);
    }

    #[test]
    fn perfect_counts_give_all_ones() {
        let r = MetricsReport::from_counts(Mode::Trace, 1, 0, 1, 0);
        for v in [r.recall, r.fpr.map(|f| 1.0 - f), r.specificity, r.accuracy, r.precision, r.gmean]
        {
            assert_eq!(v, Some(1.0));
        }
        assert_eq!(r.fpr, Some(0.0));
    }

    #[test]
    fn metric_identities_hold() {
        let r = MetricsReport::from_counts(Mode::Trace, 34, 12, 88, 7);
        let (tp, fp, tn, fn_) = (34.0, 12.0, 88.0, 7.0);
        assert!((r.recall.unwrap() - tp / (tp + fn_)).abs() < 1e-12);
        assert!((r.fpr.unwrap() - fp / (fp + tn)).abs() < 1e-12);
        assert!((r.specificity.unwrap() - tn / (fp + tn)).abs() < 1e-12);
        assert!((r.accuracy.unwrap() - (tp + tn) / (tp + tn + fp + fn_)).abs() < 1e-12);
        assert!((r.precision.unwrap() - tp / (tp + fp)).abs() < 1e-12);
        let g2 = r.gmean.unwrap() * r.gmean.unwrap();
        assert!((g2 - r.recall.unwrap() * r.specificity.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn zero_denominators_are_undefined() {
        let r = MetricsReport::from_counts(Mode::Task, 0, 3, 5, 0);
        assert_eq!(r.recall, None);
        assert_eq!(r.precision.is_some(), true);
        let none = MetricsReport::from_counts(Mode::Task, 0, 0, 0, 0);
        assert_eq!(none.accuracy, None);
        assert!(format_reports_table(&[ReportRow { candidate: 1, report: none }]).contains('-'));
    }

    #[test]
    fn label_mismatch_rejected() {
        assert!(matches!(
            score_trace_based(&[true, false], &[true]),
            Err(Error::LabelMismatch { predictions: 2, labels: 1 })
        ));
    }

    #[test]
    fn trace_counts_are_order_invariant() {
        let preds = [true, false, true, true, false];
        let labels = [true, true, false, true, false];
        let a = score_trace_based(&preds, &labels).unwrap();
        let rev_p: Vec<bool> = preds.iter().rev().copied().collect();
        let rev_l: Vec<bool> = labels.iter().rev().copied().collect();
        let b = score_trace_based(&rev_p, &rev_l).unwrap();
        assert_eq!((a.tp, a.fp, a.tn, a.fn_), (b.tp, b.fp, b.tn, b.fn_));
    }

    fn verdict(predicted: bool, label: bool, unevaluated: bool) -> TaskVerdict {
        TaskVerdict {
            task_key: NodeKey::new(0, "t"),
            n_windows: if unevaluated { 0 } else { 5 },
            n_anomalous: predicted as usize,
            malicious_predicted: predicted,
            first_anomaly_position: predicted.then_some(0),
            unevaluated,
            true_label: label,
        }
    }

    #[test]
    fn task_recall_counts_detected_over_malicious() {
        // 13 malicious, 13 detected -> recall 1.0
        let all: Vec<TaskVerdict> = (0..13).map(|_| verdict(true, true, false)).collect();
        assert_eq!(score_task_based(&all).unwrap().recall, Some(1.0));
        // 36 malicious, 34 detected -> recall 34/36
        let mut some: Vec<TaskVerdict> = (0..34).map(|_| verdict(true, true, false)).collect();
        some.extend((0..2).map(|_| verdict(false, true, false)));
        let r = score_task_based(&some).unwrap();
        assert!((r.recall.unwrap() - 34.0 / 36.0).abs() < 1e-12);
    }

    #[test]
    fn no_malicious_tasks_means_undefined_recall() {
        let verdicts = vec![verdict(false, false, false), verdict(true, false, false)];
        assert_eq!(score_task_based(&verdicts).unwrap().recall, None);
    }

    #[test]
    fn unevaluated_tasks_reported_separately() {
        let verdicts =
            vec![verdict(true, true, false), verdict(false, false, true), verdict(false, false, true)];
        let r = score_task_based(&verdicts).unwrap();
        assert_eq!(r.unevaluated, 2);
        assert_eq!(r.tp + r.fp + r.tn + r.fn_, 1);
    }

    #[test]
    fn next_key_accuracy_on_deterministic_grammar() {
        use crate::predictor::train_ngram;
        let keys: Vec<u32> = (0..60).map(|i| i % 3).collect();
        let windows: Vec<Window> = (0..keys.len() - 2)
            .map(|j| Window {
                context: keys[j..j + 2].to_vec(),
                label: keys[j + 2],
                origin: (NodeKey::new(0, "t"), j),
            })
            .collect();
        let model = train_ngram(&windows, 2, 0.0, 4);
        let acc = score_next_key(&model, &windows, 1, 3).unwrap().unwrap();
        assert_eq!(acc, 1.0);
        // t = G covers every in-vocabulary key
        let acc_g = score_next_key(&model, &windows, 4, 3).unwrap().unwrap();
        assert_eq!(acc_g, 1.0);
        assert_eq!(score_next_key(&model, &[], 1, 3).unwrap(), None);
    }

    #[test]
    fn next_key_accuracy_on_uniform_noise_is_near_chance() {
        use crate::predictor::train_ngram;
        use rand::{Rng, SeedableRng};
        let g = 16u32;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let keys: Vec<u32> = (0..4000).map(|_| rng.gen_range(0..g)).collect();
        let windows: Vec<Window> = (0..keys.len() - 1)
            .map(|j| Window {
                context: keys[j..j + 1].to_vec(),
                label: keys[j + 1],
                origin: (NodeKey::new(0, "t"), j),
            })
            .collect();
        // order-0 context: every prediction is the empirical marginal
        let model = train_ngram(&windows, 0, 1.0, g);
        let acc = score_next_key(&model, &windows, 1, g).unwrap().unwrap();
        let p = 1.0 / g as f64;
        let sigma = (p * (1.0 - p) / windows.len() as f64).sqrt();
        assert!((acc - p).abs() < 3.0 * sigma + 1e-9, "acc {acc} vs chance {p}");
    }
}
