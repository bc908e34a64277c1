//! Top-t candidate detection over encoded traces.
//!
//! An observed key is normal iff it is among the t highest-probability
//! candidates predicted from its context window; probability ties at the
//! boundary break by ascending key index so verdicts are reproducible. A
//! task is predicted malicious iff at least one of its windows is anomalous.
//! The out-of-vocabulary sentinel is anomalous unconditionally.

use crate::encoder::EncodedTrace;
use crate::error::{Error, Result};
use crate::ingest::LogKey;
use crate::par::par_map;
use crate::predictor::NextKeyModel;
use crate::sequencer::{make_windows, Window};
use crate::tasktree::NodeKey;

/// Verdict for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceVerdict {
    pub origin: (NodeKey, usize),
    pub observed: LogKey,
    pub top_t: Vec<LogKey>,
    pub anomalous: bool,
}

/// Aggregated verdict for one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskVerdict {
    pub task_key: NodeKey,
    pub n_windows: usize,
    pub n_anomalous: usize,
    pub malicious_predicted: bool,
    pub first_anomaly_position: Option<usize>,
    /// True when the trace was too short to form a single window.
    pub unevaluated: bool,
    /// Ground-truth label carried along for scoring.
    pub true_label: bool,
}

/// The t keys of highest probability, ties broken by ascending key index.
pub fn top_candidates(dist: &[f64], t: usize) -> Result<Vec<LogKey>> {
    if t == 0 || t > dist.len() {
        return Err(Error::BadCandidateCount { t, g: dist.len() });
    }
    let mut keys: Vec<usize> = (0..dist.len()).collect();
    keys.sort_by(|&a, &b| dist[b].partial_cmp(&dist[a]).unwrap().then(a.cmp(&b)));
    keys.truncate(t);
    Ok(keys.into_iter().map(|k| k as u32).collect())
}

/// Classify one window under the top-t rule. `unknown` is the encoded
/// out-of-vocabulary sentinel, anomalous regardless of the prediction.
pub fn classify_window<M: NextKeyModel>(
    model: &M,
    window: &Window,
    t: usize,
    unknown: LogKey,
) -> Result<TraceVerdict> {
    let dist = model.predict(&window.context)?;
    let top_t = top_candidates(&dist, t)?;
    let anomalous = window.label == unknown || !top_t.contains(&window.label);
    Ok(TraceVerdict { origin: window.origin.clone(), observed: window.label, top_t, anomalous })
}

/// Classify a whole task trace: windows via the sequencer, verdict is the
/// OR over window verdicts. Traces shorter than `w + 1` are unevaluated.
pub fn classify_task<M: NextKeyModel>(
    model: &M,
    trace: &EncodedTrace,
    w: usize,
    t: usize,
    unknown: LogKey,
) -> Result<TaskVerdict> {
    let windows = make_windows(trace, w);
    if windows.is_empty() {
        return Ok(TaskVerdict {
            task_key: trace.source.clone(),
            n_windows: 0,
            n_anomalous: 0,
            malicious_predicted: false,
            first_anomaly_position: None,
            unevaluated: true,
            true_label: trace.malicious,
        });
    }
    let mut n_anomalous = 0;
    let mut first = None;
    for win in &windows {
        let verdict = classify_window(model, win, t, unknown)?;
        if verdict.anomalous {
            n_anomalous += 1;
            if first.is_none() {
                first = Some(win.origin.1);
            }
        }
    }
    Ok(TaskVerdict {
        task_key: trace.source.clone(),
        n_windows: windows.len(),
        n_anomalous,
        malicious_predicted: n_anomalous >= 1,
        first_anomaly_position: first,
        unevaluated: false,
        true_label: trace.malicious,
    })
}

/// Classify every trace of a corpus, trace-parallel.
pub fn classify_corpus<M: NextKeyModel>(
    model: &M,
    traces: &[EncodedTrace],
    w: usize,
    t: usize,
    unknown: LogKey,
) -> Result<Vec<TaskVerdict>> {
    par_map(traces, |trace| classify_task(model, trace, w, t, unknown)).into_iter().collect()
}

/// Render task verdicts as the CSV interchange format.
pub fn write_verdicts_csv<W: std::io::Write>(mut w: W, verdicts: &[TaskVerdict]) -> Result<()> {
    writeln!(
        w,
        "task_key,n_windows,n_anomalous,first_anomaly_position,predicted,true_label"
    )?;
    for v in verdicts {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            v.task_key,
            v.n_windows,
            v.n_anomalous,
            v.first_anomaly_position.map(|p| p.to_string()).unwrap_or_default(),
            if v.unevaluated { "unevaluated" } else if v.malicious_predicted { "1" } else { "0" },
            if v.true_label { "1" } else { "0" },
        )?;
    }
    Ok(())
}
