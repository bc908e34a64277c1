//! Fixed-width (context, next-key) window extraction from encoded traces.

use ndarray::Array1;

use crate::encoder::EncodedTrace;
use crate::error::{Error, Result};
use crate::ingest::LogKey;
use crate::par::par_map;
use crate::tasktree::NodeKey;

/// One training or detection window: `w` context keys and the key that
/// follows them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub context: Vec<LogKey>,
    pub label: LogKey,
    pub origin: (NodeKey, usize),
}

/// Slide a width-`w` window over the trace. A trace of length `len` yields
/// `max(0, len - w)` windows; traces shorter than `w + 1` yield none and are
/// reported as unevaluated downstream.
pub fn make_windows(trace: &EncodedTrace, w: usize) -> Vec<Window> {
    assert!(w >= 1, "window size must be at least 1");
    if trace.keys.len() <= w {
        return Vec::new();
    }
    (0..trace.keys.len() - w)
        .map(|j| Window {
            context: trace.keys[j..j + w].to_vec(),
            label: trace.keys[j + w],
            origin: (trace.source.clone(), j),
        })
        .collect()
}

/// Windows for a whole corpus, trace-parallel, concatenated in trace order.
pub fn make_windows_corpus(traces: &[EncodedTrace], w: usize) -> Vec<Window> {
    par_map(traces, |t| make_windows(t, w)).into_iter().flatten().collect()
}

/// Length-`g` one-hot vector for `key`.
pub fn one_hot(key: LogKey, g: u32) -> Result<Array1<f64>> {
    if key >= g {
        return Err(Error::KeyOutOfRange { key, limit: g });
    }
    let mut v = Array1::zeros(g as usize);
    v[key as usize] = 1.0;
    Ok(v)
}
