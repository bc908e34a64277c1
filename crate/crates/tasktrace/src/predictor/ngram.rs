//! Count-based n-gram next-key estimator with additive smoothing.

use std::collections::HashMap;

use crate::error::Result;
use crate::ingest::LogKey;
use crate::predictor::{check_context_keys, NextKeyModel};
use crate::sequencer::Window;

/// Next-key estimator conditioning on the last `order` keys.
///
/// `P(k | ctx) = (count(ctx, k) + s) / (total(ctx) + s * G)`; a context with
/// no counts and no smoothing falls back to the uniform distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    order: usize,
    g: u32,
    smoothing: f64,
    counts: HashMap<Vec<LogKey>, HashMap<LogKey, u64>>,
    totals: HashMap<Vec<LogKey>, u64>,
}

/// Build exact count tables from training windows. `order` is the number of
/// trailing context keys conditioned on; it must not exceed the window size.
pub fn train_ngram(windows: &[Window], order: usize, smoothing: f64, g: u32) -> NgramModel {
    let mut model = NgramModel {
        order,
        g,
        smoothing,
        counts: HashMap::new(),
        totals: HashMap::new(),
    };
    for win in windows {
        let ctx = model.context_suffix(&win.context);
        *model.counts.entry(ctx.clone()).or_default().entry(win.label).or_insert(0) += 1;
        *model.totals.entry(ctx).or_insert(0) += 1;
    }
    model
}

impl NgramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    fn context_suffix(&self, context: &[LogKey]) -> Vec<LogKey> {
        let start = context.len().saturating_sub(self.order);
        context[start..].to_vec()
    }

    /// Highest-probability key, ties broken by ascending key index.
    pub fn top1(&self, context: &[LogKey]) -> Result<LogKey> {
        let dist = self.predict(context)?;
        let mut best = 0usize;
        for (i, &p) in dist.iter().enumerate() {
            if p > dist[best] {
                best = i;
            }
        }
        Ok(best as u32)
    }
}

impl NextKeyModel for NgramModel {
    fn predict(&self, context: &[LogKey]) -> Result<Vec<f64>> {
        check_context_keys(context, self.g)?;
        let g = self.g as usize;
        let ctx = self.context_suffix(context);
        let total = self.totals.get(&ctx).copied().unwrap_or(0);
        let denom = total as f64 + self.smoothing * g as f64;
        if denom == 0.0 {
            return Ok(vec![1.0 / g as f64; g]);
        }
        let empty = HashMap::new();
        let counts = self.counts.get(&ctx).unwrap_or(&empty);
        Ok((0..g as u32)
            .map(|k| (counts.get(&k).copied().unwrap_or(0) as f64 + self.smoothing) / denom)
            .collect())
    }

    fn alphabet_size(&self) -> u32 {
        self.g
    }
}
