//! Next-key distribution estimators.
//!
//! Two interchangeable models serve `Pr(k_t = p_i | w)`: a from-scratch
//! two-layer LSTM multi-classifier trained with mini-batch SGD, and a
//! count-based n-gram estimator used as baseline and test oracle.

mod lstm;
mod ngram;

pub use lstm::{train_lstm, Gradients, LstmModel};
pub use ngram::{train_ngram, NgramModel};

use crate::error::{Error, Result};
use crate::ingest::LogKey;

/// Training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    /// Window size.
    pub w: usize,
    /// Stacked LSTM layers.
    pub layers: usize,
    /// Memory units per block.
    pub alpha: usize,
    /// Mini-batch size.
    pub batch: usize,
    pub epochs: usize,
    /// Initial learning rate; epoch e runs at `lr0 * decay^e`.
    pub lr0: f64,
    pub decay: f64,
    pub seed: u64,
    /// Alphabet size (base + primed keys + unknown sentinel).
    pub g: u32,
}

impl Hyperparams {
    /// Reference configuration: w=15, 2 layers, 64 units, batch 2048,
    /// 160 epochs.
    pub fn reference(g: u32, seed: u64) -> Self {
        Hyperparams {
            w: 15,
            layers: 2,
            alpha: 64,
            batch: 2048,
            epochs: 160,
            lr0: 0.05,
            decay: 0.97,
            seed,
            g,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("w", self.w),
            ("layers", self.layers),
            ("alpha", self.alpha),
            ("batch", self.batch),
            ("epochs", self.epochs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.g == 0 {
            return Err(Error::InvalidConfig("alphabet size must be >= 1".into()));
        }
        if !(self.lr0 > 0.0 && self.decay > 0.0) {
            return Err(Error::InvalidConfig("learning rate and decay must be positive".into()));
        }
        Ok(())
    }
}

/// Per-epoch entry of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub validation_loss: Option<f64>,
    pub lr: f64,
}

/// Anything that yields a next-key distribution for a context window.
pub trait NextKeyModel: Sync {
    /// Probability vector over the alphabet; non-negative, sums to 1.
    fn predict(&self, context: &[LogKey]) -> Result<Vec<f64>>;

    /// Alphabet size G.
    fn alphabet_size(&self) -> u32;
}

pub(crate) fn check_context_keys(context: &[LogKey], g: u32) -> Result<()> {
    if let Some(&bad) = context.iter().find(|&&k| k >= g) {
        return Err(Error::KeyOutOfRange { key: bad, limit: g });
    }
    Ok(())
}
