//! Task-tree based anomaly detection for host telemetry.
//!
//! The pipeline reorganizes a user's chronological event stream into a forest
//! of tasks (process trees augmented with leaf events), encodes each task's
//! trace of event keys, trains a next-key sequence model on benign data only,
//! and flags traces whose observed keys fall outside the model's top-t
//! predicted candidates.
//!
//! Stages, in order:
//!
//! 1. [`ingest`] — parse raw telemetry (OpTC eCAR or LANL host logs) into
//!    [`ingest::EventRecord`]s and build the log-key vocabulary.
//! 2. [`tasktree`] — reconstruct the per-user task tree and extract per-task
//!    chronological traces.
//! 3. [`encoder`] — collapse long runs of identical keys into primed keys.
//! 4. [`sequencer`] — slice encoded traces into fixed-width training windows.
//! 5. [`predictor`] — LSTM multi-classifier plus an n-gram baseline for the
//!    next-key distribution.
//! 6. [`detector`] — top-t candidate rule, window and task verdicts.
//! 7. [`evaluation`] — confusion counts and the derived metric suite.
//!
//! [`synthgen`] produces seeded synthetic telemetry for desk-scale runs.

pub mod detector;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod ingest;
pub mod par;
pub mod predictor;
pub mod sequencer;
pub mod synthgen;
pub mod tasktree;

pub use error::Error;
