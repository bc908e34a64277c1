//! Run-collapse encoding of task traces.
//!
//! Any maximal run of three or more identical keys is emitted as two copies
//! of the base key followed by the primed key `k + n`, so no encoded trace
//! contains three equal consecutive symbols. A run of length one or two is
//! emitted verbatim. `{a b b b b b c}` becomes `{a b b b' c}` while
//! `{a b b c}` stays as is.
//!
//! The model alphabet after encoding is `G = 2n + 1`: base keys in `[0, n)`,
//! primed keys in `[n, 2n)`, and the out-of-vocabulary sentinel at `2n`.

use crate::error::{Error, Result};
use crate::ingest::LogKey;
use crate::par::par_map;
use crate::tasktree::{NodeKey, Trace};

/// Encoded trace over the extended alphabet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedTrace {
    pub source: NodeKey,
    pub keys: Vec<LogKey>,
    pub malicious: bool,
}

/// Model alphabet size for a base vocabulary of `n` keys.
pub fn alphabet_size(n: u32) -> u32 {
    2 * n + 1
}

/// Encoded value of the out-of-vocabulary sentinel.
pub fn encoded_unknown(n: u32) -> LogKey {
    2 * n
}

/// Collapse runs of three or more identical keys. All keys must be `< n`.
pub fn encode(keys: &[LogKey], n: u32) -> Result<Vec<LogKey>> {
    if let Some(&bad) = keys.iter().find(|&&k| k >= n) {
        return Err(Error::KeyOutOfRange { key: bad, limit: n });
    }
    let mut out = Vec::with_capacity(keys.len());
    let mut i = 0;
    while i < keys.len() {
        let key = keys[i];
        let mut run = 1;
        while i + run < keys.len() && keys[i + run] == key {
            run += 1;
        }
        out.push(key);
        if run >= 2 {
            out.push(key);
        }
        if run >= 3 {
            out.push(key + n);
        }
        i += run;
    }
    Ok(out)
}

/// Encode a trace that may contain the out-of-vocabulary sentinel `n`.
///
/// In-vocabulary runs collapse as in [`encode`]; sentinel occurrences map to
/// the encoded unknown symbol `2n`, with runs capped at two copies so the
/// no-long-run invariant holds (there is no primed form of the unknown key).
pub fn encode_trace(trace: &Trace, n: u32) -> Result<EncodedTrace> {
    let mut out = Vec::with_capacity(trace.keys.len());
    let mut i = 0;
    while i < trace.keys.len() {
        let key = trace.keys[i];
        if key > n {
            return Err(Error::KeyOutOfRange { key, limit: n + 1 });
        }
        let mut run = 1;
        while i + run < trace.keys.len() && trace.keys[i + run] == key {
            run += 1;
        }
        if key == n {
            out.push(encoded_unknown(n));
            if run >= 2 {
                out.push(encoded_unknown(n));
            }
        } else {
            out.push(key);
            if run >= 2 {
                out.push(key);
            }
            if run >= 3 {
                out.push(key + n);
            }
        }
        i += run;
    }
    Ok(EncodedTrace { source: trace.task_key.clone(), keys: out, malicious: trace.malicious })
}

/// Encode a batch of traces (parallel across traces).
pub fn encode_traces(traces: &[Trace], n: u32) -> Result<Vec<EncodedTrace>> {
    par_map(traces, |t| encode_trace(t, n)).into_iter().collect()
}

/// Count the distinct symbols actually emitted over an encoded corpus.
pub fn extended_alphabet_size<'a, I>(traces: I) -> usize
where
    I: IntoIterator<Item = &'a EncodedTrace>,
{
    let mut seen = std::collections::HashSet::new();
    for trace in traces {
        seen.extend(trace.keys.iter().copied());
    }
    seen.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_example_with_long_run() {
        // {a b b b b b c} -> {a b b b' c} with a=0, b=1, c=2, n=3
        let encoded = encode(&[0, 1, 1, 1, 1, 1, 2], 3).unwrap();
        assert_eq!(encoded, vec![0, 1, 1, 4, 2]);
    }

    #[test]
    fn worked_example_short_run_unchanged() {
        let encoded = encode(&[0, 1, 1, 2], 3).unwrap();
        assert_eq!(encoded, vec![0, 1, 1, 2]);
    }

    #[test]
    fn empty_input_is_empty() {
        assert_eq!(encode(&[], 3).unwrap(), Vec::<LogKey>::new());
    }

    #[test]
    fn bare_run_of_three() {
        assert_eq!(encode(&[1, 1, 1], 3).unwrap(), vec![1, 1, 4]);
    }

    #[test]
    fn key_out_of_range_rejected() {
        assert!(matches!(encode(&[3], 3), Err(Error::KeyOutOfRange { key: 3, limit: 3 })));
    }

    #[test]
    fn unknown_sentinel_runs_are_capped() {
        let trace = Trace {
            task_key: crate::tasktree::NodeKey::new(0, "t"),
            keys: vec![0, 3, 3, 3, 3, 1],
            malicious: false,
        };
        let encoded = encode_trace(&trace, 3).unwrap();
        assert_eq!(encoded.keys, vec![0, 6, 6, 1]);
    }

    #[test]
    fn observed_alphabet_counts_distinct_symbols() {
        let traces = vec![
            EncodedTrace {
                source: crate::tasktree::NodeKey::new(0, "a"),
                keys: vec![0, 1, 1, 4, 2],
                malicious: false,
            },
            EncodedTrace {
                source: crate::tasktree::NodeKey::new(0, "b"),
                keys: vec![0, 2],
                malicious: false,
            },
        ];
        assert_eq!(extended_alphabet_size(&traces), 4);
    }

    fn no_three_consecutive(keys: &[LogKey]) -> bool {
        keys.windows(3).all(|w| !(w[0] == w[1] && w[1] == w[2]))
    }

    proptest! {
        #[test]
        fn encoding_invariants(
            n in 2u32..64,
            raw in prop::collection::vec(0u32..64, 0..500),
        ) {
            let keys: Vec<LogKey> = raw.into_iter().map(|k| k % n).collect();
            let encoded = encode(&keys, n).unwrap();
            // no window of three equal consecutive symbols
            prop_assert!(no_three_consecutive(&encoded));
            // length bound: sum of min(run, 3)
            let mut expect = 0usize;
            let mut i = 0;
            while i < keys.len() {
                let mut run = 1;
                while i + run < keys.len() && keys[i + run] == keys[i] { run += 1; }
                expect += run.min(3);
                i += run;
            }
            prop_assert_eq!(encoded.len(), expect);
            prop_assert!(encoded.len() <= keys.len());
            // idempotence: an encoded trace is a fixed point
            let twice = encode(&encoded, 2 * n).unwrap();
            prop_assert_eq!(&twice, &encoded);
        }
    }
}
