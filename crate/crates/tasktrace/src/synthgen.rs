//! Seeded synthetic host-telemetry generator.
//!
//! Emits OpTC-schema event streams whose process trees reconstruct cleanly:
//! every task is rooted in a synthetic parent node that is unique per task,
//! activity events reference their process as `(pid, process uuid)`, and
//! child processes hang off their parent via PROCESS START events. Benign
//! activity follows a small Markov task grammar; anomalies are planted by
//! mutating whole tasks and labelling the mutated events malicious.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ingest::EventRecord;
use crate::tasktree::create_task_tree;

/// Motif task grammar: activity is a chain of motifs, each an ordered key
/// cycle. Keys inside a motif follow each other deterministically; only at
/// motif boundaries is the continuation stochastic. Per-context successor
/// support therefore stays small, which is what makes the benign behaviour
/// learnable to near-certainty.
#[derive(Debug, Clone)]
pub struct TaskGrammar {
    /// Base alphabet size; keys are rendered as object-action pairs.
    pub n: u32,
    /// Ordered key cycle of each motif; the groups are disjoint.
    pub motifs: Vec<Vec<u32>>,
    /// Motif-to-motif transition weights.
    pub transitions: Vec<Vec<f64>>,
    /// Inclusive range of times a motif cycle repeats before transitioning.
    pub loops: (usize, usize),
    /// Probability that an emitted key repeats 3..=6 times, exercising the
    /// run encoder.
    pub run_injection_rate: f64,
    /// Mean events per task.
    pub mean_task_len: usize,
    /// Maximum child processes spawned per task.
    pub max_children: usize,
}

impl TaskGrammar {
    /// Default desk-scale grammar: 12 base keys over 3 four-key motifs,
    /// mean task length 120, up to 2 children per task.
    pub fn default_grammar() -> Self {
        TaskGrammar {
            n: 12,
            motifs: vec![(0..4).collect(), (4..8).collect(), (8..12).collect()],
            transitions: vec![
                vec![0.5, 0.3, 0.2],
                vec![0.2, 0.5, 0.3],
                vec![0.3, 0.2, 0.5],
            ],
            loops: (1, 3),
            run_injection_rate: 0.05,
            mean_task_len: 120,
            max_children: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.motifs.is_empty() || self.motifs.len() != self.transitions.len() {
            return Err(Error::InvalidConfig("motif and transition counts differ".into()));
        }
        for row in &self.transitions {
            if row.len() != self.motifs.len() {
                return Err(Error::InvalidConfig("transition row has wrong arity".into()));
            }
            if row.iter().any(|&w| w < 0.0) {
                return Err(Error::InvalidConfig("negative weight".into()));
            }
        }
        for motif in &self.motifs {
            if motif.is_empty() {
                return Err(Error::InvalidConfig("empty motif".into()));
            }
            if motif.iter().any(|&k| k >= self.n) {
                return Err(Error::InvalidConfig("motif key exceeds alphabet".into()));
            }
        }
        if self.loops.0 == 0 || self.loops.0 > self.loops.1 {
            return Err(Error::InvalidConfig("bad loop range".into()));
        }
        Ok(())
    }
}

/// Anomaly planting strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnomalyMode {
    /// Replace most keys with keys from a disjoint sub-alphabet.
    ForeignKey,
    /// Permute the within-task key order.
    Shuffled,
    /// Overwrite a contiguous stretch with one implausible key.
    Burst,
}

impl std::str::FromStr for AnomalyMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "foreign-key" => Ok(AnomalyMode::ForeignKey),
            "shuffled" => Ok(AnomalyMode::Shuffled),
            "burst" => Ok(AnomalyMode::Burst),
            other => Err(Error::InvalidConfig(format!("unknown anomaly mode '{other}'"))),
        }
    }
}

/// Render a synthetic key as an OpTC object-action pair.
fn key_to_pair(key: u32) -> (String, String) {
    let objects = ["FILE", "PROCESS", "FLOW", "MODULE"];
    let actions = ["CREATE", "READ", "WRITE", "DELETE", "START", "OPEN"];
    let object = objects[(key / 6) as usize % objects.len()];
    let action = actions[(key % 6) as usize];
    (object.to_string(), format!("{action}{}", key / 24))
}

fn weighted_pick(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut roll = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        roll -= w;
        if roll <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

struct ProcessCtx {
    pid: i64,
    uuid: String,
}

/// Generate `n_tasks` benign process trees, chronologically ordered and
/// interleaved across tasks. Deterministic given `seed`.
pub fn generate_benign(grammar: &TaskGrammar, n_tasks: usize, seed: u64) -> Result<Vec<EventRecord>> {
    grammar.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next_pid: i64 = 1000;
    let mut task_queues: Vec<Vec<EventRecord>> = Vec::with_capacity(n_tasks);

    for task_idx in 0..n_tasks {
        let mut events = Vec::new();
        let root_pid = next_pid;
        next_pid += 1;
        let root = ProcessCtx { pid: root_pid, uuid: format!("proc-{root_pid:08x}") };
        // unique synthetic parent per task: the orphan becomes the task
        // node under R
        let boot_uuid = format!("boot-{task_idx:05}");
        push_event(
            &mut events,
            task_idx,
            "PROCESS",
            "START",
            root.pid,
            1,
            &boot_uuid,
            &root.uuid,
        );

        let mut processes = vec![root];
        let n_children = rng.gen_range(0..=grammar.max_children);
        let len = (grammar.mean_task_len as f64 * rng.gen_range(0.6..1.4)) as usize;
        let child_points: Vec<usize> =
            (0..n_children).map(|_| rng.gen_range(0..len.max(1))).collect();

        let mut motif = weighted_pick(&vec![1.0; grammar.motifs.len()], &mut rng);
        let mut pos = 0usize;
        let mut loops_left = rng.gen_range(grammar.loops.0..=grammar.loops.1);
        let mut emitted = 0usize;
        while emitted < len {
            if child_points.contains(&emitted) {
                let parent = &processes[rng.gen_range(0..processes.len())];
                let (ppid, puuid) = (parent.pid, parent.uuid.clone());
                let pid = next_pid;
                next_pid += 1;
                let child = ProcessCtx { pid, uuid: format!("proc-{pid:08x}") };
                push_event(&mut events, task_idx, "PROCESS", "START", pid, ppid, &puuid, &child.uuid);
                processes.push(child);
            }
            let key = grammar.motifs[motif][pos];
            let repeats = if rng.gen::<f64>() < grammar.run_injection_rate {
                rng.gen_range(3..=6)
            } else {
                1
            };
            let proc_ref = &processes[rng.gen_range(0..processes.len())];
            let (pid, uuid) = (proc_ref.pid, proc_ref.uuid.clone());
            let (object, action) = key_to_pair(key);
            for rep in 0..repeats {
                let object_uuid = format!("obj-{task_idx:05}-{:06}-{rep}", events.len());
                push_event(&mut events, task_idx, &object, &action, pid, pid, &uuid, &object_uuid);
                emitted += 1;
            }
            pos += 1;
            if pos == grammar.motifs[motif].len() {
                pos = 0;
                loops_left -= 1;
                if loops_left == 0 {
                    motif = weighted_pick(&grammar.transitions[motif], &mut rng);
                    loops_left = rng.gen_range(grammar.loops.0..=grammar.loops.1);
                }
            }
        }
        task_queues.push(events);
    }

    // interleave tasks while preserving per-task order
    let mut cursors = vec![0usize; task_queues.len()];
    let mut stream = Vec::new();
    let mut clock_us: i64 = 1_600_000_000_000_000;
    loop {
        let live: Vec<usize> =
            (0..task_queues.len()).filter(|&i| cursors[i] < task_queues[i].len()).collect();
        if live.is_empty() {
            break;
        }
        let &pick = live.choose(&mut rng).unwrap();
        let mut event = task_queues[pick][cursors[pick]].clone();
        cursors[pick] += 1;
        clock_us += rng.gen_range(1_000..50_000);
        event.timestamp_us = clock_us;
        event.ingest_ordinal = stream.len() as u64;
        stream.push(event);
    }
    Ok(stream)
}

fn push_event(
    events: &mut Vec<EventRecord>,
    task_idx: usize,
    object: &str,
    action: &str,
    pid: i64,
    ppid: i64,
    actor_id: &str,
    object_id: &str,
) {
    events.push(EventRecord {
        record_id: format!("t{task_idx:05}-e{:06}", events.len()),
        object: object.to_string(),
        action: action.to_string(),
        pid,
        ppid,
        actor_id: actor_id.to_string(),
        object_id: object_id.to_string(),
        principal: Some("synth-user".to_string()),
        file_path: None,
        image_path: None,
        parent_image_path: None,
        timestamp_us: 0,
        malicious: false,
        ingest_ordinal: 0,
    });
}

/// Foreign sub-alphabet used by [`AnomalyMode::ForeignKey`]; disjoint from
/// everything [`key_to_pair`] can emit.
fn foreign_pair(rng: &mut ChaCha8Rng) -> (String, String) {
    let actions = ["EXFIL", "BEACON", "INJECT", "ESCALATE"];
    ("ROGUE".to_string(), actions[rng.gen_range(0..actions.len())].to_string())
}

/// Mutate `k` tasks of a benign stream and label the mutated events
/// malicious. Tasks are identified by reconstructing the stream's own task
/// tree, so planting works on any stream this generator (or the parser)
/// produces.
pub fn plant_anomalies(
    events: &[EventRecord],
    k: usize,
    mode: AnomalyMode,
    seed: u64,
) -> Result<Vec<EventRecord>> {
    let tree = create_task_tree(events);
    let tasks = tree.tasks().to_vec();
    if k > tasks.len() {
        return Err(Error::TooFewTasks { requested: k, available: tasks.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = tasks;
    chosen.shuffle(&mut rng);
    chosen.truncate(k);

    let mut out = events.to_vec();
    for task in &chosen {
        // depth-union the subtree's event indices, chronological order
        let mut indices = Vec::new();
        let mut stack = vec![task.clone()];
        while let Some(key) = stack.pop() {
            let node = tree.node(&key).expect("node from own traversal");
            indices.extend_from_slice(&node.payload);
            stack.extend(node.children.iter().cloned());
        }
        indices.sort_by_key(|&i| (events[i].timestamp_us, events[i].ingest_ordinal));
        match mode {
            AnomalyMode::ForeignKey => {
                // dense replacement so nearly every window of the task
                // contains a foreign key
                let mut any = false;
                for &i in &indices {
                    if rng.gen::<f64>() < 0.7 {
                        let (object, action) = foreign_pair(&mut rng);
                        out[i].object = object;
                        out[i].action = action;
                        out[i].malicious = true;
                        any = true;
                    }
                }
                if !any {
                    if let Some(&i) = indices.first() {
                        let (object, action) = foreign_pair(&mut rng);
                        out[i].object = object;
                        out[i].action = action;
                        out[i].malicious = true;
                    }
                }
            }
            AnomalyMode::Shuffled => {
                let mut pairs: Vec<(String, String)> = indices
                    .iter()
                    .map(|&i| (events[i].object.clone(), events[i].action.clone()))
                    .collect();
                pairs.shuffle(&mut rng);
                for (&i, (object, action)) in indices.iter().zip(pairs) {
                    out[i].object = object;
                    out[i].action = action;
                    out[i].malicious = true;
                }
            }
            AnomalyMode::Burst => {
                let burst_len = indices.len().min(40).max(1);
                let start = rng.gen_range(0..=indices.len() - burst_len);
                let (object, action) = foreign_pair(&mut rng);
                for &i in &indices[start..start + burst_len] {
                    out[i].object = object.clone();
                    out[i].action = action.clone();
                    out[i].malicious = true;
                }
            }
        }
    }
    Ok(out)
}
