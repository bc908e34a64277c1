//! Task tree construction from a user's chronological event stream.
//!
//! Each event names a child node `(pid, objectid)` and a parent node
//! `(ppid, actorid)`. Nodes appear in the tree as they are referenced;
//! parents that have not been seen yet are created as orphans under the
//! synthetic root R, and re-parented once their own parent shows up. When a
//! node re-appears under a conflicting parent, its existing subtree is
//! flagged: every node in it is renamed to a fresh key and the renamed
//! subtree becomes a new task under R, after which a fresh node is created
//! under the new parent. Each child of R is a task; a task's trace is the
//! chronological sequence of log keys of every event in its subtree.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::ingest::{EventRecord, KeyVocabulary, LogKey};

/// Identity of one tree node. `rename_suffix` is 0 unless the node was
/// produced by flagging.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeKey {
    pub pid_part: i64,
    pub id_part: String,
    pub rename_suffix: u32,
}

impl NodeKey {
    pub fn new(pid_part: i64, id_part: impl Into<String>) -> Self {
        NodeKey { pid_part, id_part: id_part.into(), rename_suffix: 0 }
    }

    fn child_of(event: &EventRecord) -> Self {
        NodeKey::new(event.pid, event.object_id.clone())
    }

    fn parent_of(event: &EventRecord) -> Self {
        NodeKey::new(event.ppid, event.actor_id.clone())
    }
}

impl fmt::Display for NodeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.pid_part, self.id_part, self.rename_suffix)
    }
}

/// One node: parent link, insertion-ordered children, and the payload of
/// event indices (positions into the sorted input slice).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskNode {
    pub key: NodeKey,
    /// `None` means the synthetic root R.
    pub parent: Option<NodeKey>,
    pub children: Vec<NodeKey>,
    pub payload: Vec<usize>,
}

/// The filiation-augmented process tree of one user.
#[derive(Debug, Clone, Default)]
pub struct TaskTree {
    nodes: HashMap<NodeKey, TaskNode>,
    /// Children of R in first-created order; each is a task.
    root_children: Vec<NodeKey>,
    flag_count: u32,
}

/// Chronological key sequence of one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub task_key: NodeKey,
    pub keys: Vec<LogKey>,
    pub malicious: bool,
}

impl TaskTree {
    pub fn node(&self, key: &NodeKey) -> Option<&TaskNode> {
        self.nodes.get(key)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn flag_count(&self) -> u32 {
        self.flag_count
    }

    /// Children of R in first-created order.
    pub fn tasks(&self) -> &[NodeKey] {
        &self.root_children
    }

    fn add_node(&mut self, key: NodeKey, parent: Option<NodeKey>) {
        match &parent {
            Some(p) => {
                let p = p.clone();
                self.nodes.get_mut(&p).expect("parent exists").children.push(key.clone());
            }
            None => self.root_children.push(key.clone()),
        }
        self.nodes
            .insert(key.clone(), TaskNode { key, parent, children: Vec::new(), payload: Vec::new() });
    }

    fn detach(&mut self, key: &NodeKey) {
        let parent = self.nodes[key].parent.clone();
        match parent {
            Some(p) => {
                let siblings = &mut self.nodes.get_mut(&p).unwrap().children;
                siblings.retain(|c| c != key);
            }
            None => self.root_children.retain(|c| c != key),
        }
    }

    fn move_node(&mut self, key: &NodeKey, new_parent: NodeKey) {
        self.detach(key);
        self.nodes.get_mut(&new_parent).unwrap().children.push(key.clone());
        self.nodes.get_mut(key).unwrap().parent = Some(new_parent);
    }

    fn is_descendant(&self, candidate: &NodeKey, ancestor: &NodeKey) -> bool {
        let mut cur = self.nodes[candidate].parent.clone();
        while let Some(k) = cur {
            if &k == ancestor {
                return true;
            }
            cur = self.nodes[&k].parent.clone();
        }
        false
    }

    /// Rename `key` and its whole subtree to fresh keys and re-attach the
    /// renamed subtree root under R. Payloads move verbatim. Returns the
    /// updated flag counter.
    pub fn flag_nodes(&mut self, key: &NodeKey) -> Result<u32> {
        if !self.nodes.contains_key(key) {
            return Err(Error::UnknownNode(key.to_string()));
        }
        self.detach(key);
        self.flag_subtree(key.clone(), None);
        Ok(self.flag_count)
    }

    fn flag_subtree(&mut self, old_key: NodeKey, new_parent: Option<NodeKey>) {
        self.flag_count += 1;
        let old = self.nodes.remove(&old_key).expect("subtree node exists");
        let new_key =
            NodeKey { pid_part: old.key.pid_part, id_part: old.key.id_part, rename_suffix: self.flag_count };
        match &new_parent {
            Some(p) => self.nodes.get_mut(p).unwrap().children.push(new_key.clone()),
            None => self.root_children.push(new_key.clone()),
        }
        self.nodes.insert(
            new_key.clone(),
            TaskNode {
                key: new_key.clone(),
                parent: new_parent,
                children: Vec::new(),
                payload: old.payload,
            },
        );
        for child in old.children {
            self.flag_subtree(child, Some(new_key.clone()));
        }
    }

    /// Depth-union all payload events of the task's subtree, in
    /// (timestamp, ingest ordinal) order, mapped to log keys.
    pub fn trace_of(
        &self,
        task: &NodeKey,
        events: &[EventRecord],
        vocab: &KeyVocabulary,
        truncate: Option<usize>,
    ) -> Result<Trace> {
        if !self.nodes.contains_key(task) {
            return Err(Error::UnknownNode(task.to_string()));
        }
        let mut indices = Vec::new();
        let mut stack = vec![task.clone()];
        while let Some(key) = stack.pop() {
            let node = &self.nodes[&key];
            indices.extend_from_slice(&node.payload);
            stack.extend(node.children.iter().cloned());
        }
        indices.sort_by_key(|&i| (events[i].timestamp_us, events[i].ingest_ordinal));
        if let Some(limit) = truncate {
            indices.truncate(limit);
        }
        let malicious = indices.iter().any(|&i| events[i].malicious);
        let keys = indices.iter().map(|&i| vocab.key_of(&events[i])).collect();
        Ok(Trace { task_key: task.clone(), keys, malicious })
    }

    /// Total payload events across all nodes.
    pub fn total_events(&self) -> usize {
        self.nodes.values().map(|n| n.payload.len()).sum()
    }

    /// JSON-lines serialization, one node per line in deterministic
    /// (pre-order) traversal from R.
    pub fn write_jsonl<W: Write>(&self, mut w: W, events: &[EventRecord]) -> Result<()> {
        let mut stack: Vec<NodeKey> = self.root_children.iter().rev().cloned().collect();
        while let Some(key) = stack.pop() {
            let node = &self.nodes[&key];
            let parent = match &node.parent {
                Some(p) => json!([p.pid_part, p.id_part, p.rename_suffix]),
                None => Value::String("R".to_string()),
            };
            let ordinals: Vec<u64> =
                node.payload.iter().map(|&i| events[i].ingest_ordinal).collect();
            let line = json!({
                "key": [key.pid_part, key.id_part, key.rename_suffix],
                "parent": parent,
                "events": ordinals,
            });
            writeln!(w, "{}", serde_json::to_string(&line)?)?;
            stack.extend(node.children.iter().rev().cloned());
        }
        Ok(())
    }
}

/// Build the task tree from events sorted by (timestamp, ingest ordinal).
///
/// One sequential fold; the branch taken for each event depends on the tree
/// state accumulated so far. Different users' trees can be built
/// concurrently.
pub fn create_task_tree(events: &[EventRecord]) -> TaskTree {
    let mut tree = TaskTree::default();
    for (idx, event) in events.iter().enumerate() {
        let node_id = NodeKey::child_of(event);
        let parent_id = NodeKey::parent_of(event);
        if node_id == parent_id {
            // a self-reference carries no filiation information: it neither
            // attaches nor conflicts, it only contributes its event
            if !tree.nodes.contains_key(&node_id) {
                tree.add_node(node_id.clone(), None);
            }
            tree.nodes.get_mut(&node_id).unwrap().payload.push(idx);
            continue;
        }
        if !tree.nodes.contains_key(&node_id) {
            if !tree.nodes.contains_key(&parent_id) {
                tree.add_node(parent_id.clone(), None);
            }
            tree.add_node(node_id.clone(), Some(parent_id));
            tree.nodes.get_mut(&node_id).unwrap().payload.push(idx);
        } else if tree.nodes[&node_id].parent.is_none() {
            if !tree.nodes.contains_key(&parent_id) {
                tree.add_node(parent_id.clone(), None);
            }
            // an orphan task's true parent appeared; guard against the
            // parent sitting inside the orphan's own subtree
            if !tree.is_descendant(&parent_id, &node_id) {
                tree.move_node(&node_id, parent_id);
            }
            tree.nodes.get_mut(&node_id).unwrap().payload.push(idx);
        } else if tree.nodes[&node_id].parent.as_ref() != Some(&parent_id) {
            tree.flag_nodes(&node_id).expect("node exists");
            if !tree.nodes.contains_key(&parent_id) {
                tree.add_node(parent_id.clone(), None);
            }
            tree.add_node(node_id.clone(), Some(parent_id));
            tree.nodes.get_mut(&node_id).unwrap().payload.push(idx);
        } else {
            tree.nodes.get_mut(&node_id).unwrap().payload.push(idx);
        }
    }
    tree
}

/// Partition events by user (`principal`), preserving order within each
/// partition. Records without a principal fall into the empty-string user.
pub fn partition_by_user(events: &[EventRecord]) -> Vec<(String, Vec<EventRecord>)> {
    let mut order: Vec<String> = Vec::new();
    let mut map: HashMap<String, Vec<EventRecord>> = HashMap::new();
    for e in events {
        let user = e.principal.clone().unwrap_or_default();
        map.entry(user.clone()).or_insert_with(|| {
            order.push(user.clone());
            Vec::new()
        });
        map.get_mut(&user).unwrap().push(e.clone());
    }
    order.into_iter().map(|u| { let v = map.remove(&u).unwrap(); (u, v) }).collect()
}
