//! Federated ID3: the aggregator grows the tree, parties only tabulate
//! counts. Each round queries the counts for one unexpanded node
//! (breadth-first); the fusion step sums the per-party tables, picks the
//! split with maximum information gain, and enqueues the children.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::data::CategoricalSchema;
use crate::error::{FedError, Result};
use crate::model::{DecisionTree, TreeNode};

use super::ReplySet;

/// The payload of a counts query: the root-to-node path constraints and
/// the features still available for splitting under that node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCandidates {
    /// `(feature, value)` constraints from the root to the node.
    pub path: Vec<(usize, usize)>,
    /// Features not yet used on the path, in ascending order.
    pub candidate_features: Vec<usize>,
    pub schema: CategoricalSchema,
}

impl SplitCandidates {
    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        let n_features = self.schema.n_features();
        for &(f, v) in &self.path {
            if f >= n_features || v >= self.schema.features[f].values.len() {
                return Err(FedError::Format(format!(
                    "path constraint ({f}, {v}) outside schema"
                )));
            }
        }
        for &f in &self.candidate_features {
            if f >= n_features {
                return Err(FedError::Format(format!("candidate feature {f} outside schema")));
            }
            if self.path.iter().any(|&(pf, _)| pf == f) {
                return Err(FedError::Format(format!(
                    "candidate feature {f} already constrained on the path"
                )));
            }
        }
        Ok(())
    }
}

/// Class counts for one node: the node total plus, for every candidate
/// feature, the per-value class breakdown. Tables from different
/// parties add coordinate-wise.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CountsTable {
    /// class id -> count of matching rows.
    pub node_total: BTreeMap<usize, u64>,
    /// feature -> value id -> class id -> count.
    pub per_split: BTreeMap<usize, BTreeMap<usize, BTreeMap<usize, u64>>>,
}

impl CountsTable {
    /// Total rows at the node.
    pub fn n(&self) -> u64 {
        self.node_total.values().sum()
    }

    /// Adds another table coordinate-wise.
    pub fn merge_from(&mut self, other: &CountsTable) {
        for (&class, &count) in &other.node_total {
            *self.node_total.entry(class).or_insert(0) += count;
        }
        for (&feature, values) in &other.per_split {
            let dst = self.per_split.entry(feature).or_default();
            for (&value, classes) in values {
                let dst = dst.entry(value).or_default();
                for (&class, &count) in classes {
                    *dst.entry(class).or_insert(0) += count;
                }
            }
        }
    }

    /// Consistency: for every tabulated feature the per-value counts
    /// must re-add to the node total.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        for (&feature, values) in &self.per_split {
            let total: u64 = values
                .values()
                .flat_map(|classes| classes.values())
                .sum();
            if total != n {
                return Err(FedError::Fusion(format!(
                    "counts for feature {feature} sum to {total}, node total is {n}"
                )));
            }
        }
        Ok(())
    }

    /// The node's class distribution as a dense vector.
    pub fn class_counts(&self, n_classes: usize) -> Vec<u64> {
        let mut out = vec![0u64; n_classes];
        for (&class, &count) in &self.node_total {
            if class < n_classes {
                out[class] = count;
            }
        }
        out
    }
}

/// Shannon entropy in bits of a count vector, with `0 log 0 = 0`.
pub fn entropy_bits(counts: &[u64]) -> f64 {
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Information gain of splitting the node on `feature`:
/// `H(node) - sum_v (n_v / n) H(v)`.
pub fn information_gain(table: &CountsTable, feature: usize, n_classes: usize) -> f64 {
    let node = table.class_counts(n_classes);
    let n: u64 = node.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let h_node = entropy_bits(&node);
    let mut weighted = 0.0;
    if let Some(values) = table.per_split.get(&feature) {
        for classes in values.values() {
            let mut counts = vec![0u64; n_classes];
            for (&class, &count) in classes {
                if class < n_classes {
                    counts[class] = count;
                }
            }
            let n_v: u64 = counts.iter().sum();
            if n_v > 0 {
                weighted += (n_v as f64 / n as f64) * entropy_bits(&counts);
            }
        }
    }
    h_node - weighted
}

/// Sums the counts replies of one round into a single table. Every
/// reply must carry a counts table covering exactly the candidate
/// features, and each must be internally consistent.
pub fn merge_counts(replies: &ReplySet, candidates: &[usize]) -> Result<CountsTable> {
    if replies.is_empty() {
        return Err(FedError::Fusion("empty reply set".into()));
    }
    let mut merged = CountsTable::default();
    for (party, update) in replies.iter() {
        let table = update.counts.as_ref().ok_or_else(|| {
            FedError::Fusion(format!("reply from {party} carries no counts"))
        })?;
        for &feature in table.per_split.keys() {
            if !candidates.contains(&feature) {
                return Err(FedError::Fusion(format!(
                    "reply from {party} tabulates feature {feature} which is not a candidate"
                )));
            }
        }
        table.validate().map_err(|e| {
            FedError::Fusion(format!("inconsistent counts from {party}: {e}"))
        })?;
        merged.merge_from(table);
    }
    merged.validate()?;
    Ok(merged)
}

/// Outcome of one fuse-and-grow step.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowResult {
    /// Feature the node was split on, or None when it became a leaf.
    pub split: Option<usize>,
    /// Labels of leaves created by this step.
    pub new_leaves: Vec<usize>,
}

/// One unexpanded node awaiting its counts.
#[derive(Debug, Clone)]
struct PendingCursor {
    path: Vec<(usize, usize)>,
    candidates: Vec<usize>,
    parent_majority: usize,
}

/// Aggregator-side incremental tree construction. Starts from a null
/// root; nodes are expanded breadth-first, one counts query each.
#[derive(Debug)]
pub struct TreeGrower {
    schema: CategoricalSchema,
    max_depth: usize,
    root: Option<TreeNode>,
    queue: VecDeque<PendingCursor>,
}

impl TreeGrower {
    pub fn new(schema: CategoricalSchema, max_depth: usize) -> Result<Self> {
        schema.validate()?;
        if max_depth == 0 {
            return Err(FedError::Config("max_depth must be >= 1".into()));
        }
        let root_cursor = PendingCursor {
            path: Vec::new(),
            candidates: (0..schema.n_features()).collect(),
            parent_majority: 0,
        };
        Ok(TreeGrower {
            schema,
            max_depth,
            root: None,
            queue: VecDeque::from([root_cursor]),
        })
    }

    /// True once every node is expanded; also the session's
    /// "all tree nodes have no candidate feature values" termination.
    pub fn finished(&self) -> bool {
        self.queue.is_empty()
    }

    /// The counts query payload for the next unexpanded node.
    pub fn next_candidates(&self) -> Option<SplitCandidates> {
        self.queue.front().map(|cur| SplitCandidates {
            path: cur.path.clone(),
            candidate_features: cur.candidates.clone(),
            schema: self.schema.clone(),
        })
    }

    /// Consumes the aggregated counts for the front node: either turns
    /// it into a leaf or splits it and enqueues one cursor per child
    /// value. Leaf rules, in order: empty node -> parent majority; pure
    /// node -> its class; no candidates or depth limit -> node majority.
    /// Ties break to the lowest class id / lowest feature index.
    pub fn apply_counts(&mut self, counts: &CountsTable) -> Result<GrowResult> {
        let cur = self
            .queue
            .pop_front()
            .ok_or_else(|| FedError::Fusion("no unexpanded node".into()))?;
        counts.validate()?;

        let n_classes = self.schema.n_classes();
        let class_counts = counts.class_counts(n_classes);
        let n: u64 = class_counts.iter().sum();

        let node = if n == 0 {
            TreeNode::Leaf { label: cur.parent_majority }
        } else {
            let majority = argmax_lowest(&class_counts);
            let pure = class_counts.iter().filter(|&&c| c > 0).count() == 1;
            let at_depth_limit = cur.path.len() >= self.max_depth;
            if pure || cur.candidates.is_empty() || at_depth_limit {
                TreeNode::Leaf { label: majority }
            } else {
                let mut best = cur.candidates[0];
                let mut best_gain = f64::NEG_INFINITY;
                for &f in &cur.candidates {
                    let gain = information_gain(counts, f, n_classes);
                    if gain > best_gain {
                        best = f;
                        best_gain = gain;
                    }
                }
                for value in 0..self.schema.features[best].values.len() {
                    let mut path = cur.path.clone();
                    path.push((best, value));
                    self.queue.push_back(PendingCursor {
                        path,
                        candidates: cur
                            .candidates
                            .iter()
                            .copied()
                            .filter(|&f| f != best)
                            .collect(),
                        parent_majority: majority,
                    });
                }
                TreeNode::Internal {
                    feature: best,
                    majority,
                    children: BTreeMap::new(),
                }
            }
        };

        let result = match &node {
            TreeNode::Leaf { label } => GrowResult { split: None, new_leaves: vec![*label] },
            TreeNode::Internal { feature, .. } => {
                GrowResult { split: Some(*feature), new_leaves: Vec::new() }
            }
        };
        self.attach(&cur.path, node)?;
        Ok(result)
    }

    /// Turns any still-pending nodes into parent-majority leaves;
    /// used when a session hits its round cap before the tree is done.
    pub fn finalize_pending(&mut self) -> Result<()> {
        while let Some(cur) = self.queue.pop_front() {
            self.attach(&cur.path, TreeNode::Leaf { label: cur.parent_majority })?;
        }
        Ok(())
    }

    /// The finished tree. Fails if any node is still unexpanded.
    pub fn take_tree(self) -> Result<DecisionTree> {
        if !self.queue.is_empty() {
            return Err(FedError::Fusion(format!(
                "{} nodes still unexpanded",
                self.queue.len()
            )));
        }
        let root = self
            .root
            .ok_or_else(|| FedError::Fusion("tree was never grown".into()))?;
        let tree = DecisionTree { root, schema: self.schema, max_depth: self.max_depth };
        tree.validate()?;
        Ok(tree)
    }

    fn attach(&mut self, path: &[(usize, usize)], node: TreeNode) -> Result<()> {
        let Some((&(last_feature, last_value), prefix)) = path.split_last() else {
            self.root = Some(node);
            return Ok(());
        };
        let mut slot = self
            .root
            .as_mut()
            .ok_or_else(|| FedError::Fusion("child attached before root".into()))?;
        for &(feature, value) in prefix {
            match slot {
                TreeNode::Internal { feature: f, children, .. } if *f == feature => {
                    slot = children.get_mut(&value).ok_or_else(|| {
                        FedError::Fusion(format!("path edge ({feature}, {value}) missing"))
                    })?;
                }
                _ => {
                    return Err(FedError::Fusion(format!(
                        "path expects internal node on feature {feature}"
                    )))
                }
            }
        }
        match slot {
            TreeNode::Internal { feature: f, children, .. } if *f == last_feature => {
                children.insert(last_value, node);
                Ok(())
            }
            _ => Err(FedError::Fusion(format!(
                "path expects internal node on feature {last_feature}"
            ))),
        }
    }
}

fn argmax_lowest(counts: &[u64]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}
