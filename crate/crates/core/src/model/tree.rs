//! ID3 decision tree over categorical features. The tree is grown at
//! the aggregator (see `fusion::id3`) and distributed whole at SYNC;
//! this module only holds the structure and inference.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::CategoricalSchema;
use crate::error::{FedError, Result};

/// One tree node. Internal nodes keep the majority label observed at
/// growth time so inference can fall back when a row carries a feature
/// value that never produced a child edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    Internal {
        feature: usize,
        majority: usize,
        children: BTreeMap<usize, TreeNode>,
    },
    Leaf {
        label: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub root: TreeNode,
    pub schema: CategoricalSchema,
    pub max_depth: usize,
}

impl DecisionTree {
    /// A degenerate tree that always answers `label`; the party-side
    /// placeholder before the first SYNC.
    pub fn single_leaf(schema: CategoricalSchema, label: usize, max_depth: usize) -> Self {
        DecisionTree { root: TreeNode::Leaf { label }, schema, max_depth }
    }

    /// Root-to-leaf descent. A missing child edge (unknown value) falls
    /// back to the node's majority label rather than erroring.
    pub fn predict(&self, x: &[usize]) -> Result<usize> {
        if x.len() != self.schema.n_features() {
            return Err(FedError::Shape(format!(
                "row has {} features, schema expects {}",
                x.len(),
                self.schema.n_features()
            )));
        }
        let mut node = &self.root;
        loop {
            match node {
                TreeNode::Leaf { label } => return Ok(*label),
                TreeNode::Internal { feature, majority, children } => {
                    match children.get(&x[*feature]) {
                        Some(child) => node = child,
                        None => return Ok(*majority),
                    }
                }
            }
        }
    }

    /// Longest root-to-leaf path length in edges.
    pub fn depth(&self) -> usize {
        fn walk(node: &TreeNode) -> usize {
            match node {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Internal { children, .. } => {
                    1 + children.values().map(walk).max().unwrap_or(0)
                }
            }
        }
        walk(&self.root)
    }

    /// Structural invariants: internal nodes have children, edge values
    /// stay within the schema domain, no feature repeats on a path, and
    /// the depth bound holds.
    pub fn validate(&self) -> Result<()> {
        fn walk(
            node: &TreeNode,
            schema: &CategoricalSchema,
            on_path: &mut BTreeSet<usize>,
            depth: usize,
            max_depth: usize,
        ) -> Result<()> {
            match node {
                TreeNode::Leaf { label } => {
                    if *label >= schema.n_classes() {
                        return Err(FedError::Format(format!(
                            "leaf label {label} outside label domain"
                        )));
                    }
                    Ok(())
                }
                TreeNode::Internal { feature, majority, children } => {
                    if depth >= max_depth {
                        return Err(FedError::Format(format!(
                            "internal node at depth {depth} exceeds max_depth {max_depth}"
                        )));
                    }
                    if *feature >= schema.n_features() {
                        return Err(FedError::Format(format!(
                            "feature index {feature} outside schema"
                        )));
                    }
                    if *majority >= schema.n_classes() {
                        return Err(FedError::Format(format!(
                            "majority label {majority} outside label domain"
                        )));
                    }
                    if children.is_empty() {
                        return Err(FedError::Format(
                            "internal node with no children".into(),
                        ));
                    }
                    if !on_path.insert(*feature) {
                        return Err(FedError::Format(format!(
                            "feature {feature} repeats on a root-to-leaf path"
                        )));
                    }
                    let domain = schema.features[*feature].values.len();
                    for (&value, child) in children {
                        if value >= domain {
                            return Err(FedError::Format(format!(
                                "edge value {value} outside domain of feature {feature}"
                            )));
                        }
                        walk(child, schema, on_path, depth + 1, max_depth)?;
                    }
                    on_path.remove(feature);
                    Ok(())
                }
            }
        }
        self.schema.validate()?;
        let mut on_path = BTreeSet::new();
        walk(&self.root, &self.schema, &mut on_path, 0, self.max_depth)
    }

    pub(super) fn from_json_body(v: &Value) -> Result<DecisionTree> {
        let tree: DecisionTree = serde_json::from_value(Value::Object(
            ["root", "schema", "max_depth"]
                .iter()
                .filter_map(|k| v.get(*k).map(|val| ((*k).to_string(), val.clone())))
                .collect(),
        ))
        .map_err(|e| FedError::Format(format!("bad id3 model body: {e}")))?;
        tree.validate()?;
        Ok(tree)
    }
}

/// The canonical play-tennis tree, frozen from an independent
/// centralized ID3 run (base-2 entropy, lowest-index tie-breaks):
/// Outlook at the root, Humidity under Sunny, Wind under Rain,
/// Overcast pure Yes. Shared by unit tests across modules.
#[cfg(test)]
pub(crate) fn tennis_tree_fixture() -> DecisionTree {
    use crate::data::{toy, Schema};
    let schema = match toy::play_tennis_schema() {
        Schema::Categorical(s) => s,
        _ => unreachable!(),
    };
    // Feature ids: outlook=0, temperature=1, humidity=2, wind=3.
    // Outlook values: Sunny=0, Overcast=1, Rain=2.
    // Humidity: High=0, Normal=1. Wind: Weak=0, Strong=1.
    // Labels: No=0, Yes=1.
    let sunny = TreeNode::Internal {
        feature: 2,
        majority: 0,
        children: BTreeMap::from([
            (0, TreeNode::Leaf { label: 0 }),
            (1, TreeNode::Leaf { label: 1 }),
        ]),
    };
    let rain = TreeNode::Internal {
        feature: 3,
        majority: 1,
        children: BTreeMap::from([
            (0, TreeNode::Leaf { label: 1 }),
            (1, TreeNode::Leaf { label: 0 }),
        ]),
    };
    let root = TreeNode::Internal {
        feature: 0,
        majority: 1,
        children: BTreeMap::from([
            (0, sunny),
            (1, TreeNode::Leaf { label: 1 }),
            (2, rain),
        ]),
    };
    DecisionTree { root, schema, max_depth: 4 }
}
