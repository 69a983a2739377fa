//! The uniform model interface and its two native implementations: a
//! linear/logistic classifier trained by mini-batch gradient descent and
//! an ID3 decision tree grown at the aggregator.
//!
//! Model instances are single-owner: they are never shared across
//! concurrent contexts, only transferred whole, and all mutation happens
//! in the owning handler's loop.

mod linear;
mod tree;

pub use linear::LinearModel;
pub use tree::{DecisionTree, TreeNode};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{Dataset, Features};
use crate::error::{FedError, Result};
use crate::fusion::CountsTable;

/// Named groups of flat 64-bit weight vectors. This is the unit of
/// exchange between parties and the aggregator: queries carry the global
/// weights, replies carry the locally trained ones.
///
/// Group names are sorted, so iteration order — and therefore fusion
/// accumulation order and serialized byte layout — is deterministic.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightMap(pub BTreeMap<String, Vec<f64>>);

impl WeightMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, group: impl Into<String>, values: Vec<f64>) {
        self.0.insert(group.into(), values);
    }

    pub fn get(&self, group: &str) -> Option<&[f64]> {
        self.0.get(group).map(|v| v.as_slice())
    }

    pub fn groups(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn groups_mut(&mut self) -> impl Iterator<Item = (&str, &mut Vec<f64>)> {
        self.0.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Two maps are shape-compatible iff they have identical key sets
    /// and per-key lengths.
    pub fn shape_compatible(&self, other: &WeightMap) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(other.0.iter())
                .all(|((ka, va), (kb, vb))| ka == kb && va.len() == vb.len())
    }

    /// All vectors must stay finite; NaN/Inf weights poison fusion.
    pub fn validate_finite(&self) -> Result<()> {
        for (group, values) in self.groups() {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(FedError::Numeric(format!(
                    "non-finite value in weight group {group}"
                )));
            }
        }
        Ok(())
    }

    /// A shape string for error messages: `coef[8] bias[2]`.
    pub fn shape_summary(&self) -> String {
        self.groups()
            .map(|(k, v)| format!("{k}[{}]", v.len()))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A party's reply for one round: trained weights plus an optional
/// sample count (FedAvg), or an ID3 counts table. Keyed and extensible;
/// absent keys are omitted on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelUpdate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<WeightMap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nsamples: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<CountsTable>,
}

impl ModelUpdate {
    pub fn from_weights(weights: WeightMap) -> Self {
        ModelUpdate { weights: Some(weights), nsamples: None, counts: None }
    }

    pub fn from_counts(counts: CountsTable) -> Self {
        ModelUpdate { weights: None, nsamples: None, counts: Some(counts) }
    }

    pub fn with_nsamples(mut self, n: u64) -> Self {
        self.nsamples = Some(n);
        self
    }

    /// At least one of weights/counts must be present.
    pub fn validate(&self) -> Result<()> {
        if self.weights.is_none() && self.counts.is_none() {
            return Err(FedError::Decode(
                "model update carries neither weights nor counts".into(),
            ));
        }
        Ok(())
    }
}

/// Evaluation result for a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub n: usize,
}

/// Per-fit summary: one loss entry per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub loss_trace: Vec<f64>,
    pub epochs_run: u32,
}

/// Loss function for the linear model. Multiclass logistic uses softmax
/// cross-entropy; binary is the 2-class special case of the same path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Logistic,
    Squared,
}

impl Loss {
    pub fn name(&self) -> &'static str {
        match self {
            Loss::Logistic => "logistic",
            Loss::Squared => "squared",
        }
    }

    pub fn parse(s: &str) -> Result<Loss> {
        match s {
            "logistic" => Ok(Loss::Logistic),
            "squared" => Ok(Loss::Squared),
            other => Err(FedError::Config(format!("unknown loss {other:?}"))),
        }
    }
}

/// Hyperparameters for one local fit call.
///
/// The mini-batch order for epoch `e` is shuffled with
/// `hash(seed, epoch_offset + e)`; the caller derives `seed` from the
/// session's global seed and the party id, so local training reproduces
/// exactly across transports and runs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainHyperparams {
    pub epochs: u32,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub epoch_offset: u64,
}

impl TrainHyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(FedError::Config("epochs must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(FedError::Config("learning_rate must be finite and >= 0".into()));
        }
        if self.batch_size < 1 {
            return Err(FedError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// A trainable/evaluable model behind one interface, so fusion handlers
/// and local training handlers need not care which kind they hold.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Linear(LinearModel),
    Id3(DecisionTree),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Linear(_) => "linear",
            Model::Id3(_) => "id3",
        }
    }

    /// Trains the model in place on the dataset. Only linear models
    /// train locally; ID3 trees are grown at the aggregator from counts.
    pub fn fit(&mut self, ds: &Dataset, hp: &TrainHyperparams) -> Result<TrainReport> {
        match self {
            Model::Linear(m) => m.fit(ds, hp),
            Model::Id3(_) => Err(FedError::Protocol(
                "id3 models are grown from counts queries, not fit locally".into(),
            )),
        }
    }

    /// Predicts a class id for one feature row. Ties break toward the
    /// lowest class id.
    pub fn predict(&self, features: &Features) -> Result<usize> {
        match (self, features) {
            (Model::Linear(m), Features::Numeric(x)) => m.predict(x),
            (Model::Id3(t), Features::Categorical(x)) => t.predict(x),
            (Model::Linear(_), Features::Categorical(_)) => Err(FedError::Shape(
                "linear model given categorical features".into(),
            )),
            (Model::Id3(_), Features::Numeric(_)) => {
                Err(FedError::Shape("id3 model given numeric features".into()))
            }
        }
    }

    /// Accuracy of `predict` over a nonempty dataset.
    pub fn evaluate(&self, ds: &Dataset) -> Result<Metrics> {
        if ds.is_empty() {
            return Err(FedError::Shape("cannot evaluate on an empty dataset".into()));
        }
        let mut correct = 0usize;
        for row in &ds.rows {
            if self.predict(&row.features)? == row.label {
                correct += 1;
            }
        }
        Ok(Metrics { accuracy: correct as f64 / ds.len() as f64, n: ds.len() })
    }

    /// Builds the reply payload: a deep copy of the current weights,
    /// with the sample count attached only when requested.
    pub fn get_model_update(&self, include_nsamples: bool, n: u64) -> Result<ModelUpdate> {
        match self {
            Model::Linear(m) => {
                let update = ModelUpdate::from_weights(m.weights.clone());
                Ok(if include_nsamples { update.with_nsamples(n) } else { update })
            }
            Model::Id3(_) => Err(FedError::Protocol(
                "id3 replies are counts tables, not weight updates".into(),
            )),
        }
    }

    /// Replaces the model weights exactly with `weights`.
    pub fn update_weights(&mut self, weights: &WeightMap) -> Result<()> {
        match self {
            Model::Linear(m) => m.set_weights(weights.clone()),
            Model::Id3(_) => {
                Err(FedError::Shape("id3 model has no weight vectors to update".into()))
            }
        }
    }

    /// Serialized form; also the SYNC payload on the wire.
    pub fn to_json(&self) -> Value {
        match self {
            Model::Linear(m) => json!({
                "format_version": FORMAT_VERSION,
                "kind": "linear",
                "n_features": m.n_features,
                "n_classes": m.n_classes,
                "loss": m.loss.name(),
                "weights": m.weights,
            }),
            Model::Id3(t) => json!({
                "format_version": FORMAT_VERSION,
                "kind": "id3",
                "max_depth": t.max_depth,
                "schema": t.schema,
                "root": t.root,
            }),
        }
    }

    pub fn from_json(v: &Value) -> Result<Model> {
        let version = v
            .get("format_version")
            .and_then(Value::as_u64)
            .ok_or_else(|| FedError::Format("missing format_version".into()))?;
        if version != FORMAT_VERSION {
            return Err(FedError::Format(format!(
                "unsupported format_version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let kind = v
            .get("kind")
            .and_then(Value::as_str)
            .ok_or_else(|| FedError::Format("missing kind".into()))?;
        match kind {
            "linear" => {
                let m = LinearModel::from_json_body(v)?;
                Ok(Model::Linear(m))
            }
            "id3" => {
                let t = DecisionTree::from_json_body(v)?;
                Ok(Model::Id3(t))
            }
            other => Err(FedError::Format(format!("unknown model kind {other:?}"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&self.to_json())
            .map_err(|e| FedError::Format(e.to_string()))?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let text = std::fs::read_to_string(path)?;
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| FedError::Format(format!("{}: {e}", path.display())))?;
        Model::from_json(&v)
    }
}

/// Version tag written into every model file.
pub const FORMAT_VERSION: u64 = 1;
