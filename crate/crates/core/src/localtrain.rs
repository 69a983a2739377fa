//! Party-side local training: answers each aggregator query with a
//! model update, optionally passing the reply through a one-shot
//! differential-privacy mechanism (per-group L2 clipping plus Gaussian
//! noise).
//!
//! One `LocalTrainer` exists per party process; the party protocol
//! guarantees at most one outstanding query, so handlers run strictly
//! sequentially in arrival order.

use rand::rngs::OsRng;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Features, Schema};
use crate::error::{FedError, Result};
use crate::fusion::{CountsTable, Query, QueryKind, SplitCandidates};
use crate::model::{Metrics, Model, ModelUpdate, TrainHyperparams};
use crate::seeds;

/// What a party puts into its replies; must be compatible with the
/// session's fusion algorithm (checked at registration).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplyPolicy {
    WeightsOnly,
    WeightsAndNsamples,
    Counts,
}

impl ReplyPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            ReplyPolicy::WeightsOnly => "weights_only",
            ReplyPolicy::WeightsAndNsamples => "weights_and_nsamples",
            ReplyPolicy::Counts => "counts",
        }
    }

    pub fn parse(s: &str) -> Result<ReplyPolicy> {
        match s {
            "weights_only" => Ok(ReplyPolicy::WeightsOnly),
            "weights_and_nsamples" => Ok(ReplyPolicy::WeightsAndNsamples),
            "counts" => Ok(ReplyPolicy::Counts),
            other => Err(FedError::Config(format!("unknown reply policy {other:?}"))),
        }
    }
}

/// How the DP noise stream is seeded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DpSeedMode {
    /// `hash(global_seed, party_id, round)`: reproducible runs.
    #[default]
    Derived,
    /// Operating-system entropy: for real deployments.
    Fresh,
}

/// One-shot differential privacy settings for a party's replies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    /// Noise standard deviation; 0 disables the mechanism exactly.
    pub sigma: f64,
    /// Privacy cost reported to the aggregator's accountant per round.
    pub epsilon_per_round: f64,
    /// L2 clip bound applied per weight group before noising.
    pub clip_norm: f64,
    #[serde(default)]
    pub seed_mode: DpSeedMode,
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) {
            return Err(FedError::Config("dp.sigma must be >= 0".into()));
        }
        if !(self.epsilon_per_round > 0.0) {
            return Err(FedError::Config("dp.epsilon_per_round must be > 0".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(FedError::Config("dp.clip_norm must be > 0".into()));
        }
        Ok(())
    }
}

/// Scales a vector so its L2 norm is at most `clip_norm`.
pub fn clip_l2(values: &mut [f64], clip_norm: f64) {
    let norm: f64 = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > clip_norm {
        let scale = clip_norm / norm;
        for v in values.iter_mut() {
            *v *= scale;
        }
    }
}

/// Adds i.i.d. `N(0, sigma^2)` noise to each coordinate.
pub fn add_gaussian_noise<R: Rng>(values: &mut [f64], sigma: f64, rng: &mut R) -> Result<()> {
    let normal =
        Normal::new(0.0, sigma).map_err(|e| FedError::Numeric(format!("bad sigma: {e}")))?;
    for v in values.iter_mut() {
        *v += normal.sample(rng);
    }
    Ok(())
}

/// Train/test data access for one party. Datasets are immutable after
/// construction.
#[derive(Debug, Clone)]
pub struct DataHandler {
    pub train: Dataset,
    pub test: Dataset,
}

impl DataHandler {
    pub fn new(train: Dataset, test: Dataset) -> Self {
        DataHandler { train, test }
    }

    pub fn from_dataset(ds: &Dataset, test_fraction: f64, seed: u64) -> Self {
        let (train, test) = crate::data::train_test_split(ds, test_fraction, seed);
        DataHandler { train, test }
    }
}

/// The party-side function L: executes local training or counts
/// computation for a query and produces the reply.
#[derive(Debug)]
pub struct LocalTrainer {
    pub model: Model,
    pub data: DataHandler,
    pub reply_policy: ReplyPolicy,
    pub dp: Option<DpConfig>,
    pub party_id: String,
}

impl LocalTrainer {
    pub fn new(
        model: Model,
        data: DataHandler,
        reply_policy: ReplyPolicy,
        dp: Option<DpConfig>,
        party_id: impl Into<String>,
    ) -> Self {
        LocalTrainer { model, data, reply_policy, dp, party_id: party_id.into() }
    }

    /// Initializes the local model from the query weights, runs the
    /// requested epochs, and builds the reply per the reply policy.
    /// With an empty local partition the party echoes the query weights
    /// with `nsamples = 0` instead of abstaining, keeping quorum logic
    /// uniform.
    pub fn handle_train_query(&mut self, query: &Query) -> Result<ModelUpdate> {
        if query.kind != QueryKind::TrainWeights {
            return Err(FedError::Protocol(format!(
                "train handler got a {} query",
                query.kind.name()
            )));
        }
        let weights = query.weights()?;
        if let Some(loss_name) = query.hyperparams.get("loss").and_then(|v| v.as_str()) {
            if let Model::Linear(m) = &mut self.model {
                m.loss = crate::model::Loss::parse(loss_name)?;
            }
        }
        self.model.update_weights(weights)?;

        let n = self.data.train.len() as u64;
        if n > 0 {
            let hp = self.train_hyperparams(query)?;
            self.model.fit(&self.data.train, &hp)?;
        }

        let include_n = self.reply_policy == ReplyPolicy::WeightsAndNsamples;
        let mut update = self.model.get_model_update(include_n, n)?;

        if let Some(dp) = &self.dp {
            if dp.sigma > 0.0 {
                let seed = query
                    .hyperparams
                    .get("seed")
                    .and_then(|v| v.as_u64())
                    .unwrap_or(0);
                let weights = update.weights.as_mut().expect("weights reply");
                let mut rng = match dp.seed_mode {
                    DpSeedMode::Derived => {
                        ChaCha8Rng::seed_from_u64(seeds::derive(seed, &self.party_id, query.round))
                    }
                    DpSeedMode::Fresh => ChaCha8Rng::from_rng(OsRng)
                        .map_err(|e| FedError::Numeric(e.to_string()))?,
                };
                for (_, values) in weights.groups_mut() {
                    clip_l2(values, dp.clip_norm);
                    add_gaussian_noise(values, dp.sigma, &mut rng)?;
                }
            }
        }
        Ok(update)
    }

    fn train_hyperparams(&self, query: &Query) -> Result<TrainHyperparams> {
        let get_u64 = |key: &str| -> Result<u64> {
            query
                .hyperparams
                .get(key)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| FedError::Protocol(format!("query hyperparams missing {key}")))
        };
        let epochs = get_u64("epochs")? as u32;
        let batch_size = get_u64("batch_size")? as usize;
        let learning_rate = query
            .hyperparams
            .get("learning_rate")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| {
                FedError::Protocol("query hyperparams missing learning_rate".into())
            })?;
        let seed = query
            .hyperparams
            .get("seed")
            .and_then(|v| v.as_u64())
            .unwrap_or(0);
        let hp = TrainHyperparams {
            epochs,
            learning_rate,
            batch_size,
            // Per-party stream: hash(global_seed, party_id, epoch),
            // with epochs numbered globally across rounds.
            seed: seeds::mix_label(seed, &self.party_id),
            epoch_offset: (query.round.saturating_sub(1)) * epochs as u64,
        };
        hp.validate()?;
        Ok(hp)
    }

    /// Filters the local rows by the query's path constraints and
    /// tabulates the node totals plus per-candidate-feature splits.
    /// Zero matching rows yield an all-zero table, not an error.
    pub fn handle_counts_query(&mut self, query: &Query) -> Result<ModelUpdate> {
        if query.kind != QueryKind::CountsRequest {
            return Err(FedError::Protocol(format!(
                "counts handler got a {} query",
                query.kind.name()
            )));
        }
        let candidates = query.candidates()?;
        candidates.validate()?;
        let table = tabulate_counts(&self.data.train, candidates)?;
        Ok(ModelUpdate::from_counts(table))
    }

    /// Replaces the local model with the distributed global model.
    pub fn handle_sync(&mut self, query: &Query) -> Result<()> {
        if query.kind != QueryKind::Sync {
            return Err(FedError::Protocol(format!(
                "sync handler got a {} query",
                query.kind.name()
            )));
        }
        let body = match &query.payload {
            crate::fusion::QueryPayload::Model(v) => v,
            _ => return Err(FedError::Protocol("sync query carries no model".into())),
        };
        let incoming = Model::from_json(body)?;
        if incoming.kind() != self.model.kind() {
            return Err(FedError::Shape(format!(
                "sync carries a {} model, party holds {}",
                incoming.kind(),
                self.model.kind()
            )));
        }
        self.model = incoming;
        Ok(())
    }

    /// Evaluates the current local model on the party's test split.
    pub fn handle_eval(&self) -> Result<Metrics> {
        if self.data.test.is_empty() {
            return Err(FedError::Protocol(
                "no test split configured for this party".into(),
            ));
        }
        self.model.evaluate(&self.data.test)
    }
}

/// Tabulates a counts table for the rows matching the path constraints.
/// Every candidate feature gets an entry even when no rows match, so
/// reply shapes are uniform across parties.
pub fn tabulate_counts(ds: &Dataset, candidates: &SplitCandidates) -> Result<CountsTable> {
    match &ds.schema {
        Schema::Categorical(s) => {
            if *s != candidates.schema {
                return Err(FedError::Format(
                    "query schema does not match local data schema".into(),
                ));
            }
        }
        Schema::Numeric(_) => {
            return Err(FedError::Shape(
                "counts queries need categorical data".into(),
            ))
        }
    }

    let mut table = CountsTable::default();
    for &f in &candidates.candidate_features {
        table.per_split.entry(f).or_default();
    }
    for row in &ds.rows {
        let x = match &row.features {
            Features::Categorical(x) => x,
            Features::Numeric(_) => unreachable!("schema checked above"),
        };
        if !candidates.path.iter().all(|&(f, v)| x[f] == v) {
            continue;
        }
        *table.node_total.entry(row.label).or_insert(0) += 1;
        for &f in &candidates.candidate_features {
            *table
                .per_split
                .get_mut(&f)
                .expect("pre-seeded")
                .entry(x[f])
                .or_default()
                .entry(row.label)
                .or_insert(0) += 1;
        }
    }
    table.validate()?;
    Ok(table)
}

/// Aggregator-side tally of the differential-privacy budget under basic
/// (linear) composition: after `r` completed rounds the spent budget is
/// exactly `r * epsilon_per_round`.
#[derive(Debug, Clone, PartialEq)]
pub struct DpAccountant {
    epsilon_per_round: f64,
    budget: Option<f64>,
    rounds_completed: u64,
}

impl DpAccountant {
    /// An accountant for sessions without DP: reports zero forever and
    /// never blocks a round.
    pub fn disabled() -> Self {
        DpAccountant { epsilon_per_round: 0.0, budget: None, rounds_completed: 0 }
    }

    pub fn new(epsilon_per_round: f64, budget: Option<f64>) -> Self {
        DpAccountant { epsilon_per_round, budget, rounds_completed: 0 }
    }

    pub fn complete_round(&mut self) {
        self.rounds_completed += 1;
    }

    /// Multiplication, not repeated addition, so the total is exact.
    pub fn total_epsilon(&self) -> f64 {
        self.rounds_completed as f64 * self.epsilon_per_round
    }

    /// True when starting one more round would exceed the budget; a
    /// session terminates with reason `dp_budget` instead of starting it.
    pub fn would_exceed_budget_next_round(&self) -> bool {
        match self.budget {
            Some(budget) if self.epsilon_per_round > 0.0 => {
                (self.rounds_completed + 1) as f64 * self.epsilon_per_round > budget
            }
            _ => false,
        }
    }
}
