//! Aggregator-side FL training: query generation and fusion functions
//! for iterative average, FedAvg, coordinate-wise median, and federated
//! ID3.
//!
//! Fusion functions are pure with respect to their inputs and run on the
//! single coordination loop; reply collection happens in the protocol
//! layer, which hands over an immutable completed [`ReplySet`] snapshot.
//! All weight fusions accumulate over replies in party-id-sorted order,
//! so their outputs are bit-identical under any arrival permutation.

pub mod id3;

pub use id3::{CountsTable, GrowResult, SplitCandidates, TreeGrower};

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{FedError, Result};
use crate::localtrain::{DpAccountant, ReplyPolicy};
use crate::model::{Model, ModelUpdate, WeightMap};
use crate::protocol::Hyperparameters;

/// The fusion algorithm run at the aggregator. Names match the config
/// file vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    IterAvg,
    FedAvg,
    CoordMedian,
    Id3,
}

impl FusionKind {
    pub fn name(&self) -> &'static str {
        match self {
            FusionKind::IterAvg => "iter_avg",
            FusionKind::FedAvg => "fedavg",
            FusionKind::CoordMedian => "coord_median",
            FusionKind::Id3 => "id3",
        }
    }

    pub fn parse(s: &str) -> Result<FusionKind> {
        match s {
            "iter_avg" => Ok(FusionKind::IterAvg),
            "fedavg" => Ok(FusionKind::FedAvg),
            "coord_median" => Ok(FusionKind::CoordMedian),
            "id3" => Ok(FusionKind::Id3),
            other => Err(FedError::Config(format!("unknown fusion kind {other:?}"))),
        }
    }

    /// Which party reply policies satisfy this algorithm. FedAvg needs
    /// the sample counts; ID3 needs counts tables.
    pub fn accepts_policy(&self, policy: ReplyPolicy) -> bool {
        match self {
            FusionKind::IterAvg | FusionKind::CoordMedian => matches!(
                policy,
                ReplyPolicy::WeightsOnly | ReplyPolicy::WeightsAndNsamples
            ),
            FusionKind::FedAvg => matches!(policy, ReplyPolicy::WeightsAndNsamples),
            FusionKind::Id3 => matches!(policy, ReplyPolicy::Counts),
        }
    }
}

/// Scalar hyperparameters attached to a query; a generic keyed map so
/// fusion handlers can extend it without protocol changes.
pub type HyperparamMap = BTreeMap<String, Value>;

/// Builds the wire hyperparameter map sent with every training query.
pub fn query_hyperparams(hp: &Hyperparameters, seed: u64, loss: Option<&str>) -> HyperparamMap {
    let mut map = HyperparamMap::new();
    map.insert("epochs".into(), json!(hp.epochs));
    map.insert("learning_rate".into(), json!(hp.learning_rate));
    map.insert("batch_size".into(), json!(hp.batch_size));
    map.insert("seed".into(), json!(seed));
    if let Some(loss) = loss {
        map.insert("loss".into(), json!(loss));
    }
    map
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    TrainWeights,
    CountsRequest,
    Sync,
    Eval,
}

impl QueryKind {
    pub fn name(&self) -> &'static str {
        match self {
            QueryKind::TrainWeights => "train_weights",
            QueryKind::CountsRequest => "counts_request",
            QueryKind::Sync => "sync",
            QueryKind::Eval => "eval",
        }
    }
}

/// Payload of a query; the variant must match the query kind.
#[derive(Debug, Clone, PartialEq)]
pub enum QueryPayload {
    Weights(WeightMap),
    Candidates(SplitCandidates),
    /// Serialized model (the SYNC body).
    Model(Value),
    Empty,
}

/// One aggregator-to-party message for round `t`: what to compute and
/// the hyperparameters to use. Rounds strictly increase over a session.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub round: u64,
    pub kind: QueryKind,
    pub payload: QueryPayload,
    pub hyperparams: HyperparamMap,
}

impl Query {
    pub fn train_weights(round: u64, weights: WeightMap, hyperparams: HyperparamMap) -> Self {
        Query { round, kind: QueryKind::TrainWeights, payload: QueryPayload::Weights(weights), hyperparams }
    }

    pub fn counts_request(
        round: u64,
        candidates: SplitCandidates,
        hyperparams: HyperparamMap,
    ) -> Self {
        Query {
            round,
            kind: QueryKind::CountsRequest,
            payload: QueryPayload::Candidates(candidates),
            hyperparams,
        }
    }

    pub fn sync(round: u64, model: &Model) -> Self {
        Query {
            round,
            kind: QueryKind::Sync,
            payload: QueryPayload::Model(model.to_json()),
            hyperparams: HyperparamMap::new(),
        }
    }

    pub fn eval(round: u64) -> Self {
        Query { round, kind: QueryKind::Eval, payload: QueryPayload::Empty, hyperparams: HyperparamMap::new() }
    }

    /// Payload variant must agree with the declared kind.
    pub fn validate(&self) -> Result<()> {
        let ok = matches!(
            (&self.kind, &self.payload),
            (QueryKind::TrainWeights, QueryPayload::Weights(_))
                | (QueryKind::CountsRequest, QueryPayload::Candidates(_))
                | (QueryKind::Sync, QueryPayload::Model(_))
                | (QueryKind::Eval, QueryPayload::Empty)
        );
        if !ok {
            return Err(FedError::Protocol(format!(
                "query kind {} does not match its payload",
                self.kind.name()
            )));
        }
        Ok(())
    }

    pub fn weights(&self) -> Result<&WeightMap> {
        match &self.payload {
            QueryPayload::Weights(w) => Ok(w),
            _ => Err(FedError::Protocol("query carries no weights".into())),
        }
    }

    pub fn candidates(&self) -> Result<&SplitCandidates> {
        match &self.payload {
            QueryPayload::Candidates(c) => Ok(c),
            _ => Err(FedError::Protocol("query carries no split candidates".into())),
        }
    }
}

/// The replies collected for one round, keyed (and iterated) by party
/// id. Never mixes rounds.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplySet {
    pub round: u64,
    replies: BTreeMap<String, ModelUpdate>,
}

impl ReplySet {
    pub fn new(round: u64) -> Self {
        ReplySet { round, replies: BTreeMap::new() }
    }

    /// Adds a reply; the reply's round must match the set's.
    pub fn insert(&mut self, party: &str, reply_round: u64, update: ModelUpdate) -> Result<()> {
        if reply_round != self.round {
            return Err(FedError::Protocol(format!(
                "reply from {party} is for round {reply_round}, set holds round {}",
                self.round
            )));
        }
        update.validate()?;
        self.replies.insert(party.to_string(), update);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.replies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replies.is_empty()
    }

    pub fn contains(&self, party: &str) -> bool {
        self.replies.contains_key(party)
    }

    /// Replies in party-id-sorted order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &ModelUpdate)> {
        self.replies.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn parties(&self) -> Vec<String> {
        self.replies.keys().cloned().collect()
    }
}

/// Extracts the weight maps in sorted-party order, checking that every
/// reply has weights and that all shapes agree.
fn weight_replies(rs: &ReplySet) -> Result<Vec<(&str, &WeightMap)>> {
    if rs.is_empty() {
        return Err(FedError::Fusion("empty reply set".into()));
    }
    let mut out = Vec::with_capacity(rs.len());
    for (party, update) in rs.iter() {
        let w = update
            .weights
            .as_ref()
            .ok_or_else(|| FedError::Fusion(format!("reply from {party} has no weights")))?;
        out.push((party, w));
    }
    let first = out[0].1;
    for &(party, w) in &out[1..] {
        if !first.shape_compatible(w) {
            return Err(FedError::Fusion(format!(
                "weight shapes from {party} ({}) do not match {} ({})",
                w.shape_summary(),
                out[0].0,
                first.shape_summary()
            )));
        }
    }
    Ok(out)
}

/// Simple per-coordinate arithmetic mean of the replies. Uses a running
/// mean in sorted-party order: N identical replies fuse to exactly that
/// reply, bit for bit, and the accumulation order never depends on
/// arrival order. Any `nsamples` fields are ignored.
pub fn iter_avg_fuse(rs: &ReplySet) -> Result<WeightMap> {
    let replies = weight_replies(rs)?;
    let mut acc = replies[0].1.clone();
    for (i, &(_, w)) in replies.iter().enumerate().skip(1) {
        let k = (i + 1) as f64;
        for (group, values) in acc.groups_mut() {
            let src = w.get(group).expect("shape checked");
            for (a, &x) in values.iter_mut().zip(src) {
                *a += (x - *a) / k;
            }
        }
    }
    acc.validate_finite()?;
    Ok(acc)
}

/// Sample-size weighted average: per coordinate
/// `sum_i n_i w_i / sum_i n_i`, accumulated in sorted-party order with
/// pre-normalized coefficients. A single party holding all samples
/// passes through exactly.
pub fn fedavg_fuse(rs: &ReplySet) -> Result<WeightMap> {
    let replies = weight_replies(rs)?;
    let mut counts = Vec::with_capacity(replies.len());
    for (party, update) in rs.iter() {
        let n = update.nsamples.ok_or_else(|| {
            FedError::Fusion(format!("FedAvg requires nsamples (missing from {party})"))
        })?;
        counts.push(n);
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(FedError::Fusion(
            "FedAvg requires a positive total sample count".into(),
        ));
    }

    let mut acc = WeightMap::new();
    for (group, values) in replies[0].1.groups() {
        acc.insert(group, vec![0.0; values.len()]);
    }
    for (&(_, w), &n) in replies.iter().zip(&counts) {
        if n == 0 {
            continue;
        }
        let coeff = n as f64 / total as f64;
        for (group, values) in acc.groups_mut() {
            let src = w.get(group).expect("shape checked");
            for (a, &x) in values.iter_mut().zip(src) {
                *a += coeff * x;
            }
        }
    }
    acc.validate_finite()?;
    Ok(acc)
}

/// Per-coordinate median; an even reply count takes the mean of the two
/// central order statistics. Robust to a minority of corrupted replies.
pub fn coord_median_fuse(rs: &ReplySet) -> Result<WeightMap> {
    let replies = weight_replies(rs)?;
    let mut out = WeightMap::new();
    for (group, values) in replies[0].1.groups() {
        let mut medians = Vec::with_capacity(values.len());
        for i in 0..values.len() {
            let mut column: Vec<f64> = replies
                .iter()
                .map(|&(_, w)| w.get(group).expect("shape checked")[i])
                .collect();
            column.sort_by(f64::total_cmp);
            let mid = column.len() / 2;
            let median = if column.len() % 2 == 0 {
                (column[mid - 1] + column[mid]) / 2.0
            } else {
                column[mid]
            };
            medians.push(median);
        }
        out.insert(group, medians);
    }
    out.validate_finite()?;
    Ok(out)
}

pub fn fuse_weights(kind: FusionKind, rs: &ReplySet) -> Result<WeightMap> {
    match kind {
        FusionKind::IterAvg => iter_avg_fuse(rs),
        FusionKind::FedAvg => fedavg_fuse(rs),
        FusionKind::CoordMedian => coord_median_fuse(rs),
        FusionKind::Id3 => Err(FedError::Fusion(
            "id3 fuses counts tables, not weight maps".into(),
        )),
    }
}

/// Why a fusion session stopped issuing queries. Not an error: it is
/// the signal that triggers the final SYNC.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationReason {
    /// The maximum number of training rounds elapsed.
    MaxRounds,
    /// Every tree node is expanded (ID3).
    TreeComplete,
    /// Another round would exceed the differential-privacy budget.
    DpBudget,
}

impl TerminationReason {
    pub fn name(&self) -> &'static str {
        match self {
            TerminationReason::MaxRounds => "max_rounds",
            TerminationReason::TreeComplete => "tree_complete",
            TerminationReason::DpBudget => "dp_budget",
        }
    }
}

/// Either the next query to broadcast or the reason to stop.
#[derive(Debug, Clone, PartialEq)]
pub enum NextQuery {
    Query(Query),
    Done(TerminationReason),
}

/// Aggregator state across a session: the current round `t`, the global
/// model `M_t`, and per-round fusion summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModelState {
    pub round: u64,
    pub model: Model,
    pub history: Vec<RoundSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundSummary {
    pub round: u64,
    pub participants: Vec<String>,
    pub fusion_kind: String,
    pub duration_ms: u64,
}

/// Builds round `t+1`'s training query carrying the current global
/// weights, or signals termination once `t` reaches `max_rounds`.
pub fn next_query_avg(
    state: &GlobalModelState,
    max_rounds: u64,
    hyperparams: &HyperparamMap,
) -> Result<NextQuery> {
    if state.round >= max_rounds {
        return Ok(NextQuery::Done(TerminationReason::MaxRounds));
    }
    let weights = match &state.model {
        Model::Linear(m) => m.weights.clone(),
        Model::Id3(_) => {
            return Err(FedError::Fusion(
                "weight queries need a linear global model".into(),
            ))
        }
    };
    Ok(NextQuery::Query(Query::train_weights(
        state.round + 1,
        weights,
        hyperparams.clone(),
    )))
}

/// The aggregator's side of one round trip plus the final SYNC; the
/// protocol layer implements it over real connections, tests implement
/// it in memory.
pub trait RoundIo {
    fn broadcast(&mut self, query: &Query) -> Result<()>;
    fn collect(&mut self, round: u64) -> Result<ReplySet>;
    /// Distributes the final model; returns once every live party has
    /// been sent the SYNC envelope.
    fn sync(&mut self, round: u64, model: &Model) -> Result<()>;
}

/// Session-level knobs beyond the per-round hyperparameters.
#[derive(Debug, Clone)]
pub struct SessionOptions {
    pub kind: FusionKind,
    pub hyperparams: Hyperparameters,
    pub seed: u64,
    /// Loss name distributed to parties for local training (linear).
    pub loss: Option<String>,
    /// Tree depth bound (ID3).
    pub max_depth: usize,
}

/// Runs the full fusion loop: generate query, broadcast, collect,
/// fuse, repeat until termination; then emits the SYNC query carrying
/// the final global model. Returns the final state and why it stopped.
pub fn run_fusion_session(
    io: &mut dyn RoundIo,
    initial: Model,
    opts: &SessionOptions,
    accountant: &mut DpAccountant,
) -> Result<(GlobalModelState, TerminationReason)> {
    let mut state = GlobalModelState { round: 0, model: initial, history: Vec::new() };
    let hp_map = query_hyperparams(&opts.hyperparams, opts.seed, opts.loss.as_deref());
    let k = opts.hyperparams.max_rounds;

    let reason = match opts.kind {
        FusionKind::IterAvg | FusionKind::FedAvg | FusionKind::CoordMedian => loop {
            if accountant.would_exceed_budget_next_round() {
                break TerminationReason::DpBudget;
            }
            match next_query_avg(&state, k, &hp_map)? {
                NextQuery::Done(reason) => break reason,
                NextQuery::Query(query) => {
                    let started = Instant::now();
                    io.broadcast(&query)?;
                    let replies = io.collect(query.round)?;
                    let fused = fuse_weights(opts.kind, &replies)?;
                    state.model.update_weights(&fused)?;
                    state.round = query.round;
                    state.history.push(RoundSummary {
                        round: query.round,
                        participants: replies.parties(),
                        fusion_kind: opts.kind.name().to_string(),
                        duration_ms: started.elapsed().as_millis() as u64,
                    });
                    accountant.complete_round();
                }
            }
        },
        FusionKind::Id3 => {
            let schema = match &state.model {
                Model::Id3(tree) => tree.schema.clone(),
                Model::Linear(_) => {
                    return Err(FedError::Fusion(
                        "id3 fusion needs an id3 global model".into(),
                    ))
                }
            };
            let mut grower = TreeGrower::new(schema, opts.max_depth)?;
            let reason = loop {
                let Some(candidates) = grower.next_candidates() else {
                    break TerminationReason::TreeComplete;
                };
                if state.round >= k {
                    grower.finalize_pending()?;
                    break TerminationReason::MaxRounds;
                }
                let started = Instant::now();
                let query =
                    Query::counts_request(state.round + 1, candidates.clone(), hp_map.clone());
                io.broadcast(&query)?;
                let replies = io.collect(query.round)?;
                let merged = id3::merge_counts(&replies, &candidates.candidate_features)?;
                grower.apply_counts(&merged)?;
                state.round = query.round;
                state.history.push(RoundSummary {
                    round: query.round,
                    participants: replies.parties(),
                    fusion_kind: opts.kind.name().to_string(),
                    duration_ms: started.elapsed().as_millis() as u64,
                });
            };
            state.model = Model::Id3(grower.take_tree()?);
            reason
        }
    };

    io.sync(state.round.max(1), &state.model)?;
    Ok((state, reason))
}
