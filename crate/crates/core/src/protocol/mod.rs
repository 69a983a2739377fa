//! The learning protocol: message vocabulary, the aggregator phase
//! machine, the party registry with its quorum predicate, and the
//! runtime loops for both sides.
//!
//! The aggregator runs one coordination loop that owns all phase and
//! registry state; per-connection receive loops only deposit decoded
//! envelopes into an inbox queue consumed by that loop.

mod aggregator;
mod party;

pub use aggregator::{Coordinator, CoordinatorOptions};
pub use party::{PartySession, ServeEnd};

use std::collections::BTreeMap;
use std::time::SystemTime;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{FedError, Result};
use crate::fusion::{HyperparamMap, Query, QueryKind, SplitCandidates};
use crate::localtrain::ReplyPolicy;
use crate::model::{Metrics, ModelUpdate, WeightMap};

/// Sender id used by the aggregator in its envelopes.
pub const AGGREGATOR_ID: &str = "agg";

/// Global and local training hyperparameters for a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    /// Maximum training rounds `k`.
    pub max_rounds: u64,
    pub epochs: u32,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub reply_timeout_ms: u64,
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        if self.max_rounds < 1 {
            return Err(FedError::Config("fusion.hyperparams.max_rounds must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(FedError::Config("fusion.hyperparams.epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(FedError::Config(
                "fusion.hyperparams.learning_rate must be > 0".into(),
            ));
        }
        if self.batch_size < 1 {
            return Err(FedError::Config("fusion.hyperparams.batch_size must be >= 1".into()));
        }
        if self.reply_timeout_ms == 0 {
            return Err(FedError::Config("protocol.reply_timeout_ms must be > 0".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Message envelopes

/// Registration request payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterPayload {
    pub party_id: String,
    /// Hash of the party's model/data signature; must match the
    /// aggregator's, so config drift fails fast at the handshake.
    pub schema_hash: String,
    pub reply_policy: ReplyPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dp_epsilon_per_round: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterAckPayload {
    pub session_id: String,
    pub schema_hash: String,
}

/// Wire form of a training or counts query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainQueryPayload {
    pub kind: QueryKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<WeightMap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<SplitCandidates>,
    #[serde(default)]
    pub hyperparams: HyperparamMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub message: String,
}

/// One protocol message. `round` is 0 exactly for the session-control
/// types (REGISTER, REGISTER_ACK, STOP, ERROR) and >= 1 for everything
/// that belongs to a training round.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageEnvelope {
    pub sender: String,
    pub round: u64,
    pub body: EnvelopeBody,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvelopeBody {
    Register(RegisterPayload),
    RegisterAck(RegisterAckPayload),
    TrainQuery(TrainQueryPayload),
    ModelUpdate(ModelUpdate),
    /// Serialized final model (same JSON as the model file format).
    Sync(Value),
    EvalRequest,
    EvalReply(Metrics),
    Stop,
    Error(ErrorPayload),
}

impl EnvelopeBody {
    pub fn type_name(&self) -> &'static str {
        match self {
            EnvelopeBody::Register(_) => "REGISTER",
            EnvelopeBody::RegisterAck(_) => "REGISTER_ACK",
            EnvelopeBody::TrainQuery(_) => "TRAIN_QUERY",
            EnvelopeBody::ModelUpdate(_) => "MODEL_UPDATE",
            EnvelopeBody::Sync(_) => "SYNC",
            EnvelopeBody::EvalRequest => "EVAL_REQUEST",
            EnvelopeBody::EvalReply(_) => "EVAL_REPLY",
            EnvelopeBody::Stop => "STOP",
            EnvelopeBody::Error(_) => "ERROR",
        }
    }

    fn round_zero_type(type_name: &str) -> bool {
        matches!(type_name, "REGISTER" | "REGISTER_ACK" | "STOP" | "ERROR")
    }
}

#[derive(Serialize)]
struct RawEnvelopeOut<'a> {
    #[serde(rename = "type")]
    kind: &'a str,
    sender: &'a str,
    round: u64,
    payload: Value,
}

impl MessageEnvelope {
    pub fn new(sender: impl Into<String>, round: u64, body: EnvelopeBody) -> Self {
        MessageEnvelope { sender: sender.into(), round, body }
    }

    pub fn error(sender: impl Into<String>, message: impl Into<String>) -> Self {
        MessageEnvelope::new(
            sender,
            0,
            EnvelopeBody::Error(ErrorPayload { message: message.into() }),
        )
    }

    pub fn type_name(&self) -> &'static str {
        self.body.type_name()
    }

    /// Wraps an aggregator query into the right envelope type.
    pub fn for_query(query: &Query) -> Result<MessageEnvelope> {
        query.validate()?;
        let body = match query.kind {
            QueryKind::TrainWeights => EnvelopeBody::TrainQuery(TrainQueryPayload {
                kind: query.kind,
                weights: Some(query.weights()?.clone()),
                candidates: None,
                hyperparams: query.hyperparams.clone(),
            }),
            QueryKind::CountsRequest => EnvelopeBody::TrainQuery(TrainQueryPayload {
                kind: query.kind,
                weights: None,
                candidates: Some(query.candidates()?.clone()),
                hyperparams: query.hyperparams.clone(),
            }),
            QueryKind::Sync => match &query.payload {
                crate::fusion::QueryPayload::Model(v) => EnvelopeBody::Sync(v.clone()),
                _ => return Err(FedError::Protocol("sync query without model".into())),
            },
            QueryKind::Eval => EnvelopeBody::EvalRequest,
        };
        Ok(MessageEnvelope::new(AGGREGATOR_ID, query.round, body))
    }

    /// Reconstructs the in-memory query on the party side.
    pub fn to_query(&self) -> Result<Query> {
        let query = match &self.body {
            EnvelopeBody::TrainQuery(p) => {
                let payload = match (p.kind, &p.weights, &p.candidates) {
                    (QueryKind::TrainWeights, Some(w), None) => {
                        crate::fusion::QueryPayload::Weights(w.clone())
                    }
                    (QueryKind::CountsRequest, None, Some(c)) => {
                        crate::fusion::QueryPayload::Candidates(c.clone())
                    }
                    _ => {
                        return Err(FedError::Decode(
                            "train query payload does not match its kind".into(),
                        ))
                    }
                };
                Query {
                    round: self.round,
                    kind: p.kind,
                    payload,
                    hyperparams: p.hyperparams.clone(),
                }
            }
            EnvelopeBody::Sync(v) => Query {
                round: self.round,
                kind: QueryKind::Sync,
                payload: crate::fusion::QueryPayload::Model(v.clone()),
                hyperparams: HyperparamMap::new(),
            },
            EnvelopeBody::EvalRequest => Query::eval(self.round),
            other => {
                return Err(FedError::Protocol(format!(
                    "{} envelope is not a query",
                    other.type_name()
                )))
            }
        };
        query.validate()?;
        Ok(query)
    }

    /// Serializes to the wire body: UTF-8 JSON
    /// `{"type", "sender", "round", "payload"}`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload = match &self.body {
            EnvelopeBody::Register(p) => serde_json::to_value(p),
            EnvelopeBody::RegisterAck(p) => serde_json::to_value(p),
            EnvelopeBody::TrainQuery(p) => serde_json::to_value(p),
            EnvelopeBody::ModelUpdate(p) => serde_json::to_value(p),
            EnvelopeBody::Sync(v) => Ok(v.clone()),
            EnvelopeBody::EvalRequest => Ok(Value::Object(Default::default())),
            EnvelopeBody::EvalReply(m) => serde_json::to_value(m),
            EnvelopeBody::Stop => Ok(Value::Object(Default::default())),
            EnvelopeBody::Error(p) => serde_json::to_value(p),
        }
        .map_err(|e| FedError::Decode(e.to_string()))?;

        let raw = RawEnvelopeOut {
            kind: self.type_name(),
            sender: &self.sender,
            round: self.round,
            payload,
        };
        serde_json::to_vec(&raw).map_err(|e| FedError::Decode(e.to_string()))
    }

    /// Parses and schema-validates one wire body.
    pub fn from_bytes(bytes: &[u8]) -> Result<MessageEnvelope> {
        let v: Value = serde_json::from_slice(bytes)
            .map_err(|e| FedError::Decode(format!("malformed JSON: {e}")))?;
        let obj = v
            .as_object()
            .ok_or_else(|| FedError::Decode("envelope is not an object".into()))?;
        let type_name = obj
            .get("type")
            .and_then(Value::as_str)
            .ok_or_else(|| FedError::Decode("missing type".into()))?
            .to_string();
        let sender = obj
            .get("sender")
            .and_then(Value::as_str)
            .ok_or_else(|| FedError::Decode("missing sender".into()))?
            .to_string();
        let round = obj
            .get("round")
            .and_then(Value::as_u64)
            .ok_or_else(|| FedError::Decode("missing round".into()))?;
        let payload = obj.get("payload").cloned().unwrap_or(Value::Null);

        if EnvelopeBody::round_zero_type(&type_name) {
            if round != 0 {
                return Err(FedError::Decode(format!(
                    "{type_name} must carry round 0, got {round}"
                )));
            }
        } else if round == 0 {
            return Err(FedError::Decode(format!("{type_name} must carry round >= 1")));
        }

        fn parse<T: serde::de::DeserializeOwned>(type_name: &str, payload: Value) -> Result<T> {
            serde_json::from_value(payload)
                .map_err(|e| FedError::Decode(format!("bad {type_name} payload: {e}")))
        }

        let body = match type_name.as_str() {
            "REGISTER" => EnvelopeBody::Register(parse(&type_name, payload)?),
            "REGISTER_ACK" => EnvelopeBody::RegisterAck(parse(&type_name, payload)?),
            "TRAIN_QUERY" => EnvelopeBody::TrainQuery(parse(&type_name, payload)?),
            "MODEL_UPDATE" => {
                let update: ModelUpdate = parse(&type_name, payload)?;
                update.validate()?;
                EnvelopeBody::ModelUpdate(update)
            }
            "SYNC" => EnvelopeBody::Sync(payload),
            "EVAL_REQUEST" => EnvelopeBody::EvalRequest,
            "EVAL_REPLY" => EnvelopeBody::EvalReply(parse(&type_name, payload)?),
            "STOP" => EnvelopeBody::Stop,
            "ERROR" => EnvelopeBody::Error(parse(&type_name, payload)?),
            other => return Err(FedError::Decode(format!("unknown message type {other:?}"))),
        };
        Ok(MessageEnvelope { sender, round, body })
    }
}

// ---------------------------------------------------------------------------
// Aggregator phase machine

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregatorPhase {
    Registering,
    Training,
    Syncing,
    Evaluating,
    Stopping,
    ProcessingError,
}

impl AggregatorPhase {
    pub fn name(&self) -> &'static str {
        match self {
            AggregatorPhase::Registering => "REGISTERING",
            AggregatorPhase::Training => "TRAINING",
            AggregatorPhase::Syncing => "SYNCING",
            AggregatorPhase::Evaluating => "EVALUATING",
            AggregatorPhase::Stopping => "STOPPING",
            AggregatorPhase::ProcessingError => "PROCESSING_ERROR",
        }
    }

    pub const ALL: [AggregatorPhase; 6] = [
        AggregatorPhase::Registering,
        AggregatorPhase::Training,
        AggregatorPhase::Syncing,
        AggregatorPhase::Evaluating,
        AggregatorPhase::Stopping,
        AggregatorPhase::ProcessingError,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseEvent {
    TrainCmd,
    Termination,
    SyncAcked,
    EvalsDone,
    StopCmd,
    Error,
    Recover,
}

impl PhaseEvent {
    pub fn name(&self) -> &'static str {
        match self {
            PhaseEvent::TrainCmd => "train_cmd",
            PhaseEvent::Termination => "termination",
            PhaseEvent::SyncAcked => "sync_acked",
            PhaseEvent::EvalsDone => "evals_done",
            PhaseEvent::StopCmd => "stop_cmd",
            PhaseEvent::Error => "error",
            PhaseEvent::Recover => "recover",
        }
    }

    pub const ALL: [PhaseEvent; 7] = [
        PhaseEvent::TrainCmd,
        PhaseEvent::Termination,
        PhaseEvent::SyncAcked,
        PhaseEvent::EvalsDone,
        PhaseEvent::StopCmd,
        PhaseEvent::Error,
        PhaseEvent::Recover,
    ];
}

/// The aggregator's phase automaton. Legal transitions:
///
/// ```text
/// REGISTERING --train_cmd--> TRAINING --termination--> SYNCING
/// SYNCING --sync_acked--> EVALUATING --evals_done|stop_cmd--> STOPPING
/// any --error--> PROCESSING_ERROR --recover--> (previous valid phase)
/// ```
///
/// Every other `(phase, event)` pair is rejected with a protocol error
/// naming both, never silently accepted.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseMachine {
    phase: AggregatorPhase,
    prev_valid: Option<AggregatorPhase>,
}

impl Default for PhaseMachine {
    fn default() -> Self {
        Self::new()
    }
}

impl PhaseMachine {
    pub fn new() -> Self {
        PhaseMachine { phase: AggregatorPhase::Registering, prev_valid: None }
    }

    /// A machine placed in an arbitrary state; used by exhaustive tests.
    pub fn at(phase: AggregatorPhase, prev_valid: Option<AggregatorPhase>) -> Self {
        PhaseMachine { phase, prev_valid }
    }

    pub fn phase(&self) -> AggregatorPhase {
        self.phase
    }

    pub fn apply(&mut self, event: PhaseEvent) -> Result<AggregatorPhase> {
        use AggregatorPhase as P;
        use PhaseEvent as E;
        let next = match (self.phase, event) {
            (P::Registering, E::TrainCmd) => P::Training,
            (P::Training, E::Termination) => P::Syncing,
            (P::Syncing, E::SyncAcked) => P::Evaluating,
            (P::Evaluating, E::EvalsDone) => P::Stopping,
            (P::Evaluating, E::StopCmd) => P::Stopping,
            (_, E::Error) => {
                if self.phase != P::ProcessingError {
                    self.prev_valid = Some(self.phase);
                }
                P::ProcessingError
            }
            (P::ProcessingError, E::Recover) => self.prev_valid.ok_or_else(|| {
                FedError::Protocol("recover with no previous valid phase".into())
            })?,
            (phase, event) => {
                return Err(FedError::Protocol(format!(
                    "illegal event {} in phase {}",
                    event.name(),
                    phase.name()
                )))
            }
        };
        self.phase = next;
        Ok(next)
    }
}

// ---------------------------------------------------------------------------
// Party registry and quorum

/// Quorum predicate selection: every registered party must stay alive,
/// or at least `m` of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuorumPolicy {
    All,
    MinN(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartyInfo {
    pub address: String,
    pub registered_at: SystemTime,
    pub alive: bool,
    pub reply_policy: ReplyPolicy,
    pub dp_epsilon_per_round: f64,
}

/// The set of registered parties with liveness flags.
#[derive(Debug, Clone, PartialEq)]
pub struct PartyRegistry {
    parties: BTreeMap<String, PartyInfo>,
    pub policy: QuorumPolicy,
}

impl PartyRegistry {
    pub fn new(policy: QuorumPolicy) -> Self {
        PartyRegistry { parties: BTreeMap::new(), policy }
    }

    pub fn register(&mut self, party_id: &str, info: PartyInfo) -> Result<()> {
        if self.parties.contains_key(party_id) {
            return Err(FedError::Protocol("duplicate party id".into()));
        }
        self.parties.insert(party_id.to_string(), info);
        Ok(())
    }

    pub fn mark_dead(&mut self, party_id: &str) {
        if let Some(info) = self.parties.get_mut(party_id) {
            info.alive = false;
        }
    }

    pub fn contains(&self, party_id: &str) -> bool {
        self.parties.contains_key(party_id)
    }

    pub fn n_registered(&self) -> usize {
        self.parties.len()
    }

    pub fn n_alive(&self) -> usize {
        self.parties.values().filter(|p| p.alive).count()
    }

    /// Alive party ids in sorted order.
    pub fn alive_ids(&self) -> Vec<String> {
        self.parties
            .iter()
            .filter(|(_, p)| p.alive)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn get(&self, party_id: &str) -> Option<&PartyInfo> {
        self.parties.get(party_id)
    }

    /// `(policy = all and every party alive) or (policy = min_n(m) and
    /// at least m alive)`.
    pub fn quorum_satisfied(&self) -> bool {
        match self.policy {
            QuorumPolicy::All => self.parties.values().all(|p| p.alive),
            QuorumPolicy::MinN(m) => self.n_alive() >= m,
        }
    }

    /// Largest per-round DP cost any party reported; what the
    /// accountant charges per round.
    pub fn max_dp_epsilon(&self) -> f64 {
        self.parties
            .values()
            .map(|p| p.dp_epsilon_per_round)
            .fold(0.0, f64::max)
    }
}
