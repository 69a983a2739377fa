//! The aggregator coordination loop: accepts party connections,
//! processes registrations, broadcasts queries, and collects replies
//! with timeout and quorum handling.
//!
//! One thread owns the `Coordinator`; an acceptor thread and one reader
//! thread per connection feed decoded envelopes into its inbox channel.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant, SystemTime};

use crate::error::{FedError, Result};
use crate::eventlog;
use crate::fusion::{FusionKind, Query, ReplySet, RoundIo};
use crate::model::{Metrics, Model};
use crate::transport::{self, Connection, Endpoint, Listener};

use super::{
    AggregatorPhase, EnvelopeBody, ErrorPayload, MessageEnvelope, PartyInfo, PartyRegistry,
    PhaseEvent, PhaseMachine, QuorumPolicy, RegisterAckPayload, AGGREGATOR_ID,
};

const ACCEPT_POLL: Duration = Duration::from_millis(50);

#[derive(Debug, Clone)]
pub struct CoordinatorOptions {
    pub session_id: String,
    /// Model/data signature parties must match at registration.
    pub schema_hash: String,
    pub fusion_kind: FusionKind,
    pub quorum: QuorumPolicy,
    pub reply_timeout: Duration,
}

enum InboxEvent {
    Accepted(Connection),
    Message(u64, MessageEnvelope),
    Closed(u64, String),
}

/// Aggregator-side runtime state: phase machine, registry, connections.
pub struct Coordinator {
    opts: CoordinatorOptions,
    pub phases: PhaseMachine,
    pub registry: PartyRegistry,
    inbox_tx: Sender<InboxEvent>,
    inbox: Receiver<InboxEvent>,
    listener: Option<Arc<Listener>>,
    shutdown: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
    conns: HashMap<u64, Arc<Connection>>,
    party_of_conn: HashMap<u64, String>,
    conn_of_party: BTreeMap<String, u64>,
    next_conn_id: u64,
}

impl Coordinator {
    pub fn new(opts: CoordinatorOptions) -> Self {
        let (inbox_tx, inbox) = mpsc::channel();
        let quorum = opts.quorum;
        Coordinator {
            opts,
            phases: PhaseMachine::new(),
            registry: PartyRegistry::new(quorum),
            inbox_tx,
            inbox,
            listener: None,
            shutdown: Arc::new(AtomicBool::new(false)),
            acceptor: None,
            conns: HashMap::new(),
            party_of_conn: HashMap::new(),
            conn_of_party: BTreeMap::new(),
            next_conn_id: 0,
        }
    }

    pub fn phase(&self) -> AggregatorPhase {
        self.phases.phase()
    }

    fn log(&self, round: u64, event: &str, fields: &[(&str, String)]) {
        eventlog::emit(AGGREGATOR_ID, self.phase().name(), round, event, fields);
    }

    /// Binds the listener and starts accepting connections; returns the
    /// actual bound endpoint (the chosen port for `tcp:host:0`).
    pub fn start(&mut self, endpoint: &Endpoint) -> Result<Endpoint> {
        if self.listener.is_some() {
            return Err(FedError::Protocol("coordinator already started".into()));
        }
        let listener = Arc::new(transport::listen(endpoint)?);
        let actual = listener.endpoint().clone();

        let accept_listener = Arc::clone(&listener);
        let tx = self.inbox_tx.clone();
        let shutdown = Arc::clone(&self.shutdown);
        self.acceptor = Some(std::thread::spawn(move || loop {
            if shutdown.load(Ordering::SeqCst) {
                break;
            }
            match accept_listener.accept_timeout(ACCEPT_POLL) {
                Ok(Some(conn)) => {
                    if tx.send(InboxEvent::Accepted(conn)).is_err() {
                        break;
                    }
                }
                Ok(None) => {}
                Err(_) => break,
            }
        }));

        self.listener = Some(listener);
        self.log(0, "listening", &[("endpoint", actual.describe())]);
        Ok(actual)
    }

    fn adopt(&mut self, conn: Connection) {
        let id = self.next_conn_id;
        self.next_conn_id += 1;
        let conn = Arc::new(conn);
        self.conns.insert(id, Arc::clone(&conn));

        let tx = self.inbox_tx.clone();
        std::thread::spawn(move || loop {
            match conn.recv() {
                Ok(env) => {
                    if tx.send(InboxEvent::Message(id, env)).is_err() {
                        break;
                    }
                }
                Err(e) => {
                    let _ = tx.send(InboxEvent::Closed(id, e.to_string()));
                    break;
                }
            }
        });
    }

    fn send_to_conn(&self, conn_id: u64, env: &MessageEnvelope) -> Result<()> {
        let conn = self
            .conns
            .get(&conn_id)
            .ok_or_else(|| FedError::Transport("connection gone".into()))?;
        conn.send(env)
    }

    fn reject_register(&self, conn_id: u64, message: &str) {
        self.log(0, "register_rejected", &[("reason", message.to_string())]);
        let _ = self.send_to_conn(conn_id, &MessageEnvelope::error(AGGREGATOR_ID, message));
    }

    /// Handles one REGISTER envelope: phase, sender, schema, policy and
    /// duplicate checks, then records the party and acks.
    fn handle_register(&mut self, conn_id: u64, env: &MessageEnvelope) {
        let EnvelopeBody::Register(payload) = &env.body else {
            return;
        };
        if self.phase() != AggregatorPhase::Registering {
            self.reject_register(conn_id, "registration closed");
            return;
        }
        if env.sender != payload.party_id {
            self.reject_register(conn_id, "sender does not match party_id");
            return;
        }
        if payload.schema_hash != self.opts.schema_hash {
            self.reject_register(
                conn_id,
                &format!(
                    "schema hash mismatch: party has {}, aggregator has {}",
                    payload.schema_hash, self.opts.schema_hash
                ),
            );
            return;
        }
        if !self.opts.fusion_kind.accepts_policy(payload.reply_policy) {
            self.reject_register(
                conn_id,
                &format!(
                    "reply policy {} is incompatible with fusion kind {}",
                    payload.reply_policy.name(),
                    self.opts.fusion_kind.name()
                ),
            );
            return;
        }

        let address = self
            .conns
            .get(&conn_id)
            .map(|c| c.peer_desc().to_string())
            .unwrap_or_default();
        let info = PartyInfo {
            address,
            registered_at: SystemTime::now(),
            alive: true,
            reply_policy: payload.reply_policy,
            dp_epsilon_per_round: payload.dp_epsilon_per_round.unwrap_or(0.0),
        };
        if let Err(e) = self.registry.register(&payload.party_id, info) {
            self.reject_register(conn_id, &e.to_string());
            return;
        }
        self.party_of_conn.insert(conn_id, payload.party_id.clone());
        self.conn_of_party.insert(payload.party_id.clone(), conn_id);

        let ack = MessageEnvelope::new(
            AGGREGATOR_ID,
            0,
            EnvelopeBody::RegisterAck(RegisterAckPayload {
                session_id: self.opts.session_id.clone(),
                schema_hash: self.opts.schema_hash.clone(),
            }),
        );
        if self.send_to_conn(conn_id, &ack).is_err() {
            self.drop_party_conn(conn_id, "ack send failed");
            return;
        }
        self.log(
            0,
            "registered",
            &[
                ("party", payload.party_id.clone()),
                ("parties", self.registry.n_registered().to_string()),
            ],
        );
    }

    fn drop_party_conn(&mut self, conn_id: u64, reason: &str) {
        if let Some(conn) = self.conns.remove(&conn_id) {
            conn.close();
        }
        if let Some(party) = self.party_of_conn.remove(&conn_id) {
            self.conn_of_party.remove(&party);
            let was_alive = self.registry.get(&party).map(|p| p.alive).unwrap_or(false);
            self.registry.mark_dead(&party);
            if was_alive {
                self.log(
                    0,
                    "party_dropped",
                    &[("party", party), ("reason", reason.to_string())],
                );
            }
        }
    }

    /// Pulls the next non-registration message, transparently handling
    /// accepts, registrations, and disconnects. `None` on deadline.
    fn poll_event(&mut self, deadline: Instant) -> Result<Option<(u64, MessageEnvelope)>> {
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            if remaining.is_zero() {
                return Ok(None);
            }
            match self.inbox.recv_timeout(remaining) {
                Ok(InboxEvent::Accepted(conn)) => self.adopt(conn),
                Ok(InboxEvent::Message(conn_id, env)) => {
                    if matches!(env.body, EnvelopeBody::Register(_)) {
                        self.handle_register(conn_id, &env);
                    } else {
                        return Ok(Some((conn_id, env)));
                    }
                }
                Ok(InboxEvent::Closed(conn_id, reason)) => {
                    self.drop_party_conn(conn_id, &reason);
                }
                Err(RecvTimeoutError::Timeout) => return Ok(None),
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(FedError::Transport("coordinator inbox closed".into()))
                }
            }
        }
    }

    /// Services registrations and disconnects for `wait`; any stray
    /// round messages are discarded with a log line.
    pub fn pump(&mut self, wait: Duration) -> Result<()> {
        let deadline = Instant::now() + wait;
        while let Some((_, env)) = self.poll_event(deadline)? {
            self.log(
                env.round,
                "stale_reply_discarded",
                &[
                    ("type", env.type_name().to_string()),
                    ("reply_round", env.round.to_string()),
                ],
            );
        }
        Ok(())
    }

    /// Pumps the inbox until the quorum predicate holds (with at least
    /// one party) or the timeout elapses.
    pub fn wait_for_quorum(&mut self, timeout: Duration) -> Result<bool> {
        let deadline = Instant::now() + timeout;
        loop {
            if self.registry.n_registered() > 0 && self.registry.quorum_satisfied() {
                return Ok(true);
            }
            if Instant::now() >= deadline {
                return Ok(false);
            }
            self.pump(Duration::from_millis(20))?;
        }
    }

    /// Sends an envelope to every alive party; a transport failure
    /// marks that party dead and the broadcast proceeds. Errors only if
    /// the quorum breaks.
    fn broadcast_envelope(&mut self, env: &MessageEnvelope) -> Result<usize> {
        let mut delivered = 0;
        for party in self.registry.alive_ids() {
            let Some(&conn_id) = self.conn_of_party.get(&party) else {
                self.registry.mark_dead(&party);
                continue;
            };
            match self.send_to_conn(conn_id, env) {
                Ok(()) => delivered += 1,
                Err(e) => {
                    self.drop_party_conn(conn_id, &format!("send failed: {e}"));
                }
            }
        }
        if !self.registry.quorum_satisfied() {
            return Err(FedError::Quorum(format!(
                "quorum broken during broadcast: {} of {} parties alive",
                self.registry.n_alive(),
                self.registry.n_registered()
            )));
        }
        Ok(delivered)
    }

    /// Broadcasts one query envelope to every alive party.
    pub fn broadcast_query(&mut self, query: &Query) -> Result<()> {
        let env = MessageEnvelope::for_query(query)?;
        let delivered = self.broadcast_envelope(&env)?;
        self.log(
            query.round,
            "query_broadcast",
            &[
                ("kind", query.kind.name().to_string()),
                ("parties", delivered.to_string()),
            ],
        );
        Ok(())
    }

    /// Blocks until every alive party replied for `round` or the reply
    /// timeout passes. Late/stale rounds are discarded with a logged
    /// warning; parties silent past the deadline are marked dead.
    /// Returns the reply set if the quorum still holds.
    pub fn collect_replies(&mut self, round: u64) -> Result<ReplySet> {
        let deadline = Instant::now() + self.opts.reply_timeout;
        let mut replies = ReplySet::new(round);
        loop {
            let pending: Vec<String> = self
                .registry
                .alive_ids()
                .into_iter()
                .filter(|p| !replies.contains(p))
                .collect();
            if pending.is_empty() {
                break;
            }
            let Some((conn_id, env)) = self.poll_event(deadline)? else {
                // Timeout: whoever stayed silent is treated as dropped.
                for party in pending {
                    self.log(
                        round,
                        "party_dropped",
                        &[("party", party.clone()), ("reason", "reply timeout".to_string())],
                    );
                    self.registry.mark_dead(&party);
                    if let Some(conn_id) = self.conn_of_party.get(&party).copied() {
                        if let Some(conn) = self.conns.remove(&conn_id) {
                            conn.close();
                        }
                        self.party_of_conn.remove(&conn_id);
                        self.conn_of_party.remove(&party);
                    }
                }
                break;
            };
            let Some(party) = self.party_of_conn.get(&conn_id).cloned() else {
                self.log(
                    env.round,
                    "unregistered_message_discarded",
                    &[("type", env.type_name().to_string())],
                );
                continue;
            };
            match env.body {
                EnvelopeBody::ModelUpdate(update) => {
                    if env.round == round {
                        replies.insert(&party, env.round, update)?;
                    } else {
                        self.log(
                            round,
                            "stale_reply_discarded",
                            &[
                                ("party", party.clone()),
                                ("reply_round", env.round.to_string()),
                            ],
                        );
                    }
                }
                EnvelopeBody::Error(ErrorPayload { message }) => {
                    self.log(
                        round,
                        "party_error",
                        &[("party", party.clone()), ("message", message)],
                    );
                    if let Some(&conn_id) = self.conn_of_party.get(&party) {
                        self.drop_party_conn(conn_id, "party reported an error");
                    }
                }
                other => {
                    self.log(
                        round,
                        "unexpected_message_discarded",
                        &[("party", party.clone()), ("type", other.type_name().to_string())],
                    );
                }
            }
        }

        if !self.registry.quorum_satisfied() {
            return Err(FedError::Quorum(format!(
                "round {round}: collected {} replies but quorum is not met ({} of {} alive)",
                replies.len(),
                self.registry.n_alive(),
                self.registry.n_registered()
            )));
        }
        self.log(
            round,
            "replies_collected",
            &[("parties", replies.len().to_string())],
        );
        Ok(replies)
    }

    /// Distributes the final global model, moving the phase machine
    /// through SYNCING into EVALUATING.
    pub fn sync_model(&mut self, round: u64, model: &Model) -> Result<()> {
        self.phases.apply(PhaseEvent::Termination)?;
        self.log(round, "phase", &[("to", self.phase().name().to_string())]);
        let env = MessageEnvelope::new(AGGREGATOR_ID, round, EnvelopeBody::Sync(model.to_json()));
        let delivered = self.broadcast_envelope(&env)?;
        self.log(round, "synced", &[("parties", delivered.to_string())]);
        self.phases.apply(PhaseEvent::SyncAcked)?;
        self.log(round, "phase", &[("to", self.phase().name().to_string())]);
        Ok(())
    }

    /// Re-broadcasts a model without touching the phase machine; the
    /// operator SYNC command after a finished session.
    pub fn resync(&mut self, round: u64, model: &Model) -> Result<usize> {
        let env = MessageEnvelope::new(AGGREGATOR_ID, round, EnvelopeBody::Sync(model.to_json()));
        let delivered = self.broadcast_envelope(&env)?;
        self.log(round, "synced", &[("parties", delivered.to_string())]);
        Ok(delivered)
    }

    /// Requests local evaluation from every alive party and collects
    /// whatever metrics arrive before the reply timeout. Best effort:
    /// missing or failed evals are logged, never fatal.
    pub fn collect_evals(&mut self, round: u64) -> Result<Vec<(String, Metrics)>> {
        let env = MessageEnvelope::new(AGGREGATOR_ID, round, EnvelopeBody::EvalRequest);
        if self.broadcast_envelope(&env).is_err() {
            return Ok(Vec::new());
        }
        let deadline = Instant::now() + self.opts.reply_timeout;
        let mut metrics = Vec::new();
        let mut answered: Vec<String> = Vec::new();
        loop {
            let waiting = self
                .registry
                .alive_ids()
                .into_iter()
                .any(|p| !answered.contains(&p));
            if !waiting {
                break;
            }
            let Some((conn_id, env)) = self.poll_event(deadline)? else { break };
            let Some(party) = self.party_of_conn.get(&conn_id).cloned() else { continue };
            match env.body {
                EnvelopeBody::EvalReply(m) => {
                    self.log(
                        round,
                        "eval_reply",
                        &[
                            ("party", party.clone()),
                            ("accuracy", format!("{:.4}", m.accuracy)),
                            ("n", m.n.to_string()),
                        ],
                    );
                    answered.push(party.clone());
                    metrics.push((party, m));
                }
                EnvelopeBody::Error(ErrorPayload { message }) => {
                    self.log(
                        round,
                        "eval_failed",
                        &[("party", party.clone()), ("message", message)],
                    );
                    answered.push(party);
                }
                other => {
                    self.log(
                        round,
                        "unexpected_message_discarded",
                        &[("party", party), ("type", other.type_name().to_string())],
                    );
                }
            }
        }
        Ok(metrics)
    }

    /// Sends STOP to every alive party and tears down all connections
    /// and the listener.
    pub fn stop(&mut self) {
        let env = MessageEnvelope::new(AGGREGATOR_ID, 0, EnvelopeBody::Stop);
        let _ = self.broadcast_envelope(&env);
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(listener) = self.listener.take() {
            listener.close();
        }
        for (_, conn) in self.conns.drain() {
            conn.close();
        }
        if let Some(handle) = self.acceptor.take() {
            let _ = handle.join();
        }
        self.log(0, "stopped", &[]);
    }
}

impl RoundIo for Coordinator {
    fn broadcast(&mut self, query: &Query) -> Result<()> {
        self.broadcast_query(query)
    }

    fn collect(&mut self, round: u64) -> Result<ReplySet> {
        self.collect_replies(round)
    }

    fn sync(&mut self, round: u64, model: &Model) -> Result<()> {
        self.sync_model(round, model)
    }
}
