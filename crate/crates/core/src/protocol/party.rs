//! The party side of the protocol: registration handshake and the
//! serve loop that answers aggregator queries until STOP.

use std::time::Duration;

use crate::error::{FedError, Result};
use crate::eventlog;
use crate::fusion::QueryKind;
use crate::localtrain::LocalTrainer;
use crate::transport::Connection;

use super::{EnvelopeBody, MessageEnvelope, RegisterAckPayload, RegisterPayload};

/// Why the serve loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServeEnd {
    /// The aggregator sent STOP.
    Stopped,
    /// The connection closed without a STOP.
    ConnectionClosed,
}

/// One party's protocol session over an established connection.
/// Queries are handled strictly sequentially in arrival order; the
/// aggregator guarantees at most one outstanding query, which the
/// session asserts via monotonically increasing round numbers.
pub struct PartySession {
    pub conn: Connection,
    pub trainer: LocalTrainer,
    schema_hash: String,
    session_id: Option<String>,
    last_query_round: u64,
}

impl PartySession {
    pub fn new(conn: Connection, trainer: LocalTrainer, schema_hash: String) -> Self {
        PartySession { conn, trainer, schema_hash, session_id: None, last_query_round: 0 }
    }

    fn party_id(&self) -> String {
        self.trainer.party_id.clone()
    }

    fn log(&self, round: u64, event: &str, fields: &[(&str, String)]) {
        eventlog::emit(&self.trainer.party_id, "-", round, event, fields);
    }

    /// Sends REGISTER and waits for the ack (or the aggregator's ERROR).
    pub fn register(&mut self, timeout: Duration) -> Result<RegisterAckPayload> {
        let payload = RegisterPayload {
            party_id: self.party_id(),
            schema_hash: self.schema_hash.clone(),
            reply_policy: self.trainer.reply_policy,
            dp_epsilon_per_round: self
                .trainer
                .dp
                .as_ref()
                .filter(|dp| dp.sigma > 0.0)
                .map(|dp| dp.epsilon_per_round),
        };
        self.conn.send(&MessageEnvelope::new(
            self.party_id(),
            0,
            EnvelopeBody::Register(payload),
        ))?;

        match self.conn.recv_timeout(timeout)? {
            Some(env) => match env.body {
                EnvelopeBody::RegisterAck(ack) => {
                    if ack.schema_hash != self.schema_hash {
                        return Err(FedError::Protocol(
                            "aggregator acked with a different schema hash".into(),
                        ));
                    }
                    self.session_id = Some(ack.session_id.clone());
                    self.log(0, "registered", &[("session", ack.session_id.clone())]);
                    Ok(ack)
                }
                EnvelopeBody::Error(e) => {
                    Err(FedError::Protocol(format!("registration rejected: {}", e.message)))
                }
                other => Err(FedError::Protocol(format!(
                    "expected REGISTER_ACK, got {}",
                    other.type_name()
                ))),
            },
            None => Err(FedError::Protocol("registration timed out".into())),
        }
    }

    /// Serves queries until the aggregator stops the session or the
    /// connection closes. Handler failures are relayed back as ERROR
    /// envelopes; the loop keeps serving.
    pub fn serve(&mut self) -> Result<ServeEnd> {
        loop {
            let env = match self.conn.recv() {
                Ok(env) => env,
                Err(FedError::Transport(reason)) => {
                    self.log(0, "connection_closed", &[("reason", reason)]);
                    return Ok(ServeEnd::ConnectionClosed);
                }
                Err(other) => return Err(other),
            };
            if let Some(end) = self.handle_envelope(env)? {
                return Ok(end);
            }
        }
    }

    /// Processes one inbound envelope; `Some(end)` terminates serving.
    pub fn handle_envelope(&mut self, env: MessageEnvelope) -> Result<Option<ServeEnd>> {
        match &env.body {
            EnvelopeBody::TrainQuery(_) => {
                if env.round <= self.last_query_round {
                    self.reply_error(format!(
                        "out-of-order query: round {} after {}",
                        env.round, self.last_query_round
                    ));
                    return Ok(None);
                }
                match env
                    .to_query()
                    .and_then(|q| match q.kind {
                        QueryKind::TrainWeights => self.trainer.handle_train_query(&q),
                        QueryKind::CountsRequest => self.trainer.handle_counts_query(&q),
                        _ => Err(FedError::Protocol("unexpected query kind".into())),
                    }) {
                    Ok(update) => {
                        self.last_query_round = env.round;
                        self.conn.send(&MessageEnvelope::new(
                            self.party_id(),
                            env.round,
                            EnvelopeBody::ModelUpdate(update),
                        ))?;
                        self.log(env.round, "reply_sent", &[]);
                    }
                    Err(e) => self.reply_error(e.to_string()),
                }
            }
            EnvelopeBody::Sync(_) => match env.to_query() {
                Ok(q) => match self.trainer.handle_sync(&q) {
                    Ok(()) => self.log(env.round, "model_synced", &[]),
                    Err(e) => self.reply_error(e.to_string()),
                },
                Err(e) => self.reply_error(e.to_string()),
            },
            EnvelopeBody::EvalRequest => match self.trainer.handle_eval() {
                Ok(metrics) => {
                    self.conn.send(&MessageEnvelope::new(
                        self.party_id(),
                        env.round,
                        EnvelopeBody::EvalReply(metrics),
                    ))?;
                    self.log(
                        env.round,
                        "eval_sent",
                        &[("accuracy", format!("{:.4}", metrics.accuracy))],
                    );
                }
                Err(e) => self.reply_error(e.to_string()),
            },
            EnvelopeBody::Stop => {
                self.log(0, "stopped_by_aggregator", &[]);
                return Ok(Some(ServeEnd::Stopped));
            }
            EnvelopeBody::Error(e) => {
                self.log(env.round, "aggregator_error", &[("message", e.message.clone())]);
            }
            other => {
                self.log(
                    env.round,
                    "unexpected_message_discarded",
                    &[("type", other.type_name().to_string())],
                );
            }
        }
        Ok(None)
    }

    fn reply_error(&self, message: String) {
        self.log(0, "handler_error", &[("message", message.clone())]);
        let _ = self
            .conn
            .send(&MessageEnvelope::error(self.party_id(), message));
    }
}
