//! Shared harness for integration tests: runs a full aggregator/party
//! session over the in-process transport, each party on its own thread.

use std::collections::BTreeMap;
use std::time::Duration;

use fedmesh::config::{schema_hash_id3, schema_hash_linear};
use fedmesh::data::{Dataset, Schema};
use fedmesh::error::Result;
use fedmesh::fusion::{
    run_fusion_session, FusionKind, GlobalModelState, SessionOptions, TerminationReason,
};
use fedmesh::localtrain::{DataHandler, DpAccountant, DpConfig, LocalTrainer, ReplyPolicy};
use fedmesh::model::{DecisionTree, LinearModel, Loss, Metrics, Model, TreeNode};
use fedmesh::protocol::{
    AggregatorPhase, Coordinator, CoordinatorOptions, EnvelopeBody, Hyperparameters,
    PartySession, PhaseEvent, QuorumPolicy,
};
use fedmesh::transport::{self, Endpoint};

pub struct PartySpec {
    pub id: String,
    pub dataset: Dataset,
    pub test_fraction: f64,
    pub policy: ReplyPolicy,
    pub dp: Option<DpConfig>,
    /// Close the connection instead of answering any training query
    /// with a round above this; simulates a killed party.
    pub drop_after_round: Option<u64>,
}

impl PartySpec {
    pub fn new(id: &str, dataset: Dataset, policy: ReplyPolicy) -> Self {
        PartySpec {
            id: id.to_string(),
            dataset,
            test_fraction: 0.0,
            policy,
            dp: None,
            drop_after_round: None,
        }
    }
}

pub struct SessionConfig {
    pub key: String,
    pub kind: FusionKind,
    pub hyperparams: Hyperparameters,
    pub quorum: QuorumPolicy,
    pub seed: u64,
    pub dp_budget: Option<f64>,
    pub run_eval: bool,
    pub max_depth: usize,
    pub loss: Loss,
}

impl SessionConfig {
    pub fn new(key: &str, kind: FusionKind, hyperparams: Hyperparameters) -> Self {
        SessionConfig {
            key: key.to_string(),
            kind,
            hyperparams,
            quorum: QuorumPolicy::All,
            seed: 42,
            dp_budget: None,
            run_eval: false,
            max_depth: 4,
            loss: Loss::Logistic,
        }
    }
}

#[derive(Debug)]
pub struct SessionResult {
    pub state: GlobalModelState,
    pub reason: TerminationReason,
    pub evals: Vec<(String, Metrics)>,
    pub dp_total: f64,
}

pub struct SessionOutcome {
    pub result: Result<SessionResult>,
    pub final_phase: AggregatorPhase,
}

fn initial_party_model(dataset: &Dataset, loss: Loss) -> Model {
    match &dataset.schema {
        Schema::Numeric(s) => {
            Model::Linear(LinearModel::zeros(s.n_features(), s.n_classes(), loss).unwrap())
        }
        Schema::Categorical(s) => {
            Model::Id3(DecisionTree::single_leaf(s.clone(), 0, s.n_features()))
        }
    }
}

fn party_main(endpoint: Endpoint, spec: PartySpec, schema_hash: String, loss: Loss) {
    let conn = transport::connect(&endpoint).expect("party connects");
    let data = DataHandler::from_dataset(&spec.dataset, spec.test_fraction, 1);
    let model = initial_party_model(&spec.dataset, loss);
    let trainer = LocalTrainer::new(model, data, spec.policy, spec.dp, spec.id.clone());
    let mut session = PartySession::new(conn, trainer, schema_hash);
    session.register(Duration::from_secs(10)).expect("registration acked");

    match spec.drop_after_round {
        None => {
            let _ = session.serve();
        }
        Some(limit) => loop {
            let env = match session.conn.recv() {
                Ok(env) => env,
                Err(_) => break,
            };
            let defect =
                matches!(env.body, EnvelopeBody::TrainQuery(_)) && env.round > limit;
            if defect {
                session.conn.close();
                break;
            }
            match session.handle_envelope(env) {
                Ok(Some(_)) | Err(_) => break,
                Ok(None) => {}
            }
        },
    }
}

/// Runs one complete in-process session and joins every thread before
/// returning.
pub fn run_session(cfg: SessionConfig, parties: Vec<PartySpec>) -> SessionOutcome {
    let first_schema = parties[0].dataset.schema.clone();
    let (initial, schema_hash) = match (&cfg.kind, &first_schema) {
        (FusionKind::Id3, Schema::Categorical(s)) => (
            Model::Id3(DecisionTree::single_leaf(s.clone(), 0, cfg.max_depth)),
            schema_hash_id3(s),
        ),
        (_, schema) => {
            let model =
                LinearModel::zeros(schema.n_features(), schema.n_classes(), cfg.loss).unwrap();
            let hash = schema_hash_linear(schema.n_features(), schema.n_classes());
            (Model::Linear(model), hash)
        }
    };

    let mut coord = Coordinator::new(CoordinatorOptions {
        session_id: format!("test-{}", cfg.key),
        schema_hash: schema_hash.clone(),
        fusion_kind: cfg.kind,
        quorum: cfg.quorum,
        reply_timeout: Duration::from_millis(cfg.hyperparams.reply_timeout_ms),
    });
    let endpoint = coord
        .start(&Endpoint::in_process(&cfg.key))
        .expect("listener binds");

    let n_parties = parties.len();
    let mut handles = Vec::new();
    for spec in parties {
        let endpoint = endpoint.clone();
        let hash = schema_hash.clone();
        let loss = cfg.loss;
        handles.push(std::thread::spawn(move || party_main(endpoint, spec, hash, loss)));
    }

    // All parties must be in before training starts, or late REGISTERs
    // would be rejected.
    let deadline = std::time::Instant::now() + Duration::from_secs(10);
    while coord.registry.n_registered() < n_parties {
        assert!(std::time::Instant::now() < deadline, "registration stalled");
        coord.pump(Duration::from_millis(10)).unwrap();
    }
    assert!(coord.registry.quorum_satisfied());

    coord.phases.apply(PhaseEvent::TrainCmd).unwrap();
    let mut accountant = DpAccountant::new(coord.registry.max_dp_epsilon(), cfg.dp_budget);
    let opts = SessionOptions {
        kind: cfg.kind,
        hyperparams: cfg.hyperparams.clone(),
        seed: cfg.seed,
        loss: match cfg.kind {
            FusionKind::Id3 => None,
            _ => Some(cfg.loss.name().to_string()),
        },
        max_depth: cfg.max_depth,
    };

    let result = match run_fusion_session(&mut coord, initial, &opts, &mut accountant) {
        Ok((state, reason)) => {
            let evals = if cfg.run_eval {
                coord.collect_evals(state.round.max(1)).unwrap_or_default()
            } else {
                Vec::new()
            };
            coord.phases.apply(PhaseEvent::EvalsDone).unwrap();
            Ok(SessionResult { state, reason, evals, dp_total: accountant.total_epsilon() })
        }
        Err(e) => {
            let _ = coord.phases.apply(PhaseEvent::Error);
            Err(e)
        }
    };

    let final_phase = coord.phase();
    coord.stop();
    for handle in handles {
        handle.join().expect("party thread exits cleanly");
    }
    SessionOutcome { result, final_phase }
}

/// Convenience: the hyperparameters most session tests use.
pub fn quick_hp(max_rounds: u64, epochs: u32, lr: f64) -> Hyperparameters {
    Hyperparameters {
        max_rounds,
        epochs,
        learning_rate: lr,
        batch_size: 16,
        reply_timeout_ms: 3_000,
    }
}

/// The canonical play-tennis tree, frozen from the independent
/// centralized oracle: Outlook root; Humidity under Sunny; Wind under
/// Rain; Overcast pure Yes. Feature/value/label ids follow the schema
/// in `data::toy`.
pub fn frozen_tennis_tree(max_depth: usize) -> DecisionTree {
    let schema = match fedmesh::data::toy::play_tennis_schema() {
        Schema::Categorical(s) => s,
        _ => unreachable!(),
    };
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
    DecisionTree { root, schema, max_depth }
}

