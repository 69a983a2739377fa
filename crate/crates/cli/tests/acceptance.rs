//! Acceptance suite: one test per release criterion, each printing a
//! PASS line (run with `--nocapture` to see them). Expected values come
//! from independent oracles implemented in this file, never from the
//! code paths under test.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use fedmesh::config::{schema_hash_linear, PartyConfig};
use fedmesh::data::{
    self, toy, CategoricalSchema, Dataset, Features, PartitionStrategy, Row, Schema,
};
use fedmesh::error::FedError;
use fedmesh::fusion::{
    self, run_fusion_session, FusionKind, Query, QueryKind, ReplySet, RoundIo, SessionOptions,
    TerminationReason, TreeGrower,
};
use fedmesh::localtrain::{
    add_gaussian_noise, tabulate_counts, DataHandler, DpAccountant, DpConfig, DpSeedMode,
    LocalTrainer, ReplyPolicy,
};
use fedmesh::model::{
    DecisionTree, LinearModel, Loss, Model, ModelUpdate, TrainHyperparams, TreeNode, WeightMap,
};
use fedmesh::protocol::{
    AggregatorPhase, Hyperparameters, PartySession, PhaseEvent, PhaseMachine,
};
use fedmesh_cli::{run_aggregator, run_party, Command};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pass(криterion: u32, name: &str) {
    println!("ACCEPTANCE {криterion} {name}: PASS");
}

// ===========================================================================
// Independent oracles

/// Centralized ID3 oracle: grows the tree directly from raw rows with
/// the shared tie-break rules (lowest feature index, lowest class id).
/// No counts tables, no grower; a separate formulation on purpose.
mod oracle {
    use super::*;

    fn entropy(rows: &[(Vec<usize>, usize)], n_classes: usize) -> f64 {
        let mut counts = vec![0usize; n_classes];
        for (_, y) in rows {
            counts[*y] += 1;
        }
        let n = rows.len() as f64;
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.log2()
            })
            .sum()
    }

    fn majority(rows: &[(Vec<usize>, usize)], n_classes: usize) -> usize {
        let mut counts = vec![0usize; n_classes];
        for (_, y) in rows {
            counts[*y] += 1;
        }
        let mut best = 0;
        for (c, &count) in counts.iter().enumerate() {
            if count > counts[best] {
                best = c;
            }
        }
        best
    }

    fn grow(
        rows: Vec<(Vec<usize>, usize)>,
        schema: &CategoricalSchema,
        candidates: &[usize],
        depth: usize,
        max_depth: usize,
        parent_majority: usize,
    ) -> TreeNode {
        let n_classes = schema.n_classes();
        if rows.is_empty() {
            return TreeNode::Leaf { label: parent_majority };
        }
        let node_majority = majority(&rows, n_classes);
        let pure = rows.iter().all(|(_, y)| *y == rows[0].1);
        if pure || candidates.is_empty() || depth >= max_depth {
            return TreeNode::Leaf { label: node_majority };
        }

        let h_node = entropy(&rows, n_classes);
        let mut best_feature = candidates[0];
        let mut best_gain = f64::NEG_INFINITY;
        for &f in candidates {
            let mut weighted = 0.0;
            for v in 0..schema.features[f].values.len() {
                let subset: Vec<(Vec<usize>, usize)> = rows
                    .iter()
                    .filter(|(x, _)| x[f] == v)
                    .cloned()
                    .collect();
                if !subset.is_empty() {
                    weighted +=
                        (subset.len() as f64 / rows.len() as f64) * entropy(&subset, n_classes);
                }
            }
            let gain = h_node - weighted;
            if gain > best_gain {
                best_gain = gain;
                best_feature = f;
            }
        }

        let remaining: Vec<usize> =
            candidates.iter().copied().filter(|&f| f != best_feature).collect();
        let mut children = BTreeMap::new();
        for v in 0..schema.features[best_feature].values.len() {
            let subset: Vec<(Vec<usize>, usize)> = rows
                .iter()
                .filter(|(x, _)| x[best_feature] == v)
                .cloned()
                .collect();
            children.insert(
                v,
                grow(subset, schema, &remaining, depth + 1, max_depth, node_majority),
            );
        }
        TreeNode::Internal { feature: best_feature, majority: node_majority, children }
    }

    pub fn centralized_id3(ds: &Dataset, max_depth: usize) -> DecisionTree {
        let schema = match &ds.schema {
            Schema::Categorical(s) => s.clone(),
            _ => panic!("oracle needs categorical data"),
        };
        let rows: Vec<(Vec<usize>, usize)> = ds
            .categorical_rows()
            .unwrap()
            .into_iter()
            .map(|(x, y)| (x.to_vec(), y))
            .collect();
        let candidates: Vec<usize> = (0..schema.n_features()).collect();
        let root = grow(rows, &schema, &candidates, 0, max_depth, 0);
        DecisionTree { root, schema, max_depth }
    }

    /// Naive per-coordinate weighted mean, accumulated in given order.
    pub fn weighted_mean(values: &[Vec<f64>], weights: &[u64]) -> Vec<f64> {
        let dim = values[0].len();
        let total: f64 = weights.iter().map(|&w| w as f64).sum();
        let mut out = vec![0.0; dim];
        for (v, &w) in values.iter().zip(weights) {
            for (о, x) in out.iter_mut().zip(v) {
                *о += (w as f64) * x;
            }
        }
        for о in &mut out {
            *о /= total;
        }
        out
    }

    pub fn mean(values: &[Vec<f64>]) -> Vec<f64> {
        let dim = values[0].len();
        let mut out = vec![0.0; dim];
        for v in values {
            for (о, x) in out.iter_mut().zip(v) {
                *о += x;
            }
        }
        for о in &mut out {
            *о /= values.len() as f64;
        }
        out
    }

    pub fn sorted_median(values: &[Vec<f64>]) -> Vec<f64> {
        let dim = values[0].len();
        (0..dim)
            .map(|i| {
                let mut column: Vec<f64> = values.iter().map(|v| v[i]).collect();
                column.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
                let mid = column.len() / 2;
                if column.len() % 2 == 0 {
                    (column[mid - 1] + column[mid]) / 2.0
                } else {
                    column[mid]
                }
            })
            .collect()
    }
}

// ===========================================================================
// In-memory session loopback: drives LocalTrainers directly through the
// real run_fusion_session loop, no transport.

struct LoopbackIo {
    trainers: Vec<LocalTrainer>,
    pending: Option<Query>,
}

impl LoopbackIo {
    fn new(trainers: Vec<LocalTrainer>) -> Self {
        LoopbackIo { trainers, pending: None }
    }
}

impl RoundIo for LoopbackIo {
    fn broadcast(&mut self, query: &Query) -> fedmesh::Result<()> {
        self.pending = Some(query.clone());
        Ok(())
    }

    fn collect(&mut self, round: u64) -> fedmesh::Result<ReplySet> {
        let query = self.pending.take().expect("broadcast before collect");
        let mut replies = ReplySet::new(round);
        for trainer in &mut self.trainers {
            let update = match query.kind {
                QueryKind::TrainWeights => trainer.handle_train_query(&query)?,
                QueryKind::CountsRequest => trainer.handle_counts_query(&query)?,
                _ => unreachable!("sessions only broadcast training queries"),
            };
            replies.insert(&trainer.party_id.clone(), round, update)?;
        }
        Ok(replies)
    }

    fn sync(&mut self, round: u64, model: &Model) -> fedmesh::Result<()> {
        let query = Query::sync(round, model);
        for trainer in &mut self.trainers {
            trainer.handle_sync(&query)?;
        }
        Ok(())
    }
}

fn counts_trainer(id: &str, ds: Dataset) -> LocalTrainer {
    let schema = match &ds.schema {
        Schema::Categorical(s) => s.clone(),
        _ => unreachable!(),
    };
    let model = Model::Id3(DecisionTree::single_leaf(schema.clone(), 0, schema.n_features()));
    LocalTrainer::new(
        model,
        DataHandler::new(ds, Dataset::empty(Schema::Categorical(schema))),
        ReplyPolicy::Counts,
        None,
        id,
    )
}

fn federated_id3(parties: Vec<Dataset>, max_depth: usize) -> DecisionTree {
    let schema = match &parties[0].schema {
        Schema::Categorical(s) => s.clone(),
        _ => unreachable!(),
    };
    let trainers: Vec<LocalTrainer> = parties
        .into_iter()
        .enumerate()
        .map(|(i, ds)| counts_trainer(&format!("p{i}"), ds))
        .collect();
    let mut io = LoopbackIo::new(trainers);
    let initial = Model::Id3(DecisionTree::single_leaf(schema, 0, max_depth));
    let opts = SessionOptions {
        kind: FusionKind::Id3,
        hyperparams: Hyperparameters {
            max_rounds: 500,
            epochs: 1,
            learning_rate: 0.1,
            batch_size: 1,
            reply_timeout_ms: 1000,
        },
        seed: 0,
        loss: None,
        max_depth,
    };
    let mut accountant = DpAccountant::disabled();
    let (state, reason) = run_fusion_session(&mut io, initial, &opts, &mut accountant).unwrap();
    assert_eq!(reason, TerminationReason::TreeComplete);
    match state.model {
        Model::Id3(tree) => tree,
        _ => unreachable!(),
    }
}

// ===========================================================================
// Criterion 1: federated ID3 equals the centralized oracle on every
// tested partition of play-tennis.

#[test]
fn criterion_1_id3_oracle_equivalence() {
    let started = Instant::now();
    let tennis = toy::play_tennis();

    let mut partitions: Vec<Vec<Dataset>> = Vec::new();
    // All rows in a single party.
    partitions.push(vec![tennis.clone()]);
    // Two parties, one of them empty.
    partitions.push(vec![tennis.clone(), Dataset::empty(tennis.schema.clone())]);
    // 24 random partitions into 1..=4 parties (empty parts allowed).
    let mut rng = ChaCha8Rng::seed_from_u64(20260810);
    for _ in 0..24 {
        let n_parties = rng.gen_range(1..=4usize);
        let mut parts: Vec<Dataset> =
            (0..n_parties).map(|_| Dataset::empty(tennis.schema.clone())).collect();
        for row in &tennis.rows {
            parts[rng.gen_range(0..n_parties)].rows.push(row.clone());
        }
        partitions.push(parts);
    }

    for max_depth in [4usize, 2] {
        let expected = oracle::centralized_id3(&tennis, max_depth);
        expected.validate().unwrap();
        for (i, parts) in partitions.iter().enumerate() {
            let federated = federated_id3(parts.clone(), max_depth);
            federated.validate().unwrap();
            assert_eq!(
                federated, expected,
                "partition {i} ({} parties, max_depth {max_depth})",
                parts.len()
            );
        }
    }

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(1), "took {elapsed:?}, budget 1s");
    pass(1, "id3 oracle equivalence");
}

// ===========================================================================
// Criterion 2: fusion outputs match independent oracles on random data.

fn random_reply_set(
    rng: &mut ChaCha8Rng,
    n_parties: usize,
    dim: usize,
    with_counts: bool,
) -> (ReplySet, Vec<Vec<f64>>, Vec<u64>) {
    let mut rs = ReplySet::new(1);
    let mut values = Vec::new();
    let mut counts = Vec::new();
    for p in 0..n_parties {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let n = if with_counts { rng.gen_range(1..1000u64) } else { 5 };
        let mut w = WeightMap::new();
        w.insert("coef", v.clone());
        rs.insert(
            &format!("p{p}"),
            1,
            ModelUpdate::from_weights(w).with_nsamples(n),
        )
        .unwrap();
        values.push(v);
        counts.push(n);
    }
    (rs, values, counts)
}

#[test]
fn criterion_2_fusion_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(7_041_776);
    for case in 0..100 {
        let n_parties = rng.gen_range(1..=6usize);
        let dim = rng.gen_range(1..=8usize);
        let (rs, values, counts) = random_reply_set(&mut rng, n_parties, dim, true);

        let fedavg = fusion::fedavg_fuse(&rs).unwrap();
        let expected = oracle::weighted_mean(&values, &counts);
        for (a, b) in fedavg.get("coef").unwrap().iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-12, "case {case}: fedavg {a} vs oracle {b}");
        }

        let iter_avg = fusion::iter_avg_fuse(&rs).unwrap();
        let expected = oracle::mean(&values);
        for (a, b) in iter_avg.get("coef").unwrap().iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-12, "case {case}: iter_avg {a} vs oracle {b}");
        }

        let median = fusion::coord_median_fuse(&rs).unwrap();
        let expected = oracle::sorted_median(&values);
        for (a, b) in median.get("coef").unwrap().iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-12, "case {case}: median {a} vs oracle {b}");
        }

        // Equal sample counts collapse FedAvg onto the plain average.
        let mut equal = ReplySet::new(1);
        for (p, v) in values.iter().enumerate() {
            let mut w = WeightMap::new();
            w.insert("coef", v.clone());
            equal
                .insert(&format!("p{p}"), 1, ModelUpdate::from_weights(w).with_nsamples(7))
                .unwrap();
        }
        let fedavg_eq = fusion::fedavg_fuse(&equal).unwrap();
        for (a, b) in fedavg_eq
            .get("coef")
            .unwrap()
            .iter()
            .zip(iter_avg.get("coef").unwrap())
        {
            assert!((a - b).abs() <= 1e-12, "case {case}: equal-count fedavg {a} vs {b}");
        }
    }
    pass(2, "fusion oracles");
}

// ===========================================================================
// Criteria 3 & 4: end-to-end convergence over the CLI stack, identical
// bytes across transports.

struct BlobsExperiment {
    dir: tempfile::TempDir,
    party_csvs: Vec<PathBuf>,
    test_set: Dataset,
}

/// 300 train / 60 test rows of 2-class separation-6 blobs, the training
/// side split across 3 parties.
fn blobs_experiment(strategy: PartitionStrategy) -> BlobsExperiment {
    let dir = tempfile::tempdir().unwrap();
    let all = data::synth_blobs(180, 2, 2, 6.0, 90_210);
    let (train, test_set) = data::train_test_split(&all, 1.0 / 6.0, 5);
    assert_eq!((train.len(), test_set.len()), (300, 60));
    let parts = data::partition(&train, 3, strategy, 33).unwrap();
    let party_csvs: Vec<PathBuf> = parts
        .iter()
        .enumerate()
        .map(|(i, ds)| {
            let path = dir.path().join(format!("party{i}.csv"));
            data::save_csv(ds, &path).unwrap();
            path
        })
        .collect();
    BlobsExperiment { dir, party_csvs, test_set }
}

fn agg_blobs_yaml(transport: &str, listen: &str, quorum: &str, k: u64) -> String {
    format!(
        r#"
connection: {{transport: {transport}, listen: "{listen}"}}
fusion:
  kind: fedavg
  quorum: {quorum}
  hyperparams: {{max_rounds: {k}, epochs: 3, learning_rate: 0.1, batch_size: 32}}
model: {{kind: linear, loss: logistic, n_features: 2, n_classes: 2}}
protocol: {{reply_timeout_ms: 15000}}
"#
    )
}

fn party_blobs_yaml(
    transport: &str,
    aggregator: &str,
    id: &str,
    csv: &Path,
    test_fraction: f64,
) -> String {
    format!(
        r#"
connection: {{transport: {transport}, aggregator: "{aggregator}", party_id: {id}}}
data:
  path: "{}"
  test_fraction: {test_fraction}
  seed: 3
  schema:
    label: {{name: label, values: ["0", "1"]}}
    features:
      - {{name: x0, kind: numeric}}
      - {{name: x1, kind: numeric}}
local_training: {{reply_policy: weights_and_nsamples}}
model: {{kind: linear}}
"#,
        csv.display()
    )
}

/// Runs aggregator + 3 parties through the CLI entry points on threads;
/// returns the aggregator exit code with the saved model path.
fn run_cli_session(
    exp: &BlobsExperiment,
    transport: &str,
    listen: &str,
    quorum: &str,
    k: u64,
    seed: u64,
    tag: &str,
) -> (i32, PathBuf) {
    let model_path = exp.dir.path().join(format!("model-{tag}.json"));
    let agg_cfg = fedmesh::config::AggregatorConfig::from_yaml_str(&agg_blobs_yaml(
        transport, listen, quorum, k,
    ))
    .unwrap();

    let mut party_handles = Vec::new();
    for (i, csv) in exp.party_csvs.iter().enumerate() {
        let yaml = party_blobs_yaml(transport, listen, &format!("p{i}"), csv, 0.0);
        party_handles.push(std::thread::spawn(move || {
            let cfg = PartyConfig::from_yaml_str(&yaml).unwrap();
            run_party(cfg, vec![Command::Start, Command::Register, Command::Stop])
        }));
    }

    let code = run_aggregator(
        agg_cfg,
        vec![
            Command::Start,
            Command::Train,
            Command::Save(model_path.clone()),
            Command::Stop,
        ],
        seed,
    );
    for handle in party_handles {
        assert_eq!(handle.join().unwrap(), 0, "party exits cleanly");
    }
    (code, model_path)
}

#[test]
fn criterion_3_end_to_end_convergence() {
    let started = Instant::now();

    let exp = blobs_experiment(PartitionStrategy::Iid);
    let (code, model_path) =
        run_cli_session(&exp, "in_process", "acc3-iid", "all", 30, 777, "iid");
    assert_eq!(code, 0);
    let model = Model::load(&model_path).unwrap();
    let acc = model.evaluate(&exp.test_set).unwrap().accuracy;
    assert!(acc >= 0.95, "IID global test accuracy {acc}");

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(10), "IID run took {elapsed:?}, budget 10s");

    // Label-skew variant: Dirichlet(0.3) partition, k=60.
    let exp = blobs_experiment(PartitionStrategy::LabelSkew { alpha: 0.3 });
    let (code, model_path) =
        run_cli_session(&exp, "in_process", "acc3-skew", "all", 60, 777, "skew");
    assert_eq!(code, 0);
    let model = Model::load(&model_path).unwrap();
    let acc = model.evaluate(&exp.test_set).unwrap().accuracy;
    assert!(acc >= 0.90, "label-skew global test accuracy {acc}");

    pass(3, "end-to-end convergence");
}

fn pick_free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}

#[test]
fn criterion_4_transport_equivalence() {
    let exp = blobs_experiment(PartitionStrategy::Iid);

    let (code, inproc_model) =
        run_cli_session(&exp, "in_process", "acc4-inproc", "all", 30, 777, "inproc");
    assert_eq!(code, 0);

    let addr = format!("127.0.0.1:{}", pick_free_port());
    let (code, tcp_model) = run_cli_session(&exp, "tcp", &addr, "all", 30, 777, "tcp");
    assert_eq!(code, 0);

    let a = std::fs::read(&inproc_model).unwrap();
    let b = std::fs::read(&tcp_model).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b, "saved final models must be byte-identical across transports");
    pass(4, "transport equivalence");
}

// ===========================================================================
// Criterion 5: exhaustive phase-machine table.

#[test]
fn criterion_5_phase_machine() {
    use AggregatorPhase as P;
    use PhaseEvent as E;

    let legal = |phase: P, event: E| -> Option<P> {
        match (phase, event) {
            (P::Registering, E::TrainCmd) => Some(P::Training),
            (P::Training, E::Termination) => Some(P::Syncing),
            (P::Syncing, E::SyncAcked) => Some(P::Evaluating),
            (P::Evaluating, E::EvalsDone) => Some(P::Stopping),
            (P::Evaluating, E::StopCmd) => Some(P::Stopping),
            (_, E::Error) => Some(P::ProcessingError),
            _ => None, // recover handled separately per previous phase
        }
    };

    let mut checked = 0;
    for phase in P::ALL {
        for event in E::ALL {
            if phase == P::ProcessingError && event == E::Recover {
                continue;
            }
            let mut pm = PhaseMachine::at(phase, Some(P::Training));
            match (legal(phase, event), pm.apply(event)) {
                (Some(expected), Ok(next)) => assert_eq!(next, expected),
                (None, Err(FedError::Protocol(msg))) => {
                    assert!(msg.contains(phase.name()), "{msg}");
                    assert!(msg.contains(event.name()), "{msg}");
                    assert_eq!(pm.phase(), phase, "rejected events must not transition");
                }
                (want, got) => panic!("{phase:?} + {event:?}: wanted {want:?}, got {got:?}"),
            }
            checked += 1;
        }
    }
    assert_eq!(checked, 41, "6 phases x 7 events minus the recover pair");

    // Recovery returns to whichever valid phase preceded the error.
    for prev in [P::Registering, P::Training, P::Syncing, P::Evaluating, P::Stopping] {
        let mut pm = PhaseMachine::at(prev, None);
        assert_eq!(pm.apply(E::Error).unwrap(), P::ProcessingError);
        assert_eq!(pm.apply(E::Recover).unwrap(), prev);
    }
    // Recover without a stored phase is itself illegal.
    let mut pm = PhaseMachine::at(P::ProcessingError, None);
    assert!(pm.apply(E::Recover).is_err());

    pass(5, "phase machine");
}

// ===========================================================================
// Criterion 6: dropout behavior under both quorum policies.

/// A party that answers training rounds up to `limit`, then slams the
/// connection shut: the "killed mid-session" case.
fn spawn_defector(
    transport_kind: &str,
    addr: String,
    csv: PathBuf,
    limit: u64,
) -> std::thread::JoinHandle<()> {
    let transport_kind = transport_kind.to_string();
    std::thread::spawn(move || {
        let endpoint = match transport_kind.as_str() {
            "in_process" => fedmesh::transport::Endpoint::in_process(&addr),
            _ => fedmesh::transport::Endpoint::tcp(&addr),
        };
        let schema = Schema::Numeric(fedmesh::data::NumericSchema {
            feature_names: vec!["x0".into(), "x1".into()],
            label: fedmesh::data::LabelSchema {
                name: "label".into(),
                classes: vec!["0".into(), "1".into()],
            },
        });
        let ds = data::load_csv(&csv, &schema).unwrap();
        // Parties may start before the aggregator listens.
        let conn = {
            let mut attempt = 0;
            loop {
                match fedmesh::transport::connect(&endpoint) {
                    Ok(c) => break c,
                    Err(e) if attempt < 40 => {
                        attempt += 1;
                        std::thread::sleep(Duration::from_millis(100));
                        let _ = e;
                    }
                    Err(e) => panic!("defector cannot connect: {e}"),
                }
            }
        };
        let trainer = LocalTrainer::new(
            Model::Linear(LinearModel::zeros(2, 2, Loss::Logistic).unwrap()),
            DataHandler::from_dataset(&ds, 0.0, 1),
            ReplyPolicy::WeightsAndNsamples,
            None,
            "p2",
        );
        let mut session = PartySession::new(conn, trainer, schema_hash_linear(2, 2));
        session.register(Duration::from_secs(10)).unwrap();
        loop {
            let env = match session.conn.recv() {
                Ok(env) => env,
                Err(_) => break,
            };
            let killed = matches!(env.body, fedmesh::protocol::EnvelopeBody::TrainQuery(_))
                && env.round > limit;
            if killed {
                session.conn.close();
                break;
            }
            match session.handle_envelope(env) {
                Ok(Some(_)) | Err(_) => break,
                Ok(None) => {}
            }
        }
    })
}

fn dropout_run(quorum: &str, tag: &str) -> (i32, PathBuf) {
    let exp = blobs_experiment(PartitionStrategy::Iid);
    let listen = format!("acc6-{tag}");
    let model_path = exp.dir.path().join("model.json");

    let agg_cfg = fedmesh::config::AggregatorConfig::from_yaml_str(&agg_blobs_yaml(
        "in_process",
        &listen,
        quorum,
        8,
    ))
    .unwrap();

    let mut handles = Vec::new();
    for i in 0..2 {
        let yaml =
            party_blobs_yaml("in_process", &listen, &format!("p{i}"), &exp.party_csvs[i], 0.0);
        handles.push(std::thread::spawn(move || {
            let cfg = PartyConfig::from_yaml_str(&yaml).unwrap();
            run_party(cfg, vec![Command::Start, Command::Register, Command::Stop])
        }));
    }
    let defector = spawn_defector("in_process", listen.clone(), exp.party_csvs[2].clone(), 3);

    let code = run_aggregator(
        agg_cfg,
        vec![
            Command::Start,
            Command::Train,
            Command::Save(model_path.clone()),
            Command::Stop,
        ],
        777,
    );
    for handle in handles {
        assert_eq!(handle.join().unwrap(), 0);
    }
    defector.join().unwrap();
    (code, model_path)
}

#[test]
fn criterion_6_dropout() {
    // min_n(2) of 3: the session survives the defector and still
    // produces a final model.
    let (code, model_path) = dropout_run("{min_n: 2}", "minn");
    assert_eq!(code, 0, "min_n(2) session exits cleanly");
    let model = Model::load(&model_path).unwrap();
    assert_eq!(model.kind(), "linear");

    // Policy "all": the same dropout breaks the quorum; PROCESSING_ERROR
    // and a nonzero exit.
    let (code, _) = dropout_run("all", "all");
    assert_eq!(code, 4, "policy=all session exits nonzero");

    pass(6, "dropout");
}

// ===========================================================================
// Criterion 7: differential privacy.

#[test]
fn criterion_7_differential_privacy() {
    // sigma = 0 must be bit-identical to no DP at all, across a whole
    // session's worth of replies.
    let ds = data::synth_blobs(40, 2, 2, 5.0, 61);
    let query_hp = fusion::query_hyperparams(
        &Hyperparameters {
            max_rounds: 4,
            epochs: 2,
            learning_rate: 0.2,
            batch_size: 8,
            reply_timeout_ms: 1000,
        },
        99,
        Some("logistic"),
    );
    let build = |dp: Option<DpConfig>| {
        LocalTrainer::new(
            Model::Linear(LinearModel::zeros(2, 2, Loss::Logistic).unwrap()),
            DataHandler::from_dataset(&ds, 0.0, 1),
            ReplyPolicy::WeightsAndNsamples,
            dp,
            "p1",
        )
    };
    let zero_dp = DpConfig {
        sigma: 0.0,
        epsilon_per_round: 0.5,
        clip_norm: 1.0,
        seed_mode: DpSeedMode::Derived,
    };
    let mut with_dp = build(Some(zero_dp));
    let mut without = build(None);
    for round in 1..=4u64 {
        let weights = match (&with_dp.model, round) {
            (Model::Linear(m), 1) => {
                let _ = m;
                LinearModel::zeros(2, 2, Loss::Logistic).unwrap().weights
            }
            (Model::Linear(m), _) => m.weights.clone(),
            _ => unreachable!(),
        };
        let query = Query::train_weights(round, weights, query_hp.clone());
        let a = with_dp.handle_train_query(&query).unwrap();
        let b = without.handle_train_query(&query).unwrap();
        assert_eq!(a, b, "round {round}: sigma=0 must equal DP-disabled bit for bit");
    }

    // Noise statistics at sigma = 0.1 over 10^4 draws.
    let sigma = 0.1;
    let mut draws = vec![0.0f64; 10_000];
    let mut rng = ChaCha8Rng::seed_from_u64(424_242);
    add_gaussian_noise(&mut draws, sigma, &mut rng).unwrap();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let std = (draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / draws.len() as f64)
        .sqrt();
    assert!(mean.abs() < 3.0 * sigma / 100.0, "noise mean {mean}");
    assert!((std - sigma).abs() < 0.05 * sigma, "noise std {std}");

    // Accountant: exact linear totals and the budget stop.
    let mut accountant = DpAccountant::new(0.5, None);
    for _ in 0..4 {
        accountant.complete_round();
    }
    assert_eq!(accountant.total_epsilon(), 2.0, "4 rounds x 0.5 is exactly 2.0");

    let dp = DpConfig {
        sigma: 0.1,
        epsilon_per_round: 0.4,
        clip_norm: 5.0,
        seed_mode: DpSeedMode::Derived,
    };
    let trainers = vec![
        {
            let mut t = build(Some(dp.clone()));
            t.party_id = "p1".into();
            t
        },
        {
            let mut t = build(Some(dp));
            t.party_id = "p2".into();
            t
        },
    ];
    let mut io = LoopbackIo::new(trainers);
    let initial = Model::Linear(LinearModel::zeros(2, 2, Loss::Logistic).unwrap());
    let opts = SessionOptions {
        kind: FusionKind::IterAvg,
        hyperparams: Hyperparameters {
            max_rounds: 10,
            epochs: 1,
            learning_rate: 0.1,
            batch_size: 8,
            reply_timeout_ms: 1000,
        },
        seed: 3,
        loss: Some("logistic".into()),
        max_depth: 1,
    };
    let mut accountant = DpAccountant::new(0.4, Some(1.0));
    let (state, reason) = run_fusion_session(&mut io, initial, &opts, &mut accountant).unwrap();
    assert_eq!(reason, TerminationReason::DpBudget);
    assert_eq!(state.round, 2, "halts before the third round would spend 1.2 > 1.0");
    assert!((accountant.total_epsilon() - 0.8).abs() < 1e-15);

    pass(7, "differential privacy");
}

// ===========================================================================
// Criterion 8: analytic gradients vs central finite differences.

#[test]
fn criterion_8_gradient_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(1_234_567);
    for case in 0..50 {
        let n_features = rng.gen_range(1..=5usize);
        let n_classes = rng.gen_range(2..=4usize);
        let loss = if case % 2 == 0 { Loss::Logistic } else { Loss::Squared };
        let mut model = LinearModel::zeros(n_features, n_classes, loss).unwrap();
        let mut w = WeightMap::new();
        w.insert(
            "coef",
            (0..n_features * n_classes).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        w.insert("bias", (0..n_classes).map(|_| rng.gen_range(-1.0..1.0)).collect());
        model.set_weights(w).unwrap();

        let rows: Vec<(Vec<f64>, usize)> = (0..rng.gen_range(1..=10usize))
            .map(|_| {
                (
                    (0..n_features).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                    rng.gen_range(0..n_classes),
                )
            })
            .collect();
        let batch: Vec<(&[f64], usize)> = rows.iter().map(|(x, y)| (x.as_slice(), *y)).collect();

        let (_, analytic) = model.loss_and_grad(&batch).unwrap();

        // Central differences, h = 1e-6, over every coordinate.
        let h = 1e-6;
        let mut numeric = Vec::new();
        let mut flat_analytic = Vec::new();
        for (group, values) in model.weights.clone().groups() {
            for i in 0..values.len() {
                let loss_at = |delta: f64| -> f64 {
                    let mut probe = model.clone();
                    let mut w = probe.weights.clone();
                    for (g, v) in w.groups_mut() {
                        if g == group {
                            v[i] += delta;
                        }
                    }
                    probe.weights = w;
                    probe.loss_and_grad(&batch).unwrap().0
                };
                numeric.push((loss_at(h) - loss_at(-h)) / (2.0 * h));
                flat_analytic.push(analytic.get(group).unwrap()[i]);
            }
        }
        let err: f64 = numeric
            .iter()
            .zip(&flat_analytic)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        assert!(
            err / scale < 1e-4,
            "case {case} ({loss:?}): relative gradient error {}",
            err / scale
        );
    }
    pass(8, "gradient correctness");
}

// ===========================================================================
// Criterion 9: full operator command round-trip through the binaries.

#[test]
fn criterion_9_command_round_trip() {
    let exp = blobs_experiment(PartitionStrategy::Iid);
    let dir = exp.dir.path();
    let port = pick_free_port();
    let addr = format!("127.0.0.1:{port}");

    let agg_cfg = dir.join("agg.yaml");
    std::fs::write(&agg_cfg, agg_blobs_yaml("tcp", &addr, "all", 10)).unwrap();
    let agg_script = dir.join("agg.script");
    let agg_model = dir.join("agg_model.json");
    std::fs::write(
        &agg_script,
        format!("START\nTRAIN\nSYNC\nSAVE {}\nSTOP\n", agg_model.display()),
    )
    .unwrap();

    let mut party_models = Vec::new();
    let mut party_cfgs = Vec::new();
    let mut party_scripts = Vec::new();
    for i in 0..3 {
        let cfg = dir.join(format!("party{i}.yaml"));
        std::fs::write(
            &cfg,
            party_blobs_yaml("tcp", &addr, &format!("p{i}"), &exp.party_csvs[i], 0.2),
        )
        .unwrap();
        party_cfgs.push(cfg);
        let model = dir.join(format!("party{i}_model.json"));
        let script = dir.join(format!("party{i}.script"));
        let body = if i == 0 {
            format!("START\nREGISTER\nEVAL\nSAVE {}\nSTOP\n", model.display())
        } else {
            "START\nREGISTER\nSTOP\n".to_string()
        };
        std::fs::write(&script, body).unwrap();
        party_models.push(model);
        party_scripts.push(script);
    }

    let mut agg_child = std::process::Command::new(env!("CARGO_BIN_EXE_fedmesh-agg"))
        .args(["--config"])
        .arg(&agg_cfg)
        .arg("--script")
        .arg(&agg_script)
        .args(["--seed", "777"])
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::piped())
        .spawn()
        .unwrap();

    let mut party_children = Vec::new();
    for i in 0..3 {
        let child = std::process::Command::new(env!("CARGO_BIN_EXE_fedmesh-party"))
            .arg("--config")
            .arg(&party_cfgs[i])
            .arg("--script")
            .arg(&party_scripts[i])
            .stdout(std::process::Stdio::piped())
            .stderr(std::process::Stdio::piped())
            .spawn()
            .unwrap();
        party_children.push(child);
    }

    let agg_out = agg_child.wait_with_output().unwrap();
    assert!(
        agg_out.status.success(),
        "aggregator: {}\n{}",
        String::from_utf8_lossy(&agg_out.stdout),
        String::from_utf8_lossy(&agg_out.stderr)
    );

    let mut p0_stdout = String::new();
    for (i, child) in party_children.into_iter().enumerate() {
        let out = child.wait_with_output().unwrap();
        assert!(
            out.status.success(),
            "party {i}: {}\n{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        if i == 0 {
            p0_stdout = String::from_utf8_lossy(&out.stdout).to_string();
        }
    }
    assert!(p0_stdout.contains("eval: accuracy="), "party EVAL prints metrics:\n{p0_stdout}");

    // The saved party model must reproduce the aggregator's final
    // predictions on the full test set.
    let agg_model = Model::load(&agg_model).unwrap();
    let party_model = Model::load(&party_models[0]).unwrap();
    for row in &exp.test_set.rows {
        assert_eq!(
            agg_model.predict(&row.features).unwrap(),
            party_model.predict(&row.features).unwrap()
        );
    }

    pass(9, "command round trip");
}

// Keep the unused-import lint honest across the whole file.
#[allow(dead_code)]
fn _touch(_: &Row, _: &Features, _: &TreeGrower, _: &dyn Fn(&mut ChaCha8Rng)) {}
#[allow(dead_code)]
fn _touch2(_: &TrainHyperparams, _: &dyn Fn(&PhaseMachine)) {}
#[allow(dead_code)]
fn _touch3(_: &dyn Fn(&dyn RoundIo)) {
    let _ = tabulate_counts;
}
