//! YAML configuration for aggregator and party processes, with
//! cross-field compatibility checks (fusion kind vs model kind vs reply
//! policy) and defaults filled at load time.
//!
//! Every rejection names the dotted key path of the offending field.
//! Configs are immutable after load.

use std::path::{Path, PathBuf};

use serde_yaml::Value;
use sha2::{Digest, Sha256};

use crate::data::{
    CategoricalFeature, CategoricalSchema, LabelSchema, NumericSchema, Schema,
};
use crate::error::{FedError, Result};
use crate::fusion::FusionKind;
use crate::localtrain::{DataHandler, DpConfig, DpSeedMode, LocalTrainer, ReplyPolicy};
use crate::model::{DecisionTree, LinearModel, Loss, Model};
use crate::protocol::{Hyperparameters, QuorumPolicy};
use crate::transport::Endpoint;

pub const DEFAULT_REPLY_TIMEOUT_MS: u64 = 30_000;
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    InProcess,
    Tcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Linear,
    Id3,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Linear => "linear",
            ModelKind::Id3 => "id3",
        }
    }
}

/// `connection:` block of the aggregator file.
#[derive(Debug, Clone, PartialEq)]
pub struct AggConnectionConfig {
    pub transport: TransportKind,
    /// TCP `host:port` or the in-process listener key.
    pub listen: String,
}

/// `fusion:` block.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub kind: FusionKind,
    pub quorum: QuorumPolicy,
    pub run_eval: bool,
    pub dp_budget: Option<f64>,
    pub hyperparams: Hyperparameters,
}

/// `model:` block of the aggregator file.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub loss: Loss,
    pub n_features: usize,
    pub n_classes: usize,
    pub init: Option<PathBuf>,
    pub max_depth: usize,
    pub schema: Option<CategoricalSchema>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorConfig {
    pub connection: AggConnectionConfig,
    pub fusion: FusionConfig,
    pub model: ModelConfig,
    pub reply_timeout_ms: u64,
}

/// `connection:` block of a party file.
#[derive(Debug, Clone, PartialEq)]
pub struct PartyConnectionConfig {
    pub transport: TransportKind,
    pub aggregator: String,
    pub party_id: String,
}

/// `data:` block of a party file.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub path: PathBuf,
    pub schema: Schema,
    pub test_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalTrainingConfig {
    pub reply_policy: ReplyPolicy,
    pub dp: Option<DpConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartyConfig {
    pub connection: PartyConnectionConfig,
    pub data: DataConfig,
    pub local_training: LocalTrainingConfig,
    pub model_kind: ModelKind,
}

// ---------------------------------------------------------------------------
// YAML walking helpers; every error carries the dotted key path.

fn err(path: &str, what: &str) -> FedError {
    FedError::Config(format!("{path}: {what}"))
}

fn get<'v>(v: &'v Value, path: &str, key: &str) -> Result<&'v Value> {
    opt(v, key).ok_or_else(|| err(&dotted(path, key), "missing required key"))
}

fn opt<'v>(v: &'v Value, key: &str) -> Option<&'v Value> {
    match v {
        Value::Mapping(m) => m.get(Value::String(key.to_string())),
        _ => None,
    }
}

fn dotted(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn as_str(v: &Value, path: &str) -> Result<String> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| err(path, "expected a string"))
}

fn as_u64(v: &Value, path: &str) -> Result<u64> {
    v.as_u64().ok_or_else(|| err(path, "expected a non-negative integer"))
}

fn as_f64(v: &Value, path: &str) -> Result<f64> {
    v.as_f64().ok_or_else(|| err(path, "expected a number"))
}

fn as_bool(v: &Value, path: &str) -> Result<bool> {
    v.as_bool().ok_or_else(|| err(path, "expected true or false"))
}

fn as_seq<'v>(v: &'v Value, path: &str) -> Result<&'v Vec<Value>> {
    v.as_sequence().ok_or_else(|| err(path, "expected a list"))
}

fn string_list(v: &Value, path: &str) -> Result<Vec<String>> {
    as_seq(v, path)?
        .iter()
        .enumerate()
        .map(|(i, item)| as_str(item, &format!("{path}[{i}]")))
        .collect()
}

fn parse_yaml(text: &str) -> Result<Value> {
    serde_yaml::from_str(text).map_err(|e| FedError::Config(format!("invalid YAML: {e}")))
}

fn parse_transport(v: &Value, path: &str) -> Result<TransportKind> {
    match as_str(v, path)?.as_str() {
        "in_process" => Ok(TransportKind::InProcess),
        "tcp" => Ok(TransportKind::Tcp),
        other => Err(err(path, &format!("unknown transport {other:?} (in_process|tcp)"))),
    }
}

fn parse_label(v: &Value, path: &str) -> Result<LabelSchema> {
    let name = as_str(get(v, path, "name")?, &dotted(path, "name"))?;
    let classes = string_list(get(v, path, "values")?, &dotted(path, "values"))?;
    if classes.is_empty() {
        return Err(err(&dotted(path, "values"), "label domain must not be empty"));
    }
    Ok(LabelSchema { name, classes })
}

/// Parses a `schema:` block into either a numeric or a categorical
/// schema; feature kinds must be homogeneous.
fn parse_schema(v: &Value, path: &str) -> Result<Schema> {
    let label = parse_label(get(v, path, "label")?, &dotted(path, "label"))?;
    let features = as_seq(get(v, path, "features")?, &dotted(path, "features"))?;
    if features.is_empty() {
        return Err(err(&dotted(path, "features"), "at least one feature required"));
    }

    let mut numeric_names = Vec::new();
    let mut categorical = Vec::new();
    let mut kinds = Vec::new();
    for (i, item) in features.iter().enumerate() {
        let fpath = format!("{}.features[{i}]", path);
        let name = as_str(get(item, &fpath, "name")?, &dotted(&fpath, "name"))?;
        let kind = as_str(get(item, &fpath, "kind")?, &dotted(&fpath, "kind"))?;
        kinds.push(kind.clone());
        match kind.as_str() {
            "numeric" => numeric_names.push(name),
            "categorical" => {
                let values =
                    string_list(get(item, &fpath, "values")?, &dotted(&fpath, "values"))?;
                if values.is_empty() {
                    return Err(err(&dotted(&fpath, "values"), "value domain must not be empty"));
                }
                categorical.push(CategoricalFeature { name, values });
            }
            other => {
                return Err(err(
                    &dotted(&fpath, "kind"),
                    &format!("unknown feature kind {other:?} (numeric|categorical)"),
                ))
            }
        }
    }
    if !numeric_names.is_empty() && !categorical.is_empty() {
        return Err(err(
            &dotted(path, "features"),
            "feature kinds must be homogeneous (all numeric or all categorical)",
        ));
    }
    let schema = if categorical.is_empty() {
        Schema::Numeric(NumericSchema { feature_names: numeric_names, label })
    } else {
        let s = CategoricalSchema { features: categorical, label };
        s.validate()
            .map_err(|e| err(&dotted(path, "features"), &e.to_string()))?;
        Schema::Categorical(s)
    };
    Ok(schema)
}

fn parse_quorum(fusion: &Value, path: &str) -> Result<QuorumPolicy> {
    let Some(v) = opt(fusion, "quorum") else {
        return Ok(QuorumPolicy::All);
    };
    let qpath = dotted(path, "quorum");
    match v {
        Value::String(s) if s == "all" => Ok(QuorumPolicy::All),
        Value::Mapping(_) => {
            let m = get(v, &qpath, "min_n")?;
            let n = as_u64(m, &dotted(&qpath, "min_n"))? as usize;
            if n == 0 {
                return Err(err(&dotted(&qpath, "min_n"), "must be >= 1"));
            }
            Ok(QuorumPolicy::MinN(n))
        }
        _ => Err(err(&qpath, "expected \"all\" or {min_n: <count>}")),
    }
}

fn parse_hyperparams(fusion: &Value, reply_timeout_ms: u64) -> Result<Hyperparameters> {
    let path = "fusion.hyperparams";
    let hp = get(fusion, "fusion", "hyperparams")?;
    let out = Hyperparameters {
        max_rounds: as_u64(get(hp, path, "max_rounds")?, &dotted(path, "max_rounds"))?,
        epochs: as_u64(get(hp, path, "epochs")?, &dotted(path, "epochs"))? as u32,
        learning_rate: as_f64(
            get(hp, path, "learning_rate")?,
            &dotted(path, "learning_rate"),
        )?,
        batch_size: as_u64(get(hp, path, "batch_size")?, &dotted(path, "batch_size"))? as usize,
        reply_timeout_ms,
    };
    out.validate()?;
    Ok(out)
}

impl AggregatorConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_yaml_str(&text)
    }

    pub fn from_yaml_str(text: &str) -> Result<Self> {
        let root = parse_yaml(text)?;

        let conn = get(&root, "", "connection")?;
        let connection = AggConnectionConfig {
            transport: parse_transport(
                get(conn, "connection", "transport")?,
                "connection.transport",
            )?,
            listen: as_str(get(conn, "connection", "listen")?, "connection.listen")?,
        };

        let reply_timeout_ms = match opt(&root, "protocol").and_then(|p| opt(p, "reply_timeout_ms"))
        {
            Some(v) => as_u64(v, "protocol.reply_timeout_ms")?,
            None => DEFAULT_REPLY_TIMEOUT_MS,
        };
        if reply_timeout_ms == 0 {
            return Err(err("protocol.reply_timeout_ms", "must be > 0"));
        }

        let fusion_v = get(&root, "", "fusion")?;
        let kind = FusionKind::parse(&as_str(
            get(fusion_v, "fusion", "kind")?,
            "fusion.kind",
        )?)?;
        let run_eval = match opt(fusion_v, "run_eval") {
            Some(v) => as_bool(v, "fusion.run_eval")?,
            None => false,
        };
        let dp_budget = match opt(fusion_v, "dp_budget") {
            Some(v) => {
                let b = as_f64(v, "fusion.dp_budget")?;
                if !(b > 0.0) {
                    return Err(err("fusion.dp_budget", "must be > 0"));
                }
                Some(b)
            }
            None => None,
        };
        let fusion = FusionConfig {
            kind,
            quorum: parse_quorum(fusion_v, "fusion")?,
            run_eval,
            dp_budget,
            hyperparams: parse_hyperparams(fusion_v, reply_timeout_ms)?,
        };

        let model_v = get(&root, "", "model")?;
        let model_kind = match as_str(get(model_v, "model", "kind")?, "model.kind")?.as_str() {
            "linear" => ModelKind::Linear,
            "id3" => ModelKind::Id3,
            other => return Err(err("model.kind", &format!("unknown model kind {other:?}"))),
        };
        let loss = match opt(model_v, "loss") {
            Some(v) => Loss::parse(&as_str(v, "model.loss")?)
                .map_err(|e| err("model.loss", &e.to_string()))?,
            None => Loss::Logistic,
        };
        let init = opt(model_v, "init")
            .map(|v| as_str(v, "model.init").map(PathBuf::from))
            .transpose()?;

        let schema = match opt(model_v, "schema") {
            Some(v) => match parse_schema(v, "model.schema")? {
                Schema::Categorical(s) => Some(s),
                Schema::Numeric(_) => {
                    return Err(err("model.schema", "id3 model schema must be categorical"))
                }
            },
            None => None,
        };

        let model = match model_kind {
            ModelKind::Linear => {
                let n_features =
                    as_u64(get(model_v, "model", "n_features")?, "model.n_features")? as usize;
                let n_classes =
                    as_u64(get(model_v, "model", "n_classes")?, "model.n_classes")? as usize;
                if n_features == 0 {
                    return Err(err("model.n_features", "must be >= 1"));
                }
                if n_classes < 2 {
                    return Err(err("model.n_classes", "must be >= 2"));
                }
                ModelConfig {
                    kind: model_kind,
                    loss,
                    n_features,
                    n_classes,
                    init,
                    max_depth: 0,
                    schema: None,
                }
            }
            ModelKind::Id3 => {
                let schema = schema
                    .ok_or_else(|| err("model.schema", "missing required key (id3 model)"))?;
                let max_depth = match opt(model_v, "max_depth") {
                    Some(v) => as_u64(v, "model.max_depth")? as usize,
                    None => schema.n_features(),
                };
                if max_depth == 0 {
                    return Err(err("model.max_depth", "must be >= 1"));
                }
                ModelConfig {
                    kind: model_kind,
                    loss,
                    n_features: schema.n_features(),
                    n_classes: schema.n_classes(),
                    init,
                    max_depth,
                    schema: Some(schema),
                }
            }
        };

        // Fusion algorithm and model kind must pair up.
        match fusion.kind {
            FusionKind::Id3 => {
                if model.kind != ModelKind::Id3 {
                    return Err(err("fusion.kind", "id3 requires model.kind=id3"));
                }
            }
            _ => {
                if model.kind != ModelKind::Linear {
                    return Err(err(
                        "fusion.kind",
                        &format!("{} requires model.kind=linear", fusion.kind.name()),
                    ));
                }
            }
        }

        Ok(AggregatorConfig { connection, fusion, model, reply_timeout_ms })
    }

    pub fn listen_endpoint(&self) -> Endpoint {
        match self.connection.transport {
            TransportKind::InProcess => Endpoint::in_process(&self.connection.listen),
            TransportKind::Tcp => Endpoint::tcp(&self.connection.listen),
        }
    }

    /// Signature parties must present at registration.
    pub fn schema_hash(&self) -> String {
        match self.model.kind {
            ModelKind::Linear => schema_hash_linear(self.model.n_features, self.model.n_classes),
            ModelKind::Id3 => {
                schema_hash_id3(self.model.schema.as_ref().expect("validated at load"))
            }
        }
    }

    /// The session's starting global model: the init file if configured,
    /// otherwise all-zero weights (linear) or a null tree (id3).
    pub fn initial_model(&self) -> Result<Model> {
        if let Some(init) = &self.model.init {
            let model = Model::load(init)?;
            let compatible = match (&model, self.model.kind) {
                (Model::Linear(m), ModelKind::Linear) => {
                    m.n_features == self.model.n_features && m.n_classes == self.model.n_classes
                }
                (Model::Id3(t), ModelKind::Id3) => {
                    Some(&t.schema) == self.model.schema.as_ref()
                }
                _ => false,
            };
            if !compatible {
                return Err(err("model.init", "init file does not match the model config"));
            }
            return Ok(model);
        }
        match self.model.kind {
            ModelKind::Linear => Ok(Model::Linear(LinearModel::zeros(
                self.model.n_features,
                self.model.n_classes,
                self.model.loss,
            )?)),
            ModelKind::Id3 => Ok(Model::Id3(DecisionTree::single_leaf(
                self.model.schema.clone().expect("validated at load"),
                0,
                self.model.max_depth,
            ))),
        }
    }
}

impl PartyConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_yaml_str(&text)
    }

    pub fn from_yaml_str(text: &str) -> Result<Self> {
        let root = parse_yaml(text)?;

        let conn = get(&root, "", "connection")?;
        let connection = PartyConnectionConfig {
            transport: parse_transport(
                get(conn, "connection", "transport")?,
                "connection.transport",
            )?,
            aggregator: as_str(
                get(conn, "connection", "aggregator")?,
                "connection.aggregator",
            )?,
            party_id: as_str(get(conn, "connection", "party_id")?, "connection.party_id")?,
        };
        if connection.party_id.is_empty() {
            return Err(err("connection.party_id", "must not be empty"));
        }

        let data_v = get(&root, "", "data")?;
        let test_fraction = match opt(data_v, "test_fraction") {
            Some(v) => as_f64(v, "data.test_fraction")?,
            None => DEFAULT_TEST_FRACTION,
        };
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(err("data.test_fraction", "must be in [0, 1)"));
        }
        let seed = match opt(data_v, "seed") {
            Some(v) => as_u64(v, "data.seed")?,
            None => 0,
        };
        let data = DataConfig {
            path: PathBuf::from(as_str(get(data_v, "data", "path")?, "data.path")?),
            schema: parse_schema(get(data_v, "data", "schema")?, "data.schema")?,
            test_fraction,
            seed,
        };

        let lt = get(&root, "", "local_training")?;
        let reply_policy = ReplyPolicy::parse(&as_str(
            get(lt, "local_training", "reply_policy")?,
            "local_training.reply_policy",
        )?)
        .map_err(|e| err("local_training.reply_policy", &e.to_string()))?;
        let dp = match opt(lt, "dp") {
            Some(v) => {
                let dpath = "local_training.dp";
                let seed_mode = match opt(v, "seed_mode") {
                    Some(m) => match as_str(m, &dotted(dpath, "seed_mode"))?.as_str() {
                        "derived" => DpSeedMode::Derived,
                        "fresh" => DpSeedMode::Fresh,
                        other => {
                            return Err(err(
                                &dotted(dpath, "seed_mode"),
                                &format!("unknown mode {other:?} (derived|fresh)"),
                            ))
                        }
                    },
                    None => DpSeedMode::Derived,
                };
                let dp = DpConfig {
                    sigma: as_f64(get(v, dpath, "sigma")?, &dotted(dpath, "sigma"))?,
                    epsilon_per_round: as_f64(
                        get(v, dpath, "epsilon_per_round")?,
                        &dotted(dpath, "epsilon_per_round"),
                    )?,
                    clip_norm: as_f64(get(v, dpath, "clip_norm")?, &dotted(dpath, "clip_norm"))?,
                    seed_mode,
                };
                dp.validate()
                    .map_err(|e| err(dpath, &e.to_string()))?;
                Some(dp)
            }
            None => None,
        };

        let model_v = get(&root, "", "model")?;
        let model_kind = match as_str(get(model_v, "model", "kind")?, "model.kind")?.as_str() {
            "linear" => ModelKind::Linear,
            "id3" => ModelKind::Id3,
            other => return Err(err("model.kind", &format!("unknown model kind {other:?}"))),
        };

        // Reply policy, model kind, and data schema must line up.
        match reply_policy {
            ReplyPolicy::WeightsOnly | ReplyPolicy::WeightsAndNsamples => {
                if model_kind != ModelKind::Linear {
                    return Err(err(
                        "local_training.reply_policy",
                        &format!("{} requires model.kind=linear", reply_policy.name()),
                    ));
                }
                if !matches!(data.schema, Schema::Numeric(_)) {
                    return Err(err("data.schema", "linear models need numeric features"));
                }
            }
            ReplyPolicy::Counts => {
                if model_kind != ModelKind::Id3 {
                    return Err(err(
                        "local_training.reply_policy",
                        "counts requires model.kind=id3",
                    ));
                }
                if !matches!(data.schema, Schema::Categorical(_)) {
                    return Err(err("data.schema", "id3 models need categorical features"));
                }
                if dp.is_some() {
                    return Err(err(
                        "local_training.dp",
                        "not supported with reply_policy=counts",
                    ));
                }
            }
        }

        Ok(PartyConfig {
            connection,
            data,
            local_training: LocalTrainingConfig { reply_policy, dp },
            model_kind,
        })
    }

    pub fn aggregator_endpoint(&self) -> Endpoint {
        match self.connection.transport {
            TransportKind::InProcess => Endpoint::in_process(&self.connection.aggregator),
            TransportKind::Tcp => Endpoint::tcp(&self.connection.aggregator),
        }
    }

    pub fn schema_hash(&self) -> String {
        match (&self.model_kind, &self.data.schema) {
            (ModelKind::Linear, schema) => {
                schema_hash_linear(schema.n_features(), schema.n_classes())
            }
            (ModelKind::Id3, Schema::Categorical(s)) => schema_hash_id3(s),
            (ModelKind::Id3, Schema::Numeric(_)) => unreachable!("validated at load"),
        }
    }

    /// Loads the party's dataset, splits it, and assembles the local
    /// trainer with its initial model.
    pub fn build_trainer(&self) -> Result<LocalTrainer> {
        let ds = crate::data::load_csv(&self.data.path, &self.data.schema)?;
        let data = DataHandler::from_dataset(&ds, self.data.test_fraction, self.data.seed);
        let model = match self.model_kind {
            ModelKind::Linear => Model::Linear(LinearModel::zeros(
                self.data.schema.n_features(),
                self.data.schema.n_classes(),
                Loss::Logistic,
            )?),
            ModelKind::Id3 => {
                let Schema::Categorical(schema) = &self.data.schema else {
                    unreachable!("validated at load")
                };
                Model::Id3(DecisionTree::single_leaf(
                    schema.clone(),
                    0,
                    schema.n_features(),
                ))
            }
        };
        Ok(LocalTrainer::new(
            model,
            data,
            self.local_training.reply_policy,
            self.local_training.dp.clone(),
            self.connection.party_id.clone(),
        ))
    }
}

fn sha256_hex(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a linear model signature; parties and aggregator must agree.
pub fn schema_hash_linear(n_features: usize, n_classes: usize) -> String {
    let v = serde_json::json!({
        "kind": "linear",
        "n_classes": n_classes,
        "n_features": n_features,
    });
    sha256_hex(&v.to_string())
}

/// Hash of a categorical schema for id3 sessions.
pub fn schema_hash_id3(schema: &CategoricalSchema) -> String {
    let v = serde_json::json!({ "kind": "id3", "schema": schema });
    sha256_hex(&v.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Aggregator,
    Party,
}

const AGGREGATOR_TEMPLATE: &str = r#"# fedmesh aggregator configuration
connection:
  transport: tcp            # in_process | tcp
  listen: "127.0.0.1:8910"  # address to bind (tcp) or in-process key

fusion:
  kind: fedavg              # iter_avg | fedavg | coord_median | id3
  quorum: all               # all, or: {min_n: 2}
  run_eval: true            # ask parties for a local evaluation after SYNC
  # dp_budget: 1.0          # stop before total DP epsilon exceeds this
  hyperparams:
    max_rounds: 30
    epochs: 3
    learning_rate: 0.1
    batch_size: 32

model:
  kind: linear              # linear | id3
  loss: logistic            # logistic | squared (linear only)
  n_features: 2             # linear only
  n_classes: 2              # linear only
  # init: model.json        # optional starting weights
  # id3 models instead need a categorical schema and a depth bound:
  # max_depth: 4
  # schema:
  #   label: {name: play, values: [No, Yes]}
  #   features:
  #     - {name: outlook, kind: categorical, values: [Sunny, Overcast, Rain]}

protocol:
  reply_timeout_ms: 30000
"#;

const PARTY_TEMPLATE: &str = r#"# fedmesh party configuration
connection:
  transport: tcp            # in_process | tcp
  aggregator: "127.0.0.1:8910"
  party_id: p1              # unique within the session

data:
  path: party_data.csv      # CSV with a header row
  test_fraction: 0.2
  seed: 7
  schema:
    label: {name: label, values: ["0", "1"]}
    features:
      - {name: x0, kind: numeric}
      - {name: x1, kind: numeric}

local_training:
  reply_policy: weights_and_nsamples  # weights_only | weights_and_nsamples | counts
  # dp:
  #   sigma: 0.1
  #   epsilon_per_round: 0.5
  #   clip_norm: 1.0
  #   seed_mode: derived    # derived | fresh

model:
  kind: linear              # linear | id3
"#;

/// Writes a commented template that `load` accepts unmodified (data
/// paths are placeholders).
pub fn generate_default(role: Role, out_path: &Path) -> Result<()> {
    let text = match role {
        Role::Aggregator => AGGREGATOR_TEMPLATE,
        Role::Party => PARTY_TEMPLATE,
    };
    std::fs::write(out_path, text)?;
    Ok(())
}
