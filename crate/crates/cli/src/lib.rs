//! Operator command set for fedmesh: the `fedmesh-agg` and
//! `fedmesh-party` applications, usable interactively (commands on
//! stdin) or scripted (`--script` file) for reproducible runs.
//!
//! Command legality by participant:
//!
//! | command  | aggregator | party |
//! |----------|------------|-------|
//! | START    | yes        | yes   |
//! | REGISTER | no         | yes   |
//! | TRAIN    | yes        | no    |
//! | SYNC     | yes        | no    |
//! | STOP     | yes        | yes   |
//! | EVAL     | no         | yes   |
//! | SAVE     | yes        | yes   |

use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::time::Duration;

use fedmesh::config::{AggregatorConfig, ModelKind, PartyConfig, Role};
use fedmesh::error::{FedError, Result};
use fedmesh::eventlog;
use fedmesh::fusion::{run_fusion_session, GlobalModelState, SessionOptions};
use fedmesh::localtrain::DpAccountant;
use fedmesh::protocol::{
    AggregatorPhase, Coordinator, CoordinatorOptions, PartySession, PhaseEvent, ServeEnd,
};
use fedmesh::seeds;
use fedmesh::transport;

/// One operator command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Start,
    Register,
    Train,
    Sync,
    Stop,
    Eval,
    Save(PathBuf),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Start => "START",
            Command::Register => "REGISTER",
            Command::Train => "TRAIN",
            Command::Sync => "SYNC",
            Command::Stop => "STOP",
            Command::Eval => "EVAL",
            Command::Save(_) => "SAVE",
        }
    }
}

/// Whether a participant may issue a command.
pub fn command_legal(role: Role, command: &Command) -> bool {
    match command {
        Command::Start | Command::Stop | Command::Save(_) => true,
        Command::Register | Command::Eval => role == Role::Party,
        Command::Train | Command::Sync => role == Role::Aggregator,
    }
}

/// Parses one script/stdin line. Blank lines and `#` comments yield
/// `None`.
pub fn parse_command(line: &str) -> Result<Option<Command>> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let mut parts = line.split_whitespace();
    let word = parts.next().unwrap_or_default().to_ascii_uppercase();
    let arg = parts.next();
    if parts.next().is_some() {
        return Err(FedError::Config(format!("too many arguments in {line:?}")));
    }
    let cmd = match (word.as_str(), arg) {
        ("START", None) => Command::Start,
        ("REGISTER", None) => Command::Register,
        ("TRAIN", None) => Command::Train,
        ("SYNC", None) => Command::Sync,
        ("STOP", None) => Command::Stop,
        ("EVAL", None) => Command::Eval,
        ("SAVE", Some(path)) => Command::Save(PathBuf::from(path)),
        ("SAVE", None) => {
            return Err(FedError::Config("SAVE requires a file path argument".into()))
        }
        (other, _) => return Err(FedError::Config(format!("unknown command {other:?}"))),
    };
    Ok(Some(cmd))
}

/// Reads a whole script file; fails on the first malformed line.
pub fn load_script(path: &Path) -> Result<Vec<Command>> {
    let text = std::fs::read_to_string(path)?;
    let mut commands = Vec::new();
    for (i, line) in text.lines().enumerate() {
        match parse_command(line) {
            Ok(Some(cmd)) => commands.push(cmd),
            Ok(None) => {}
            Err(e) => {
                return Err(FedError::Config(format!(
                    "{}:{}: {e}",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    Ok(commands)
}

/// Commands from stdin, one per line; malformed lines are reported and
/// skipped so an interactive session survives typos.
pub fn stdin_commands() -> impl Iterator<Item = Command> {
    std::io::stdin().lock().lines().filter_map(|line| {
        let line = line.ok()?;
        match parse_command(&line) {
            Ok(cmd) => cmd,
            Err(e) => {
                eprintln!("error: {e}");
                None
            }
        }
    })
}

/// Maps a fatal error to the documented process exit codes:
/// 2 config, 3 transport, 4 protocol.
pub fn exit_code_for(err: &FedError) -> i32 {
    match err {
        FedError::Config(_) | FedError::Format(_) | FedError::Io(_) => 2,
        FedError::Transport(_) => 3,
        FedError::Protocol(_) | FedError::Quorum(_) | FedError::Decode(_) => 4,
        _ => 1,
    }
}

/// Installs the plain-line log formatter. `fedmesh::event` lines pass
/// through verbatim on stderr.
pub fn init_logging(level: &str) {
    let level = level.parse().unwrap_or(log::LevelFilter::Info);
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format(|buf, record| {
            use std::io::Write;
            writeln!(buf, "{}", record.args())
        })
        .try_init();
}

enum Flow {
    Continue,
    Exit,
}

// ---------------------------------------------------------------------------
// Aggregator application

struct AggregatorApp {
    cfg: AggregatorConfig,
    seed: u64,
    coordinator: Option<Coordinator>,
    final_state: Option<GlobalModelState>,
    last_dp_total: f64,
}

impl AggregatorApp {
    fn new(cfg: AggregatorConfig, seed: u64) -> Self {
        AggregatorApp { cfg, seed, coordinator: None, final_state: None, last_dp_total: 0.0 }
    }

    fn dispatch(&mut self, command: Command) -> Result<Flow> {
        if !command_legal(Role::Aggregator, &command) {
            eprintln!("error: command {} is not available to the aggregator", command.name());
            return Ok(Flow::Continue);
        }
        match command {
            Command::Start => self.cmd_start().map(|_| Flow::Continue),
            Command::Train => {
                self.cmd_train();
                Ok(Flow::Continue)
            }
            Command::Sync => {
                self.cmd_sync();
                Ok(Flow::Continue)
            }
            Command::Save(path) => {
                self.cmd_save(&path);
                Ok(Flow::Continue)
            }
            Command::Stop => {
                if let Some(coord) = &mut self.coordinator {
                    coord.stop();
                }
                Ok(Flow::Exit)
            }
            Command::Register | Command::Eval => unreachable!("checked above"),
        }
    }

    /// Binding failures are fatal (exit 3); everything else about START
    /// is idempotent-checked.
    fn cmd_start(&mut self) -> Result<()> {
        if self.coordinator.is_some() {
            eprintln!("error: already started");
            return Ok(());
        }
        let endpoint = self.cfg.listen_endpoint();
        let session_id = format!(
            "session-{:016x}",
            seeds::mix_label(self.seed, &self.cfg.connection.listen)
        );
        let mut coordinator = Coordinator::new(CoordinatorOptions {
            session_id,
            schema_hash: self.cfg.schema_hash(),
            fusion_kind: self.cfg.fusion.kind,
            quorum: self.cfg.fusion.quorum,
            reply_timeout: Duration::from_millis(self.cfg.reply_timeout_ms),
        });
        let actual = coordinator.start(&endpoint)?;
        println!("listening on {}", actual.describe());
        self.coordinator = Some(coordinator);
        Ok(())
    }

    /// Runs the whole fusion session: waits for quorum, drives the
    /// phase machine, trains, syncs, optionally evaluates. Failures
    /// leave the machine in PROCESSING_ERROR and are reported, not
    /// fatal to the command loop.
    fn cmd_train(&mut self) {
        let Some(coord) = self.coordinator.as_mut() else {
            eprintln!("error: START the aggregator before TRAIN");
            return;
        };
        let quorum_wait = Duration::from_millis(self.cfg.reply_timeout_ms);
        match coord.wait_for_quorum(quorum_wait) {
            Ok(true) => {}
            Ok(false) => {
                eprintln!(
                    "error: TRAIN rejected: quorum not reached ({} of {} parties alive)",
                    coord.registry.n_alive(),
                    coord.registry.n_registered()
                );
                return;
            }
            Err(e) => {
                eprintln!("error: {e}");
                return;
            }
        }
        if let Err(e) = coord.phases.apply(PhaseEvent::TrainCmd) {
            eprintln!("error: {e}");
            return;
        }
        eventlog::emit("agg", coord.phase().name(), 0, "phase", &[("to", coord.phase().name().to_string())]);

        let initial = match self.cfg.initial_model() {
            Ok(m) => m,
            Err(e) => {
                eprintln!("error: {e}");
                let _ = coord.phases.apply(PhaseEvent::Error);
                return;
            }
        };
        let mut accountant =
            DpAccountant::new(coord.registry.max_dp_epsilon(), self.cfg.fusion.dp_budget);
        let opts = SessionOptions {
            kind: self.cfg.fusion.kind,
            hyperparams: self.cfg.fusion.hyperparams.clone(),
            seed: self.seed,
            loss: match self.cfg.model.kind {
                ModelKind::Linear => Some(self.cfg.model.loss.name().to_string()),
                ModelKind::Id3 => None,
            },
            max_depth: self.cfg.model.max_depth,
        };

        match run_fusion_session(coord, initial, &opts, &mut accountant) {
            Ok((state, reason)) => {
                self.last_dp_total = accountant.total_epsilon();
                eventlog::emit(
                    "agg",
                    coord.phase().name(),
                    state.round,
                    "terminated",
                    &[
                        ("reason", reason.name().to_string()),
                        ("rounds", state.round.to_string()),
                        ("dp_total_epsilon", format!("{}", self.last_dp_total)),
                    ],
                );
                if self.cfg.fusion.run_eval {
                    if let Ok(metrics) = coord.collect_evals(state.round.max(1)) {
                        for (party, m) in &metrics {
                            println!(
                                "eval {party}: accuracy={:.4} n={}",
                                m.accuracy, m.n
                            );
                        }
                    }
                }
                if let Err(e) = coord.phases.apply(PhaseEvent::EvalsDone) {
                    eprintln!("error: {e}");
                }
                eventlog::emit(
                    "agg",
                    coord.phase().name(),
                    state.round,
                    "phase",
                    &[("to", coord.phase().name().to_string())],
                );
                self.final_state = Some(state);
            }
            Err(e) => {
                eprintln!("error: training session failed: {e}");
                eventlog::emit(
                    "agg",
                    coord.phase().name(),
                    0,
                    "session_error",
                    &[("message", e.to_string())],
                );
                let _ = coord.phases.apply(PhaseEvent::Error);
                eventlog::emit(
                    "agg",
                    coord.phase().name(),
                    0,
                    "phase",
                    &[("to", coord.phase().name().to_string())],
                );
            }
        }
    }

    /// Re-distributes the current global model to the parties.
    fn cmd_sync(&mut self) {
        let Some(coord) = self.coordinator.as_mut() else {
            eprintln!("error: START the aggregator before SYNC");
            return;
        };
        let Some(state) = &self.final_state else {
            eprintln!("error: no trained model to synchronize yet");
            return;
        };
        match coord.resync(state.round.max(1), &state.model) {
            Ok(n) => println!("synchronized model with {n} parties"),
            Err(e) => eprintln!("error: {e}"),
        }
    }

    fn cmd_save(&mut self, path: &Path) {
        let model = match &self.final_state {
            Some(state) => state.model.clone(),
            None => match self.cfg.initial_model() {
                Ok(m) => m,
                Err(e) => {
                    eprintln!("error: {e}");
                    return;
                }
            },
        };
        match model.save(path) {
            Ok(()) => println!("saved model to {}", path.display()),
            Err(e) => eprintln!("error: cannot save model: {e}"),
        }
    }

    fn finish(mut self) -> i32 {
        let phase = match &mut self.coordinator {
            Some(coord) => {
                let phase = coord.phase();
                coord.stop();
                phase
            }
            None => AggregatorPhase::Registering,
        };
        if phase == AggregatorPhase::ProcessingError {
            4
        } else {
            0
        }
    }
}

/// Runs the aggregator over a command sequence; returns the process
/// exit code.
pub fn run_aggregator<I>(cfg: AggregatorConfig, commands: I, seed: u64) -> i32
where
    I: IntoIterator<Item = Command>,
{
    let mut app = AggregatorApp::new(cfg, seed);
    for command in commands {
        match app.dispatch(command) {
            Ok(Flow::Continue) => {}
            Ok(Flow::Exit) => break,
            Err(e) => {
                eprintln!("error: {e}");
                return exit_code_for(&e);
            }
        }
    }
    app.finish()
}

// ---------------------------------------------------------------------------
// Party application

struct PartyApp {
    cfg: PartyConfig,
    session: Option<PartySession>,
}

impl PartyApp {
    fn dispatch(&mut self, command: Command) -> Result<Flow> {
        if !command_legal(Role::Party, &command) {
            eprintln!("error: command {} is not available to parties", command.name());
            return Ok(Flow::Continue);
        }
        match command {
            Command::Start => self.cmd_start().map(|_| Flow::Continue),
            Command::Register => {
                self.cmd_register();
                Ok(Flow::Continue)
            }
            Command::Eval => {
                self.cmd_eval();
                Ok(Flow::Continue)
            }
            Command::Save(path) => {
                self.cmd_save(&path);
                Ok(Flow::Continue)
            }
            Command::Stop => {
                if let Some(session) = &self.session {
                    session.conn.close();
                }
                Ok(Flow::Exit)
            }
            Command::Train | Command::Sync => unreachable!("checked above"),
        }
    }

    /// Loads the local data and dials the aggregator. Connection
    /// refusal is fatal (exit 3) with the address in the message.
    fn cmd_start(&mut self) -> Result<()> {
        if self.session.is_some() {
            eprintln!("error: already started");
            return Ok(());
        }
        let trainer = self.cfg.build_trainer()?;
        let endpoint = self.cfg.aggregator_endpoint();
        let conn = transport::connect(&endpoint)?;
        println!("connected to {}", endpoint.describe());
        self.session = Some(PartySession::new(conn, trainer, self.cfg.schema_hash()));
        Ok(())
    }

    /// Joins the FL job, then serves aggregator queries until the
    /// session ends (STOP or connection closed). Commands after
    /// REGISTER therefore run against the final synced model.
    fn cmd_register(&mut self) {
        let Some(session) = self.session.as_mut() else {
            eprintln!("error: START the party before REGISTER");
            return;
        };
        match session.register(Duration::from_secs(30)) {
            Ok(ack) => println!("registered with session {}", ack.session_id),
            Err(e) => {
                eprintln!("error: {e}");
                return;
            }
        }
        match session.serve() {
            Ok(ServeEnd::Stopped) => println!("session stopped by aggregator"),
            Ok(ServeEnd::ConnectionClosed) => println!("aggregator connection closed"),
            Err(e) => eprintln!("error: {e}"),
        }
    }

    fn cmd_eval(&mut self) {
        let Some(session) = self.session.as_ref() else {
            eprintln!("error: START the party before EVAL");
            return;
        };
        match session.trainer.handle_eval() {
            Ok(m) => println!("eval: accuracy={:.4} n={}", m.accuracy, m.n),
            Err(e) => eprintln!("error: {e}"),
        }
    }

    fn cmd_save(&mut self, path: &Path) {
        let Some(session) = self.session.as_ref() else {
            eprintln!("error: START the party before SAVE");
            return;
        };
        match session.trainer.model.save(path) {
            Ok(()) => println!("saved model to {}", path.display()),
            Err(e) => eprintln!("error: cannot save model: {e}"),
        }
    }
}

/// Runs a party over a command sequence; returns the process exit code.
pub fn run_party<I>(cfg: PartyConfig, commands: I) -> i32
where
    I: IntoIterator<Item = Command>,
{
    let mut app = PartyApp { cfg, session: None };
    for command in commands {
        match app.dispatch(command) {
            Ok(Flow::Continue) => {}
            Ok(Flow::Exit) => break,
            Err(e) => {
                eprintln!("error: {e}");
                return exit_code_for(&e);
            }
        }
    }
    0
}
