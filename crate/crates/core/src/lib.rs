//! fedmesh: an aggregator/party federated learning framework.
//!
//! A central aggregator coordinates a set of data-holding parties over a
//! round-based query/reply protocol. Each round the aggregator builds a
//! query from the current global model, broadcasts it, collects the
//! parties' model updates, and fuses them with a pluggable fusion
//! algorithm. Parties train locally and never share raw data.
//!
//! The crate is organized along the runtime stack:
//!
//! - [`model`] — the uniform model interface plus native linear and
//!   decision-tree implementations
//! - [`data`] — dataset loading, splitting, and experiment partitioners
//! - [`fusion`] — aggregator-side query generation and fusion algorithms
//!   (iterative average, FedAvg, coordinate-wise median, federated ID3)
//! - [`localtrain`] — party-side local training, counts computation, and
//!   the optional differential-privacy wrapper
//! - [`protocol`] — message vocabulary, aggregator phase machine, party
//!   session loop, registration/quorum, and reply collection
//! - [`transport`] — pluggable duplex message delivery (in-process
//!   channels and length-prefixed JSON over TCP)
//! - [`config`] — YAML configuration loading and validation

pub mod config;
pub mod data;
pub mod error;
pub mod eventlog;
pub mod fusion;
pub mod localtrain;
pub mod model;
pub mod protocol;
pub mod seeds;
pub mod transport;

pub use error::{FedError, Result};
