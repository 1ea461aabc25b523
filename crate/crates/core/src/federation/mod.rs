//! Synchronous federated rounds over a small binary protocol.

mod fedavg;
mod fp16;
mod runner;
mod transport;
mod wire;

pub use fedavg::{fedavg, fedavg_wide, ClientUpdate};
pub use fp16::{decode_fp16, encode_fp16, f16_to_f32, f32_to_f16, quantize_fp16, F16_MAX};
pub use runner::{
    client_train_seed, run_client, run_federation, select_clients, serve_round, serve_round_detailed, ClientEval, EchoTrainer,
    FederationOutcome, GlobalEval, LocalTrainer, RoundRecord, run_rounds, TrainingClient, TransportKind,
};
pub use transport::{in_process, ClientTransport, InProcessClient, InProcessServer, LinkEvent, ServerTransport, TcpClient, TcpServer};
pub use wire::{read_frame, write_frame, RoundMessage, WirePrecision, HEADER_LEN};

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::PipelineSpec;
use crate::model::{ModelError, TrainConfig};

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("aggregation: {0}")]
    Aggregation(String),
    #[error("protocol error in field `{field}`: {detail}")]
    Protocol { field: &'static str, detail: String },
    #[error("value {value} at index {index} is outside the fp16 range")]
    Fp16Range { index: usize, value: f32 },
    #[error("round {round} timed out ({detail}); missing clients {missing:?}, collected {collected:?}")]
    Timeout { round: u16, missing: Vec<u32>, collected: Vec<u32>, detail: String },
    #[error("round {round} aborted: client {client_id} failed ({reason}); collected {collected:?}")]
    ClientFailed { round: u16, client_id: u32, reason: String, collected: Vec<u32> },
    #[error("transport: {0}")]
    Transport(String),
    #[error("invalid federation config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, FederationError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    #[serde(default = "default_rounds")]
    pub num_rounds: u16,
    #[serde(default = "default_fraction")]
    pub client_fraction: f64,
    #[serde(default = "default_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub wire_precision: WirePrecision,
    pub client_pipelines: BTreeMap<u32, PipelineSpec>,
    #[serde(default = "default_timeout")]
    pub round_timeout_secs: f64,
}

fn default_rounds() -> u16 {
    3
}
fn default_fraction() -> f64 {
    1.0
}
fn default_epochs() -> usize {
    50
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-3
}
fn default_timeout() -> f64 {
    120.0
}

impl FederationConfig {
    pub fn new(client_pipelines: BTreeMap<u32, PipelineSpec>) -> Self {
        Self {
            num_rounds: default_rounds(),
            client_fraction: default_fraction(),
            local_epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            seed: 0,
            wire_precision: WirePrecision::Fp32,
            client_pipelines,
            round_timeout_secs: default_timeout(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FederationError::Config(m));
        if self.num_rounds == 0 {
            return bad("num_rounds must be at least 1".into());
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return bad(format!("client_fraction {} outside (0, 1]", self.client_fraction));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.round_timeout_secs > 0.0 && self.round_timeout_secs.is_finite()) {
            return bad("round_timeout_secs must be positive".into());
        }
        if self.client_pipelines.is_empty() {
            return bad("no clients configured".into());
        }
        for (id, p) in &self.client_pipelines {
            p.validate().map_err(|e| FederationError::Config(format!("client {id} pipeline: {e}")))?;
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { epochs: self.local_epochs, batch_size: self.batch_size, learning_rate: self.learning_rate }
    }

    pub fn round_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.round_timeout_secs)
    }
}
