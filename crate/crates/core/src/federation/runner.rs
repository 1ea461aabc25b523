use std::collections::{BTreeMap, BTreeSet};
use std::net::TcpListener;
use std::thread;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fedavg::{fedavg, ClientUpdate};
use super::transport::{in_process, ClientTransport, LinkEvent, ServerTransport, TcpClient, TcpServer};
use super::wire::{RoundMessage, WirePrecision};
use super::{FederationConfig, FederationError, Result};
use crate::dataio::Manifest;
use crate::imaging::{PipelineKind, PipelineSpec};
use crate::metrics::MetricsReport;
use crate::model::{evaluate_dataset, init_params, load_dataset, train_on_dataset, Dataset, ModelSpec, ParamVector, TensorSpec, TrainConfig};
use crate::rng::{derive_seed, SplitMix64};

const SELECT_TAG: u64 = 0x5345_4c45_4354;
const TRAIN_TAG: u64 = 0x0054_5241_494e;

/// Seeded sample without replacement of `ceil(fraction · K)` clients,
/// returned in ascending order. A fraction of 1 selects everyone.
pub fn select_clients(ids: &[u32], fraction: f64, seed: u64, round: u16) -> Vec<u32> {
    let mut all = ids.to_vec();
    all.sort_unstable();
    if fraction >= 1.0 || all.is_empty() {
        return all;
    }
    let m = ((fraction * all.len() as f64).ceil() as usize).clamp(1, all.len());
    SplitMix64::new(derive_seed(seed, &[SELECT_TAG, u64::from(round)])).shuffle(&mut all);
    all.truncate(m);
    all.sort_unstable();
    all
}

/// Local training seed for one client in one round.
pub fn client_train_seed(seed: u64, client_id: u32, round: u16) -> u64 {
    derive_seed(seed, &[TRAIN_TAG, u64::from(client_id), u64::from(round)])
}

/// Client-side work for one round: start from the received global
/// parameters, return local parameters and the local sample count.
pub trait LocalTrainer {
    fn fit(&mut self, round: u16, global: &ParamVector) -> Result<(ParamVector, u64)>;
}

/// Returns the received parameters untouched.
#[derive(Debug, Clone)]
pub struct EchoTrainer {
    pub num_samples: u64,
}

impl LocalTrainer for EchoTrainer {
    fn fit(&mut self, _round: u16, global: &ParamVector) -> Result<(ParamVector, u64)> {
        Ok((global.clone(), self.num_samples))
    }
}

/// Mini-batch Adam on a client's preprocessed data, fresh optimizer state
/// every round.
#[derive(Debug, Clone)]
pub struct TrainingClient {
    pub client_id: u32,
    pub spec: ModelSpec,
    pub data: Dataset,
    pub train: TrainConfig,
    pub seed: u64,
}

impl LocalTrainer for TrainingClient {
    fn fit(&mut self, round: u16, global: &ParamVector) -> Result<(ParamVector, u64)> {
        let seed = client_train_seed(self.seed, self.client_id, round);
        let started = Instant::now();
        let local = train_on_dataset(global, &self.spec, &self.data, &self.train, seed)?;
        log::info!("client {} round {round}: {} epochs on {} samples in {:.1?}", self.client_id, self.train.epochs, self.data.len(), started.elapsed());
        Ok((local, self.data.len() as u64))
    }
}

/// Answer GlobalParams frames until Done. Returns the number of rounds served.
pub fn run_client<T, H>(transport: &mut T, trainer: &mut H, layout: &[TensorSpec]) -> Result<u16>
where
    T: ClientTransport + ?Sized,
    H: LocalTrainer + ?Sized,
{
    let client_id = transport.client_id();
    let mut served = 0;
    loop {
        let frame = transport.recv()?.ok_or_else(|| FederationError::Transport("server closed the connection before done".into()))?;
        match RoundMessage::decode(&frame)? {
            RoundMessage::GlobalParams { round, dtype, values } => {
                let global = ParamVector::new(values, layout.to_vec())
                    .map_err(|e| FederationError::Protocol { field: "element_count", detail: e.to_string() })?;
                let (local, num_samples) = trainer.fit(round, &global)?;
                let reply = RoundMessage::ClientUpdate { round, dtype, client_id, num_samples, values: local.into_values() };
                transport.send(&reply.encode()?)?;
                served += 1;
            }
            RoundMessage::Done { .. } => return Ok(served),
            other => {
                return Err(FederationError::Protocol { field: "msg_type", detail: format!("client received unexpected {other:?}") });
            }
        }
    }
}

fn parse_update(link_id: u32, frame: &[u8], round: u16, dtype: WirePrecision, layout: &[TensorSpec]) -> Result<ClientUpdate> {
    let (r, d, client_id, num_samples, values) = match RoundMessage::decode(frame)? {
        RoundMessage::ClientUpdate { round, dtype, client_id, num_samples, values } => (round, dtype, client_id, num_samples, values),
        other => return Err(FederationError::Protocol { field: "msg_type", detail: format!("expected client update from {link_id}, got {other:?}") }),
    };
    let bad = |field, detail: String| Err(FederationError::Protocol { field, detail });
    if client_id != link_id {
        return bad("client_id", format!("link {link_id} sent an update claiming id {client_id}"));
    }
    if r != round {
        return bad("round", format!("client {client_id} answered round {r} during round {round}"));
    }
    if d != dtype {
        return bad("dtype", format!("client {client_id} replied with {d:?}, expected {dtype:?}"));
    }
    if num_samples == 0 {
        return bad("num_samples", format!("client {client_id} reported zero samples"));
    }
    let params = ParamVector::new(values, layout.to_vec()).map_err(|e| FederationError::Protocol { field: "element_count", detail: e.to_string() })?;
    Ok(ClientUpdate { client_id, round, params, num_samples })
}

/// One synchronous round: broadcast, collect exactly one update per selected
/// client, aggregate. The received updates are returned alongside.
pub fn serve_round_detailed<S>(global: &ParamVector, round: u16, config: &FederationConfig, transport: &mut S) -> Result<(ParamVector, Vec<ClientUpdate>)>
where
    S: ServerTransport + ?Sized,
{
    let selected = select_clients(&transport.client_ids(), config.client_fraction, config.seed, round);
    if selected.is_empty() {
        return Err(FederationError::Transport("no connected clients".into()));
    }
    let frame = RoundMessage::GlobalParams { round, dtype: config.wire_precision, values: global.values().to_vec() }.encode()?;
    for &client_id in &selected {
        transport
            .send(client_id, &frame)
            .map_err(|e| FederationError::ClientFailed { round, client_id, reason: e.to_string(), collected: Vec::new() })?;
    }
    let mut collected: BTreeMap<u32, ClientUpdate> = BTreeMap::new();
    let deadline = Instant::now() + config.round_timeout();
    while collected.len() < selected.len() {
        let remaining = deadline.saturating_duration_since(Instant::now());
        let event = if remaining.is_zero() { None } else { transport.recv_timeout(remaining)? };
        match event {
            None => {
                return Err(FederationError::Timeout {
                    round,
                    missing: selected.iter().copied().filter(|id| !collected.contains_key(id)).collect(),
                    collected: collected.keys().copied().collect(),
                    detail: format!("no complete collection within {:.1}s", config.round_timeout_secs),
                });
            }
            Some(LinkEvent::Closed { client_id, reason }) => {
                if selected.contains(&client_id) && !collected.contains_key(&client_id) {
                    return Err(FederationError::ClientFailed { round, client_id, reason, collected: collected.keys().copied().collect() });
                }
                log::warn!("client {client_id} disconnected after its round {round} update ({reason})");
            }
            Some(LinkEvent::Frame { client_id, frame }) => {
                let update = parse_update(client_id, &frame, round, config.wire_precision, global.layout())?;
                if !selected.contains(&client_id) {
                    return Err(FederationError::Protocol { field: "client_id", detail: format!("client {client_id} was not selected for round {round}") });
                }
                if collected.contains_key(&client_id) {
                    return Err(FederationError::Protocol { field: "client_id", detail: format!("second update from client {client_id} in round {round}") });
                }
                collected.insert(client_id, update);
            }
        }
    }
    let updates: Vec<ClientUpdate> = collected.into_values().collect();
    Ok((fedavg(&updates)?, updates))
}

pub fn serve_round<S>(global: &ParamVector, round: u16, config: &FederationConfig, transport: &mut S) -> Result<ParamVector>
where
    S: ServerTransport + ?Sized,
{
    serve_round_detailed(global, round, config, transport).map(|(g, _)| g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    InProcess,
    Socket,
}

/// Local model of one client on the test set, under that client's pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEval {
    pub client_id: u32,
    pub pipeline: PipelineKind,
    pub num_samples: u64,
    pub metrics: MetricsReport,
}

/// Aggregated model on the test set under one of the client pipelines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalEval {
    pub pipeline: PipelineKind,
    pub client_ids: Vec<u32>,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u16,
    pub clients: Vec<ClientEval>,
    pub global: Vec<GlobalEval>,
    /// Mean global accuracy over the distinct client pipelines.
    pub global_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct FederationOutcome {
    pub global: ParamVector,
    pub rounds: Vec<RoundRecord>,
}

struct TestSet {
    pipeline: PipelineSpec,
    client_ids: Vec<u32>,
    data: Dataset,
}

fn load_test_sets(config: &FederationConfig, spec: &ModelSpec, test_manifest: &Manifest) -> Result<Vec<TestSet>> {
    let mut groups: Vec<(PipelineSpec, Vec<u32>)> = Vec::new();
    for (&id, p) in &config.client_pipelines {
        match groups.iter_mut().find(|(q, _)| q == p) {
            Some((_, ids)) => ids.push(id),
            None => groups.push((p.clone(), vec![id])),
        }
    }
    groups
        .into_iter()
        .map(|(pipeline, client_ids)| {
            let data = load_dataset(test_manifest, &pipeline, spec)?;
            Ok(TestSet { pipeline, client_ids, data })
        })
        .collect()
}

fn evaluate_round(round: u16, global: &ParamVector, updates: &[ClientUpdate], spec: &ModelSpec, tests: &[TestSet]) -> Result<RoundRecord> {
    let test_for = |id: u32| tests.iter().find(|t| t.client_ids.contains(&id)).expect("every client has a test set");
    let clients = updates
        .iter()
        .map(|u| {
            let t = test_for(u.client_id);
            Ok(ClientEval { client_id: u.client_id, pipeline: t.pipeline.kind, num_samples: u.num_samples, metrics: evaluate_dataset(&u.params, spec, &t.data)? })
        })
        .collect::<Result<Vec<_>>>()?;
    let global_evals = tests
        .iter()
        .map(|t| Ok(GlobalEval { pipeline: t.pipeline.kind, client_ids: t.client_ids.clone(), metrics: evaluate_dataset(global, spec, &t.data)? }))
        .collect::<Result<Vec<_>>>()?;
    let global_accuracy = global_evals.iter().map(|g| g.metrics.accuracy).sum::<f64>() / global_evals.len() as f64;
    Ok(RoundRecord { round, clients, global: global_evals, global_accuracy })
}

/// Server side of a whole run: `num_rounds` rounds starting from `initial`,
/// test metrics after every round, then Done to every client.
pub fn run_rounds<S>(transport: &mut S, initial: ParamVector, config: &FederationConfig, spec: &ModelSpec, test_manifest: &Manifest) -> Result<FederationOutcome>
where
    S: ServerTransport + ?Sized,
{
    config.validate()?;
    initial.check_spec(spec)?;
    let connected: BTreeSet<u32> = transport.client_ids().into_iter().collect();
    let configured: BTreeSet<u32> = config.client_pipelines.keys().copied().collect();
    if connected != configured {
        return Err(FederationError::Config(format!("connected clients {connected:?} differ from configured clients {configured:?}")));
    }
    let tests = load_test_sets(config, spec, test_manifest)?;
    let mut global = initial;
    let mut rounds = Vec::with_capacity(usize::from(config.num_rounds));
    for round in 0..config.num_rounds {
        let started = Instant::now();
        let (next, updates) = serve_round_detailed(&global, round, config, transport)?;
        global = next;
        let record = evaluate_round(round, &global, &updates, spec, &tests)?;
        log::info!("round {round}: global accuracy {:.4} ({:.1?})", record.global_accuracy, started.elapsed());
        rounds.push(record);
    }
    let done = RoundMessage::Done { round: config.num_rounds }.encode()?;
    for id in transport.client_ids() {
        if let Err(e) = transport.send(id, &done) {
            log::warn!("could not send done to client {id}: {e}");
        }
    }
    Ok(FederationOutcome { global, rounds })
}

/// Replace the generic disconnect reason with the client's own error.
fn merge_client_errors(result: Result<FederationOutcome>, client_results: Vec<(u32, Result<u16>)>) -> Result<FederationOutcome> {
    let mut failures: BTreeMap<u32, FederationError> = BTreeMap::new();
    for (id, r) in client_results {
        if let Err(e) = r {
            failures.insert(id, e);
        }
    }
    match result {
        Err(FederationError::ClientFailed { round, client_id, reason, collected }) => {
            let reason = failures.remove(&client_id).map(|e| e.to_string()).unwrap_or(reason);
            Err(FederationError::ClientFailed { round, client_id, reason, collected })
        }
        Ok(outcome) => {
            for (id, e) in failures {
                log::warn!("client {id} exited with an error after the run: {e}");
            }
            Ok(outcome)
        }
        Err(e) => Err(e),
    }
}

/// Full run: load every client's data through its pipeline, then R rounds of
/// broadcast, local training and aggregation over the chosen transport.
pub fn run_federation(
    config: &FederationConfig,
    spec: &ModelSpec,
    client_manifests: &BTreeMap<u32, Manifest>,
    test_manifest: &Manifest,
    transport: TransportKind,
) -> Result<FederationOutcome> {
    config.validate()?;
    spec.validate()?;
    let ids: Vec<u32> = client_manifests.keys().copied().collect();
    if ids.iter().ne(config.client_pipelines.keys()) {
        return Err(FederationError::Config(format!(
            "client manifests {ids:?} do not match configured pipelines {:?}",
            config.client_pipelines.keys().collect::<Vec<_>>()
        )));
    }
    let train = config.train_config();
    let trainers = ids
        .par_iter()
        .map(|&id| {
            let data = load_dataset(&client_manifests[&id], &config.client_pipelines[&id], spec)?;
            Ok(TrainingClient { client_id: id, spec: spec.clone(), data, train, seed: config.seed })
        })
        .collect::<Result<Vec<_>>>()?;
    let initial = init_params(spec, config.seed)?;
    let layout = spec.layout();
    let layout = layout.as_slice();

    match transport {
        TransportKind::InProcess => {
            let (mut server, endpoints) = in_process(&ids);
            thread::scope(|s| {
                let handles: Vec<_> = endpoints
                    .into_iter()
                    .zip(trainers)
                    .map(|(mut endpoint, mut trainer)| (trainer.client_id, s.spawn(move || run_client(&mut endpoint, &mut trainer, layout))))
                    .collect();
                let result = run_rounds(&mut server, initial, config, spec, test_manifest);
                drop(server);
                let joined = handles.into_iter().map(|(id, h)| (id, h.join().expect("client thread panicked"))).collect();
                merge_client_errors(result, joined)
            })
        }
        TransportKind::Socket => {
            let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| FederationError::Transport(e.to_string()))?;
            let addr = listener.local_addr().map_err(|e| FederationError::Transport(e.to_string()))?;
            let timeout = config.round_timeout();
            thread::scope(|s| {
                let handles: Vec<_> = trainers
                    .into_iter()
                    .map(|mut trainer| {
                        let id = trainer.client_id;
                        let handle = s.spawn(move || {
                            let mut endpoint = TcpClient::connect(addr, id, timeout)?;
                            run_client(&mut endpoint, &mut trainer, layout)
                        });
                        (id, handle)
                    })
                    .collect();
                let accepted = TcpServer::accept(&listener, ids.len(), timeout);
                drop(listener);
                let result = accepted.and_then(|mut server| run_rounds(&mut server, initial, config, spec, test_manifest));
                let joined = handles.into_iter().map(|(id, h)| (id, h.join().expect("client thread panicked"))).collect();
                merge_client_errors(result, joined)
            })
        }
    }
}
