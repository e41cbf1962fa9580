//! Server side of the federation: client sampling, mask dispatch, partial
//! aggregation and the round loop.

use std::sync::Arc;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{client_round, ClientError, ClientRoundMetrics, ClientState, RoundParams};
use crate::diagnostics::cost::cost_model;
use crate::diagnostics::theory::ConstantSample;
use crate::masking::{ImportanceScores, MaskError, NeuronMask};
use crate::method::{FederatedMethod, MaskRequest};
use crate::nn::{init_model, Architecture, Batch, Model, NnError};
use crate::protocol::{
    for_each_slot, payload_wire_size, read_slot, slot_mut, ActivePayload, ClientStatus, PayloadMeta, ProtocolError,
};
use crate::rng::{self, Purpose, Stream};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("no active clients left")]
    NoActiveClients,
    #[error("invalid federation config: {0}")]
    Config(String),
    #[error("unknown client {0}")]
    UnknownClient(u32),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, ServerError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub rounds: u32,
    pub clients_per_round: usize,
    pub epochs: usize,
    pub eta: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub early_stopping: bool,
    pub seed: u64,
    /// Round payload values to 32 bits in both directions, as the wire would.
    pub quantize_wire: bool,
    /// Record merge traces for constant estimation.
    pub trace: bool,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ServerError::Config(m));
        if self.clients_per_round == 0 {
            return bad("clients_per_round must be positive".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return bad(format!("eta must be finite and non-negative, got {}", self.eta));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return bad(format!("lambda must lie in (0, 1), got {}", self.lambda));
        }
        Ok(())
    }
}

/// A client's data and capability.
#[derive(Debug, Clone)]
pub struct ClientSetup {
    pub p: f64,
    pub train: Batch,
    pub validation: Batch,
}

#[derive(Debug, Clone)]
pub struct ClientEntry {
    pub id: u32,
    pub p: f64,
    pub status: ClientStatus,
    pub n_k: u32,
    /// Gradient importance reported at the client's last participation.
    pub probe: Option<ImportanceScores>,
}

#[derive(Debug, Clone)]
pub struct GlobalState {
    pub model: Model,
    pub clients: Vec<ClientEntry>,
    pub round: u32,
    pub method: Arc<dyn FederatedMethod>,
    pub seed: u64,
}

impl GlobalState {
    pub fn active_ids(&self) -> Vec<u32> {
        self.clients.iter().filter(|c| c.status == ClientStatus::On).map(|c| c.id).collect()
    }

    fn entry(&self, id: u32) -> Result<&ClientEntry> {
        self.clients.get(id as usize).filter(|c| c.id == id).ok_or(ServerError::UnknownClient(id))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub sampled: Vec<u32>,
    pub clients: Vec<ClientRoundMetrics>,
    pub bytes_down: u64,
    pub bytes_up: u64,
    pub flops_forward: u64,
    pub flops_backward: u64,
    pub stopped: Vec<u32>,
    pub active_remaining: usize,
    /// Latest local test accuracy averaged uniformly over all clients.
    pub mean_local_accuracy: f64,
    /// The same, weighted by training-shard size.
    pub weighted_local_accuracy: f64,
}

/// Hooks into the round loop. Client snapshots are only taken when
/// [`RoundObserver::wants_client_snapshots`] returns true.
pub trait RoundObserver {
    fn wants_client_snapshots(&self) -> bool {
        false
    }

    /// `before` is the local model at the start of the round, `after` the
    /// model after merging and training under `mask`.
    fn on_client_round(&mut self, _round: u32, _client: u32, _before: &Model, _after: &Model, _mask: &NeuronMask) {}

    fn on_trace(&mut self, _round: u32, _sample: &ConstantSample) {}

    fn on_global(&mut self, _round: u32, _global: &Model) {}
}

#[derive(Debug, Clone)]
pub struct FederationOutcome {
    pub global: Model,
    /// Local models of all clients in full-tensor form.
    pub models: Vec<Model>,
    /// Latest sub-model masks, for sub-model methods.
    pub sub_masks: Vec<Option<NeuronMask>>,
    pub statuses: Vec<ClientStatus>,
    /// Latest local test accuracy per client.
    pub accuracies: Vec<f64>,
    pub n_k: Vec<u32>,
    pub history: Vec<RoundRecord>,
    pub terminated_early: bool,
}

/// Uniform sample without replacement of `min(m, active.len())` ids, sorted.
pub fn sample_clients(active: &[u32], m: usize, stream: &mut Stream) -> Result<Vec<u32>> {
    if active.is_empty() {
        return Err(ServerError::NoActiveClients);
    }
    let k = m.min(active.len());
    let mut ids: Vec<u32> = sample(stream, active.len(), k).into_iter().map(|i| active[i]).collect();
    ids.sort_unstable();
    Ok(ids)
}

#[derive(Debug, Clone)]
pub struct Dispatch {
    pub client_id: u32,
    pub mask: NeuronMask,
    pub payload: ActivePayload,
}

/// Masks and payloads for the sampled clients, in id order.
pub fn dispatch_round(gs: &GlobalState, sampled: &[u32]) -> Result<Vec<Dispatch>> {
    sampled
        .iter()
        .map(|&id| {
            let entry = gs.entry(id)?;
            let mut s = rng::stream(gs.seed, Purpose::Mask, &[id as u64, gs.round as u64]);
            let mask = gs.method.select_mask(MaskRequest {
                global: &gs.model,
                p: entry.p,
                probe: entry.probe.as_ref(),
                stream: &mut s,
            })?;
            let payload = ActivePayload::extract(
                &gs.model,
                &mask,
                PayloadMeta {
                    client_id: id,
                    round: gs.round,
                    n_k: entry.n_k,
                    status: ClientStatus::On,
                },
            )?;
            Ok(Dispatch {
                client_id: id,
                mask,
                payload,
            })
        })
        .collect()
}

/// Per-position weighted average over the payloads covering each parameter,
/// weights `n_k`. A position covered by a single payload takes its value as
/// is; uncovered positions keep their value in `global`.
pub fn aggregate_payloads(global: &Model, payloads: &[ActivePayload]) -> Result<Model> {
    let arch = global.arch();
    let mut num = Model::zeros(arch);
    let mut den = Model::zeros(arch);
    let mut last = Model::zeros(arch);
    let mut count = Model::zeros(arch);
    for p in payloads {
        p.neuron_mask(arch)?;
        let w = p.meta.n_k as f64;
        let mut values = p.values();
        for_each_slot(arch, &p.active_indices(), |slot| {
            let v = *values.next().expect("value count checked");
            *slot_mut(&mut num, slot) += w * v;
            *slot_mut(&mut den, slot) += w;
            *slot_mut(&mut last, slot) = v;
            *slot_mut(&mut count, slot) += 1.0;
        });
    }
    let mut out = global.clone();
    let full: Vec<Vec<usize>> = arch.widths().iter().map(|&w| (0..w).collect()).collect();
    for_each_slot(arch, &full, |slot| {
        let c = read_slot(&count, slot);
        if c == 1.0 {
            *slot_mut(&mut out, slot) = read_slot(&last, slot);
        } else if c > 1.0 {
            *slot_mut(&mut out, slot) = read_slot(&num, slot) / read_slot(&den, slot);
        }
    });
    Ok(out)
}

fn weighted_mean(values: &[f64], weights: &[u32]) -> f64 {
    let total: f64 = weights.iter().map(|&w| w as f64).sum();
    values.iter().zip(weights).map(|(v, &w)| v * w as f64).sum::<f64>() / total
}

/// Run the federation for `cfg.rounds` rounds, or until every client has
/// stopped when early stopping is on.
pub fn run_federation(
    arch: &Architecture,
    method: Arc<dyn FederatedMethod>,
    setups: Vec<ClientSetup>,
    cfg: &FederationConfig,
    mut observer: Option<&mut dyn RoundObserver>,
) -> Result<FederationOutcome> {
    cfg.validate()?;
    if setups.is_empty() {
        return Err(ServerError::Config("at least one client is required".into()));
    }
    let global = init_model(arch, rng::derive_seed(cfg.seed, Purpose::ModelInit, &[]));
    let mut states: Vec<ClientState> = setups
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            if s.train.width() != arch.input_width() || s.validation.width() != arch.input_width() {
                return Err(ServerError::Config(format!("client {i} data width does not match the architecture")));
            }
            if !(s.p > 0.0 && s.p <= 1.0) {
                return Err(ServerError::Config(format!("client {i} ratio {} outside (0, 1]", s.p)));
            }
            Ok(ClientState::new(i as u32, global.clone(), s.p, s.train, s.validation, cfg.seed))
        })
        .collect::<Result<_>>()?;
    let training = method.local_training();
    let mut accuracies: Vec<f64> = states
        .par_iter()
        .map(|s| s.evaluate(training).map(|(_, a)| a))
        .collect::<std::result::Result<_, _>>()?;
    let n_k: Vec<u32> = states.iter().map(ClientState::n_k).collect();
    let costs = states
        .iter()
        .map(|s| cost_model(arch, s.p, method.as_ref(), cfg.batch_size))
        .collect::<std::result::Result<Vec<_>, _>>()?;

    let mut gs = GlobalState {
        model: global,
        clients: states
            .iter()
            .map(|s| ClientEntry {
                id: s.id,
                p: s.p,
                status: ClientStatus::On,
                n_k: s.n_k(),
                probe: None,
            })
            .collect(),
        round: 0,
        method: method.clone(),
        seed: cfg.seed,
    };
    let mut history = Vec::new();
    let mut terminated_early = false;
    let snapshots = observer.as_ref().is_some_and(|o| o.wants_client_snapshots());

    for t in 1..=cfg.rounds {
        let active = gs.active_ids();
        if active.is_empty() {
            terminated_early = true;
            break;
        }
        gs.round = t;
        let sampled = sample_clients(
            &active,
            cfg.clients_per_round,
            &mut rng::stream(cfg.seed, Purpose::ClientSampling, &[t as u64]),
        )?;
        let mut dispatches = dispatch_round(&gs, &sampled)?;
        if cfg.quantize_wire {
            for d in &mut dispatches {
                d.payload = d.payload.quantized();
            }
        }
        let params = RoundParams {
            round: t,
            epochs: cfg.epochs,
            eta: cfg.eta,
            batch_size: cfg.batch_size,
            lambda: cfg.lambda,
            early_stopping: cfg.early_stopping,
            training,
            probe: method.wants_gradient_probe(),
            trace: cfg.trace,
        };

        let mut selected: Vec<&mut ClientState> =
            states.iter_mut().filter(|s| sampled.binary_search(&s.id).is_ok()).collect();
        let results = selected
            .par_iter_mut()
            .zip(dispatches.par_iter())
            .map(|(state, d)| {
                let before = snapshots.then(|| state.model.clone());
                let out = client_round(state, &d.payload, &params)?;
                Ok((before, out))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut uploads = Vec::with_capacity(results.len());
        let mut record = RoundRecord {
            round: t,
            sampled: sampled.clone(),
            clients: Vec::with_capacity(results.len()),
            bytes_down: 0,
            bytes_up: 0,
            flops_forward: 0,
            flops_backward: 0,
            stopped: Vec::new(),
            active_remaining: 0,
            mean_local_accuracy: 0.0,
            weighted_local_accuracy: 0.0,
        };
        for ((before, out), d) in results.into_iter().zip(&dispatches) {
            let id = d.client_id as usize;
            if let Some(obs) = observer.as_deref_mut() {
                if let Some(before) = &before {
                    obs.on_client_round(t, d.client_id, before, &states[id].model, &d.mask);
                }
                if let Some(trace) = &out.trace {
                    obs.on_trace(t, trace);
                }
            }
            let size = payload_wire_size(&d.mask, arch)?.total_bytes as u64;
            record.bytes_down += size;
            record.bytes_up += size;
            let samples = out.metrics.samples_processed;
            record.flops_forward += costs[id].flops_forward * samples;
            record.flops_backward += costs[id].flops_backward * samples;
            accuracies[id] = out.metrics.test_accuracy;
            if out.metrics.status == ClientStatus::Stopped {
                gs.clients[id].status = ClientStatus::Stopped;
                record.stopped.push(d.client_id);
            }
            if out.probe.is_some() {
                gs.clients[id].probe = out.probe;
            }
            record.clients.push(out.metrics);
            uploads.push(if cfg.quantize_wire { out.payload.quantized() } else { out.payload });
        }
        gs.model = aggregate_payloads(&gs.model, &uploads)?;
        if let Some(obs) = observer.as_deref_mut() {
            obs.on_global(t, &gs.model);
        }
        record.active_remaining = gs.active_ids().len();
        record.mean_local_accuracy = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
        record.weighted_local_accuracy = weighted_mean(&accuracies, &n_k);
        history.push(record);
    }
    if cfg.early_stopping && gs.active_ids().is_empty() && (history.len() as u32) < cfg.rounds {
        terminated_early = true;
    }

    Ok(FederationOutcome {
        global: gs.model,
        sub_masks: states.iter().map(|s| s.sub_mask.clone()).collect(),
        statuses: states.iter().map(|s| s.status).collect(),
        models: states.into_iter().map(|s| s.model).collect(),
        accuracies,
        n_k,
        history,
        terminated_early,
    })
}
