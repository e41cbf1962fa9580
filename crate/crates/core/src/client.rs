//! One client's side of a round: merge the dispatched parameters, train the
//! active ones, apply the early-stopping rule and report back.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::theory::ConstantSample;
use crate::masking::{derive_param_mask, gradient_importance, ImportanceScores, NeuronMask};
use crate::method::LocalTraining;
use crate::nn::{self, Batch, Execution, Model, NnError};
use crate::protocol::{for_each_slot, slot_mut, ActivePayload, ClientStatus, PayloadMeta, ProtocolError};
use crate::rng::{self, Purpose};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("client {0} has stopped and cannot train")]
    Stopped(u32),
    #[error("split factor must lie in (0, 1), got {0}")]
    InvalidLambda(f64),
    #[error("invalid round parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, ClientError>;

/// Overwrite the parameters of `local` covered by `payload` with its values.
/// Everything else stays bitwise as it was.
pub fn merge_active(local: &Model, payload: &ActivePayload) -> Result<Model> {
    let mut merged = local.clone();
    merge_into(&mut merged, payload)?;
    Ok(merged)
}

pub fn merge_into(local: &mut Model, payload: &ActivePayload) -> Result<()> {
    payload.neuron_mask(local.arch())?;
    let active = payload.active_indices();
    let mut values = payload.values();
    let arch = local.arch().clone();
    for_each_slot(&arch, &active, |slot| {
        *slot_mut(local, slot) = *values.next().expect("value count checked");
    });
    Ok(())
}

/// `lambda * train + (1 - lambda) * test`.
pub fn es_combined_loss(train_loss: f64, test_loss: f64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(ClientError::InvalidLambda(lambda));
    }
    Ok(lambda * train_loss + (1.0 - lambda) * test_loss)
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: u32,
    /// Local model in full-tensor form.
    pub model: Model,
    pub p: f64,
    pub train: Batch,
    pub validation: Batch,
    /// Combined loss at the previous participation.
    pub prev_es_loss: f64,
    pub status: ClientStatus,
    /// Most recent sub-model mask, for sub-model methods.
    pub sub_mask: Option<NeuronMask>,
    /// Master seed; per-round streams derive from `(seed, id, round)`.
    pub seed: u64,
}

impl ClientState {
    pub fn new(id: u32, model: Model, p: f64, train: Batch, validation: Batch, seed: u64) -> Self {
        Self {
            id,
            model,
            p,
            train,
            validation,
            prev_es_loss: f64::INFINITY,
            status: ClientStatus::On,
            sub_mask: None,
            seed,
        }
    }

    pub fn n_k(&self) -> u32 {
        self.train.len() as u32
    }

    /// Loss and accuracy of the local model on the validation shard, executed
    /// the way `training` runs it.
    pub fn evaluate(&self, training: LocalTraining) -> Result<(f64, f64)> {
        let exec = match (training, &self.sub_mask) {
            (LocalTraining::SubModel, Some(mask)) => Execution::SubModel(mask),
            _ => Execution::Full,
        };
        Ok(nn::evaluate(&self.model, &self.validation, exec)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RoundParams {
    pub round: u32,
    pub epochs: usize,
    pub eta: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub early_stopping: bool,
    pub training: LocalTraining,
    /// Report gradient importance of the trained model.
    pub probe: bool,
    /// Record full gradients before and after merging.
    pub trace: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundMetrics {
    pub client_id: u32,
    pub p: f64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub es_loss: f64,
    pub status: ClientStatus,
    pub samples_processed: u64,
}

#[derive(Debug, Clone)]
pub struct ClientRoundOutput {
    pub payload: ActivePayload,
    pub metrics: ClientRoundMetrics,
    pub probe: Option<ImportanceScores>,
    /// Local and merged models with full training-shard gradients at both.
    pub trace: Option<ConstantSample>,
}

/// Run one round on `state`.
pub fn client_round(
    state: &mut ClientState,
    payload_in: &ActivePayload,
    params: &RoundParams,
) -> Result<ClientRoundOutput> {
    if state.status == ClientStatus::Stopped {
        return Err(ClientError::Stopped(state.id));
    }
    if params.epochs == 0 || params.batch_size == 0 {
        return Err(ClientError::InvalidParams(format!(
            "epochs {} and batch size {} must be positive",
            params.epochs, params.batch_size
        )));
    }
    if !(params.lambda > 0.0 && params.lambda < 1.0) {
        return Err(ClientError::InvalidLambda(params.lambda));
    }
    let arch = state.model.arch().clone();
    let mask = payload_in.neuron_mask(&arch)?;
    let pmask = derive_param_mask(&mask, &arch).map_err(ProtocolError::from)?;

    let before = params.trace.then(|| state.model.clone());
    merge_into(&mut state.model, payload_in)?;
    let trace = match before {
        Some(local) => {
            let (_, g_local) = nn::loss_grad(&local, &state.train)?;
            let (_, g_merged) = nn::loss_grad(&state.model, &state.train)?;
            Some(ConstantSample {
                client_id: state.id,
                local: local.flatten(),
                merged: state.model.flatten(),
                grad_local: g_local.flatten(),
                grad_merged: g_merged.flatten(),
            })
        }
        None => None,
    };

    let n = state.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut final_epoch_losses = Vec::new();
    for epoch in 0..params.epochs {
        let mut shuffle = rng::stream(
            state.seed,
            Purpose::Shuffle,
            &[state.id as u64, params.round as u64, epoch as u64],
        );
        order.shuffle(&mut shuffle);
        let last_epoch = epoch + 1 == params.epochs;
        for chunk in order.chunks(params.batch_size) {
            let batch = state.train.select(chunk)?;
            let (loss, grad) = match params.training {
                LocalTraining::FrozenFullModel => nn::masked_loss_grad(&state.model, &batch, &pmask)?,
                LocalTraining::SubModel => nn::submodel_loss_grad(&state.model, &batch, &mask, &pmask)?,
            };
            state.model.sgd_step(&grad, params.eta)?;
            if last_epoch {
                final_epoch_losses.push(loss);
            }
        }
    }
    if !state.model.is_finite() {
        return Err(NnError::NumericalOverflow(format!("client {} diverged", state.id)).into());
    }
    let train_loss = final_epoch_losses.iter().sum::<f64>() / final_epoch_losses.len() as f64;

    if params.training == LocalTraining::SubModel {
        state.sub_mask = Some(mask.clone());
    }
    let (test_loss, test_accuracy) = state.evaluate(params.training)?;
    let es_loss = es_combined_loss(train_loss, test_loss, params.lambda)?;
    if params.early_stopping && es_loss > state.prev_es_loss {
        state.status = ClientStatus::Stopped;
    }
    state.prev_es_loss = es_loss;

    let probe = if params.probe {
        let mut s = rng::stream(state.seed, Purpose::Probe, &[state.id as u64, params.round as u64]);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut s);
        idx.truncate(params.batch_size);
        let (_, g) = nn::loss_grad(&state.model, &state.train.select(&idx)?)?;
        Some(gradient_importance(&g))
    } else {
        None
    };

    let payload = ActivePayload::extract(
        &state.model,
        &mask,
        PayloadMeta {
            client_id: state.id,
            round: params.round,
            n_k: state.n_k(),
            status: state.status,
        },
    )?;
    Ok(ClientRoundOutput {
        payload,
        metrics: ClientRoundMetrics {
            client_id: state.id,
            p: state.p,
            train_loss,
            test_loss,
            test_accuracy,
            es_loss,
            status: state.status,
            samples_processed: (n * params.epochs) as u64,
        },
        probe,
        trace,
    })
}
