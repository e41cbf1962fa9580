//! End-to-end experiment pipeline: dataset, partition, sweep cells, artifacts
//! and the diagnostics suite.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Cell, ConfigError, DatasetSource, ExperimentConfig};
use crate::data::{self, DataError, LabeledDataset, PartitionPlan};
use crate::diagnostics::cost::cost_model;
use crate::diagnostics::report::{write_records, DiagnosticRecord};
use crate::diagnostics::theory::{
    check_lemma2, estimate_constants, finite_diff_check, mc_check_lemma1, theorem1_bound, Bound, ConstantSample,
    Lemma1Report, TheoryConstants, TheoryError, Theorem1Bound,
};
use crate::masking::{derive_param_mask, sample_neuron_mask, MaskError, MaskStrategy, NeuronMask};
use crate::method::MethodRegistry;
use crate::nn::{init_model, Architecture, Batch, NnError};
use crate::protocol::{encode_payload, PayloadMeta, ProtocolError};
use crate::rng::{self, Purpose};
use crate::server::{run_federation, ClientSetup, FederationConfig, FederationOutcome, RoundObserver, ServerError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("unknown method {0:?}")]
    UnknownMethod(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl ExperimentError {
    /// Whether the error stems from invalid user input rather than a failure
    /// during execution.
    pub fn is_validation(&self) -> bool {
        matches!(self, ExperimentError::Config(_) | ExperimentError::UnknownMethod(_))
            || matches!(self, ExperimentError::Server(ServerError::Config(_)))
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn build_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<LabeledDataset> {
    Ok(match &cfg.dataset {
        DatasetSource::Synthetic {
            classes,
            dim,
            per_class,
            separation,
        } => data::gen_synthetic(
            *classes,
            *dim,
            *per_class,
            *separation,
            rng::derive_seed(seed, Purpose::Synthetic, &[]),
        )?,
        DatasetSource::Idx { images, labels } => data::load_idx(images, labels)?,
    })
}

pub fn architecture(cfg: &ExperimentConfig, dataset: &LabeledDataset) -> Result<Architecture> {
    let mut widths = vec![dataset.dim()];
    widths.extend(&cfg.hidden_layers);
    widths.push(dataset.classes());
    Ok(Architecture::new(widths)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientPartition {
    pub id: u32,
    pub p: f64,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub class_histogram: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub alpha: f64,
    pub seed: u64,
    pub samples: usize,
    pub classes: usize,
    pub clients: Vec<ClientPartition>,
}

fn alpha_key(alpha: f64) -> u64 {
    alpha.to_bits()
}

/// Dirichlet partition plus per-client stratified split.
pub fn partition(cfg: &ExperimentConfig, dataset: &LabeledDataset, alpha: f64, seed: u64) -> Result<PartitionReport> {
    let plan: PartitionPlan = data::dirichlet_partition(
        dataset.labels(),
        dataset.classes(),
        alpha,
        cfg.clients,
        rng::derive_seed(seed, Purpose::Partition, &[alpha_key(alpha)]),
    )?;
    let ratios = cfg.client_ratios();
    let clients = plan
        .clients
        .iter()
        .enumerate()
        .map(|(k, entry)| {
            let split_seed = rng::derive_seed(seed, Purpose::Split, &[alpha_key(alpha), k as u64]);
            let (train, validation) = data::train_test_split(entry, dataset.labels(), cfg.lambda, split_seed)?;
            Ok(ClientPartition {
                id: k as u32,
                p: ratios[k],
                class_histogram: dataset.class_histogram(entry),
                train,
                validation,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PartitionReport {
        alpha,
        seed,
        samples: dataset.len(),
        classes: dataset.classes(),
        clients,
    })
}

pub fn client_setups(dataset: &LabeledDataset, report: &PartitionReport) -> Result<Vec<ClientSetup>> {
    report
        .clients
        .iter()
        .map(|c| {
            Ok(ClientSetup {
                p: c.p,
                train: dataset.batch(&c.train)?,
                validation: dataset.batch(&c.validation)?,
            })
        })
        .collect()
}

/// Federation settings of one cell. The seed depends on the replicate seed
/// and alpha only, so all methods of a replicate see the same sampling.
pub fn federation_config(cfg: &ExperimentConfig, cell: &Cell) -> FederationConfig {
    FederationConfig {
        rounds: cfg.rounds,
        clients_per_round: cfg.clients_per_round,
        epochs: cfg.local_epochs,
        eta: cfg.eta,
        batch_size: cfg.batch_size,
        lambda: cfg.lambda,
        early_stopping: cfg.early_stopping,
        seed: rng::derive_seed(cell.seed, Purpose::Sweep, &[alpha_key(cell.alpha)]),
        quantize_wire: cfg.quantize_wire,
        trace: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub alpha: f64,
    pub seed: u64,
    pub rounds_configured: u32,
    pub rounds_executed: u32,
    pub terminated_early: bool,
    pub stopped_clients: usize,
    pub mean_accuracy: f64,
    pub weighted_accuracy: f64,
    pub bytes_down: u64,
    pub bytes_up: u64,
    pub total_bytes: u64,
    pub flops_forward: u64,
    pub flops_backward: u64,
    pub total_flops: u64,
}

pub fn summarize(cell: &Cell, rounds: u32, outcome: &FederationOutcome) -> RunSummary {
    let h = &outcome.history;
    let bytes_down: u64 = h.iter().map(|r| r.bytes_down).sum();
    let bytes_up: u64 = h.iter().map(|r| r.bytes_up).sum();
    let flops_forward: u64 = h.iter().map(|r| r.flops_forward).sum();
    let flops_backward: u64 = h.iter().map(|r| r.flops_backward).sum();
    let n = outcome.accuracies.len() as f64;
    let total_n: f64 = outcome.n_k.iter().map(|&k| k as f64).sum();
    RunSummary {
        method: cell.method.clone(),
        alpha: cell.alpha,
        seed: cell.seed,
        rounds_configured: rounds,
        rounds_executed: h.len() as u32,
        terminated_early: outcome.terminated_early,
        stopped_clients: outcome
            .statuses
            .iter()
            .filter(|&&s| s == crate::protocol::ClientStatus::Stopped)
            .count(),
        mean_accuracy: outcome.accuracies.iter().sum::<f64>() / n,
        weighted_accuracy: outcome
            .accuracies
            .iter()
            .zip(&outcome.n_k)
            .map(|(a, &k)| a * k as f64)
            .sum::<f64>()
            / total_n,
        bytes_down,
        bytes_up,
        total_bytes: bytes_down + bytes_up,
        flops_forward,
        flops_backward,
        total_flops: flops_forward + flops_backward,
    }
}

pub struct CellRun {
    pub summary: RunSummary,
    pub outcome: FederationOutcome,
    pub arch: Architecture,
}

/// Run one cell in memory.
pub fn run_cell(
    cfg: &ExperimentConfig,
    registry: &MethodRegistry,
    cell: &Cell,
    observer: Option<&mut dyn RoundObserver>,
) -> Result<CellRun> {
    let method = registry
        .get(&cell.method)
        .ok_or_else(|| ExperimentError::UnknownMethod(cell.method.clone()))?;
    let dataset = build_dataset(cfg, cell.seed)?;
    let arch = architecture(cfg, &dataset)?;
    let report = partition(cfg, &dataset, cell.alpha, cell.seed)?;
    let setups = client_setups(&dataset, &report)?;
    let fed = federation_config(cfg, cell);
    let outcome = run_federation(&arch, method, setups, &fed, observer)?;
    Ok(CellRun {
        summary: summarize(cell, cfg.rounds, &outcome),
        outcome,
        arch,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn write_cell_artifacts(dir: &Path, run: &CellRun) -> Result<()> {
    let models = dir.join("models");
    fs::create_dir_all(&models).map_err(io_err(&models))?;
    let metrics = dir.join("metrics.jsonl");
    let file = fs::File::create(&metrics).map_err(io_err(&metrics))?;
    let mut w = BufWriter::new(file);
    for r in &run.outcome.history {
        serde_json::to_writer(&mut w, r).expect("serializable");
        w.write_all(b"\n").map_err(io_err(&metrics))?;
    }
    w.flush().map_err(io_err(&metrics))?;

    let full = NeuronMask::full(&run.arch);
    for (k, model) in run.outcome.models.iter().enumerate() {
        let bytes = encode_payload(
            model,
            &full,
            PayloadMeta {
                client_id: k as u32,
                round: run.summary.rounds_executed,
                n_k: run.outcome.n_k[k],
                status: run.outcome.statuses[k],
            },
        )?;
        let path = models.join(format!("client_{k:04}.fspu"));
        fs::write(&path, bytes).map_err(io_err(&path))?;
    }
    write_json(&dir.join("summary.json"), &run.summary)
}

pub fn write_summary_csv(path: &Path, rows: &[RunSummary]) -> Result<()> {
    write_csv(path, rows)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| ExperimentError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    for r in rows {
        w.serialize(r).map_err(|e| ExperimentError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    }
    w.flush().map_err(io_err(path))
}

/// Run every sweep cell and write artifacts under `out`:
/// `<cell>/metrics.jsonl`, `<cell>/models/client_XXXX.fspu`,
/// `<cell>/summary.json`, and the sweep-wide `summary.json` and `summary.csv`.
pub fn execute(cfg: &ExperimentConfig, registry: &MethodRegistry, out: &Path) -> Result<Vec<RunSummary>> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let summaries = cfg
        .cells()
        .par_iter()
        .map(|cell| {
            let run = run_cell(cfg, registry, cell, None)?;
            write_cell_artifacts(&out.join(cell.name()), &run)?;
            Ok(run.summary)
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(&out.join("summary.json"), &summaries)?;
    write_summary_csv(&out.join("summary.csv"), &summaries)?;
    Ok(summaries)
}

pub fn read_summaries(path: &Path) -> Result<Vec<RunSummary>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| ExperimentError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Mean over seeds of each (method, alpha) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub alpha: f64,
    pub seeds: usize,
    pub mean_accuracy: f64,
    pub accuracy_std: f64,
    pub weighted_accuracy: f64,
    pub rounds_executed: f64,
    pub total_bytes: f64,
    pub total_flops: f64,
}

pub fn aggregate_report(rows: &[RunSummary]) -> Vec<ReportRow> {
    let mut groups: BTreeMap<(String, u64), Vec<&RunSummary>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.method.clone(), alpha_key(r.alpha))).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((method, key), g)| {
            let n = g.len() as f64;
            let mean = |f: &dyn Fn(&RunSummary) -> f64| g.iter().map(|r| f(r)).sum::<f64>() / n;
            let acc = mean(&|r| r.mean_accuracy);
            let var = g.iter().map(|r| (r.mean_accuracy - acc).powi(2)).sum::<f64>() / n;
            ReportRow {
                method,
                alpha: f64::from_bits(key),
                seeds: g.len(),
                mean_accuracy: acc,
                accuracy_std: var.sqrt(),
                weighted_accuracy: mean(&|r| r.weighted_accuracy),
                rounds_executed: mean(&|r| r.rounds_executed as f64),
                total_bytes: mean(&|r| r.total_bytes as f64),
                total_flops: mean(&|r| r.total_flops as f64),
            }
        })
        .collect()
}

pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    write_csv(path, rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoryReport {
    pub p: f64,
    pub constants: Option<TheoryConstants>,
    pub bound: Option<Theorem1Bound>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsOutput {
    pub records: Vec<DiagnosticRecord>,
    pub lemma1: Vec<Lemma1Report>,
    pub theory: Vec<TheoryReport>,
    pub costs: Vec<crate::diagnostics::CostReport>,
}

#[derive(Default)]
struct TraceCollector {
    samples: Vec<ConstantSample>,
}

impl RoundObserver for TraceCollector {
    fn on_trace(&mut self, _round: u32, sample: &ConstantSample) {
        self.samples.push(sample.clone());
    }
}

/// Number of random (model, batch, mask) triples in the gradient checks.
pub const DIAGNOSTIC_TRIPLES: usize = 20;
pub const LEMMA1_TRIALS: usize = 100_000;
/// Rounds of the traced run used for constant estimation.
pub const THEORY_ROUNDS: u32 = 20;

/// Gradient, lemma, cost and bound checks on the configured architecture and
/// data, for the first seed and alpha.
pub fn run_diagnostics(cfg: &ExperimentConfig, seed: u64) -> Result<DiagnosticsOutput> {
    cfg.validate()?;
    let dataset = build_dataset(cfg, seed)?;
    let arch = architecture(cfg, &dataset)?;
    let mut ratios: Vec<f64> = cfg.clusters.iter().map(|c| c.ratio).collect();
    ratios.sort_by(f64::total_cmp);
    ratios.dedup();
    let probe_batch = |k: u64| -> Result<Batch> {
        let mut s = rng::stream(seed, Purpose::Diagnostics, &[1, k]);
        let n = cfg.batch_size.min(dataset.len());
        let idx = rand::seq::index::sample(&mut s, dataset.len(), n).into_vec();
        Ok(dataset.batch(&idx)?)
    };

    let mut records = Vec::new();
    let (mut fd_max, mut l2_max): (f64, f64) = (0.0, 0.0);
    for k in 0..DIAGNOSTIC_TRIPLES as u64 {
        let model = init_model(&arch, rng::derive_seed(seed, Purpose::Diagnostics, &[2, k]));
        let batch = probe_batch(k)?;
        let p = ratios[k as usize % ratios.len()];
        let mut s = rng::stream(seed, Purpose::Diagnostics, &[3, k]);
        let nm = sample_neuron_mask(&arch, p, MaskStrategy::Random, None, &mut s)?;
        let pm = derive_param_mask(&nm, &arch)?;
        fd_max = fd_max.max(finite_diff_check(&model, &batch, &pm, 1e-5, k)?.max_rel_error);
        l2_max = l2_max.max(check_lemma2(&model, &batch, &pm)?);
    }
    records.push(DiagnosticRecord::below("finite_diff_max_rel_error", fd_max, 1e-4));
    records.push(DiagnosticRecord::at_most("lemma2_max_residual", l2_max, 1e-12));

    let model = init_model(&arch, rng::derive_seed(seed, Purpose::Diagnostics, &[4]));
    let batch = probe_batch(u64::MAX)?;
    let mut lemma1 = Vec::new();
    for &p in &ratios {
        let r = mc_check_lemma1(&model, &batch, p, LEMMA1_TRIALS, seed)?;
        if let (Some(ratio), Some(expected)) = (r.inter_hidden_ratio, r.inter_hidden_expected) {
            records.push(DiagnosticRecord::at_most(
                format!("lemma1_inter_hidden_rel_dev_p{p}"),
                (ratio - expected).abs() / expected,
                0.02,
            ));
        }
        records.push(DiagnosticRecord::at_most(
            format!("lemma1_full_rel_dev_p{p}"),
            (r.full_ratio - r.full_expected).abs() / r.full_expected,
            0.02,
        ));
        lemma1.push(r);
    }

    let registry = MethodRegistry::builtin();
    let fedspu = registry.get("fedspu").expect("builtin");
    let full_cost = cost_model(&arch, 1.0, fedspu.as_ref(), cfg.batch_size)?;
    let mut costs = Vec::new();
    for &p in &ratios {
        for name in registry.names() {
            costs.push(cost_model(&arch, p, registry.get(name).expect("listed").as_ref(), cfg.batch_size)?);
        }
        let ours = cost_model(&arch, p, fedspu.as_ref(), cfg.batch_size)?;
        let full = cost_model(&arch, p, registry.get("fedmp").expect("builtin").as_ref(), cfg.batch_size)?;
        let ratio = ours.total_bytes as f64 / full.total_bytes as f64;
        records.push(if p < 1.0 {
            DiagnosticRecord::below(format!("memory_ratio_vs_full_training_p{p}"), ratio, 1.0)
        } else {
            DiagnosticRecord::at_most(format!("memory_ratio_vs_full_training_p{p}"), ratio, 1.0)
        });
        records.push(DiagnosticRecord::at_most(
            format!("forward_flops_excess_p{p}"),
            (ours.flops_forward as f64 - full_cost.flops_forward as f64).abs(),
            0.0,
        ));
    }

    let cell = Cell {
        method: "fedspu".into(),
        alpha: cfg.alpha.values()[0],
        seed,
    };
    let report = partition(cfg, &dataset, cell.alpha, seed)?;
    let ids_by_p: Vec<f64> = report.clients.iter().map(|c| c.p).collect();
    let mut fed = federation_config(cfg, &cell);
    fed.rounds = cfg.rounds.min(THEORY_ROUNDS);
    fed.early_stopping = false;
    fed.trace = true;
    let mut traces = TraceCollector::default();
    run_federation(&arch, fedspu, client_setups(&dataset, &report)?, &fed, Some(&mut traces))?;
    let mut theory = Vec::new();
    for &p in &ratios {
        let group: Vec<ConstantSample> =
            traces.samples.iter().filter(|s| ids_by_p[s.client_id as usize] == p).cloned().collect();
        match estimate_constants(&group, p, cfg.eta) {
            Ok(c) => {
                let bound = theorem1_bound(&c);
                let disc = 1.0 - c.q * c.l / (p * p);
                records.push(DiagnosticRecord {
                    name: format!("theorem1_discriminant_p{p}"),
                    value: disc,
                    threshold: 0.0,
                    pass: disc >= 0.0,
                });
                if let Bound::Applicable(t) = bound.eta_threshold {
                    records.push(DiagnosticRecord::below(format!("theorem1_eta_p{p}"), cfg.eta, t));
                }
                theory.push(TheoryReport {
                    p,
                    constants: Some(c),
                    bound: Some(bound),
                });
            }
            Err(TheoryError::TooFew { got, needed, .. }) => {
                records.push(DiagnosticRecord {
                    name: format!("theory_samples_p{p}"),
                    value: got as f64,
                    threshold: needed as f64,
                    pass: false,
                });
                theory.push(TheoryReport {
                    p,
                    constants: None,
                    bound: None,
                });
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(DiagnosticsOutput {
        records,
        lemma1,
        theory,
        costs,
    })
}

/// Write `diagnostics.jsonl` (one record per check) and `diagnostics.json`
/// (full details) under `out`.
pub fn write_diagnostics(out: &Path, d: &DiagnosticsOutput) -> Result<()> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let path = out.join("diagnostics.jsonl");
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    write_records(BufWriter::new(file), &d.records).map_err(io_err(&path))?;
    write_json(&out.join("diagnostics.json"), d)
}

pub fn write_partition(out: &Path, report: &PartitionReport) -> Result<()> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_json(&out.join("partition.json"), report)
}
