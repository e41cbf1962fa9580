//! Federated training methods, registered by name.
//!
//! Every method answers three questions: how the server picks a client's
//! active neurons, how the client holds and trains its model, and what its
//! training footprint looks like for cost accounting. The simulator only talks
//! to methods through [`FederatedMethod`], so adding a variant means writing
//! one impl and registering it.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::masking::{
    neuron_importance, sample_neuron_mask, ImportanceMetric, ImportanceScores, MaskError,
    MaskStrategy, NeuronMask,
};
use crate::nn::Model;
use crate::rng::Stream;

/// How a client holds its model between rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalTraining {
    /// The client keeps the full model; inactive neurons are frozen but still
    /// take part in the forward pass.
    FrozenFullModel,
    /// The client's model is the dispatched sub-model; inactive neurons are
    /// removed.
    SubModel,
}

/// Which parts of the network occupy memory and compute during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostScope {
    /// Full weights and activations, gradients for active parameters only.
    FrozenFull,
    /// Everything scaled to the sub-model.
    SubModel,
    /// Everything full size (importance evaluation trains the full model).
    FullTraining,
}

/// Inputs to server-side mask selection for one client.
pub struct MaskRequest<'a> {
    pub global: &'a Model,
    pub p: f64,
    /// Gradient scores the client reported at its previous participation.
    pub probe: Option<&'a ImportanceScores>,
    pub stream: &'a mut Stream,
}

pub trait FederatedMethod: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn local_training(&self) -> LocalTraining;

    fn cost_scope(&self) -> CostScope;

    fn select_mask(&self, req: MaskRequest<'_>) -> Result<NeuronMask, MaskError>;

    /// Whether clients should report gradient importance after each round.
    fn wants_gradient_probe(&self) -> bool {
        false
    }
}

/// Random neuron freezing: masks drawn uniformly, full local models kept.
#[derive(Debug, Default)]
pub struct FedSpu;

impl FederatedMethod for FedSpu {
    fn name(&self) -> &'static str {
        "fedspu"
    }

    fn local_training(&self) -> LocalTraining {
        LocalTraining::FrozenFullModel
    }

    fn cost_scope(&self) -> CostScope {
        CostScope::FrozenFull
    }

    fn select_mask(&self, req: MaskRequest<'_>) -> Result<NeuronMask, MaskError> {
        sample_neuron_mask(req.global.arch(), req.p, MaskStrategy::Random, None, req.stream)
    }
}

/// Random dropout: uniformly sampled sub-models.
#[derive(Debug, Default)]
pub struct RandomDropout;

impl FederatedMethod for RandomDropout {
    fn name(&self) -> &'static str {
        "random_dropout"
    }

    fn local_training(&self) -> LocalTraining {
        LocalTraining::SubModel
    }

    fn cost_scope(&self) -> CostScope {
        CostScope::SubModel
    }

    fn select_mask(&self, req: MaskRequest<'_>) -> Result<NeuronMask, MaskError> {
        sample_neuron_mask(req.global.arch(), req.p, MaskStrategy::Random, None, req.stream)
    }
}

/// Ordered dropout: the rightmost neurons are pruned first.
#[derive(Debug, Default)]
pub struct Fjord;

impl FederatedMethod for Fjord {
    fn name(&self) -> &'static str {
        "fjord"
    }

    fn local_training(&self) -> LocalTraining {
        LocalTraining::SubModel
    }

    fn cost_scope(&self) -> CostScope {
        CostScope::SubModel
    }

    fn select_mask(&self, req: MaskRequest<'_>) -> Result<NeuronMask, MaskError> {
        sample_neuron_mask(req.global.arch(), req.p, MaskStrategy::Ordered, None, req.stream)
    }
}

/// Importance-based dropout: the `1 - p` least important neurons per layer are
/// pruned. Weight-norm scores come from the current global model; gradient
/// scores come from the client's last probe, falling back to a random mask
/// until one exists.
#[derive(Debug)]
pub struct ImportanceDropout {
    name: &'static str,
    metric: ImportanceMetric,
}

impl ImportanceDropout {
    pub fn fedmp() -> Self {
        Self {
            name: "fedmp",
            metric: ImportanceMetric::L1Weight,
        }
    }

    pub fn hermes() -> Self {
        Self {
            name: "hermes",
            metric: ImportanceMetric::L2Weight,
        }
    }

    pub fn prunefl() -> Self {
        Self {
            name: "prunefl",
            metric: ImportanceMetric::L2Gradient,
        }
    }

    pub fn metric(&self) -> ImportanceMetric {
        self.metric
    }
}

impl FederatedMethod for ImportanceDropout {
    fn name(&self) -> &'static str {
        self.name
    }

    fn local_training(&self) -> LocalTraining {
        LocalTraining::SubModel
    }

    fn cost_scope(&self) -> CostScope {
        CostScope::FullTraining
    }

    fn select_mask(&self, req: MaskRequest<'_>) -> Result<NeuronMask, MaskError> {
        let arch = req.global.arch();
        match self.metric {
            ImportanceMetric::L2Gradient => match req.probe {
                Some(scores) => {
                    sample_neuron_mask(arch, req.p, MaskStrategy::TopK, Some(scores), req.stream)
                }
                None => sample_neuron_mask(arch, req.p, MaskStrategy::Random, None, req.stream),
            },
            metric => {
                let scores = neuron_importance(req.global, metric, None)?;
                sample_neuron_mask(arch, req.p, MaskStrategy::TopK, Some(&scores), req.stream)
            }
        }
    }

    fn wants_gradient_probe(&self) -> bool {
        self.metric == ImportanceMetric::L2Gradient
    }
}

/// Name-indexed collection of methods.
#[derive(Debug, Clone, Default)]
pub struct MethodRegistry {
    methods: BTreeMap<&'static str, Arc<dyn FederatedMethod>>,
}

impl MethodRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// The six built-in methods.
    pub fn builtin() -> Self {
        let mut reg = Self::new();
        reg.register(Arc::new(FedSpu));
        reg.register(Arc::new(RandomDropout));
        reg.register(Arc::new(Fjord));
        reg.register(Arc::new(ImportanceDropout::fedmp()));
        reg.register(Arc::new(ImportanceDropout::hermes()));
        reg.register(Arc::new(ImportanceDropout::prunefl()));
        reg
    }

    /// Register a method, replacing any previous one of the same name.
    pub fn register(&mut self, method: Arc<dyn FederatedMethod>) {
        self.methods.insert(method.name(), method);
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn FederatedMethod>> {
        self.methods.get(name).cloned()
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.methods.keys().copied()
    }
}

/// Look a method up in the built-in registry.
pub fn lookup(name: &str) -> Option<Arc<dyn FederatedMethod>> {
    MethodRegistry::builtin().get(name)
}

pub const BASELINES: [&str; 5] = ["random_dropout", "fjord", "fedmp", "hermes", "prunefl"];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_model, Architecture};
    use crate::rng::{stream, Purpose};

    #[test]
    fn test_builtin_names() {
        let names: Vec<_> = MethodRegistry::builtin().names().collect();
        assert_eq!(
            names,
            vec!["fedmp", "fedspu", "fjord", "hermes", "prunefl", "random_dropout"]
        );
        assert!(lookup("fedselect").is_none());
        for b in BASELINES {
            assert!(lookup(b).is_some());
        }
    }

    #[test]
    fn test_register_custom_method() {
        #[derive(Debug)]
        struct AlwaysFull;
        impl FederatedMethod for AlwaysFull {
            fn name(&self) -> &'static str {
                "always_full"
            }
            fn local_training(&self) -> LocalTraining {
                LocalTraining::FrozenFullModel
            }
            fn cost_scope(&self) -> CostScope {
                CostScope::FullTraining
            }
            fn select_mask(&self, req: MaskRequest<'_>) -> Result<NeuronMask, MaskError> {
                Ok(NeuronMask::full(req.global.arch()))
            }
        }
        let mut reg = MethodRegistry::builtin();
        reg.register(Arc::new(AlwaysFull));
        assert_eq!(reg.get("always_full").unwrap().name(), "always_full");
    }

    #[test]
    fn test_weight_importance_methods_prune_small_rows() {
        let arch = Architecture::new(vec![2, 4, 2]).unwrap();
        let mut global = init_model(&arch, 1);
        global.layer_mut(1).weights = vec![1.0, 1.0, 0.1, 0.1, 3.0, -3.0, 0.0, 0.5];
        for m in [ImportanceDropout::fedmp(), ImportanceDropout::hermes()] {
            let mut s = stream(0, Purpose::Mask, &[]);
            let nm = m
                .select_mask(MaskRequest {
                    global: &global,
                    p: 0.5,
                    probe: None,
                    stream: &mut s,
                })
                .unwrap();
            assert_eq!(nm.active_indices(1), vec![0, 2], "{}", m.name());
        }
    }

    #[test]
    fn test_prunefl_uses_probe_when_available() {
        let arch = Architecture::new(vec![2, 4, 2]).unwrap();
        let global = init_model(&arch, 1);
        let probe = ImportanceScores {
            metric: ImportanceMetric::L2Gradient,
            layers: vec![vec![], vec![0.0, 9.0, 0.0, 8.0], vec![]],
        };
        let m = ImportanceDropout::prunefl();
        assert!(m.wants_gradient_probe());
        let mut s = stream(0, Purpose::Mask, &[]);
        let nm = m
            .select_mask(MaskRequest {
                global: &global,
                p: 0.5,
                probe: Some(&probe),
                stream: &mut s,
            })
            .unwrap();
        assert_eq!(nm.active_indices(1), vec![1, 3]);
        // first participation: random fallback still honours the cardinality
        let nm = m
            .select_mask(MaskRequest {
                global: &global,
                p: 0.5,
                probe: None,
                stream: &mut s,
            })
            .unwrap();
        assert_eq!(nm.active_in_layer(1), 2);
    }
}
