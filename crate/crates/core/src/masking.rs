//! Neuron activity masks and the parameter masks derived from them.
//!
//! Only hidden layers are ever masked; input and output neurons are always
//! active. A weight is active exactly when both neurons it connects are
//! active, a bias when its neuron is.

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{self, Architecture, Batch, Gradient, Model, NnError};
use crate::rng::Stream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("active ratio must lie in (0, 1], got {0}")]
    RatioOutOfRange(f64),
    #[error("top-k masks need importance scores")]
    MissingScores,
    #[error("importance scores were given to a {0:?} mask")]
    UnexpectedScores(MaskStrategy),
    #[error("gradient importance needs a probe batch")]
    MissingProbeBatch,
    #[error("invalid importance scores: {0}")]
    InvalidScores(String),
    #[error("mask does not match architecture: {0}")]
    ArchMismatch(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, MaskError>;

/// Number of active neurons in a hidden layer of `width` at ratio `p`:
/// `max(1, round(p * width))`, rounding halves up.
pub fn active_count(width: usize, p: f64) -> usize {
    // The epsilon keeps products like 0.5 * 5 that land a hair under .5 from
    // rounding down.
    let k = (p * width as f64 + 0.5 + 1e-9).floor() as usize;
    k.clamp(1, width)
}

fn check_ratio(p: f64) -> Result<()> {
    if p.is_finite() && p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(MaskError::RatioOutOfRange(p))
    }
}

/// Per-layer neuron activity.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronMask {
    arch: Architecture,
    layers: Vec<Vec<bool>>,
    ratio: f64,
}

impl NeuronMask {
    /// Every neuron active.
    pub fn full(arch: &Architecture) -> Self {
        Self {
            arch: arch.clone(),
            layers: arch.widths().iter().map(|&w| vec![true; w]).collect(),
            ratio: 1.0,
        }
    }

    /// Build from explicit active-index lists, one per neuron layer. The
    /// recorded ratio is the fraction of active hidden neurons.
    pub fn from_indices(arch: &Architecture, indices: &[Vec<usize>]) -> Result<Self> {
        if indices.len() != arch.neuron_layers() {
            return Err(MaskError::ArchMismatch(format!(
                "{} index lists for {} layers",
                indices.len(),
                arch.neuron_layers()
            )));
        }
        let mut mask = Self::full(arch);
        for (l, idx) in indices.iter().enumerate() {
            let width = arch.widths()[l];
            let mut bits = vec![false; width];
            for &i in idx {
                if i >= width {
                    return Err(MaskError::ArchMismatch(format!(
                        "neuron {i} outside layer {l} of width {width}"
                    )));
                }
                bits[i] = true;
            }
            mask.set_layer(l, bits)?;
        }
        mask.ratio = mask.hidden_fraction();
        Ok(mask)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    /// The active ratio this mask was sampled at.
    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn layer(&self, l: usize) -> &[bool] {
        &self.layers[l]
    }

    /// Replace the bits of neuron layer `l`. Boundary layers must stay fully
    /// active.
    pub fn set_layer(&mut self, l: usize, bits: Vec<bool>) -> Result<()> {
        let width = *self
            .arch
            .widths()
            .get(l)
            .ok_or_else(|| MaskError::ArchMismatch(format!("no layer {l}")))?;
        if bits.len() != width {
            return Err(MaskError::ArchMismatch(format!(
                "layer {l}: {} bits for width {width}",
                bits.len()
            )));
        }
        if !self.arch.is_hidden(l) && bits.iter().any(|b| !b) {
            return Err(MaskError::ArchMismatch(format!(
                "boundary layer {l} must be fully active"
            )));
        }
        self.layers[l] = bits;
        Ok(())
    }

    pub fn active_indices(&self, l: usize) -> Vec<usize> {
        self.layers[l]
            .iter()
            .enumerate()
            .filter_map(|(i, &on)| on.then_some(i))
            .collect()
    }

    pub fn active_in_layer(&self, l: usize) -> usize {
        self.layers[l].iter().filter(|&&b| b).count()
    }

    pub fn is_full(&self) -> bool {
        self.layers.iter().all(|l| l.iter().all(|&b| b))
    }

    fn hidden_fraction(&self) -> f64 {
        let (mut on, mut total) = (0usize, 0usize);
        for l in 1..self.arch.neuron_layers() - 1 {
            on += self.active_in_layer(l);
            total += self.layers[l].len();
        }
        on as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    /// Uniform sample without replacement.
    Random,
    /// Keep the lowest-index neurons, pruning right to left.
    Ordered,
    /// Keep the highest-scoring neurons.
    TopK,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceMetric {
    L1Weight,
    L2Weight,
    L2Gradient,
}

/// Per-neuron scores, indexed by neuron layer. Boundary layers hold no scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    pub metric: ImportanceMetric,
    pub layers: Vec<Vec<f64>>,
}

impl ImportanceScores {
    fn validate(&self, arch: &Architecture) -> Result<()> {
        if self.layers.len() != arch.neuron_layers() {
            return Err(MaskError::InvalidScores(format!(
                "{} score layers for {} neuron layers",
                self.layers.len(),
                arch.neuron_layers()
            )));
        }
        for l in 1..arch.neuron_layers() - 1 {
            let s = &self.layers[l];
            if s.len() != arch.widths()[l] {
                return Err(MaskError::InvalidScores(format!(
                    "layer {l}: {} scores for width {}",
                    s.len(),
                    arch.widths()[l]
                )));
            }
            if s.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(MaskError::InvalidScores(format!(
                    "layer {l} has a negative or non-finite score"
                )));
            }
        }
        Ok(())
    }
}

/// Sample the neuron mask of one client.
pub fn sample_neuron_mask(
    arch: &Architecture,
    p: f64,
    strategy: MaskStrategy,
    scores: Option<&ImportanceScores>,
    stream: &mut Stream,
) -> Result<NeuronMask> {
    check_ratio(p)?;
    match (strategy, scores) {
        (MaskStrategy::TopK, None) => return Err(MaskError::MissingScores),
        (MaskStrategy::TopK, Some(s)) => s.validate(arch)?,
        (other, Some(_)) => return Err(MaskError::UnexpectedScores(other)),
        (_, None) => {}
    }
    let mut mask = NeuronMask::full(arch);
    mask.ratio = p;
    for l in 1..arch.neuron_layers() - 1 {
        let width = arch.widths()[l];
        let k = active_count(width, p);
        let mut bits = vec![false; width];
        match strategy {
            MaskStrategy::Random => {
                for i in index::sample(stream, width, k) {
                    bits[i] = true;
                }
            }
            MaskStrategy::Ordered => bits[..k].fill(true),
            MaskStrategy::TopK => {
                let s = &scores.expect("checked above").layers[l];
                let mut order: Vec<usize> = (0..width).collect();
                // Descending score, lower index first on ties.
                order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
                for &i in &order[..k] {
                    bits[i] = true;
                }
            }
        }
        mask.layers[l] = bits;
    }
    Ok(mask)
}

fn neuron_norms(layers: &[crate::nn::LayerParams], arch: &Architecture, l1: bool) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); arch.neuron_layers()];
    for (l, scores) in out.iter_mut().enumerate() {
        if !arch.is_hidden(l) {
            continue;
        }
        let layer = &layers[l - 1];
        *scores = (0..layer.fan_out)
            .map(|i| {
                let row = &layer.weights[i * layer.fan_in..(i + 1) * layer.fan_in];
                let vals = row.iter().chain(std::iter::once(&layer.bias[i]));
                if l1 {
                    vals.map(|v| v.abs()).sum()
                } else {
                    vals.map(|v| v * v).sum::<f64>().sqrt()
                }
            })
            .collect();
    }
    out
}

/// Importance of every hidden neuron, measured over its incoming weight row
/// and bias.
pub fn neuron_importance(
    model: &Model,
    metric: ImportanceMetric,
    probe: Option<&Batch>,
) -> Result<ImportanceScores> {
    let layers = match metric {
        ImportanceMetric::L1Weight => neuron_norms(model.layers(), model.arch(), true),
        ImportanceMetric::L2Weight => neuron_norms(model.layers(), model.arch(), false),
        ImportanceMetric::L2Gradient => {
            let batch = probe.ok_or(MaskError::MissingProbeBatch)?;
            let (_, grad) = nn::loss_grad(model, batch)?;
            return Ok(gradient_importance(&grad));
        }
    };
    Ok(ImportanceScores { metric, layers })
}

/// Gradient-norm importance from an already computed gradient.
pub fn gradient_importance(grad: &Gradient) -> ImportanceScores {
    ImportanceScores {
        metric: ImportanceMetric::L2Gradient,
        layers: neuron_norms(grad.layers(), grad.arch(), false),
    }
}

/// Activity of one weight layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMask {
    /// Row-major `fan_out x fan_in`, like the weights.
    pub weights: Vec<bool>,
    pub bias: Vec<bool>,
}

/// Per-parameter activity derived from a neuron mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMask {
    arch: Architecture,
    layers: Vec<LayerMask>,
}

impl ParamMask {
    /// No parameter active.
    pub fn none(arch: &Architecture) -> Self {
        let layers = (1..arch.neuron_layers())
            .map(|l| {
                let (fan_in, fan_out) = arch.fans(l);
                LayerMask {
                    weights: vec![false; fan_in * fan_out],
                    bias: vec![false; fan_out],
                }
            })
            .collect();
        Self {
            arch: arch.clone(),
            layers,
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    /// Weight layer `l`, 1-based.
    pub fn layer(&self, l: usize) -> &LayerMask {
        &self.layers[l - 1]
    }

    /// Activity in canonical parameter order.
    pub fn values(&self) -> impl Iterator<Item = bool> + '_ {
        self.layers
            .iter()
            .flat_map(|m| m.weights.iter().chain(m.bias.iter()).copied())
    }

    pub fn active_count(&self) -> usize {
        self.values().filter(|&b| b).count()
    }
}

/// Apply the endpoint rule: weight `(i, j)` of layer `l` is active iff neuron
/// `j` of layer `l-1` and neuron `i` of layer `l` are both active.
pub fn derive_param_mask(nm: &NeuronMask, arch: &Architecture) -> Result<ParamMask> {
    if nm.arch() != arch {
        return Err(MaskError::ArchMismatch(format!(
            "mask for {:?}, architecture {:?}",
            nm.arch().widths(),
            arch.widths()
        )));
    }
    let mut pm = ParamMask::none(arch);
    for l in 1..arch.neuron_layers() {
        let (fan_in, _) = arch.fans(l);
        let inputs = nm.layer(l - 1);
        let outputs = nm.layer(l);
        let lm = &mut pm.layers[l - 1];
        for (i, &out_on) in outputs.iter().enumerate() {
            lm.bias[i] = out_on;
            if !out_on {
                continue;
            }
            for (j, &in_on) in inputs.iter().enumerate() {
                lm.weights[i * fan_in + j] = in_on;
            }
        }
    }
    Ok(pm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn arch(w: &[usize]) -> Architecture {
        Architecture::new(w.to_vec()).unwrap()
    }

    fn rs(seed: u64) -> Stream {
        stream(seed, Purpose::Mask, &[])
    }

    fn scores(a: &Architecture, hidden: Vec<f64>) -> ImportanceScores {
        let mut layers = vec![Vec::new(); a.neuron_layers()];
        layers[1] = hidden;
        ImportanceScores {
            metric: ImportanceMetric::L2Weight,
            layers,
        }
    }

    #[test]
    fn test_active_count_rounding() {
        assert_eq!(active_count(10, 0.4), 4);
        assert_eq!(active_count(10, 0.7), 7);
        assert_eq!(active_count(5, 0.5), 3);
        assert_eq!(active_count(5, 0.1), 1);
        assert_eq!(active_count(1, 0.01), 1);
        assert_eq!(active_count(8, 1.0), 8);
    }

    #[test]
    fn test_full_ratio_keeps_everything() {
        let a = arch(&[3, 10, 7, 2]);
        let s2 = ImportanceScores {
            metric: ImportanceMetric::L1Weight,
            layers: vec![vec![], vec![1.0; 10], vec![2.0; 7], vec![]],
        };
        for (strategy, sc) in [
            (MaskStrategy::Random, None),
            (MaskStrategy::Ordered, None),
            (MaskStrategy::TopK, Some(&s2)),
        ] {
            let m = sample_neuron_mask(&a, 1.0, strategy, sc, &mut rs(1)).unwrap();
            assert!(m.is_full(), "{strategy:?}");
        }
    }

    #[test]
    fn test_ordered_keeps_leftmost() {
        let a = arch(&[2, 10, 2]);
        let m = sample_neuron_mask(&a, 0.4, MaskStrategy::Ordered, None, &mut rs(0)).unwrap();
        assert_eq!(m.active_indices(1), vec![0, 1, 2, 3]);
    }

    #[test]
    fn test_top_k_picks_highest_scores() {
        let a = arch(&[2, 4, 2]);
        let s = scores(&a, vec![3.0, 1.0, 2.0, 5.0]);
        let m = sample_neuron_mask(&a, 0.5, MaskStrategy::TopK, Some(&s), &mut rs(0)).unwrap();
        assert_eq!(m.active_indices(1), vec![0, 3]);
        // ties go to the lower index
        let s = scores(&a, vec![1.0, 2.0, 2.0, 2.0]);
        let m = sample_neuron_mask(&a, 0.5, MaskStrategy::TopK, Some(&s), &mut rs(0)).unwrap();
        assert_eq!(m.active_indices(1), vec![1, 2]);
    }

    #[test]
    fn test_sampling_errors() {
        let a = arch(&[2, 4, 2]);
        for p in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(
                sample_neuron_mask(&a, p, MaskStrategy::Random, None, &mut rs(0)),
                Err(MaskError::RatioOutOfRange(_))
            ));
        }
        assert_eq!(
            sample_neuron_mask(&a, 0.5, MaskStrategy::TopK, None, &mut rs(0)),
            Err(MaskError::MissingScores)
        );
        let s = scores(&a, vec![1.0; 4]);
        assert!(matches!(
            sample_neuron_mask(&a, 0.5, MaskStrategy::Random, Some(&s), &mut rs(0)),
            Err(MaskError::UnexpectedScores(_))
        ));
    }

    #[test]
    fn test_random_is_deterministic_per_stream() {
        let a = arch(&[4, 50, 30, 3]);
        let m1 = sample_neuron_mask(&a, 0.3, MaskStrategy::Random, None, &mut rs(5)).unwrap();
        let m2 = sample_neuron_mask(&a, 0.3, MaskStrategy::Random, None, &mut rs(5)).unwrap();
        let m3 = sample_neuron_mask(&a, 0.3, MaskStrategy::Random, None, &mut rs(6)).unwrap();
        assert_eq!(m1, m2);
        assert_ne!(m1, m3);
        assert_eq!(m1.active_in_layer(1), 15);
        assert_eq!(m1.active_in_layer(2), 9);
        assert_eq!(m1.active_in_layer(0), 4);
        assert_eq!(m1.active_in_layer(3), 3);
    }

    #[test]
    fn test_importance_norms() {
        let a = arch(&[2, 1, 2]);
        let mut m = Model::zeros(&a);
        let s = neuron_importance(&m, ImportanceMetric::L1Weight, None).unwrap();
        assert_eq!(s.layers[1], vec![0.0]);
        m.layer_mut(1).weights = vec![3.0, -4.0];
        let s = neuron_importance(&m, ImportanceMetric::L2Weight, None).unwrap();
        assert_eq!(s.layers[1], vec![5.0]);
        m.layer_mut(1).bias = vec![1.0];
        let s = neuron_importance(&m, ImportanceMetric::L1Weight, None).unwrap();
        assert_eq!(s.layers[1], vec![8.0]);
        assert_eq!(
            neuron_importance(&m, ImportanceMetric::L2Gradient, None),
            Err(MaskError::MissingProbeBatch)
        );
    }

    #[test]
    fn test_gradient_importance_uses_probe() {
        let a = arch(&[2, 3, 2]);
        let m = crate::nn::init_model(&a, 3);
        let b = Batch::new(vec![1.0, 2.0, -1.0, 0.5], 2, vec![0, 1]).unwrap();
        let s = neuron_importance(&m, ImportanceMetric::L2Gradient, Some(&b)).unwrap();
        let (_, g) = nn::loss_grad(&m, &b).unwrap();
        for i in 0..3 {
            let l = g.layer(1);
            let expect = (l.weight(i, 0).powi(2) + l.weight(i, 1).powi(2) + l.bias[i].powi(2)).sqrt();
            assert_eq!(s.layers[1][i], expect);
        }
    }

    #[test]
    fn test_param_mask_full_and_single_frozen() {
        let a = arch(&[3, 4, 2]);
        let full = derive_param_mask(&NeuronMask::full(&a), &a).unwrap();
        assert_eq!(full.active_count(), a.param_count());

        let mut nm = NeuronMask::full(&a);
        nm.set_layer(1, vec![true, true, false, true]).unwrap();
        let pm = derive_param_mask(&nm, &a).unwrap();
        let l1 = pm.layer(1);
        for i in 0..4 {
            for j in 0..3 {
                assert_eq!(l1.weights[i * 3 + j], i != 2);
            }
            assert_eq!(l1.bias[i], i != 2);
        }
        let l2 = pm.layer(2);
        for o in 0..2 {
            for i in 0..4 {
                assert_eq!(l2.weights[o * 4 + i], i != 2);
            }
        }
        assert!(l2.bias.iter().all(|&b| b));
        assert_eq!(pm.active_count(), a.param_count() - (3 + 1 + 2));
    }

    #[test]
    fn test_boundary_layers_cannot_be_masked() {
        let a = arch(&[3, 4, 2]);
        let mut nm = NeuronMask::full(&a);
        assert!(nm.set_layer(0, vec![true, false, true]).is_err());
        assert!(nm.set_layer(2, vec![false, true]).is_err());
        assert!(NeuronMask::from_indices(&a, &[vec![0, 1], vec![0], vec![0, 1]]).is_err());
    }

    #[test]
    fn test_from_indices_roundtrip() {
        let a = arch(&[3, 6, 2]);
        let m = sample_neuron_mask(&a, 0.5, MaskStrategy::Random, None, &mut rs(2)).unwrap();
        let idx: Vec<Vec<usize>> = (0..3).map(|l| m.active_indices(l)).collect();
        let back = NeuronMask::from_indices(&a, &idx).unwrap();
        assert_eq!(back.layers, m.layers);
        assert_eq!(back.ratio(), 0.5);
    }

    #[test]
    fn test_derive_rejects_other_arch() {
        let nm = NeuronMask::full(&arch(&[3, 4, 2]));
        assert!(derive_param_mask(&nm, &arch(&[3, 5, 2])).is_err());
    }
}
