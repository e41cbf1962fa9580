//! Numerical checks of the convergence analysis: the masked-gradient
//! identities, empirical smoothness and divergence constants, and the
//! critical-point bound they imply.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masking::{derive_param_mask, sample_neuron_mask, MaskError, MaskStrategy, ParamMask};
use crate::nn::{self, Architecture, Batch, Model, NnError};
use crate::rng::{self, Purpose};

pub const MIN_LEMMA1_TRIALS: usize = 10_000;
pub const MIN_CONSTANT_SAMPLES: usize = 10;
/// Parameters probed by [`finite_diff_check`] on models with more active
/// entries than this.
pub const FD_SUBSET: usize = 200;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("need at least {needed} {what}, got {got}")]
    TooFew {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    InvalidStep(f64),
    #[error("samples disagree on parameter count")]
    ShapeMismatch,
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, TheoryError>;

/// `|<g, g_masked> - |g_masked|^2| / max(1, |g_masked|^2)` at `model`.
pub fn check_lemma2(model: &Model, batch: &Batch, mask: &ParamMask) -> Result<f64> {
    let (_, full) = nn::loss_grad(model, batch)?;
    let mut masked = full.clone();
    masked.apply_mask(mask)?;
    let sq = masked.norm_sq();
    Ok((full.dot(&masked) - sq).abs() / sq.max(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub p: f64,
    pub trials: usize,
    /// Monte-Carlo energy ratio over weights joining two hidden layers.
    /// `None` when the network has a single hidden layer.
    pub inter_hidden_ratio: Option<f64>,
    /// Exact expectation of `inter_hidden_ratio` under the cardinality rule.
    pub inter_hidden_expected: Option<f64>,
    /// Monte-Carlo energy ratio over all parameters.
    pub full_ratio: f64,
    /// Closed form `sum g^2 P(active) / |g|^2` with boundary neurons always on.
    pub full_expected: f64,
    /// `p^2`.
    pub ideal: f64,
}

/// Probability that each parameter is active, in canonical order.
fn activity_probabilities(arch: &Architecture, p: f64) -> Vec<f64> {
    let q: Vec<f64> = (0..arch.neuron_layers())
        .map(|l| {
            if arch.is_hidden(l) {
                crate::masking::active_count(arch.widths()[l], p) as f64 / arch.widths()[l] as f64
            } else {
                1.0
            }
        })
        .collect();
    let mut out = Vec::with_capacity(arch.param_count());
    for l in 1..arch.neuron_layers() {
        let (fan_in, fan_out) = arch.fans(l);
        out.extend(std::iter::repeat_n(q[l - 1] * q[l], fan_in * fan_out));
        out.extend(std::iter::repeat_n(q[l], fan_out));
    }
    out
}

/// Indicator of weights whose endpoints are both hidden neurons.
fn inter_hidden_weights(arch: &Architecture) -> Vec<bool> {
    let mut out = Vec::with_capacity(arch.param_count());
    for l in 1..arch.neuron_layers() {
        let (fan_in, fan_out) = arch.fans(l);
        let inner = arch.is_hidden(l - 1) && arch.is_hidden(l);
        out.extend(std::iter::repeat_n(inner, fan_in * fan_out));
        out.extend(std::iter::repeat_n(false, fan_out));
    }
    out
}

/// Monte-Carlo estimate of `E|g_masked|^2 / |g|^2` under random neuron masks
/// at ratio `p`, with `g` the full gradient at `model`.
pub fn mc_check_lemma1(model: &Model, batch: &Batch, p: f64, trials: usize, seed: u64) -> Result<Lemma1Report> {
    if trials < MIN_LEMMA1_TRIALS {
        return Err(TheoryError::TooFew {
            what: "trials",
            needed: MIN_LEMMA1_TRIALS,
            got: trials,
        });
    }
    let arch = model.arch();
    let (_, grad) = nn::loss_grad(model, batch)?;
    let g2: Vec<f64> = grad.values().map(|g| g * g).collect();
    let inner = inter_hidden_weights(arch);
    let total: f64 = g2.iter().sum();
    let inner_total: f64 = g2.iter().zip(&inner).filter(|(_, &b)| b).map(|(v, _)| v).sum();

    // Each trial draws its own mask stream, so the estimate does not depend on
    // how trials are spread across threads.
    let (full_sum, inner_sum) = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<(f64, f64)> {
            let mut s = rng::stream(seed, Purpose::Diagnostics, &[t as u64]);
            let nm = sample_neuron_mask(arch, p, MaskStrategy::Random, None, &mut s)?;
            let pm = derive_param_mask(&nm, arch)?;
            let (mut full, mut inn) = (0.0, 0.0);
            for ((v, on), &ih) in g2.iter().zip(pm.values()).zip(&inner) {
                if on {
                    full += v;
                    if ih {
                        inn += v;
                    }
                }
            }
            Ok((full, inn))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold((0.0, 0.0), |(a, b), (c, d)| (a + c, b + d));

    let probs = activity_probabilities(arch, p);
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 1.0 };
    let has_inner = inner.iter().any(|&b| b);
    let inner_expected = g2
        .iter()
        .zip(&probs)
        .zip(&inner)
        .filter(|(_, &b)| b)
        .map(|((v, q), _)| v * q)
        .sum::<f64>();
    let full_expected = g2.iter().zip(&probs).map(|(v, q)| v * q).sum::<f64>();
    let n = trials as f64;
    Ok(Lemma1Report {
        p,
        trials,
        inter_hidden_ratio: has_inner.then(|| ratio(inner_sum / n, inner_total)),
        inter_hidden_expected: has_inner.then(|| ratio(inner_expected, inner_total)),
        full_ratio: ratio(full_sum / n, total),
        full_expected: ratio(full_expected, total),
        ideal: p * p,
    })
}

/// One observation of a client around a merge: its local model `w`, the
/// merged model `w_hat`, and the full local gradients at both.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantSample {
    pub client_id: u32,
    pub local: Vec<f64>,
    pub merged: Vec<f64>,
    pub grad_local: Vec<f64>,
    pub grad_merged: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryConstants {
    pub q: f64,
    pub sigma2: f64,
    /// Largest observed gradient Lipschitz quotient; a lower estimate.
    pub l: f64,
    pub p: f64,
    pub eta: f64,
    pub samples: usize,
    pub pairs: usize,
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// Empirical maxima over `samples`. `Q` is floored at 1. `L` pairs every two
/// distinct points of the same client, since each client has its own
/// objective.
pub fn estimate_constants(samples: &[ConstantSample], p: f64, eta: f64) -> Result<TheoryConstants> {
    if samples.len() < MIN_CONSTANT_SAMPLES {
        return Err(TheoryError::TooFew {
            what: "samples",
            needed: MIN_CONSTANT_SAMPLES,
            got: samples.len(),
        });
    }
    let dim = samples[0].local.len();
    if samples.iter().any(|s| {
        s.local.len() != dim || s.merged.len() != dim || s.grad_local.len() != dim || s.grad_merged.len() != dim
    }) {
        return Err(TheoryError::ShapeMismatch);
    }
    let mut q: f64 = 1.0;
    let mut sigma2: f64 = 0.0;
    for s in samples {
        let den = norm_sq(&s.grad_merged);
        if den > 0.0 {
            q = q.max(norm_sq(&s.grad_local) / den);
        }
        sigma2 = sigma2.max(dist_sq(&s.merged, &s.local));
    }
    let mut points: Vec<(u32, &[f64], &[f64])> = Vec::with_capacity(2 * samples.len());
    for s in samples {
        points.push((s.client_id, &s.local, &s.grad_local));
        points.push((s.client_id, &s.merged, &s.grad_merged));
    }
    let (mut l, mut pairs): (f64, usize) = (0.0, 0);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            if points[i].0 != points[j].0 {
                continue;
            }
            let dx = dist_sq(points[i].1, points[j].1);
            if dx == 0.0 {
                continue;
            }
            l = l.max((dist_sq(points[i].2, points[j].2) / dx).sqrt());
            pairs += 1;
        }
    }
    Ok(TheoryConstants {
        q,
        sigma2,
        l,
        p,
        eta,
        samples: samples.len(),
        pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "detail")]
pub enum Bound {
    Applicable(f64),
    Inapplicable(String),
}

impl Bound {
    pub fn value(&self) -> Option<f64> {
        match self {
            Bound::Applicable(v) => Some(*v),
            Bound::Inapplicable(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Bound {
    pub epsilon: Bound,
    pub eta_threshold: Bound,
}

/// `eta < (1 + sqrt(1 - QL/p^2)) / L` and
/// `epsilon = sqrt((L+1) Q sigma^2 / ((2 eta - L eta^2) p^2 + Q))`.
pub fn theorem1_bound(c: &TheoryConstants) -> Theorem1Bound {
    let (q, l, p, eta) = (c.q, c.l, c.p, c.eta);
    let p2 = p * p;
    let eta_threshold = if l <= 0.0 {
        Bound::Inapplicable("L > 0".into())
    } else {
        let disc = 1.0 - q * l / p2;
        if disc < 0.0 {
            Bound::Inapplicable(format!("1 - QL/p^2 >= 0 (is {disc})"))
        } else {
            Bound::Applicable((1.0 + disc.sqrt()) / l)
        }
    };
    let step = 2.0 * eta - l * eta * eta;
    let epsilon = if step <= 0.0 {
        Bound::Inapplicable(format!("2*eta - L*eta^2 > 0 (is {step})"))
    } else {
        Bound::Applicable(((l + 1.0) * q * c.sigma2 / (step * p2 + q)).sqrt())
    };
    Theorem1Bound { epsilon, eta_threshold }
}

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait DifferentiableObjective {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
}

/// Mean cross-entropy of a network on a fixed batch.
pub struct ModelObjective<'a> {
    pub template: &'a Model,
    pub batch: &'a Batch,
}

impl ModelObjective<'_> {
    fn model_at(&self, x: &[f64]) -> Model {
        let mut m = self.template.clone();
        m.set_flat(x).expect("dimension checked by caller");
        m
    }
}

impl DifferentiableObjective for ModelObjective<'_> {
    fn dim(&self) -> usize {
        self.template.arch().param_count()
    }

    fn value(&self, x: &[f64]) -> f64 {
        nn::forward(&self.model_at(x), self.batch).map(|f| f.loss).unwrap_or(f64::NAN)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        nn::loss_grad(&self.model_at(x), self.batch)
            .map(|(_, g)| g.flatten())
            .unwrap_or_else(|_| vec![f64::NAN; x.len()])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    pub probed: usize,
}

/// Relative error `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare `analytic` against central differences of `obj` at `x` over the
/// coordinates in `probe`.
pub fn finite_diff_objective(
    obj: &dyn DifferentiableObjective,
    x: &[f64],
    analytic: &[f64],
    probe: &[usize],
    step: f64,
) -> Result<FiniteDiffReport> {
    if !(1e-7..=1e-3).contains(&step) {
        return Err(TheoryError::InvalidStep(step));
    }
    if x.len() != obj.dim() || analytic.len() != obj.dim() {
        return Err(TheoryError::ShapeMismatch);
    }
    let mut xp = x.to_vec();
    let mut max_rel_error: f64 = 0.0;
    for &i in probe {
        xp[i] = x[i] + step;
        let up = obj.value(&xp);
        xp[i] = x[i] - step;
        let down = obj.value(&xp);
        xp[i] = x[i];
        let numeric = (up - down) / (2.0 * step);
        max_rel_error = max_rel_error.max(relative_error(analytic[i], numeric));
    }
    Ok(FiniteDiffReport {
        max_rel_error,
        probed: probe.len(),
    })
}

/// Check masked gradients against central differences of the full-model loss.
/// Every active parameter is probed, or a random subset of [`FD_SUBSET`] when
/// there are more. Frozen entries are never probed.
pub fn finite_diff_check(model: &Model, batch: &Batch, mask: &ParamMask, step: f64, seed: u64) -> Result<FiniteDiffReport> {
    let (_, grad) = nn::masked_loss_grad(model, batch, mask)?;
    let mut active: Vec<usize> = mask.values().enumerate().filter(|(_, on)| *on).map(|(i, _)| i).collect();
    if active.len() > FD_SUBSET {
        let mut s = rng::stream(seed, Purpose::Diagnostics, &[u64::MAX]);
        let mut picked: Vec<usize> = sample(&mut s, active.len(), FD_SUBSET).into_vec();
        picked.sort_unstable();
        active = picked.into_iter().map(|i| active[i]).collect();
    }
    let obj = ModelObjective { template: model, batch };
    finite_diff_objective(&obj, &model.flatten(), &grad.flatten(), &active, step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::NeuronMask;
    use crate::nn::init_model;
    use crate::rng::stream;
    use rand::Rng;

    fn batch(n: usize, width: usize, classes: usize, seed: u64) -> Batch {
        let mut s = stream(seed, Purpose::Synthetic, &[]);
        let inputs = (0..n * width).map(|_| s.random_range(-1.0..1.0)).collect();
        let labels = (0..n).map(|_| s.random_range(0..classes)).collect();
        Batch::new(inputs, width, labels).unwrap()
    }

    fn random_pmask(arch: &Architecture, p: f64, seed: u64) -> ParamMask {
        let nm = sample_neuron_mask(arch, p, MaskStrategy::Random, None, &mut stream(seed, Purpose::Mask, &[])).unwrap();
        derive_param_mask(&nm, arch).unwrap()
    }

    #[test]
    fn test_lemma2_full_and_empty_masks() {
        let arch = Architecture::new(vec![4, 6, 3]).unwrap();
        let m = init_model(&arch, 1);
        let b = batch(5, 4, 3, 2);
        let full = derive_param_mask(&NeuronMask::full(&arch), &arch).unwrap();
        assert_eq!(check_lemma2(&m, &b, &full).unwrap(), 0.0);
        assert_eq!(check_lemma2(&m, &b, &ParamMask::none(&arch)).unwrap(), 0.0);
        assert!(check_lemma2(&m, &b, &random_pmask(&arch, 0.5, 3)).unwrap() <= 1e-12);
    }

    #[test]
    fn test_lemma1_full_ratio_is_one() {
        let arch = Architecture::new(vec![3, 5, 5, 2]).unwrap();
        let r = mc_check_lemma1(&init_model(&arch, 1), &batch(4, 3, 2, 1), 1.0, MIN_LEMMA1_TRIALS, 0).unwrap();
        assert!((r.full_ratio - 1.0).abs() < 1e-12);
        assert!((r.inter_hidden_ratio.unwrap() - 1.0).abs() < 1e-12);
        assert!((r.full_expected - 1.0).abs() < 1e-12);
    }

    #[test]
    fn test_lemma1_requires_trials() {
        let arch = Architecture::new(vec![3, 5, 2]).unwrap();
        assert!(matches!(
            mc_check_lemma1(&init_model(&arch, 1), &batch(4, 3, 2, 1), 0.5, 100, 0),
            Err(TheoryError::TooFew { .. })
        ));
    }

    #[test]
    fn test_lemma1_single_hidden_layer_has_no_inner_block() {
        let arch = Architecture::new(vec![3, 10, 2]).unwrap();
        let r = mc_check_lemma1(&init_model(&arch, 1), &batch(4, 3, 2, 1), 0.5, MIN_LEMMA1_TRIALS, 0).unwrap();
        assert_eq!(r.inter_hidden_ratio, None);
        // Everything but the output biases touches the hidden layer once.
        let m = init_model(&arch, 1);
        let (_, g) = nn::loss_grad(&m, &batch(4, 3, 2, 1)).unwrap();
        let out_bias: f64 = g.layer(2).bias.iter().map(|v| v * v).sum();
        let expect = 0.5 + 0.5 * out_bias / g.norm_sq();
        assert!((r.full_expected - expect).abs() < 1e-12);
        assert!((r.full_ratio - expect).abs() / expect < 0.02);
    }

    #[test]
    fn test_activity_probabilities_by_position() {
        let arch = Architecture::new(vec![2, 4, 5, 1]).unwrap();
        let probs = activity_probabilities(&arch, 0.5);
        // layer 1: 8 weights and 4 biases at q = 2/4; layer 2: 20 weights at
        // (2/4)(3/5) and 5 biases at 3/5; layer 3: 5 weights at 3/5, one bias at 1.
        let mut expect = vec![0.5; 12];
        expect.extend(vec![0.3; 20]);
        expect.extend(vec![0.6; 5]);
        expect.extend(vec![0.6; 5]);
        expect.push(1.0);
        assert_eq!(probs.len(), expect.len());
        for (a, b) in probs.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    fn sample_at(client_id: u32, w: Vec<f64>, w_hat: Vec<f64>, grad: impl Fn(&[f64]) -> Vec<f64>) -> ConstantSample {
        ConstantSample {
            client_id,
            grad_local: grad(&w),
            grad_merged: grad(&w_hat),
            local: w,
            merged: w_hat,
        }
    }

    #[test]
    fn test_constants_trivial_cases() {
        let grad = |x: &[f64]| x.iter().map(|v| 2.0 * v).collect::<Vec<_>>();
        let same: Vec<_> = (0..10).map(|i| sample_at(0, vec![i as f64, 1.0], vec![i as f64, 1.0], grad)).collect();
        let c = estimate_constants(&same, 1.0, 0.1).unwrap();
        assert_eq!(c.sigma2, 0.0);
        assert_eq!(c.q, 1.0);
        assert!((c.l - 2.0).abs() < 1e-12);
        assert!(estimate_constants(&same[..9], 1.0, 0.1).is_err());
    }

    #[test]
    fn test_constants_quadratic_oracle() {
        // f(x) = 1/2 x^T H x with H = diag(4, 1, 0.5): gradient Lipschitz
        // constant is the largest eigenvalue, 4.
        let h = [4.0, 1.0, 0.5];
        let grad = move |x: &[f64]| x.iter().zip(h).map(|(v, e)| v * e).collect::<Vec<_>>();
        let mut s = stream(5, Purpose::Diagnostics, &[]);
        let samples: Vec<_> = (0..30)
            .map(|_| {
                let w: Vec<f64> = (0..3).map(|_| s.random_range(-1.0..1.0)).collect();
                let w_hat: Vec<f64> = (0..3).map(|_| s.random_range(-1.0..1.0)).collect();
                sample_at(0, w, w_hat, grad)
            })
            .collect();
        let c = estimate_constants(&samples, 0.5, 0.1).unwrap();
        assert!(c.l <= 4.0 + 1e-12);
        assert!((c.l - 4.0).abs() / 4.0 < 0.05, "L = {}", c.l);
        assert_eq!(c.pairs, 60 * 59 / 2);
        let expect_sigma2 = samples.iter().map(|x| dist_sq(&x.local, &x.merged)).fold(0.0, f64::max);
        assert_eq!(c.sigma2, expect_sigma2);
    }

    #[test]
    fn test_constants_pair_within_client() {
        let grad = |x: &[f64]| x.to_vec();
        let samples: Vec<_> = (0..10).map(|i| sample_at(i, vec![i as f64], vec![i as f64 + 1.0], grad)).collect();
        let c = estimate_constants(&samples, 1.0, 0.1).unwrap();
        assert_eq!(c.pairs, 10);
    }

    fn constants(q: f64, l: f64, p: f64, eta: f64, sigma2: f64) -> TheoryConstants {
        TheoryConstants {
            q,
            sigma2,
            l,
            p,
            eta,
            samples: 10,
            pairs: 0,
        }
    }

    #[test]
    fn test_theorem1_plug_in() {
        let b = theorem1_bound(&constants(1.0, 0.5, 1.0, 1.0, 2.0));
        let threshold = b.eta_threshold.value().unwrap();
        assert!((threshold - (2.0 + 2f64.sqrt())).abs() < 1e-12);
        // (L+1) Q sigma^2 = 3; (2 - 0.5) * 1 + 1 = 2.5
        assert!((b.epsilon.value().unwrap() - (3.0f64 / 2.5).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn test_theorem1_zero_divergence_and_inapplicable() {
        assert_eq!(theorem1_bound(&constants(1.0, 0.5, 1.0, 1.0, 0.0)).epsilon, Bound::Applicable(0.0));
        let b = theorem1_bound(&constants(2.0, 1.0, 0.5, 0.1, 1.0));
        assert!(matches!(b.eta_threshold, Bound::Inapplicable(ref s) if s.contains("QL/p^2")));
        let b = theorem1_bound(&constants(1.0, 1.0, 1.0, 2.0, 1.0));
        assert!(matches!(b.epsilon, Bound::Inapplicable(ref s) if s.contains("eta")));
    }

    #[test]
    fn test_theorem1_epsilon_non_increasing_in_p() {
        let mut last = f64::INFINITY;
        for p in [0.2, 0.4, 0.6, 0.8, 1.0] {
            let e = theorem1_bound(&constants(1.5, 0.8, p, 0.5, 0.3)).epsilon.value().unwrap();
            assert!(e <= last);
            last = e;
        }
    }

    struct LinearSquared {
        inputs: Vec<[f64; 2]>,
        targets: Vec<f64>,
    }

    impl DifferentiableObjective for LinearSquared {
        fn dim(&self) -> usize {
            2
        }
        fn value(&self, x: &[f64]) -> f64 {
            self.inputs
                .iter()
                .zip(&self.targets)
                .map(|(a, t)| (a[0] * x[0] + a[1] * x[1] - t).powi(2))
                .sum::<f64>()
                / self.inputs.len() as f64
        }
        fn gradient(&self, x: &[f64]) -> Vec<f64> {
            let mut g = [0.0; 2];
            for (a, t) in self.inputs.iter().zip(&self.targets) {
                let r = a[0] * x[0] + a[1] * x[1] - t;
                g[0] += 2.0 * r * a[0];
                g[1] += 2.0 * r * a[1];
            }
            g.iter().map(|v| v / self.inputs.len() as f64).collect()
        }
    }

    #[test]
    fn test_finite_diff_exact_on_quadratic() {
        let obj = LinearSquared {
            inputs: vec![[1.0, 2.0], [-0.5, 0.3], [0.7, -1.1]],
            targets: vec![0.5, -1.0, 2.0],
        };
        let x = [0.3, -0.2];
        let r = finite_diff_objective(&obj, &x, &obj.gradient(&x), &[0, 1], 1e-4).unwrap();
        assert!(r.max_rel_error <= 1e-9, "{}", r.max_rel_error);
        assert!(finite_diff_objective(&obj, &x, &obj.gradient(&x), &[0], 1e-2).is_err());
    }

    #[test]
    fn test_finite_diff_relu_net() {
        let arch = Architecture::new(vec![4, 7, 5, 3]).unwrap();
        let m = init_model(&arch, 11);
        let b = batch(6, 4, 3, 12);
        let pm = random_pmask(&arch, 0.6, 13);
        let r = finite_diff_check(&m, &b, &pm, 1e-5, 0).unwrap();
        assert_eq!(r.probed, pm.active_count());
        assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
    }

    #[test]
    fn test_finite_diff_subsets_large_models() {
        let arch = Architecture::new(vec![20, 30, 4]).unwrap();
        let m = init_model(&arch, 1);
        let pm = random_pmask(&arch, 1.0, 0);
        let r = finite_diff_check(&m, &batch(3, 20, 4, 1), &pm, 1e-5, 0).unwrap();
        assert_eq!(r.probed, FD_SUBSET);
    }
}
