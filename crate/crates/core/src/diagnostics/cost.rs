//! Memory and FLOP accounting.
//!
//! Memory is the sum of weights, gradients and activations held during
//! training, at 4 bytes per value. A dense layer costs `2 * out * in` FLOPs
//! per sample forward and twice that backward.

use serde::{Deserialize, Serialize};

use crate::masking::{active_count, MaskError};
use crate::method::{CostScope, FederatedMethod};
use crate::nn::Architecture;

pub const BYTES_PER_VALUE: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub method: String,
    pub p: f64,
    pub batch_size: usize,
    pub weights_bytes: u64,
    pub grad_bytes: u64,
    pub activation_bytes: u64,
    pub total_bytes: u64,
    /// Per sample.
    pub flops_forward: u64,
    /// Per sample.
    pub flops_backward: u64,
}

/// Neuron counts per layer at ratio `p`, boundary layers kept whole.
pub fn active_widths(arch: &Architecture, p: f64) -> Vec<usize> {
    arch.widths()
        .iter()
        .enumerate()
        .map(|(l, &w)| if arch.is_hidden(l) { active_count(w, p) } else { w })
        .collect()
}

/// Parameters spanned by neuron counts `widths`.
pub fn param_count(widths: &[usize]) -> u64 {
    widths.windows(2).map(|w| (w[1] * w[0] + w[1]) as u64).sum()
}

fn dense_flops(widths: &[usize]) -> u64 {
    widths.windows(2).map(|w| 2 * (w[1] * w[0]) as u64).sum()
}

fn activations(widths: &[usize], batch_size: usize) -> u64 {
    widths.iter().map(|&w| w as u64).sum::<u64>() * batch_size as u64
}

/// Training footprint of one client at ratio `p` under `scope`.
pub fn cost_for_scope(
    arch: &Architecture,
    p: f64,
    scope: CostScope,
    batch_size: usize,
) -> Result<CostReport, MaskError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(MaskError::RatioOutOfRange(p));
    }
    let full = arch.widths();
    let active = active_widths(arch, p);
    let (weights, grads, acts, fwd, bwd) = match scope {
        CostScope::FrozenFull => (
            param_count(full),
            param_count(&active),
            activations(full, batch_size),
            dense_flops(full),
            2 * dense_flops(&active),
        ),
        CostScope::SubModel => (
            param_count(&active),
            param_count(&active),
            activations(&active, batch_size),
            dense_flops(&active),
            2 * dense_flops(&active),
        ),
        CostScope::FullTraining => (
            param_count(full),
            param_count(full),
            activations(full, batch_size),
            dense_flops(full),
            2 * dense_flops(full),
        ),
    };
    let weights_bytes = weights * BYTES_PER_VALUE;
    let grad_bytes = grads * BYTES_PER_VALUE;
    let activation_bytes = acts * BYTES_PER_VALUE;
    Ok(CostReport {
        method: format!("{scope:?}"),
        p,
        batch_size,
        weights_bytes,
        grad_bytes,
        activation_bytes,
        total_bytes: weights_bytes + grad_bytes + activation_bytes,
        flops_forward: fwd,
        flops_backward: bwd,
    })
}

/// Training footprint of `method` at ratio `p`.
pub fn cost_model(
    arch: &Architecture,
    p: f64,
    method: &dyn FederatedMethod,
    batch_size: usize,
) -> Result<CostReport, MaskError> {
    let mut report = cost_for_scope(arch, p, method.cost_scope(), batch_size)?;
    report.method = method.name().to_string();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{derive_param_mask, sample_neuron_mask, MaskStrategy};
    use crate::method::{lookup, MethodRegistry};
    use crate::rng::{stream, Purpose};

    fn arch(w: &[usize]) -> Architecture {
        Architecture::new(w.to_vec()).unwrap()
    }

    #[test]
    fn test_full_ratio_is_method_independent() {
        let a = arch(&[16, 32, 24, 4]);
        let reg = MethodRegistry::builtin();
        let reports: Vec<_> = reg
            .names()
            .map(|n| {
                let mut r = cost_model(&a, 1.0, reg.get(n).unwrap().as_ref(), 8).unwrap();
                r.method.clear();
                r
            })
            .collect();
        assert!(reports.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn test_frozen_gradient_bytes_match_enumeration() {
        let a = arch(&[64, 256, 256, 10]);
        let r = cost_model(&a, 0.2, lookup("fedspu").unwrap().as_ref(), 16).unwrap();
        let nm = sample_neuron_mask(&a, 0.2, MaskStrategy::Random, None, &mut stream(1, Purpose::Mask, &[]))
            .unwrap();
        let enumerated = derive_param_mask(&nm, &a).unwrap().active_count() as u64;
        assert_eq!(r.grad_bytes, enumerated * BYTES_PER_VALUE);
        assert_eq!(r.weights_bytes, a.param_count() as u64 * BYTES_PER_VALUE);
        // 51 active neurons per hidden layer
        assert_eq!(enumerated, 51 * 64 + 51 + 51 * 51 + 51 + 10 * 51 + 10);
    }

    #[test]
    fn test_totals_are_sums() {
        let a = arch(&[10, 40, 5]);
        for m in ["fedspu", "fjord", "hermes"] {
            let r = cost_model(&a, 0.6, lookup(m).unwrap().as_ref(), 4).unwrap();
            assert_eq!(r.total_bytes, r.weights_bytes + r.grad_bytes + r.activation_bytes);
        }
    }

    #[test]
    fn test_rejects_bad_ratio() {
        let a = arch(&[10, 40, 5]);
        assert!(cost_for_scope(&a, 0.0, CostScope::SubModel, 4).is_err());
    }
}
