// SPDX-License-Identifier: MIT OR Apache-2.0

//! Central finite-difference validation of analytic gradients.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{backward, evaluate, Graph, NodeId, Params};
use super::tensor::Tensor;
use crate::error::{invalid, Result};

/// Denominator floor for the relative error, so that gradients that are
/// zero up to roundoff do not produce spurious blow-ups.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-7;

/// Outcome of a finite-difference check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst sample.
    pub worst: (String, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub samples: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compare analytic gradients against `(L(θ+ε) − L(θ−ε)) / 2ε` on
/// `sample_count` scalar parameters drawn uniformly (with replacement) from
/// all parameter entries.
pub fn finite_diff_check(
    graph: &Graph,
    params: &Params,
    inputs: &BTreeMap<String, Tensor>,
    loss: NodeId,
    epsilon: f64,
    sample_count: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) {
        return Err(invalid("epsilon must be positive"));
    }
    if sample_count == 0 {
        return Err(invalid("sample count must be at least 1"));
    }
    let slots: Vec<(&String, usize)> = params
        .iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |i| (name, i)))
        .collect();
    if slots.is_empty() {
        return Err(invalid("graph has no parameters to check"));
    }

    let eval = evaluate(graph, params, inputs)?;
    let grads = backward(graph, &eval, params, loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perturbed = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (String::new(), 0),
        analytic: 0.0,
        numeric: 0.0,
        samples: sample_count,
    };
    for _ in 0..sample_count {
        let (name, idx) = slots[rng.gen_range(0..slots.len())];
        let original = params[name].data()[idx];
        let tensor = perturbed.get_mut(name).expect("slot comes from params");
        tensor.data_mut()[idx] = original + epsilon;
        let plus = evaluate(graph, &perturbed, inputs)?.value(loss).data()[0];
        let tensor = perturbed.get_mut(name).expect("slot comes from params");
        tensor.data_mut()[idx] = original - epsilon;
        let minus = evaluate(graph, &perturbed, inputs)?.value(loss).data()[0];
        perturbed.get_mut(name).expect("slot comes from params").data_mut()[idx] = original;

        let numeric = (plus - minus) / (2.0 * epsilon);
        let analytic = grads[name].data()[idx];
        let err = relative_error(analytic, numeric);
        if err > report.max_relative_error || report.worst.0.is_empty() {
            report.max_relative_error = err.max(report.max_relative_error);
            if err >= report.max_relative_error {
                report.worst = (name.clone(), idx);
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
