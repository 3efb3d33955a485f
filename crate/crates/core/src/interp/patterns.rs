// SPDX-License-Identifier: MIT OR Apache-2.0

//! Operand-grid activation and logit patterns, attention averages, token
//! scans, and neuron-set overlap.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{ground_truth, Prompt};
use crate::error::{invalid, Result};
use crate::model::{logit_lens, run_batch, InterventionSet, ModelBundle, BATCH_CHUNK, FINAL_POS, PROMPT_LEN};
use crate::vocab::Operator;

/// Square `(op1, op2)` grid over `0..=operand_max`, row-major in `op1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub operator: Operator,
    pub operand_max: usize,
    /// Masked cells hold 0.
    pub values: Vec<f64>,
    /// `true` where the prompt is valid.
    pub mask: Vec<bool>,
}

impl Grid {
    pub fn side(&self) -> usize {
        self.operand_max + 1
    }

    pub fn index(&self, op1: usize, op2: usize) -> usize {
        op1 * self.side() + op2
    }

    pub fn get(&self, op1: usize, op2: usize) -> Option<f64> {
        let i = self.index(op1, op2);
        self.mask[i].then(|| self.values[i])
    }

    /// Valid cells as `(op1, op2, value)` in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let side = self.side();
        self.values
            .iter()
            .zip(&self.mask)
            .enumerate()
            .filter(|(_, (_, m))| **m)
            .map(move |(i, (v, _))| (i / side, i % side, *v))
    }
}

/// `h_post` of one neuron at the final position across the operand grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationPattern2D {
    pub layer: usize,
    pub neuron: usize,
    pub grid: Grid,
}

/// Logit-lens logit of each cell's result token under one neuron's `v_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitPattern2D {
    pub layer: usize,
    pub neuron: usize,
    pub grid: Grid,
}

/// Validity mask of the operand grid.
pub fn grid_mask(operator: Operator, operand_max: usize, number_token_max: usize) -> Vec<bool> {
    let side = operand_max + 1;
    (0..side * side)
        .map(|i| ground_truth(i / side, i % side, operator, number_token_max).is_some())
        .collect()
}

/// Activation patterns of several neurons from one batched pass over every
/// valid prompt of the operator.
pub fn activation_patterns(
    model: &ModelBundle,
    operator: Operator,
    operand_max: usize,
    neurons: &[(usize, usize)],
) -> Result<Vec<ActivationPattern2D>> {
    let cfg = &model.config;
    for &(l, n) in neurons {
        if l >= cfg.n_layers || n >= cfg.d_mlp {
            return Err(invalid(format!("neuron L{l}N{n} is outside the model")));
        }
    }
    let tok = &model.tokenizer;
    if operand_max > tok.number_token_max() {
        return Err(invalid("operand_max exceeds the number tokens"));
    }
    let side = operand_max + 1;
    let mask = grid_mask(operator, operand_max, tok.number_token_max());
    let prompts: Vec<Prompt> = (0..side * side)
        .filter(|&i| mask[i])
        .filter_map(|i| Prompt::new(i / side, operator, i % side, tok))
        .collect();
    let mut values = vec![vec![0.0; side * side]; neurons.len()];
    for chunk in prompts.chunks(BATCH_CHUNK) {
        let seqs: Vec<[usize; PROMPT_LEN]> = chunk.iter().map(|p| p.tokens).collect();
        let cache = run_batch(model, &seqs, &InterventionSet::empty())?;
        for (b, p) in chunk.iter().enumerate() {
            let cell = p.op1 * side + p.op2;
            for (k, &(l, n)) in neurons.iter().enumerate() {
                values[k][cell] = cache.h_post_at(l, b, FINAL_POS)[n];
            }
        }
    }
    Ok(neurons
        .iter()
        .zip(values)
        .map(|(&(layer, neuron), values)| ActivationPattern2D {
            layer,
            neuron,
            grid: Grid {
                operator,
                operand_max,
                values,
                mask: mask.clone(),
            },
        })
        .collect())
}

pub fn activation_pattern(
    model: &ModelBundle,
    layer: usize,
    neuron: usize,
    operator: Operator,
    operand_max: usize,
) -> Result<ActivationPattern2D> {
    Ok(activation_patterns(model, operator, operand_max, &[(layer, neuron)])?.remove(0))
}

/// Logit lens of `v_out[layer, neuron]`, spread over the grid by each cell's
/// result.
pub fn logit_pattern(
    model: &ModelBundle,
    layer: usize,
    neuron: usize,
    operator: Operator,
    operand_max: usize,
) -> Result<LogitPattern2D> {
    let cfg = &model.config;
    if layer >= cfg.n_layers || neuron >= cfg.d_mlp {
        return Err(invalid(format!("neuron L{layer}N{neuron} is outside the model")));
    }
    let lens = logit_lens(model, model.v_out(layer, neuron))?;
    let max = model.tokenizer.number_token_max();
    let side = operand_max + 1;
    let mut values = vec![0.0; side * side];
    let mut mask = vec![false; side * side];
    for op1 in 0..side {
        for op2 in 0..side {
            if let Some(r) = ground_truth(op1, op2, operator, max) {
                values[op1 * side + op2] = lens[r];
                mask[op1 * side + op2] = true;
            }
        }
    }
    Ok(LogitPattern2D {
        layer,
        neuron,
        grid: Grid {
            operator,
            operand_max,
            values,
            mask,
        },
    })
}

/// Mean `[T, T]` attention weights of one head over prompts.
pub fn attention_pattern(model: &ModelBundle, prompts: &[Prompt], layer: usize, head: usize) -> Result<Vec<f64>> {
    if prompts.is_empty() {
        return Err(invalid("attention pattern needs prompts"));
    }
    if layer >= model.config.n_layers || head >= model.config.n_heads {
        return Err(invalid(format!("no head L{layer}H{head}")));
    }
    let mut sum = vec![0.0; PROMPT_LEN * PROMPT_LEN];
    let seqs: Vec<[usize; PROMPT_LEN]> = prompts.iter().map(|p| p.tokens).collect();
    for chunk in seqs.chunks(BATCH_CHUNK) {
        let cache = run_batch(model, chunk, &InterventionSet::empty())?;
        for b in 0..chunk.len() {
            for (s, v) in sum.iter_mut().zip(cache.pattern(layer, b, head)) {
                *s += v;
            }
        }
    }
    let n = prompts.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// `h_post` of chosen neurons when each numeric token in `tokens` is run
/// alone (position 0). Rows follow `neurons`, columns follow `tokens`.
pub fn token_activation_scan(
    model: &ModelBundle,
    layer: usize,
    neurons: &[usize],
    tokens: std::ops::RangeInclusive<usize>,
) -> Result<Vec<Vec<f64>>> {
    if neurons.is_empty() {
        return Ok(Vec::new());
    }
    if layer >= model.config.n_layers || neurons.iter().any(|&n| n >= model.config.d_mlp) {
        return Err(invalid("token scan neuron out of bounds"));
    }
    let ids: Vec<[usize; 1]> = tokens
        .map(|t| model.tokenizer.number(t).map(|id| [id]))
        .collect::<Result<_>>()?;
    if ids.is_empty() {
        return Err(invalid("token scan range is empty"));
    }
    let mut out = vec![Vec::with_capacity(ids.len()); neurons.len()];
    for chunk in ids.chunks(BATCH_CHUNK) {
        let cache = run_batch(model, chunk, &InterventionSet::empty())?;
        for b in 0..chunk.len() {
            let h = cache.h_post_at(layer, b, 0);
            for (row, &n) in out.iter_mut().zip(neurons) {
                row.push(h[n]);
            }
        }
    }
    Ok(out)
}

/// Pairwise `|A ∩ B| / |A ∪ B|` between operators' neuron sets.
pub fn neuron_iou(
    sets: &BTreeMap<Operator, BTreeSet<(usize, usize)>>,
) -> Result<BTreeMap<(Operator, Operator), f64>> {
    if sets.is_empty() || sets.values().any(BTreeSet::is_empty) {
        return Err(invalid("IoU needs non-empty neuron sets"));
    }
    let mut out = BTreeMap::new();
    for (a, sa) in sets {
        for (b, sb) in sets {
            let inter = sa.intersection(sb).count();
            let union = sa.union(sb).count();
            out.insert((*a, *b), inter as f64 / union as f64);
        }
    }
    Ok(out)
}
