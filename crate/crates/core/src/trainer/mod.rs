// SPDX-License-Identifier: MIT OR Apache-2.0

//! Next-token training of the arithmetic model and linear answer probes.

mod graph;
mod optim;
mod probe;

use std::collections::BTreeMap;
use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{correctness, Prompt};
use crate::error::{invalid, ForgeError, Result};
use crate::model::ModelBundle;
use crate::numerics::{backward, evaluate};
use crate::seed;
use crate::vocab::Operator;

pub use graph::{build as build_graph, inputs as graph_inputs};
pub use optim::{clip_grad_norm, learning_rate, AdamW};
pub use probe::{probe_features, probe_grid, train_probe, ProbeConfig, ProbeGrid, ProbeModel, ProbeResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
    /// Sampling weight per operator; renormalized over the operators present
    /// in the training data.
    pub operator_mix: BTreeMap<Operator, f64>,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of the peak.
    pub lr_floor: f64,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_size: 64,
            learning_rate: 3e-3,
            checkpoint_every: 1000,
            seed: 0,
            operator_mix: Operator::ALL.iter().zip([0.3, 0.3, 0.2, 0.2]).map(|(&o, w)| (o, w)).collect(),
            weight_decay: 0.3,
            warmup_steps: 100,
            lr_floor: 0.05,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(invalid("steps, batch_size and checkpoint_every must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip > 0.0) {
            return Err(invalid("learning rate and gradient clip must be positive"));
        }
        let total: f64 = self.operator_mix.values().sum();
        if self.operator_mix.values().any(|&w| w < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(invalid("operator mix weights must be non-negative and sum to 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelBundle,
    pub log: Vec<LossRecord>,
    /// Steps at which the checkpoint sink was called.
    pub checkpoint_steps: Vec<usize>,
}

/// Train in place. `sink` receives the model after every `checkpoint_every`
/// steps and after the last step. Steps are counted from 1.
pub fn train(
    mut model: ModelBundle,
    data: &[Prompt],
    cfg: &TrainConfig,
    mut sink: impl FnMut(usize, &ModelBundle) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    if data.is_empty() {
        return Err(invalid("training data is empty"));
    }
    let mut pools: BTreeMap<Operator, Vec<Prompt>> = BTreeMap::new();
    for p in data {
        pools.entry(p.operator).or_default().push(*p);
    }
    let pools: Vec<(Vec<Prompt>, f64)> = pools
        .into_iter()
        .map(|(op, ps)| {
            let w = cfg.operator_mix.get(&op).copied().unwrap_or(0.0);
            (ps, w)
        })
        .filter(|(_, w)| *w > 0.0)
        .collect();
    if pools.is_empty() {
        return Err(invalid("no training prompt has an operator with positive weight"));
    }
    let picker = WeightedIndex::new(pools.iter().map(|(_, w)| *w))
        .map_err(|e| invalid(format!("operator mix: {e}")))?;

    let seq = data[0].tokens.len();
    let graph = build_graph(&model.config, cfg.batch_size, seq);
    let loss_node = graph.output("loss").expect("graph has a loss");
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut rng = seed::rng(seed::derive(cfg.seed, 0));
    let mut log = Vec::with_capacity(cfg.steps);
    let mut checkpoint_steps = Vec::new();
    let mut last_good = 0;

    for step in 1..=cfg.steps {
        let batch: Vec<Prompt> = (0..cfg.batch_size)
            .map(|_| {
                let pool = &pools[picker.sample(&mut rng)].0;
                pool[rng.gen_range(0..pool.len())]
            })
            .collect();
        let seqs: Vec<[usize; 4]> = batch.iter().map(|p| p.tokens).collect();
        let targets: Vec<usize> = batch.iter().map(|p| p.answer_token()).collect();
        let inputs = graph_inputs(&seqs, &targets);
        let diverged = || ForgeError::Diverged {
            step,
            last_good_step: last_good,
        };
        let eval = match evaluate(&graph, &model.params, &inputs) {
            Ok(e) => e,
            Err(ForgeError::NonFinite { .. }) => return Err(diverged()),
            Err(e) => return Err(e),
        };
        let loss = eval.value(loss_node).item().unwrap_or(f64::NAN);
        if !loss.is_finite() {
            return Err(diverged());
        }
        let mut grads = backward(&graph, &eval, &model.params, loss_node)?;
        clip_grad_norm(&mut grads, cfg.grad_clip);
        let lr = learning_rate(step - 1, cfg.steps, cfg.learning_rate, cfg.warmup_steps, cfg.lr_floor);
        opt.update(&mut model.params, &grads, lr);
        if !model.params.values().all(|t| t.all_finite()) {
            return Err(diverged());
        }
        log.push(LossRecord { step, loss, lr });
        if step % cfg.checkpoint_every == 0 || step == cfg.steps {
            sink(step, &model)?;
            checkpoint_steps.push(step);
            last_good = step;
        }
    }
    Ok(TrainOutcome {
        model,
        log,
        checkpoint_steps,
    })
}

pub fn write_loss_log(path: &Path, log: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in log {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub per_operator: BTreeMap<Operator, OperatorAccuracy>,
    pub overall: f64,
}

impl AccuracyReport {
    pub fn of(&self, op: Operator) -> Option<f64> {
        self.per_operator.get(&op).map(|a| a.accuracy)
    }
}

/// Fraction of prompts whose top logit is the answer, per operator.
pub fn evaluate_accuracy(model: &ModelBundle, prompts: &[Prompt]) -> Result<AccuracyReport> {
    if prompts.is_empty() {
        return Err(invalid("accuracy of an empty prompt set"));
    }
    let ok = correctness(model, prompts)?;
    let mut per_operator: BTreeMap<Operator, OperatorAccuracy> = BTreeMap::new();
    for (p, c) in prompts.iter().zip(&ok) {
        let e = per_operator.entry(p.operator).or_insert(OperatorAccuracy {
            correct: 0,
            total: 0,
            accuracy: 0.0,
        });
        e.total += 1;
        e.correct += usize::from(*c);
    }
    for e in per_operator.values_mut() {
        e.accuracy = e.correct as f64 / e.total as f64;
    }
    let overall = ok.iter().filter(|c| **c).count() as f64 / ok.len() as f64;
    Ok(AccuracyReport { per_operator, overall })
}
