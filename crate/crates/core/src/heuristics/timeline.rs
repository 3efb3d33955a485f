// SPDX-License-Identifier: MIT OR Apache-2.0

//! How heuristic neurons emerge across training checkpoints.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::catalog::Heuristic;
use super::classify::{classify_all, Classification, DEFAULT_THRESHOLD};
use super::knockout::{prompt_knockout_accuracy, KnockoutMode, PromptKnockoutSummary, KNOCKOUT_KS};
use crate::data::{counterfactual_pairs, filter_correct, valid_grid, Prompt};
use crate::error::{invalid, Result};
use crate::interp::{faithfulness_from, neuron_scan, normalized_logits, top_k_neurons, Circuit, EffectSpace, NeuronWhitelist};
use crate::model::{mean_activations, ModelBundle};
use crate::seed;
use crate::vocab::Operator;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineConfig {
    pub operator: Operator,
    pub operand_max: usize,
    pub threshold: f64,
    /// Checkpoints below this grid accuracy are skipped.
    pub min_accuracy: f64,
    /// Prompt pairs used by the neuron scan.
    pub scan_pairs: usize,
    /// Neurons per layer kept from the scan.
    pub top_k: usize,
    pub faithfulness_prompts: usize,
    pub knockout_prompts: usize,
    pub knockout_ks: Vec<usize>,
    pub seed: u64,
}

impl Default for TimelineConfig {
    fn default() -> Self {
        Self {
            operator: Operator::Add,
            operand_max: 100,
            threshold: DEFAULT_THRESHOLD,
            min_accuracy: 0.5,
            scan_pairs: 20,
            top_k: 25,
            faithfulness_prompts: 50,
            knockout_prompts: 50,
            knockout_ks: KNOCKOUT_KS.to_vec(),
            seed: 0,
        }
    }
}

/// Accepted `(layer, neuron, heuristic)` triples.
pub type HeuristicPairs = BTreeSet<(usize, usize, Heuristic)>;

pub fn accepted_pairs(c: &Classification) -> HeuristicPairs {
    c.accepted().map(|r| (r.layer, r.neuron, r.heuristic.clone())).collect()
}

/// Share of `reference` pairs present in `other`; 1 when `reference` is empty.
pub fn persistence(reference: &HeuristicPairs, other: &HeuristicPairs) -> f64 {
    if reference.is_empty() {
        return 1.0;
    }
    reference.intersection(other).count() as f64 / reference.len() as f64
}

fn whitelist_of<'a>(pairs: impl Iterator<Item = &'a (usize, usize, Heuristic)>) -> NeuronWhitelist {
    let mut out: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (l, n, _) in pairs {
        out.entry(*l).or_default().insert(*n);
    }
    out.into_iter().map(|(l, ns)| (l, ns.into_iter().collect())).collect()
}

fn merge(a: &NeuronWhitelist, b: &NeuronWhitelist) -> NeuronWhitelist {
    let mut out: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (l, ns) in a.iter().chain(b) {
        out.entry(*l).or_default().extend(ns.iter().copied());
    }
    out.into_iter().map(|(l, ns)| (l, ns.into_iter().collect())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub step: usize,
    pub accuracy: f64,
    /// Accuracy was below the configured minimum; the analysis fields are
    /// `None`.
    pub skipped: bool,
    pub accepted_pairs: usize,
    pub persistence: Option<f64>,
    pub faithfulness_mutual: Option<f64>,
    pub faithfulness_all: Option<f64>,
    /// `None` also when `faithfulness_all` is zero.
    pub mutual_ratio: Option<f64>,
    pub knockouts: Vec<PromptKnockoutSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineReport {
    pub config: TimelineConfig,
    pub final_step: usize,
    pub final_pairs: usize,
    pub entries: Vec<CheckpointEntry>,
}

/// Classification and scan results of one checkpoint.
struct Analysis {
    correct: Vec<Prompt>,
    accuracy: f64,
    classification: Classification,
}

fn analyze(model: &ModelBundle, cfg: &TimelineConfig, extra: &NeuronWhitelist) -> Result<Option<Analysis>> {
    let grid = valid_grid(cfg.operator, cfg.operand_max, &model.tokenizer);
    let correct = filter_correct(model, &grid)?;
    let accuracy = correct.len() as f64 / grid.len() as f64;
    if accuracy < cfg.min_accuracy || correct.len() < 2 {
        return Ok(None);
    }
    let scan: Vec<Prompt> = correct
        .choose_multiple(&mut seed::rng(seed::derive(cfg.seed, 0)), cfg.scan_pairs.min(correct.len()))
        .copied()
        .collect();
    let pairs = counterfactual_pairs(&scan, &correct, true, seed::derive(cfg.seed, 1))?;
    let report = neuron_scan(model, &pairs, 0..model.config.n_layers, EffectSpace::Probability)?;
    let whitelist = merge(&top_k_neurons(&report, cfg.top_k, model.config.d_mlp)?, extra);
    let classification = classify_all(model, &whitelist, cfg.operator, cfg.threshold, cfg.operand_max)?;
    Ok(Some(Analysis {
        correct,
        accuracy,
        classification,
    }))
}

/// Analyze `checkpoints` (ordered by step) against the last one.
pub fn heuristic_timeline(checkpoints: &[(usize, ModelBundle)], cfg: &TimelineConfig) -> Result<TimelineReport> {
    if checkpoints.len() < 2 {
        return Err(invalid("a timeline needs at least two checkpoints"));
    }
    let (final_step, final_model) = checkpoints.last().expect("checked length");
    let final_analysis = analyze(final_model, cfg, &NeuronWhitelist::new())?
        .ok_or_else(|| invalid(format!("final checkpoint {final_step} is below the accuracy minimum")))?;
    let final_pairs = accepted_pairs(&final_analysis.classification);
    let final_neurons = whitelist_of(final_pairs.iter());
    let mut final_slot = Some(final_analysis);

    let mut entries = Vec::with_capacity(checkpoints.len());
    for (i, (step, model)) in checkpoints.iter().enumerate() {
        let analysis = if i + 1 == checkpoints.len() {
            final_slot.take()
        } else {
            analyze(model, cfg, &final_neurons)?
        };
        let Some(a) = analysis else {
            let grid = valid_grid(cfg.operator, cfg.operand_max, &model.tokenizer);
            let accuracy = filter_correct(model, &grid)?.len() as f64 / grid.len() as f64;
            entries.push(CheckpointEntry {
                step: *step,
                accuracy,
                skipped: true,
                accepted_pairs: 0,
                persistence: None,
                faithfulness_mutual: None,
                faithfulness_all: None,
                mutual_ratio: None,
                knockouts: Vec::new(),
            });
            continue;
        };
        let pairs = accepted_pairs(&a.classification);
        let mutual: HeuristicPairs = pairs.intersection(&final_pairs).cloned().collect();

        let mut rng = seed::rng(seed::derive(cfg.seed, 2));
        let mut faith: Vec<Prompt> = a
            .correct
            .choose_multiple(&mut rng, cfg.faithfulness_prompts.min(a.correct.len()))
            .copied()
            .collect();
        faith.sort();
        let grid = valid_grid(cfg.operator, cfg.operand_max, &model.tokenizer);
        let seqs: Vec<_> = grid.iter().map(|p| p.tokens).collect();
        let means = mean_activations(model, &seqs)?;
        let nl_full = normalized_logits(model, &faith, &Circuit::full(model), &means)?;
        let nl_empty = normalized_logits(model, &faith, &Circuit::empty(), &means)?;
        let f_of = |wl: NeuronWhitelist| -> Result<f64> {
            let c = Circuit::full_with_neurons(model, with_all_layers(wl, model.config.n_layers));
            let nl = normalized_logits(model, &faith, &c, &means)?;
            Ok(faithfulness_from(nl, nl_full.clone(), nl_empty.clone())?.raw)
        };
        let f_all = f_of(whitelist_of(pairs.iter()))?;
        let f_mutual = f_of(whitelist_of(mutual.iter()))?;

        let mut ko: Vec<Prompt> = a
            .correct
            .choose_multiple(&mut rng, cfg.knockout_prompts.min(a.correct.len()))
            .copied()
            .collect();
        ko.sort();
        let records = &a.classification.records;
        let mut knockouts = Vec::new();
        for &k in &cfg.knockout_ks {
            for mode in [KnockoutMode::Associated, KnockoutMode::RandomUnassociated] {
                knockouts.push(prompt_knockout_accuracy(model, &ko, records, k, mode, seed::derive(cfg.seed, 3))?);
            }
        }
        entries.push(CheckpointEntry {
            step: *step,
            accuracy: a.accuracy,
            skipped: false,
            accepted_pairs: pairs.len(),
            persistence: Some(persistence(&final_pairs, &pairs)),
            faithfulness_mutual: Some(f_mutual),
            faithfulness_all: Some(f_all),
            mutual_ratio: (f_all != 0.0).then(|| f_mutual / f_all),
            knockouts,
        });
    }
    Ok(TimelineReport {
        config: cfg.clone(),
        final_step: *final_step,
        final_pairs: final_pairs.len(),
        entries,
    })
}

/// Every layer listed, so layers without heuristic neurons are fully
/// mean-ablated at the final position.
fn with_all_layers(mut wl: NeuronWhitelist, n_layers: usize) -> NeuronWhitelist {
    for l in 0..n_layers {
        wl.entry(l).or_default();
    }
    wl
}
