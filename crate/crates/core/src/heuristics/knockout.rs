// SPDX-License-Identifier: MIT OR Apache-2.0

//! Zero-ablation of heuristic neurons and the failure analysis.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::catalog::Heuristic;
use super::classify::ClassificationRecord;
use crate::data::{correctness, Prompt};
use crate::error::{invalid, Result};
use crate::model::{
    final_logits, logit_lens, run_batch, ComponentRef, Intervention, InterventionSet, ModelBundle, FINAL_POS, PROMPT_LEN,
};
use crate::seed;
use crate::vocab::Operator;

/// Per-layer neuron counts used by prompt-guided knockout.
pub const KNOCKOUT_KS: [usize; 3] = [5, 10, 25];

fn zero_set(model: &ModelBundle, neurons: &[(usize, usize)]) -> Result<InterventionSet> {
    let ivs: Vec<Intervention> = neurons
        .iter()
        .map(|&(layer, neuron)| {
            Intervention::zero(ComponentRef::MlpNeuron {
                layer,
                neuron,
                position: FINAL_POS,
            })
        })
        .collect();
    InterventionSet::new(&model.config, PROMPT_LEN, &ivs)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy of `prompts` with the given neurons zeroed at the final position.
pub fn accuracy_with_zeroed(model: &ModelBundle, prompts: &[Prompt], neurons: &[(usize, usize)]) -> Result<f64> {
    if prompts.is_empty() {
        return Ok(f64::NAN);
    }
    let set = zero_set(model, neurons)?;
    let seqs: Vec<[usize; PROMPT_LEN]> = prompts.iter().map(|p| p.tokens).collect();
    let logits = final_logits(model, &seqs, &set)?;
    let hits = prompts
        .iter()
        .enumerate()
        .filter(|(i, p)| argmax(logits.row(*i)) == p.answer_token())
        .count();
    Ok(hits as f64 / prompts.len() as f64)
}

/// Neurons that accept `h`, in `(layer, neuron)` order.
pub fn accepted_neurons(records: &[ClassificationRecord], h: &Heuristic) -> Vec<(usize, usize)> {
    let set: BTreeSet<(usize, usize)> = records
        .iter()
        .filter(|r| r.accepted && &r.heuristic == h)
        .map(|r| (r.layer, r.neuron))
        .collect();
    set.into_iter().collect()
}

fn sample(pool: &[Prompt], n: usize, seed: u64) -> Vec<Prompt> {
    let mut out: Vec<Prompt> = pool.choose_multiple(&mut seed::rng(seed), n.min(pool.len())).copied().collect();
    out.sort();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoutResult {
    pub operator: Operator,
    pub heuristic: Heuristic,
    pub neurons: Vec<(usize, usize)>,
    pub accuracy_before_associated: f64,
    pub accuracy_before_control: f64,
    pub accuracy_after_associated: f64,
    pub accuracy_after_control: f64,
    pub associated_count: usize,
    pub control_count: usize,
    /// Fewer prompts than requested were available.
    pub flagged: bool,
    pub seed: u64,
}

impl KnockoutResult {
    pub fn associated_drop(&self) -> f64 {
        self.accuracy_before_associated - self.accuracy_after_associated
    }

    pub fn control_drop(&self) -> f64 {
        self.accuracy_before_control - self.accuracy_after_control
    }
}

/// Zero every neuron that accepts `h` and compare accuracy on prompts that
/// satisfy `h` against prompts that do not. `correct` holds correctly
/// completed prompts of the operator.
pub fn knockout_by_heuristic(
    model: &ModelBundle,
    operator: Operator,
    h: &Heuristic,
    records: &[ClassificationRecord],
    correct: &[Prompt],
    n_assoc: usize,
    n_ctrl: usize,
    seed: u64,
) -> Result<KnockoutResult> {
    let records: Vec<ClassificationRecord> = records.iter().filter(|r| r.operator == operator).cloned().collect();
    let neurons = accepted_neurons(&records, h);
    let (assoc_pool, ctrl_pool): (Vec<Prompt>, Vec<Prompt>) = correct
        .iter()
        .filter(|p| p.operator == operator)
        .partition(|p| h.satisfied_by(p));
    let assoc = sample(&assoc_pool, n_assoc, seed::derive(seed, 0));
    let ctrl = sample(&ctrl_pool, n_ctrl, seed::derive(seed, 1));
    Ok(KnockoutResult {
        operator,
        heuristic: h.clone(),
        accuracy_before_associated: accuracy_with_zeroed(model, &assoc, &[])?,
        accuracy_before_control: accuracy_with_zeroed(model, &ctrl, &[])?,
        accuracy_after_associated: accuracy_with_zeroed(model, &assoc, &neurons)?,
        accuracy_after_control: accuracy_with_zeroed(model, &ctrl, &neurons)?,
        associated_count: assoc.len(),
        control_count: ctrl.len(),
        flagged: assoc.len() < n_assoc || ctrl.len() < n_ctrl,
        neurons,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnockoutMode {
    /// Highest-scoring neurons among heuristics the prompt satisfies.
    Associated,
    /// Random neurons whose accepted heuristics the prompt never satisfies.
    RandomUnassociated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptKnockout {
    pub neurons: Vec<(usize, usize)>,
    pub changed: bool,
    pub logits: Vec<f64>,
    /// Some layer had fewer eligible neurons than requested.
    pub flagged: bool,
}

/// Per layer, accepted neurons of `p`'s operator with their best score among
/// heuristics `p` satisfies (`Some`) or `None` when `p` satisfies none.
fn neuron_relevance(records: &[ClassificationRecord], p: &Prompt) -> BTreeMap<usize, BTreeMap<usize, Option<f64>>> {
    let mut out: BTreeMap<usize, BTreeMap<usize, Option<f64>>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.accepted && r.operator == p.operator) {
        let slot = out.entry(r.layer).or_default().entry(r.neuron).or_insert(None);
        if r.heuristic.satisfied_by(p) {
            *slot = Some(slot.map_or(r.score, |s: f64| s.max(r.score)));
        }
    }
    out
}

/// Neurons chosen by prompt-guided knockout, and whether any layer ran short.
pub fn select_knockout_neurons(
    records: &[ClassificationRecord],
    p: &Prompt,
    k: usize,
    mode: KnockoutMode,
    seed: u64,
) -> (Vec<(usize, usize)>, bool) {
    let mut neurons = Vec::new();
    let mut flagged = false;
    for (layer, scores) in neuron_relevance(records, p) {
        let mut assoc: Vec<(usize, f64)> = scores.iter().filter_map(|(&n, s)| s.map(|s| (n, s))).collect();
        assoc.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let picked: Vec<usize> = match mode {
            KnockoutMode::Associated => assoc.iter().take(k).map(|a| a.0).collect(),
            KnockoutMode::RandomUnassociated => {
                let want = assoc.len().min(k);
                let pool: Vec<usize> = scores.iter().filter(|(_, s)| s.is_none()).map(|(&n, _)| n).collect();
                let mut rng = seed::rng(seed::derive(seed, layer as u64));
                pool.choose_multiple(&mut rng, want.min(pool.len())).copied().collect()
            }
        };
        let available = match mode {
            KnockoutMode::Associated => assoc.len(),
            KnockoutMode::RandomUnassociated => scores.values().filter(|s| s.is_none()).count(),
        };
        flagged |= available < k;
        neurons.extend(picked.into_iter().map(|n| (layer, n)));
    }
    neurons.sort_unstable();
    (neurons, flagged)
}

/// Zero `k` neurons per layer chosen for `p` and report whether the
/// completion changed.
pub fn knockout_by_prompt(
    model: &ModelBundle,
    p: &Prompt,
    records: &[ClassificationRecord],
    k: usize,
    mode: KnockoutMode,
    seed: u64,
) -> Result<PromptKnockout> {
    let (neurons, flagged) = select_knockout_neurons(records, p, k, mode, seed);
    let before = run_batch(model, &[p.tokens], &InterventionSet::empty())?;
    let after = run_batch(model, &[p.tokens], &zero_set(model, &neurons)?)?;
    let logits = after.logits_of(0).to_vec();
    Ok(PromptKnockout {
        changed: argmax(&logits) != argmax(before.logits_of(0)),
        neurons,
        logits,
        flagged: flagged && k > 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptKnockoutSummary {
    pub k: usize,
    pub mode: KnockoutMode,
    pub baseline: f64,
    pub accuracy: f64,
    pub prompt_count: usize,
    pub flagged_prompts: usize,
    pub seed: u64,
}

/// Accuracy over `prompts` after prompt-guided knockout. Prompt `i` uses
/// stream `i` of `seed`.
pub fn prompt_knockout_accuracy(
    model: &ModelBundle,
    prompts: &[Prompt],
    records: &[ClassificationRecord],
    k: usize,
    mode: KnockoutMode,
    seed: u64,
) -> Result<PromptKnockoutSummary> {
    if prompts.is_empty() {
        return Err(invalid("knockout needs at least one prompt"));
    }
    let baseline = accuracy_with_zeroed(model, prompts, &[])?;
    let mut hits = 0;
    let mut flagged = 0;
    for (i, p) in prompts.iter().enumerate() {
        let (neurons, short) = select_knockout_neurons(records, p, k, mode, seed::derive(seed, i as u64));
        let logits = final_logits(model, &[p.tokens], &zero_set(model, &neurons)?)?;
        hits += usize::from(argmax(logits.row(0)) == p.answer_token());
        flagged += usize::from(short && k > 0);
    }
    Ok(PromptKnockoutSummary {
        k,
        mode,
        baseline,
        accuracy: hits as f64 / prompts.len() as f64,
        prompt_count: prompts.len(),
        flagged_prompts: flagged,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureClass {
    pub prompt_count: usize,
    pub mean_associated: f64,
    pub mean_contribution: f64,
    /// No prompts fell in this class.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureReport {
    pub operator: Operator,
    pub correct: FailureClass,
    pub incorrect: FailureClass,
    pub seed: u64,
}

/// `Σ h_post · lens(v_out)[r]` over neuron terms.
pub fn contribution_sum(terms: &[(f64, f64)]) -> f64 {
    terms.iter().map(|(h, l)| h * l).sum()
}

/// Count of associated accepted neurons and their summed logit
/// contribution to the correct answer, averaged over up to `n` correct and
/// `n` incorrect prompts drawn from `pool`.
pub fn failure_analysis(
    model: &ModelBundle,
    operator: Operator,
    records: &[ClassificationRecord],
    pool: &[Prompt],
    n: usize,
    seed: u64,
) -> Result<FailureReport> {
    let pool: Vec<Prompt> = pool.iter().filter(|p| p.operator == operator).copied().collect();
    if pool.is_empty() {
        return Err(invalid(format!("no prompts for {}", operator.name())));
    }
    let ok = correctness(model, &pool)?;
    let (right, wrong): (Vec<(Prompt, bool)>, Vec<(Prompt, bool)>) = pool.into_iter().zip(ok).partition(|x| x.1);
    let strip = |v: Vec<(Prompt, bool)>| v.into_iter().map(|x| x.0).collect::<Vec<_>>();
    let right = sample(&strip(right), n, seed::derive(seed, 0));
    let wrong = sample(&strip(wrong), n, seed::derive(seed, 1));

    let accepted: Vec<&ClassificationRecord> = records.iter().filter(|r| r.accepted && r.operator == operator).collect();
    let mut lens_cache: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for r in &accepted {
        if let std::collections::btree_map::Entry::Vacant(e) = lens_cache.entry((r.layer, r.neuron)) {
            e.insert(logit_lens(model, model.v_out(r.layer, r.neuron))?);
        }
    }
    let summarize = |prompts: &[Prompt]| -> Result<FailureClass> {
        if prompts.is_empty() {
            return Ok(FailureClass {
                prompt_count: 0,
                mean_associated: f64::NAN,
                mean_contribution: f64::NAN,
                flagged: true,
            });
        }
        let (mut count, mut total) = (0usize, 0.0);
        for p in prompts {
            let cache = run_batch(model, &[p.tokens], &InterventionSet::empty())?;
            let neurons: BTreeSet<(usize, usize)> = accepted
                .iter()
                .filter(|r| r.heuristic.satisfied_by(p))
                .map(|r| (r.layer, r.neuron))
                .collect();
            let terms: Vec<(f64, f64)> = neurons
                .iter()
                .map(|&(l, n)| (cache.h_post_at(l, 0, FINAL_POS)[n], lens_cache[&(l, n)][p.answer_token()]))
                .collect();
            count += neurons.len();
            total += contribution_sum(&terms);
        }
        Ok(FailureClass {
            prompt_count: prompts.len(),
            mean_associated: count as f64 / prompts.len() as f64,
            mean_contribution: total / prompts.len() as f64,
            flagged: false,
        })
    };
    Ok(FailureReport {
        operator,
        correct: summarize(&right)?,
        incorrect: summarize(&wrong)?,
        seed,
    })
}
