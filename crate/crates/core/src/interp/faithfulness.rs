// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mean-ablation faithfulness of circuits.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::patching::{components, Granularity, NeuronWhitelist};
use crate::data::Prompt;
use crate::error::{invalid, Result};
use crate::model::{
    final_logits, ActivationCache, ComponentRef, Intervention, InterventionSet, ModelBundle, FINAL_POS, PROMPT_LEN,
};
use crate::numerics::Tensor;

/// Below this gap between the full and empty circuits a prompt is degenerate.
pub const DEGENERATE_GAP: f64 = 1e-9;

/// Components kept intact; everything else is replaced by its mean.
///
/// With a neuron whitelist, each kept MLP layer listed in it keeps only the
/// listed neurons at the final position; its other neurons there take their
/// mean value.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Circuit {
    pub components: BTreeSet<ComponentRef>,
    pub neurons: Option<NeuronWhitelist>,
}

impl Circuit {
    /// Every attention head and MLP layer at every position.
    pub fn full(model: &ModelBundle) -> Self {
        let mut components: BTreeSet<ComponentRef> = components(model, Granularity::AttnHead).into_iter().collect();
        components.extend(components_of(model, Granularity::MlpLayer));
        Self {
            components,
            neurons: None,
        }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// The full model with neuron-level ablation in the whitelisted layers.
    pub fn full_with_neurons(model: &ModelBundle, neurons: NeuronWhitelist) -> Self {
        Self {
            neurons: Some(neurons),
            ..Self::full(model)
        }
    }

    pub fn validate(&self, model: &ModelBundle) -> Result<()> {
        for c in &self.components {
            match c {
                ComponentRef::AttnHead { .. } | ComponentRef::MlpLayer { .. } => c.validate(&model.config, PROMPT_LEN)?,
                _ => return Err(invalid(format!("circuits hold heads and MLP layers, not {c}"))),
            }
        }
        if let Some(w) = &self.neurons {
            for (&layer, ns) in w {
                if layer >= model.config.n_layers || ns.iter().any(|&n| n >= model.config.d_mlp) {
                    return Err(invalid(format!("whitelist for layer {layer} is out of bounds")));
                }
            }
        }
        Ok(())
    }

    /// Mean-replacement interventions realizing this circuit.
    pub fn ablations(&self, model: &ModelBundle, means: &ActivationCache) -> Result<Vec<Intervention>> {
        self.validate(model)?;
        if means.batch != 1 || means.seq != PROMPT_LEN {
            return Err(invalid("means must be a single four-position cache"));
        }
        let mut out = Vec::new();
        for c in components_of(model, Granularity::AttnHead).chain(components_of(model, Granularity::MlpLayer)) {
            if !self.components.contains(&c) {
                out.push(Intervention::replace(c, means.get(&c)?));
            }
        }
        if let Some(w) = &self.neurons {
            for (&layer, keep) in w {
                if !self.components.contains(&ComponentRef::MlpLayer { layer, position: FINAL_POS }) {
                    continue;
                }
                let mean_h = means.h_post_at(layer, 0, FINAL_POS);
                let keep: BTreeSet<usize> = keep.iter().copied().collect();
                for (neuron, &v) in mean_h.iter().enumerate() {
                    if !keep.contains(&neuron) {
                        let target = ComponentRef::MlpNeuron { layer, neuron, position: FINAL_POS };
                        out.push(Intervention::replace(target, Tensor::scalar(v)));
                    }
                }
            }
        }
        Ok(out)
    }
}

fn components_of(model: &ModelBundle, g: Granularity) -> impl Iterator<Item = ComponentRef> {
    components(model, g).into_iter()
}

/// `logit(r) / max logit` per prompt with the circuit's ablations applied.
pub fn normalized_logits(
    model: &ModelBundle,
    prompts: &[Prompt],
    circuit: &Circuit,
    means: &ActivationCache,
) -> Result<Vec<f64>> {
    if prompts.is_empty() {
        return Ok(Vec::new());
    }
    let ivs = circuit.ablations(model, means)?;
    let set = InterventionSet::new(&model.config, PROMPT_LEN, &ivs)?;
    let seqs: Vec<[usize; PROMPT_LEN]> = prompts.iter().map(|p| p.tokens).collect();
    let logits = final_logits(model, &seqs, &set)?;
    Ok(prompts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let row = logits.row(i);
            row[p.answer_token()] / row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

pub fn normalized_logit(model: &ModelBundle, prompt: &Prompt, circuit: &Circuit, means: &ActivationCache) -> Result<f64> {
    Ok(normalized_logits(model, std::slice::from_ref(prompt), circuit, means)?[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    /// Mean of per-prompt faithfulness over non-degenerate prompts.
    pub raw: f64,
    /// `raw` clamped to `[0, 1]`.
    pub clamped: f64,
    pub per_prompt: Vec<f64>,
    pub nl_circuit: Vec<f64>,
    pub nl_full: Vec<f64>,
    pub nl_empty: Vec<f64>,
    /// Prompts whose full and empty normalized logits coincide.
    pub degenerate: Vec<bool>,
    pub prompt_count: usize,
}

/// `(NL(c) − NL(∅)) / (NL(M) − NL(∅))` per prompt, averaged.
pub fn faithfulness(
    model: &ModelBundle,
    prompts: &[Prompt],
    circuit: &Circuit,
    means: &ActivationCache,
) -> Result<FaithfulnessReport> {
    if prompts.is_empty() {
        return Err(invalid("faithfulness needs at least one prompt"));
    }
    let nl_full = normalized_logits(model, prompts, &Circuit::full(model), means)?;
    let nl_empty = normalized_logits(model, prompts, &Circuit::empty(), means)?;
    let nl_circuit = normalized_logits(model, prompts, circuit, means)?;
    faithfulness_from(nl_circuit, nl_full, nl_empty)
}

/// Faithfulness from precomputed normalized logits, so the full and empty
/// baselines can be reused across circuits.
pub fn faithfulness_from(nl_circuit: Vec<f64>, nl_full: Vec<f64>, nl_empty: Vec<f64>) -> Result<FaithfulnessReport> {
    if nl_circuit.len() != nl_full.len() || nl_full.len() != nl_empty.len() || nl_full.is_empty() {
        return Err(invalid("normalized logit lists must be non-empty and aligned"));
    }
    let mut per_prompt = Vec::with_capacity(nl_full.len());
    let mut degenerate = Vec::with_capacity(nl_full.len());
    for ((c, f), e) in nl_circuit.iter().zip(&nl_full).zip(&nl_empty) {
        let gap = f - e;
        let bad = gap.abs() < DEGENERATE_GAP;
        degenerate.push(bad);
        per_prompt.push(if bad { f64::NAN } else { (c - e) / gap });
    }
    let good: Vec<f64> = per_prompt.iter().copied().filter(|v| v.is_finite()).collect();
    let raw = if good.is_empty() {
        f64::NAN
    } else {
        good.iter().sum::<f64>() / good.len() as f64
    };
    Ok(FaithfulnessReport {
        raw,
        clamped: raw.clamp(0.0, 1.0),
        prompt_count: nl_full.len(),
        per_prompt,
        nl_circuit,
        nl_full,
        nl_empty,
        degenerate,
    })
}
