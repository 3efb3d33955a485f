// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation patching effects and scans.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Prompt;
use crate::error::{invalid, Result};
use crate::model::{
    forward_with_cache, mlp_output_rows, resume_from_mlp_out, run_batch, ActivationCache, ComponentRef,
    Intervention, InterventionSet, ModelBundle, FINAL_POS, PROMPT_LEN,
};
use crate::numerics::kernels;
use crate::vocab::Operator;

/// Probabilities below this are clamped before division.
pub const PROB_FLOOR: f64 = 1e-30;
/// Flagged samples are dropped from means once they exceed this share of a scan.
pub const FLAGGED_SHARE_LIMIT: f64 = 0.01;

/// Quantity compared before and after patching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectSpace {
    /// Relative probability changes of the clean and counterfactual answers.
    #[default]
    Probability,
    /// Raw logit differences of the same two answers.
    Logit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Effect {
    pub value: f64,
    /// A denominator was clamped.
    pub flagged: bool,
}

/// `½[(P*(r′) − P(r′)) / P(r′) + (P(r) − P*(r)) / P*(r)]`.
pub fn effect_from_probabilities(p_r: f64, p_rp: f64, patched_r: f64, patched_rp: f64) -> Effect {
    let flagged = p_rp < PROB_FLOOR || patched_r < PROB_FLOOR;
    let value = 0.5
        * ((patched_rp - p_rp) / p_rp.max(PROB_FLOOR) + (p_r - patched_r) / patched_r.max(PROB_FLOOR));
    Effect { value, flagged }
}

/// `½[(L*(r′) − L(r′)) + (L(r) − L*(r))]`.
pub fn effect_from_logits(l_r: f64, l_rp: f64, patched_r: f64, patched_rp: f64) -> Effect {
    Effect {
        value: 0.5 * ((patched_rp - l_rp) + (l_r - patched_r)),
        flagged: false,
    }
}

fn effect_between(clean: &[f64], patched: &[f64], r: usize, rp: usize, space: EffectSpace) -> Effect {
    match space {
        EffectSpace::Probability => {
            let (p, q) = (kernels::softmax(clean), kernels::softmax(patched));
            effect_from_probabilities(p[r], p[rp], q[r], q[rp])
        }
        EffectSpace::Logit => effect_from_logits(clean[r], clean[rp], patched[r], patched[rp]),
    }
}

fn check_pair(p: &Prompt, cf: &Prompt) -> Result<()> {
    if p.result == cf.result {
        return Err(invalid(format!("{p} and {cf} share the result {}", p.result)));
    }
    Ok(())
}

/// Effect of patching `target` on `p` with its activation from `cf`.
pub fn patch_effect(model: &ModelBundle, p: &Prompt, cf: &Prompt, target: ComponentRef, space: EffectSpace) -> Result<Effect> {
    check_pair(p, cf)?;
    let clean = forward_with_cache(model, &p.tokens)?;
    let source = forward_with_cache(model, &cf.tokens)?;
    patched_effect(model, p, cf, &clean, &source, target, space)
}

fn patched_effect(
    model: &ModelBundle,
    p: &Prompt,
    cf: &Prompt,
    clean: &ActivationCache,
    source: &ActivationCache,
    target: ComponentRef,
    space: EffectSpace,
) -> Result<Effect> {
    let iv = Intervention::replace(target, source.get(&target)?);
    let set = InterventionSet::new(&model.config, PROMPT_LEN, &[iv])?;
    let patched = run_batch(model, &[p.tokens], &set)?;
    Ok(effect_between(clean.logits_of(0), patched.logits_of(0), p.result, cf.result, space))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEntry {
    pub component: ComponentRef,
    pub mean: f64,
    pub per_prompt: Vec<f64>,
    pub flagged: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectReport {
    pub entries: Vec<EffectEntry>,
    pub prompt_count: usize,
    pub operators: BTreeMap<Operator, usize>,
    pub space: EffectSpace,
    pub flagged_samples: usize,
    /// Whether flagged samples were left out of the means.
    pub flagged_excluded: bool,
}

impl EffectReport {
    fn from_columns(
        components: Vec<ComponentRef>,
        columns: Vec<Vec<Effect>>,
        pairs: &[(Prompt, Prompt)],
        space: EffectSpace,
    ) -> Self {
        let total: usize = columns.iter().map(Vec::len).sum();
        let flagged_samples = columns.iter().flatten().filter(|e| e.flagged).count();
        let flagged_excluded = total > 0 && flagged_samples as f64 / total as f64 > FLAGGED_SHARE_LIMIT;
        let entries = components
            .into_iter()
            .zip(columns)
            .map(|(component, col)| {
                let kept: Vec<f64> = col
                    .iter()
                    .filter(|e| !(flagged_excluded && e.flagged))
                    .map(|e| e.value)
                    .collect();
                let mean = if kept.is_empty() {
                    0.0
                } else {
                    kept.iter().sum::<f64>() / kept.len() as f64
                };
                EffectEntry {
                    component,
                    mean,
                    per_prompt: col.iter().map(|e| e.value).collect(),
                    flagged: col.iter().map(|e| e.flagged).collect(),
                }
            })
            .collect();
        let mut operators = BTreeMap::new();
        for (p, _) in pairs {
            *operators.entry(p.operator).or_insert(0) += 1;
        }
        Self {
            entries,
            prompt_count: pairs.len(),
            operators,
            space,
            flagged_samples,
            flagged_excluded,
        }
    }

    pub fn mean_of(&self, component: &ComponentRef) -> Option<f64> {
        self.entries.iter().find(|e| &e.component == component).map(|e| e.mean)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    AttnHead,
    MlpLayer,
}

/// Every component of a granularity at every position, in a fixed order.
pub fn components(model: &ModelBundle, granularity: Granularity) -> Vec<ComponentRef> {
    let cfg = &model.config;
    let mut out = Vec::new();
    for layer in 0..cfg.n_layers {
        for position in 0..PROMPT_LEN {
            match granularity {
                Granularity::AttnHead => {
                    out.extend((0..cfg.n_heads).map(|head| ComponentRef::AttnHead { layer, head, position }))
                }
                Granularity::MlpLayer => out.push(ComponentRef::MlpLayer { layer, position }),
            }
        }
    }
    out
}

/// Mean patching effect of every head or MLP layer at every position.
pub fn component_scan(
    model: &ModelBundle,
    pairs: &[(Prompt, Prompt)],
    granularity: Granularity,
    space: EffectSpace,
) -> Result<EffectReport> {
    if pairs.is_empty() {
        return Err(invalid("component scan needs at least one prompt pair"));
    }
    let comps = components(model, granularity);
    let mut columns = vec![Vec::with_capacity(pairs.len()); comps.len()];
    for (p, cf) in pairs {
        check_pair(p, cf)?;
        let clean = forward_with_cache(model, &p.tokens)?;
        let source = forward_with_cache(model, &cf.tokens)?;
        for (c, col) in comps.iter().zip(columns.iter_mut()) {
            col.push(patched_effect(model, p, cf, &clean, &source, *c, space)?);
        }
    }
    Ok(EffectReport::from_columns(comps, columns, pairs, space))
}

/// Patching effect of every neuron in `layers` at the final position.
pub fn neuron_scan(
    model: &ModelBundle,
    pairs: &[(Prompt, Prompt)],
    layers: std::ops::Range<usize>,
    space: EffectSpace,
) -> Result<EffectReport> {
    if pairs.is_empty() {
        return Err(invalid("neuron scan needs at least one prompt pair"));
    }
    let cfg = &model.config;
    if layers.is_empty() || layers.end > cfg.n_layers {
        return Err(invalid(format!("layer range {layers:?} is outside the model")));
    }
    let m = cfg.d_mlp;
    let comps: Vec<ComponentRef> = layers
        .clone()
        .flat_map(|layer| {
            (0..m).map(move |neuron| ComponentRef::MlpNeuron {
                layer,
                neuron,
                position: FINAL_POS,
            })
        })
        .collect();
    let mut columns = vec![Vec::with_capacity(pairs.len()); comps.len()];
    for (p, cf) in pairs {
        check_pair(p, cf)?;
        let clean = forward_with_cache(model, &p.tokens)?;
        let source = forward_with_cache(model, &cf.tokens)?;
        for (li, layer) in layers.clone().enumerate() {
            let base = clean.h_post_at(layer, 0, FINAL_POS);
            let donor = source.h_post_at(layer, 0, FINAL_POS);
            let mut rows = Vec::with_capacity(m * m);
            for n in 0..m {
                rows.extend_from_slice(base);
                rows[n * m + n] = donor[n];
            }
            let mlp_out = mlp_output_rows(model, layer, &rows, m);
            let logits = resume_from_mlp_out(model, &clean, layer, &mlp_out)?;
            for n in 0..m {
                let e = effect_between(clean.logits_of(0), logits.row(n), p.result, cf.result, space);
                columns[li * m + n].push(e);
            }
        }
    }
    Ok(EffectReport::from_columns(comps, columns, pairs, space))
}

/// Neurons kept per layer.
pub type NeuronWhitelist = BTreeMap<usize, Vec<usize>>;

/// The `k` highest-mean neurons of each layer in a neuron scan, lowest index
/// first among ties. Each layer's list is sorted by neuron index.
pub fn top_k_neurons(report: &EffectReport, k: usize, d_mlp: usize) -> Result<NeuronWhitelist> {
    if k == 0 || k > d_mlp {
        return Err(invalid(format!("k must be in 1..={d_mlp}, got {k}")));
    }
    let mut by_layer: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for e in &report.entries {
        if let ComponentRef::MlpNeuron { layer, neuron, .. } = e.component {
            by_layer.entry(layer).or_default().push((neuron, e.mean));
        }
    }
    if by_layer.is_empty() {
        return Err(invalid("report holds no neuron entries"));
    }
    Ok(by_layer
        .into_iter()
        .map(|(layer, mut v)| {
            v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let mut keep: Vec<usize> = v.into_iter().take(k).map(|(n, _)| n).collect();
            keep.sort_unstable();
            (layer, keep)
        })
        .collect())
}
