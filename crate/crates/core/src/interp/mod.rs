// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal analyses of a trained model.

mod faithfulness;
mod patching;
mod patterns;

pub use faithfulness::{
    faithfulness, faithfulness_from, normalized_logit, normalized_logits, Circuit, FaithfulnessReport, DEGENERATE_GAP,
};
pub use patching::{
    component_scan, components, effect_from_logits, effect_from_probabilities, neuron_scan, patch_effect,
    top_k_neurons, Effect, EffectEntry, EffectReport, EffectSpace, Granularity, NeuronWhitelist,
    FLAGGED_SHARE_LIMIT, PROB_FLOOR,
};
pub use patterns::{
    activation_pattern, activation_patterns, attention_pattern, grid_mask, logit_pattern, neuron_iou,
    token_activation_scan, ActivationPattern2D, Grid, LogitPattern2D,
};

#[cfg(test)]
mod tests;
