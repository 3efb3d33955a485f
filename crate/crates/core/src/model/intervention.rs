// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{invalid, ForgeError, Result};
use crate::numerics::Tensor;

/// Address of an interventable unit. Positions are 0-based; the answer is
/// read at position 3 (the `=` token).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ComponentRef {
    /// One head's contribution to the residual stream (after `W_O`).
    AttnHead { layer: usize, head: usize, position: usize },
    /// Whole MLP output `h_out`.
    MlpLayer { layer: usize, position: usize },
    /// Single post-activation `h_post[neuron]`.
    MlpNeuron { layer: usize, neuron: usize, position: usize },
    /// Residual stream entering `layer`; `layer == n_layers` is the stream
    /// entering the final norm.
    ResidPoint { layer: usize, position: usize },
    /// Attention weight from query `position` to key `source` in one head.
    AttnEdge {
        layer: usize,
        head: usize,
        source: usize,
        position: usize,
    },
}

impl ComponentRef {
    pub fn layer(&self) -> usize {
        match *self {
            ComponentRef::AttnHead { layer, .. }
            | ComponentRef::MlpLayer { layer, .. }
            | ComponentRef::MlpNeuron { layer, .. }
            | ComponentRef::ResidPoint { layer, .. }
            | ComponentRef::AttnEdge { layer, .. } => layer,
        }
    }

    pub fn position(&self) -> usize {
        match *self {
            ComponentRef::AttnHead { position, .. }
            | ComponentRef::MlpLayer { position, .. }
            | ComponentRef::MlpNeuron { position, .. }
            | ComponentRef::ResidPoint { position, .. }
            | ComponentRef::AttnEdge { position, .. } => position,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ComponentRef::AttnHead { .. } => "attn_head",
            ComponentRef::MlpLayer { .. } => "mlp_layer",
            ComponentRef::MlpNeuron { .. } => "mlp_neuron",
            ComponentRef::ResidPoint { .. } => "resid_point",
            ComponentRef::AttnEdge { .. } => "attn_edge",
        }
    }

    /// Head, neuron, or source index; 0 for kinds without one.
    pub fn index(&self) -> usize {
        match *self {
            ComponentRef::AttnHead { head, .. } => head,
            ComponentRef::MlpNeuron { neuron, .. } => neuron,
            ComponentRef::AttnEdge { source, .. } => source,
            _ => 0,
        }
    }

    /// Length of the activation this component exposes.
    pub fn activation_len(&self, config: &ModelConfig) -> usize {
        match self {
            ComponentRef::AttnHead { .. } | ComponentRef::MlpLayer { .. } | ComponentRef::ResidPoint { .. } => {
                config.d_model
            }
            ComponentRef::MlpNeuron { .. } | ComponentRef::AttnEdge { .. } => 1,
        }
    }

    pub fn validate(&self, config: &ModelConfig, seq_len: usize) -> Result<()> {
        let layer_ok = match self {
            ComponentRef::ResidPoint { layer, .. } => *layer <= config.n_layers,
            _ => self.layer() < config.n_layers,
        };
        let index_ok = match *self {
            ComponentRef::AttnHead { head, .. } => head < config.n_heads,
            ComponentRef::MlpNeuron { neuron, .. } => neuron < config.d_mlp,
            ComponentRef::AttnEdge {
                head,
                source,
                position,
                ..
            } => head < config.n_heads && source <= position,
            _ => true,
        };
        if !layer_ok || !index_ok || self.position() >= seq_len {
            return Err(invalid(format!("component {self} is out of bounds")));
        }
        Ok(())
    }
}

impl fmt::Display for ComponentRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ComponentRef::AttnHead { layer, head, position } => write!(f, "L{layer}H{head}@{position}"),
            ComponentRef::MlpLayer { layer, position } => write!(f, "MLP{layer}@{position}"),
            ComponentRef::MlpNeuron {
                layer,
                neuron,
                position,
            } => write!(f, "L{layer}N{neuron}@{position}"),
            ComponentRef::ResidPoint { layer, position } => write!(f, "resid{layer}@{position}"),
            ComponentRef::AttnEdge {
                layer,
                head,
                source,
                position,
            } => write!(f, "L{layer}H{head}:{position}->{source}"),
        }
    }
}

/// What to do with a component's activation.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Replace(Tensor),
    Zero,
    Scale(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Intervention {
    pub target: ComponentRef,
    pub action: Action,
}

impl Intervention {
    pub fn replace(target: ComponentRef, value: Tensor) -> Self {
        Self {
            target,
            action: Action::Replace(value),
        }
    }

    pub fn zero(target: ComponentRef) -> Self {
        Self {
            target,
            action: Action::Zero,
        }
    }

    pub fn scale(target: ComponentRef, factor: f64) -> Self {
        Self {
            target,
            action: Action::Scale(factor),
        }
    }
}

/// Validated interventions indexed by target.
#[derive(Debug, Clone, Default)]
pub struct InterventionSet {
    by_target: BTreeMap<ComponentRef, Action>,
}

impl InterventionSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(config: &ModelConfig, seq_len: usize, interventions: &[Intervention]) -> Result<Self> {
        let mut by_target = BTreeMap::new();
        for iv in interventions {
            iv.target.validate(config, seq_len)?;
            if let Action::Replace(v) = &iv.action {
                let want = iv.target.activation_len(config);
                if v.len() != want {
                    return Err(invalid(format!(
                        "replacement for {} has {} values, expected {want}",
                        iv.target,
                        v.len()
                    )));
                }
            }
            if by_target.insert(iv.target, iv.action.clone()).is_some() {
                return Err(ForgeError::ConflictingIntervention(iv.target.to_string()));
            }
        }
        Ok(Self { by_target })
    }

    pub fn is_empty(&self) -> bool {
        self.by_target.is_empty()
    }

    pub fn len(&self) -> usize {
        self.by_target.len()
    }

    /// Interventions of one layer, in target order.
    pub(crate) fn in_layer(&self, layer: usize) -> impl Iterator<Item = (&ComponentRef, &Action)> {
        self.by_target.iter().filter(move |(t, _)| t.layer() == layer)
    }
}

/// Apply an action to a contiguous activation slice.
pub(crate) fn apply_action(action: &Action, values: &mut [f64]) {
    match action {
        Action::Replace(v) => values.copy_from_slice(v.data()),
        Action::Zero => values.iter_mut().for_each(|x| *x = 0.0),
        Action::Scale(f) => values.iter_mut().for_each(|x| *x *= f),
    }
}
