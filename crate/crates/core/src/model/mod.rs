// SPDX-License-Identifier: MIT OR Apache-2.0

//! Instrumented decoder-only transformer.
//!
//! Every quantity the causal analyses touch is addressable: per-head
//! attention outputs, MLP outputs, single MLP neurons (`h_post`), residual
//! points, and individual attention edges. Rows of each layer's `W_out`
//! (`[d_mlp, d_model]`) are the value vectors `v_out`, so an MLP's output is
//! `Σ_n h_post[n] · W_out[n]` (plus `b_out` for the simple variant).

mod checkpoint;
mod forward;
mod intervention;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{Params, Tensor};
use crate::vocab::Tokenizer;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use forward::{
    final_logits, forward_with_cache, forward_with_interventions, logit_lens, mean_activations,
    resume_from_mlp_out, run_batch, ActivationCache, BATCH_CHUNK,
};
pub(crate) use forward::mlp_output_rows;
pub use intervention::{Action, ComponentRef, Intervention, InterventionSet};

/// Number of tokens in every arithmetic prompt: `op1 operator op2 =`.
pub const PROMPT_LEN: usize = 4;
/// Position of the `=` token, where the answer is read out.
pub const FINAL_POS: usize = PROMPT_LEN - 1;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MlpVariant {
    /// `h_post = gelu(h_in · W_inᵀ + b_in)`, output bias `b_out`.
    Simple,
    /// `h_post = silu(h_in · W_gateᵀ) ⊙ (h_in · W_inᵀ)`, no biases.
    Gated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormVariant {
    LayerNorm,
    RmsNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionEncoding {
    LearnedAbsolute,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub mlp_variant: MlpVariant,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub norm_variant: NormVariant,
    pub position_encoding: PositionEncoding,
}

impl ModelConfig {
    /// Desk default: four layers, 64-wide residual, four heads, 512 gated
    /// MLP neurons per layer, RMSNorm.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_mlp: 512,
            mlp_variant: MlpVariant::Gated,
            vocab_size,
            max_positions: PROMPT_LEN,
            norm_variant: NormVariant::RmsNorm,
            position_encoding: PositionEncoding::LearnedAbsolute,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self, tokenizer: &Tokenizer) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_mlp == 0 {
            return Err(invalid("model dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size != tokenizer.vocab_size() {
            return Err(invalid(format!(
                "vocab_size {} does not match tokenizer ({})",
                self.vocab_size,
                tokenizer.vocab_size()
            )));
        }
        if self.max_positions != PROMPT_LEN {
            return Err(invalid("max_positions must be 4"));
        }
        Ok(())
    }
}

/// Parameter naming scheme shared by the instrumented forward, the training
/// graph, and checkpoints.
pub mod names {
    pub const EMBED: &str = "embed";
    pub const POS_EMBED: &str = "pos_embed";
    pub const LN_FINAL_W: &str = "ln_final.w";
    pub const LN_FINAL_B: &str = "ln_final.b";
    pub const UNEMBED: &str = "unembed";

    pub fn block(layer: usize, leaf: &str) -> String {
        format!("blocks.{layer}.{leaf}")
    }
    pub fn ln1_w(l: usize) -> String {
        block(l, "ln1.w")
    }
    pub fn ln1_b(l: usize) -> String {
        block(l, "ln1.b")
    }
    pub fn ln2_w(l: usize) -> String {
        block(l, "ln2.w")
    }
    pub fn ln2_b(l: usize) -> String {
        block(l, "ln2.b")
    }
    pub fn w_q(l: usize) -> String {
        block(l, "attn.w_q")
    }
    pub fn w_k(l: usize) -> String {
        block(l, "attn.w_k")
    }
    pub fn w_v(l: usize) -> String {
        block(l, "attn.w_v")
    }
    pub fn w_o(l: usize) -> String {
        block(l, "attn.w_o")
    }
    pub fn w_in(l: usize) -> String {
        block(l, "mlp.w_in")
    }
    pub fn w_gate(l: usize) -> String {
        block(l, "mlp.w_gate")
    }
    pub fn b_in(l: usize) -> String {
        block(l, "mlp.b_in")
    }
    pub fn w_out(l: usize) -> String {
        block(l, "mlp.w_out")
    }
    pub fn b_out(l: usize) -> String {
        block(l, "mlp.b_out")
    }
}

/// Architecture, parameters, and tokenizer of one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub params: Params,
    pub tokenizer: Tokenizer,
}

impl ModelBundle {
    /// Expected parameter names and shapes for a config.
    pub fn manifest(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, m, v) = (config.d_model, config.d_mlp, config.vocab_size);
        let layer_norm = config.norm_variant == NormVariant::LayerNorm;
        let mut out = vec![
            (names::EMBED.to_string(), vec![v, d]),
            (names::POS_EMBED.to_string(), vec![config.max_positions, d]),
        ];
        for l in 0..config.n_layers {
            out.push((names::ln1_w(l), vec![d]));
            if layer_norm {
                out.push((names::ln1_b(l), vec![d]));
            }
            for name in [names::w_q(l), names::w_k(l), names::w_v(l), names::w_o(l)] {
                out.push((name, vec![d, d]));
            }
            out.push((names::ln2_w(l), vec![d]));
            if layer_norm {
                out.push((names::ln2_b(l), vec![d]));
            }
            out.push((names::w_in(l), vec![m, d]));
            match config.mlp_variant {
                MlpVariant::Gated => out.push((names::w_gate(l), vec![m, d])),
                MlpVariant::Simple => {
                    out.push((names::b_in(l), vec![m]));
                    out.push((names::b_out(l), vec![d]));
                }
            }
            out.push((names::w_out(l), vec![m, d]));
        }
        out.push((names::LN_FINAL_W.to_string(), vec![d]));
        if layer_norm {
            out.push((names::LN_FINAL_B.to_string(), vec![d]));
        }
        out.push((names::UNEMBED.to_string(), vec![d, v]));
        out
    }

    /// Fresh model with Gaussian weights (std `1/sqrt(fan_in)`; residual
    /// writers additionally scaled by `1/sqrt(2·n_layers)`), unit norm gains
    /// and zero biases.
    pub fn init(config: ModelConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        config.validate(&tokenizer)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let residual_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let mut params = Params::new();
        for (name, shape) in Self::manifest(&config) {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".w") && shape.len() == 1 {
                vec![1.0; n]
            } else if shape.len() == 1 {
                vec![0.0; n]
            } else {
                let fan_in = if name.ends_with("w_in") || name.ends_with("w_gate") {
                    shape[1]
                } else {
                    shape[0]
                };
                let mut std = match name.as_str() {
                    names::EMBED | names::POS_EMBED => 1.0,
                    _ => 1.0 / (fan_in as f64).sqrt(),
                };
                if name.ends_with("w_o") || name.ends_with("w_out") {
                    std *= residual_scale;
                }
                let normal = Normal::new(0.0, std).expect("std is positive");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self {
            config,
            params,
            tokenizer,
        })
    }

    /// Check that every parameter required by the config is present with
    /// the right shape and no extras exist.
    pub fn validate(&self) -> Result<()> {
        self.config.validate(&self.tokenizer)?;
        let manifest = Self::manifest(&self.config);
        if manifest.len() != self.params.len() {
            return Err(invalid(format!(
                "expected {} parameters, found {}",
                manifest.len(),
                self.params.len()
            )));
        }
        for (name, shape) in manifest {
            match self.params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(invalid(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(invalid(format!("parameter {name} is missing"))),
            }
        }
        Ok(())
    }

    pub fn param(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("validated model lacks parameter {name}"))
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("validated model lacks parameter {name}"))
    }

    /// Value vector `v_out` of neuron `n` at `layer`.
    pub fn v_out(&self, layer: usize, neuron: usize) -> &[f64] {
        self.param(&names::w_out(layer)).row(neuron)
    }

    /// Token ids of a prompt, checked against the vocabulary.
    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        for &t in tokens {
            if t >= self.config.vocab_size {
                return Err(crate::error::ForgeError::UnknownToken(t));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
