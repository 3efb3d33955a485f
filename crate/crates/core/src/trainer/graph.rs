// SPDX-License-Identifier: MIT OR Apache-2.0

//! Differentiable copy of the instrumented forward pass, used for training.

use std::collections::BTreeMap;

use crate::model::{names, MlpVariant, ModelConfig, NormVariant, NORM_EPS};
use crate::numerics::{Activation, Graph, NodeId, Tensor};

/// Training graph for a fixed batch size and sequence length. Outputs
/// `logits` (`[batch, V]`, last position) and `loss` (mean cross-entropy).
pub fn build(config: &ModelConfig, batch: usize, seq: usize) -> Graph {
    let (heads, dh) = (config.n_heads, config.d_head());
    let mut g = Graph::new();
    let tokens = g.input("tokens");
    let positions = g.input("positions");
    let targets = g.input("targets");
    let embed = g.param(names::EMBED);
    let pos_embed = g.param(names::POS_EMBED);
    let tok_e = g.embedding(embed, tokens);
    let pos_e = g.embedding(pos_embed, positions);
    let mut x = g.add(tok_e, pos_e);

    let norm = |g: &mut Graph, x: NodeId, w: &str, b: &str| -> NodeId {
        let gain = g.param(w);
        match config.norm_variant {
            NormVariant::RmsNorm => g.rms_norm(x, gain, NORM_EPS),
            NormVariant::LayerNorm => {
                let bias = g.param(b);
                g.layer_norm(x, gain, bias, NORM_EPS)
            }
        }
    };

    for l in 0..config.n_layers {
        let xn = norm(&mut g, x, &names::ln1_w(l), &names::ln1_b(l));
        let mut proj = |name: String| {
            let w = g.param(&name);
            let y = g.matmul(xn, w);
            g.split_heads(y, batch, seq, heads)
        };
        let q = proj(names::w_q(l));
        let k = proj(names::w_k(l));
        let v = proj(names::w_v(l));
        let scores = g.batch_matmul(q, k, true);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(scores, true);
        let z = g.batch_matmul(attn, v, false);
        let z = g.merge_heads(z, batch, seq, heads);
        let w_o = g.param(&names::w_o(l));
        let attn_out = g.matmul(z, w_o);
        x = g.add(x, attn_out);

        let h_in = norm(&mut g, x, &names::ln2_w(l), &names::ln2_b(l));
        let w_in = g.param(&names::w_in(l));
        let pre = g.matmul_nt(h_in, w_in);
        let h_post = match config.mlp_variant {
            MlpVariant::Gated => {
                let w_gate = g.param(&names::w_gate(l));
                let gate = g.matmul_nt(h_in, w_gate);
                let gate = g.activation(gate, Activation::Silu);
                g.mul(gate, pre)
            }
            MlpVariant::Simple => {
                let b_in = g.param(&names::b_in(l));
                let pre = g.add_bias(pre, b_in);
                g.activation(pre, Activation::Gelu)
            }
        };
        let w_out = g.param(&names::w_out(l));
        let mut mlp_out = g.matmul(h_post, w_out);
        if config.mlp_variant == MlpVariant::Simple {
            let b_out = g.param(&names::b_out(l));
            mlp_out = g.add_bias(mlp_out, b_out);
        }
        x = g.add(x, mlp_out);
    }

    let last: Vec<usize> = (0..batch).map(|b| b * seq + seq - 1).collect();
    let x_last = g.select_rows(x, last);
    let xf = norm(&mut g, x_last, names::LN_FINAL_W, names::LN_FINAL_B);
    let unembed = g.param(names::UNEMBED);
    let logits = g.matmul(xf, unembed);
    let loss = g.cross_entropy(logits, targets);
    g.mark_output("logits", logits);
    g.mark_output("loss", loss);
    g
}

/// Graph inputs for a batch of token sequences and answer tokens.
pub fn inputs<S: AsRef<[usize]>>(seqs: &[S], targets: &[usize]) -> BTreeMap<String, Tensor> {
    let seq = seqs[0].as_ref().len();
    let tokens: Vec<f64> = seqs.iter().flat_map(|s| s.as_ref().iter().map(|&t| t as f64)).collect();
    let positions: Vec<f64> = (0..seqs.len()).flat_map(|_| (0..seq).map(|p| p as f64)).collect();
    let mut m = BTreeMap::new();
    m.insert("tokens".to_string(), Tensor::vector(tokens));
    m.insert("positions".to_string(), Tensor::vector(positions));
    m.insert(
        "targets".to_string(),
        Tensor::vector(targets.iter().map(|&t| t as f64).collect()),
    );
    m
}
