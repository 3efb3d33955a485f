// SPDX-License-Identifier: MIT OR Apache-2.0

//! Instrumented forward pass over a batch of equal-length sequences.
//!
//! All matrix products go through row-independent kernels, so a sequence's
//! activations are bitwise identical whether it runs alone or in a batch.

use super::intervention::{apply_action, Action, ComponentRef, Intervention, InterventionSet};
use super::{names, MlpVariant, ModelBundle, NormVariant, NORM_EPS, PROMPT_LEN};
use crate::error::{invalid, Result};
use crate::numerics::kernels::{self, axpy, dot};
use crate::numerics::Tensor;

/// Sequences per internal batch for bulk helpers.
pub const BATCH_CHUNK: usize = 256;

/// Every activation of a batched forward pass.
///
/// Row `b * seq + t` of the per-row tensors belongs to sequence `b`,
/// position `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache {
    pub batch: usize,
    pub seq: usize,
    /// `n_layers + 1` tensors `[B·T, d]`; entry `l` enters block `l`, the last
    /// one enters the final norm.
    pub resid_pre: Vec<Tensor>,
    /// Attention keys and values per layer, `[B·T, d]`.
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
    /// Attention weights per layer, `[B, H, T, T]`.
    pub attn_pattern: Vec<Tensor>,
    /// Per-head residual contributions per layer, `[B·T, H·d]`.
    pub head_out: Vec<Tensor>,
    /// Residual after attention, before the MLP.
    pub resid_mid: Vec<Tensor>,
    /// Normalized MLP input `h_in`.
    pub mlp_in: Vec<Tensor>,
    /// Neuron activations `h_post`, `[B·T, d_mlp]`.
    pub h_post: Vec<Tensor>,
    /// MLP output `h_out`, `[B·T, d]`.
    pub mlp_out: Vec<Tensor>,
    /// Logits at the last position, `[B, V]`.
    pub logits: Tensor,
}

impl ActivationCache {
    fn row(&self, b: usize, position: usize) -> usize {
        b * self.seq + position
    }

    /// Activation of a component for sequence 0.
    pub fn get(&self, target: &ComponentRef) -> Result<Tensor> {
        self.get_in(0, target)
    }

    /// Activation of a component for sequence `b`.
    pub fn get_in(&self, b: usize, target: &ComponentRef) -> Result<Tensor> {
        if b >= self.batch || target.position() >= self.seq {
            return Err(invalid(format!("{target} not in cache of batch {}", self.batch)));
        }
        let layers = self.h_post.len();
        let layer_ok = match target {
            ComponentRef::ResidPoint { layer, .. } => *layer <= layers,
            _ => target.layer() < layers,
        };
        if !layer_ok {
            return Err(invalid(format!("{target} not in cache")));
        }
        let r = self.row(b, target.position());
        let t = match *target {
            ComponentRef::AttnHead { layer, head, .. } => {
                let d = self.resid_pre[0].shape()[1];
                let row = self.head_out[layer].row(r);
                if (head + 1) * d > row.len() {
                    return Err(invalid(format!("{target} not in cache")));
                }
                Tensor::vector(row[head * d..(head + 1) * d].to_vec())
            }
            ComponentRef::MlpLayer { layer, .. } => Tensor::vector(self.mlp_out[layer].row(r).to_vec()),
            ComponentRef::MlpNeuron { layer, neuron, .. } => {
                let row = self.h_post[layer].row(r);
                let v = *row
                    .get(neuron)
                    .ok_or_else(|| invalid(format!("{target} not in cache")))?;
                Tensor::scalar(v)
            }
            ComponentRef::ResidPoint { layer, .. } => Tensor::vector(self.resid_pre[layer].row(r).to_vec()),
            ComponentRef::AttnEdge {
                layer,
                head,
                source,
                position,
            } => {
                let p = self.pattern(layer, b, head);
                Tensor::scalar(p[position * self.seq + source])
            }
        };
        Ok(t)
    }

    /// `[T, T]` attention weights of one head for sequence `b`.
    pub fn pattern(&self, layer: usize, b: usize, head: usize) -> &[f64] {
        let tt = self.seq * self.seq;
        let heads = self.attn_pattern[layer].len() / (self.batch * tt);
        let start = (b * heads + head) * tt;
        &self.attn_pattern[layer].data()[start..start + tt]
    }

    pub fn n_heads(&self) -> usize {
        self.attn_pattern[0].len() / (self.batch * self.seq * self.seq)
    }

    /// Neuron activations of `layer` at `position` for sequence `b`.
    pub fn h_post_at(&self, layer: usize, b: usize, position: usize) -> &[f64] {
        self.h_post[layer].row(self.row(b, position))
    }

    pub fn logits_of(&self, b: usize) -> &[f64] {
        self.logits.row(b)
    }

    pub fn probabilities(&self, b: usize) -> Vec<f64> {
        kernels::softmax(self.logits_of(b))
    }
}

#[derive(Clone, Copy)]
enum NormSite {
    Attn(usize),
    Mlp(usize),
    Final,
}

fn norm_rows(model: &ModelBundle, site: NormSite, x: &[f64], d: usize) -> Vec<f64> {
    let (w, b) = match site {
        NormSite::Attn(l) => (names::ln1_w(l), names::ln1_b(l)),
        NormSite::Mlp(l) => (names::ln2_w(l), names::ln2_b(l)),
        NormSite::Final => (names::LN_FINAL_W.to_string(), names::LN_FINAL_B.to_string()),
    };
    let gain = model.param(&w).data();
    let mut out = vec![0.0; x.len()];
    match model.config.norm_variant {
        NormVariant::RmsNorm => {
            for (xi, oi) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
                kernels::rms_norm_row(xi, gain, NORM_EPS, oi);
            }
        }
        NormVariant::LayerNorm => {
            let bias = model.param(&b).data();
            for (xi, oi) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
                kernels::layer_norm_row(xi, gain, bias, NORM_EPS, oi);
            }
        }
    }
    out
}

fn add_bias_rows(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// `h_post` from the normalized MLP input rows.
fn mlp_hidden(model: &ModelBundle, layer: usize, h_in: &[f64], rows: usize) -> Vec<f64> {
    let (d, m) = (model.config.d_model, model.config.d_mlp);
    let mut pre = kernels::matmul_nt(h_in, model.param(&names::w_in(layer)).data(), rows, d, m);
    match model.config.mlp_variant {
        MlpVariant::Gated => {
            let gate = kernels::matmul_nt(h_in, model.param(&names::w_gate(layer)).data(), rows, d, m);
            for (p, g) in pre.iter_mut().zip(&gate) {
                *p *= kernels::silu(*g);
            }
        }
        MlpVariant::Simple => {
            add_bias_rows(&mut pre, model.param(&names::b_in(layer)).data());
            pre.iter_mut().for_each(|v| *v = kernels::gelu(*v));
        }
    }
    pre
}

fn mlp_output(model: &ModelBundle, layer: usize, h_post: &[f64], rows: usize) -> Vec<f64> {
    let (d, m) = (model.config.d_model, model.config.d_mlp);
    let mut out = kernels::matmul(h_post, model.param(&names::w_out(layer)).data(), rows, m, d);
    if model.config.mlp_variant == MlpVariant::Simple {
        add_bias_rows(&mut out, model.param(&names::b_out(layer)).data());
    }
    out
}

/// Causal attention weights for one query against keys `0..=query`.
fn attention_weights(q_head: &[f64], key_heads: &[&[f64]], scale: f64) -> Vec<f64> {
    let mut w: Vec<f64> = key_heads.iter().map(|k| dot(q_head, k) * scale).collect();
    kernels::softmax_in_place(&mut w);
    w
}

/// Per-head output projection: `head_out[r, h] = z[r, h-slice] · W_O[h-rows]`.
fn project_heads(model: &ModelBundle, layer: usize, z: &[f64], rows: usize) -> Vec<f64> {
    let (d, h, dh) = (model.config.d_model, model.config.n_heads, model.config.d_head());
    let w_o = model.param(&names::w_o(layer)).data();
    let mut out = vec![0.0; rows * h * d];
    for hi in 0..h {
        let zh: Vec<f64> = z
            .chunks_exact(d)
            .flat_map(|row| row[hi * dh..(hi + 1) * dh].iter().copied())
            .collect();
        let oh = kernels::matmul(&zh, &w_o[hi * dh * d..(hi + 1) * dh * d], rows, dh, d);
        for r in 0..rows {
            out[(r * h + hi) * d..(r * h + hi + 1) * d].copy_from_slice(&oh[r * d..(r + 1) * d]);
        }
    }
    out
}

fn sum_heads(head_out: &[f64], rows: usize, heads: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * d];
    for r in 0..rows {
        let acc = &mut out[r * d..(r + 1) * d];
        for hi in 0..heads {
            for (a, v) in acc.iter_mut().zip(&head_out[(r * heads + hi) * d..(r * heads + hi + 1) * d]) {
                *a += v;
            }
        }
    }
    out
}

fn unembed(model: &ModelBundle, final_rows: &[f64], n: usize) -> Vec<f64> {
    let d = model.config.d_model;
    let normed = norm_rows(model, NormSite::Final, final_rows, d);
    kernels::matmul(&normed, model.param(names::UNEMBED).data(), n, d, model.config.vocab_size)
}

/// Re-weight one attention row after edge interventions and renormalize.
/// A row whose weights all become zero stays zero; an edit that leaves the
/// row unchanged leaves it untouched.
fn edit_attention_row(weights: &mut [f64], edits: &[(usize, &Action)]) {
    let before = weights.to_vec();
    for &(source, action) in edits {
        match action {
            Action::Zero => weights[source] = 0.0,
            Action::Scale(f) => weights[source] *= f,
            Action::Replace(v) => weights[source] = v.data()[0],
        }
    }
    if weights == before.as_slice() {
        return;
    }
    let total: f64 = weights.iter().sum();
    if total != 0.0 {
        weights.iter_mut().for_each(|w| *w /= total);
    }
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("forward pass builds consistent shapes")
}

/// Run a batch of equal-length sequences (length 1..=4) with the same
/// interventions applied to every sequence.
pub fn run_batch<S: AsRef<[usize]>>(
    model: &ModelBundle,
    seqs: &[S],
    interventions: &InterventionSet,
) -> Result<ActivationCache> {
    let cfg = &model.config;
    let batch = seqs.len();
    if batch == 0 {
        return Err(invalid("empty batch"));
    }
    let seq = seqs[0].as_ref().len();
    if seq == 0 || seq > cfg.max_positions || seqs.iter().any(|s| s.as_ref().len() != seq) {
        return Err(invalid(format!(
            "sequences must share a length in 1..={}",
            cfg.max_positions
        )));
    }
    for s in seqs {
        model.check_tokens(s.as_ref())?;
    }
    let (d, heads, dh) = (cfg.d_model, cfg.n_heads, cfg.d_head());
    let rows = batch * seq;
    let scale = 1.0 / (dh as f64).sqrt();

    let embed = model.param(names::EMBED);
    let pos_embed = model.param(names::POS_EMBED);
    let mut resid = vec![0.0; rows * d];
    for (b, s) in seqs.iter().enumerate() {
        for (t, &tok) in s.as_ref().iter().enumerate() {
            let r = b * seq + t;
            for ((o, e), p) in resid[r * d..(r + 1) * d]
                .iter_mut()
                .zip(embed.row(tok))
                .zip(pos_embed.row(t))
            {
                *o = e + p;
            }
        }
    }

    let mut cache = ActivationCache {
        batch,
        seq,
        resid_pre: Vec::with_capacity(cfg.n_layers + 1),
        keys: Vec::with_capacity(cfg.n_layers),
        values: Vec::with_capacity(cfg.n_layers),
        attn_pattern: Vec::with_capacity(cfg.n_layers),
        head_out: Vec::with_capacity(cfg.n_layers),
        resid_mid: Vec::with_capacity(cfg.n_layers),
        mlp_in: Vec::with_capacity(cfg.n_layers),
        h_post: Vec::with_capacity(cfg.n_layers),
        mlp_out: Vec::with_capacity(cfg.n_layers),
        logits: Tensor::scalar(0.0),
    };

    for l in 0..cfg.n_layers {
        let layer_ivs: Vec<(&ComponentRef, &Action)> = interventions.in_layer(l).collect();

        for (target, action) in &layer_ivs {
            if let ComponentRef::ResidPoint { position, .. } = target {
                for b in 0..batch {
                    let r = b * seq + position;
                    apply_action(action, &mut resid[r * d..(r + 1) * d]);
                }
            }
        }
        cache.resid_pre.push(tensor(vec![rows, d], resid.clone()));

        let xn = norm_rows(model, NormSite::Attn(l), &resid, d);
        let q = kernels::matmul(&xn, model.param(&names::w_q(l)).data(), rows, d, d);
        let k = kernels::matmul(&xn, model.param(&names::w_k(l)).data(), rows, d, d);
        let v = kernels::matmul(&xn, model.param(&names::w_v(l)).data(), rows, d, d);

        let mut pattern = vec![0.0; batch * heads * seq * seq];
        let mut z = vec![0.0; rows * d];
        for b in 0..batch {
            for hi in 0..heads {
                let hs = hi * dh..(hi + 1) * dh;
                for t in 0..seq {
                    let q_row = &q[(b * seq + t) * d..][hs.clone()];
                    let key_heads: Vec<&[f64]> = (0..=t)
                        .map(|s| &k[(b * seq + s) * d..][hs.clone()])
                        .collect();
                    let mut w = attention_weights(q_row, &key_heads, scale);
                    let edits: Vec<(usize, &Action)> = layer_ivs
                        .iter()
                        .filter_map(|(target, action)| match target {
                            ComponentRef::AttnEdge {
                                head,
                                source,
                                position,
                                ..
                            } if *head == hi && *position == t => Some((*source, *action)),
                            _ => None,
                        })
                        .collect();
                    if !edits.is_empty() {
                        edit_attention_row(&mut w, &edits);
                    }
                    let zr = &mut z[(b * seq + t) * d..][hs.clone()];
                    for (s, &ws) in w.iter().enumerate() {
                        axpy(ws, &v[(b * seq + s) * d..][hs.clone()], zr);
                    }
                    let prow = ((b * heads + hi) * seq + t) * seq;
                    pattern[prow..prow + w.len()].copy_from_slice(&w);
                }
            }
        }

        let mut head_out = project_heads(model, l, &z, rows);
        for (target, action) in &layer_ivs {
            if let ComponentRef::AttnHead { head, position, .. } = target {
                for b in 0..batch {
                    let r = b * seq + position;
                    apply_action(action, &mut head_out[(r * heads + head) * d..(r * heads + head + 1) * d]);
                }
            }
        }
        let attn_out = sum_heads(&head_out, rows, heads, d);
        for (r, a) in resid.iter_mut().zip(&attn_out) {
            *r += a;
        }
        cache.keys.push(tensor(vec![rows, d], k));
        cache.values.push(tensor(vec![rows, d], v));
        cache.attn_pattern.push(tensor(vec![batch, heads, seq, seq], pattern));
        cache.head_out.push(tensor(vec![rows, heads * d], head_out));
        cache.resid_mid.push(tensor(vec![rows, d], resid.clone()));

        let h_in = norm_rows(model, NormSite::Mlp(l), &resid, d);
        let mut h_post = mlp_hidden(model, l, &h_in, rows);
        let m = cfg.d_mlp;
        for (target, action) in &layer_ivs {
            if let ComponentRef::MlpNeuron { neuron, position, .. } = target {
                for b in 0..batch {
                    let r = b * seq + position;
                    apply_action(action, &mut h_post[r * m + neuron..r * m + neuron + 1]);
                }
            }
        }
        let mut mlp_out = mlp_output(model, l, &h_post, rows);
        for (target, action) in &layer_ivs {
            if let ComponentRef::MlpLayer { position, .. } = target {
                for b in 0..batch {
                    let r = b * seq + position;
                    apply_action(action, &mut mlp_out[r * d..(r + 1) * d]);
                }
            }
        }
        for (r, o) in resid.iter_mut().zip(&mlp_out) {
            *r += o;
        }
        cache.mlp_in.push(tensor(vec![rows, d], h_in));
        cache.h_post.push(tensor(vec![rows, m], h_post));
        cache.mlp_out.push(tensor(vec![rows, d], mlp_out));
    }

    for (target, action) in interventions.in_layer(cfg.n_layers) {
        if let ComponentRef::ResidPoint { position, .. } = target {
            for b in 0..batch {
                let r = b * seq + position;
                apply_action(action, &mut resid[r * d..(r + 1) * d]);
            }
        }
    }
    let final_rows: Vec<f64> = (0..batch)
        .flat_map(|b| {
            let r = b * seq + seq - 1;
            resid[r * d..(r + 1) * d].iter().copied()
        })
        .collect();
    cache.logits = tensor(vec![batch, cfg.vocab_size], unembed(model, &final_rows, batch));
    cache.resid_pre.push(tensor(vec![rows, d], resid));
    if !cache.logits.all_finite() {
        return Err(invalid("forward pass produced non-finite logits"));
    }
    Ok(cache)
}

fn check_prompt(tokens: &[usize]) -> Result<()> {
    if tokens.len() != PROMPT_LEN {
        return Err(invalid(format!(
            "prompts have {PROMPT_LEN} tokens, got {}",
            tokens.len()
        )));
    }
    Ok(())
}

/// Clean forward pass of one four-token prompt.
pub fn forward_with_cache(model: &ModelBundle, tokens: &[usize]) -> Result<ActivationCache> {
    check_prompt(tokens)?;
    run_batch(model, &[tokens], &InterventionSet::empty())
}

/// Forward pass of one prompt with interventions.
pub fn forward_with_interventions(
    model: &ModelBundle,
    tokens: &[usize],
    interventions: &[Intervention],
) -> Result<ActivationCache> {
    check_prompt(tokens)?;
    let set = InterventionSet::new(&model.config, PROMPT_LEN, interventions)?;
    run_batch(model, &[tokens], &set)
}

/// Last-position logits for many sequences, `[N, V]`, computed in chunks.
pub fn final_logits<S: AsRef<[usize]>>(
    model: &ModelBundle,
    seqs: &[S],
    interventions: &InterventionSet,
) -> Result<Tensor> {
    if seqs.is_empty() {
        return Err(invalid("no sequences"));
    }
    let mut data = Vec::with_capacity(seqs.len() * model.config.vocab_size);
    for chunk in seqs.chunks(BATCH_CHUNK) {
        data.extend_from_slice(run_batch(model, chunk, interventions)?.logits.data());
    }
    Tensor::new(vec![seqs.len(), model.config.vocab_size], data)
}

/// Logit lens: final norm followed by the unembedding.
pub fn logit_lens(model: &ModelBundle, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != model.config.d_model {
        return Err(invalid(format!(
            "logit lens input has {} values, expected {}",
            v.len(),
            model.config.d_model
        )));
    }
    Ok(unembed(model, v, 1))
}

/// Re-run only the last position from just after layer `layer`'s MLP, with
/// `mlp_out_rows` (`[N, d]`) substituted for that MLP's last-position output.
/// Earlier positions are unaffected by such a substitution, so their keys and
/// values come from `cache` (a batch-1 cache of a full prompt). Returns
/// `[N, V]` logits, bitwise equal to a full intervened forward pass.
pub fn resume_from_mlp_out(
    model: &ModelBundle,
    cache: &ActivationCache,
    layer: usize,
    mlp_out_rows: &Tensor,
) -> Result<Tensor> {
    let cfg = &model.config;
    let (d, heads, dh) = (cfg.d_model, cfg.n_heads, cfg.d_head());
    if cache.batch != 1 || layer >= cfg.n_layers {
        return Err(invalid("resume needs a single-sequence cache and a valid layer"));
    }
    let (n, cols) = mlp_out_rows.rows_cols();
    if cols != d {
        return Err(invalid("substituted MLP outputs must be d_model wide"));
    }
    let last = cache.seq - 1;
    let base = cache.resid_mid[layer].row(last);
    let mut resid: Vec<f64> = mlp_out_rows
        .data()
        .chunks_exact(d)
        .flat_map(|row| base.iter().zip(row).map(|(b, o)| b + o).collect::<Vec<_>>())
        .collect();
    let scale = 1.0 / (dh as f64).sqrt();

    for l in layer + 1..cfg.n_layers {
        let xn = norm_rows(model, NormSite::Attn(l), &resid, d);
        let q = kernels::matmul(&xn, model.param(&names::w_q(l)).data(), n, d, d);
        let k = kernels::matmul(&xn, model.param(&names::w_k(l)).data(), n, d, d);
        let v = kernels::matmul(&xn, model.param(&names::w_v(l)).data(), n, d, d);
        let (ck, cv) = (&cache.keys[l], &cache.values[l]);
        let mut z = vec![0.0; n * d];
        for i in 0..n {
            for hi in 0..heads {
                let hs = hi * dh..(hi + 1) * dh;
                let q_row = &q[i * d..][hs.clone()];
                let mut key_heads: Vec<&[f64]> = (0..last).map(|s| &ck.row(s)[hs.clone()]).collect();
                key_heads.push(&k[i * d..][hs.clone()]);
                let w = attention_weights(q_row, &key_heads, scale);
                let zr = &mut z[i * d..][hs.clone()];
                for (s, &ws) in w.iter().enumerate() {
                    let vs = if s < last { &cv.row(s)[hs.clone()] } else { &v[i * d..][hs.clone()] };
                    axpy(ws, vs, zr);
                }
            }
        }
        let head_out = project_heads(model, l, &z, n);
        let attn_out = sum_heads(&head_out, n, heads, d);
        for (r, a) in resid.iter_mut().zip(&attn_out) {
            *r += a;
        }
        let h_in = norm_rows(model, NormSite::Mlp(l), &resid, d);
        let h_post = mlp_hidden(model, l, &h_in, n);
        let mlp_out = mlp_output(model, l, &h_post, n);
        for (r, o) in resid.iter_mut().zip(&mlp_out) {
            *r += o;
        }
    }
    Tensor::new(vec![n, cfg.vocab_size], unembed(model, &resid, n))
}

/// MLP output rows for given `h_post` rows (`[N, d_mlp]`) at `layer`.
pub(crate) fn mlp_output_rows(model: &ModelBundle, layer: usize, h_post: &[f64], n: usize) -> Tensor {
    tensor(vec![n, model.config.d_model], mlp_output(model, layer, h_post, n))
}

/// Per-position mean of every cached activation over a set of prompts.
/// Sums run in prompt order, then divide once.
pub fn mean_activations<S: AsRef<[usize]>>(model: &ModelBundle, seqs: &[S]) -> Result<ActivationCache> {
    if seqs.is_empty() {
        return Err(invalid("mean activations need at least one prompt"));
    }
    let mut acc: Option<ActivationCache> = None;
    for chunk in seqs.chunks(BATCH_CHUNK) {
        let c = run_batch(model, chunk, &InterventionSet::empty())?;
        let summed = sum_over_batch(&c);
        match &mut acc {
            None => acc = Some(summed),
            Some(a) => add_cache(a, &summed),
        }
    }
    let mut mean = acc.expect("at least one chunk");
    let inv = seqs.len() as f64;
    for_each_tensor(&mut mean, |t| t.data_mut().iter_mut().for_each(|v| *v /= inv));
    Ok(mean)
}

fn for_each_tensor(c: &mut ActivationCache, mut f: impl FnMut(&mut Tensor)) {
    for group in [
        &mut c.resid_pre,
        &mut c.keys,
        &mut c.values,
        &mut c.attn_pattern,
        &mut c.head_out,
        &mut c.resid_mid,
        &mut c.mlp_in,
        &mut c.h_post,
        &mut c.mlp_out,
    ] {
        group.iter_mut().for_each(&mut f);
    }
    f(&mut c.logits);
}

fn add_cache(acc: &mut ActivationCache, other: &ActivationCache) {
    let mut others: Vec<&Tensor> = Vec::new();
    for group in [
        &other.resid_pre,
        &other.keys,
        &other.values,
        &other.attn_pattern,
        &other.head_out,
        &other.resid_mid,
        &other.mlp_in,
        &other.h_post,
        &other.mlp_out,
    ] {
        others.extend(group.iter());
    }
    others.push(&other.logits);
    let mut i = 0;
    for_each_tensor(acc, |t| {
        for (a, b) in t.data_mut().iter_mut().zip(others[i].data()) {
            *a += b;
        }
        i += 1;
    });
}

/// Collapse a batch cache into a batch-1 cache holding per-position sums,
/// summing sequences in order.
fn sum_over_batch(c: &ActivationCache) -> ActivationCache {
    let batch = c.batch;
    let fold = |t: &Tensor| -> Tensor {
        let block = t.len() / batch;
        let mut out = t.data()[..block].to_vec();
        for b in 1..batch {
            for (o, v) in out.iter_mut().zip(&t.data()[b * block..(b + 1) * block]) {
                *o += v;
            }
        }
        let mut shape = t.shape().to_vec();
        shape[0] /= batch;
        tensor(shape, out)
    };
    let fold_all = |v: &Vec<Tensor>| v.iter().map(fold).collect::<Vec<_>>();
    ActivationCache {
        batch: 1,
        seq: c.seq,
        resid_pre: fold_all(&c.resid_pre),
        keys: fold_all(&c.keys),
        values: fold_all(&c.values),
        attn_pattern: fold_all(&c.attn_pattern),
        head_out: fold_all(&c.head_out),
        resid_mid: fold_all(&c.resid_mid),
        mlp_in: fold_all(&c.mlp_in),
        h_post: fold_all(&c.h_post),
        mlp_out: fold_all(&c.mlp_out),
        logits: fold(&c.logits),
    }
}
