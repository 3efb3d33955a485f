// SPDX-License-Identifier: MIT OR Apache-2.0

//! Linear probes from the residual stream to the answer token.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Prompt;
use crate::error::{invalid, Result};
use crate::model::{run_batch, InterventionSet, ModelBundle, BATCH_CHUNK, PROMPT_LEN};
use crate::numerics::kernels::{axpy, matmul, softmax_in_place};
use crate::numerics::{argmax, Tensor};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            batch_size: 32,
            epochs: 60,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// `logits = x · weight + bias` over the numeric tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub layer: usize,
    pub position: usize,
    /// `[d_model, number_token_max + 1]`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ProbeModel {
    pub fn predict(&self, x: &[f64]) -> usize {
        let classes = self.bias.len();
        let mut logits = matmul(x, self.weight.data(), 1, x.len(), classes);
        for (l, b) in logits.iter_mut().zip(self.bias.data()) {
            *l += b;
        }
        argmax(&logits)
    }
}

#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub probe: ProbeModel,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Residual stream after each layer at each position: `[layer][position]`
/// holds `N · d_model` values in prompt order.
pub fn probe_features(model: &ModelBundle, prompts: &[Prompt]) -> Result<Vec<Vec<Vec<f64>>>> {
    let (layers, d) = (model.config.n_layers, model.config.d_model);
    let mut out = vec![vec![Vec::with_capacity(prompts.len() * d); PROMPT_LEN]; layers];
    let seqs: Vec<[usize; PROMPT_LEN]> = prompts.iter().map(|p| p.tokens).collect();
    for chunk in seqs.chunks(BATCH_CHUNK) {
        let cache = run_batch(model, chunk, &InterventionSet::empty())?;
        for (l, per_pos) in out.iter_mut().enumerate() {
            let resid = &cache.resid_pre[l + 1];
            for b in 0..chunk.len() {
                for (p, feats) in per_pos.iter_mut().enumerate() {
                    feats.extend_from_slice(resid.row(b * PROMPT_LEN + p));
                }
            }
        }
    }
    Ok(out)
}

fn check_prompts(prompts: &[Prompt]) -> Result<()> {
    if prompts.len() < 10 {
        return Err(invalid(format!("probes need at least 10 prompts, got {}", prompts.len())));
    }
    if prompts.iter().all(|p| p.result == prompts[0].result) {
        return Err(invalid("probe labels have a single class"));
    }
    Ok(())
}

/// Train one probe at `(layer, position)`; the residual after `layer` is the
/// input. Returns held-out accuracy on the last `1 - train_fraction` of a
/// seeded shuffle.
pub fn train_probe(
    model: &ModelBundle,
    layer: usize,
    position: usize,
    prompts: &[Prompt],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    check_prompts(prompts)?;
    if layer >= model.config.n_layers || position >= PROMPT_LEN {
        return Err(invalid(format!("no probe site at layer {layer}, position {position}")));
    }
    let feats = probe_features(model, prompts)?;
    fit(
        &feats[layer][position],
        prompts,
        model.config.d_model,
        model.tokenizer.number_count(),
        layer,
        position,
        cfg,
    )
}

fn fit(
    x: &[f64],
    prompts: &[Prompt],
    d: usize,
    classes: usize,
    layer: usize,
    position: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) || cfg.batch_size == 0 {
        return Err(invalid("probe train fraction must be in (0, 1) and batch size positive"));
    }
    let mut order: Vec<usize> = (0..prompts.len()).collect();
    let mut rng = seed::rng(cfg.seed);
    order.shuffle(&mut rng);
    let n_train = ((prompts.len() as f64 * cfg.train_fraction).round() as usize).clamp(1, prompts.len() - 1);
    let (train, test) = order.split_at(n_train);
    let mut train = train.to_vec();

    let mut w = vec![0.0; d * classes];
    let mut b = vec![0.0; classes];
    let (mut mw, mut vw) = (vec![0.0; w.len()], vec![0.0; w.len()]);
    let (mut mb, mut vb) = (vec![0.0; classes], vec![0.0; classes]);
    let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut t = 0i32;
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; classes];
    for _ in 0..cfg.epochs {
        train.shuffle(&mut rng);
        for batch in train.chunks(cfg.batch_size) {
            gw.iter_mut().for_each(|g| *g = 0.0);
            gb.iter_mut().for_each(|g| *g = 0.0);
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let xi = &x[i * d..(i + 1) * d];
                let mut p = matmul(xi, &w, 1, d, classes);
                for (pi, bi) in p.iter_mut().zip(&b) {
                    *pi += bi;
                }
                softmax_in_place(&mut p);
                p[prompts[i].result] -= 1.0;
                for (k, &xk) in xi.iter().enumerate() {
                    axpy(xk * inv, &p, &mut gw[k * classes..(k + 1) * classes]);
                }
                axpy(inv, &p, &mut gb);
            }
            t += 1;
            let (bc1, bc2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
            let step = |w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
                for (((wi, &gi), mi), vi) in w.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = beta1 * *mi + (1.0 - beta1) * gi;
                    *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                    *wi -= cfg.learning_rate * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                }
            };
            step(&mut w, &gw, &mut mw, &mut vw);
            step(&mut b, &gb, &mut mb, &mut vb);
        }
    }
    let probe = ProbeModel {
        layer,
        position,
        weight: Tensor::new(vec![d, classes], w)?,
        bias: Tensor::vector(b),
    };
    let accuracy = |idx: &[usize]| {
        let hits = idx
            .iter()
            .filter(|&&i| probe.predict(&x[i * d..(i + 1) * d]) == prompts[i].result)
            .count();
        hits as f64 / idx.len() as f64
    };
    Ok(ProbeResult {
        train_accuracy: accuracy(&train),
        test_accuracy: accuracy(test),
        probe,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeGrid {
    /// Held-out accuracy, `[layer][position]`.
    pub accuracy: Vec<Vec<f64>>,
    pub threshold: f64,
    /// Earliest layer whose last-position accuracy reaches `threshold`.
    pub onset_layer: Option<usize>,
    /// Set when no layer reaches the threshold.
    pub flagged: bool,
    pub chance: f64,
    pub prompt_count: usize,
}

/// Probes at every `(layer, position)`; probe `(l, p)` uses seed stream
/// `l · 4 + p` of `cfg.seed`.
pub fn probe_grid(model: &ModelBundle, prompts: &[Prompt], cfg: &ProbeConfig, threshold: f64) -> Result<ProbeGrid> {
    check_prompts(prompts)?;
    let feats = probe_features(model, prompts)?;
    let (d, classes) = (model.config.d_model, model.tokenizer.number_count());
    let mut accuracy = Vec::with_capacity(model.config.n_layers);
    for (l, per_pos) in feats.iter().enumerate() {
        let mut row = Vec::with_capacity(PROMPT_LEN);
        for (p, x) in per_pos.iter().enumerate() {
            let site_cfg = ProbeConfig {
                seed: seed::derive(cfg.seed, (l * PROMPT_LEN + p) as u64),
                ..cfg.clone()
            };
            row.push(fit(x, prompts, d, classes, l, p, &site_cfg)?.test_accuracy);
        }
        accuracy.push(row);
    }
    let last = PROMPT_LEN - 1;
    let onset_layer = accuracy.iter().position(|row| row[last] >= threshold);
    Ok(ProbeGrid {
        flagged: onset_layer.is_none(),
        onset_layer,
        accuracy,
        threshold,
        chance: 1.0 / classes as f64,
        prompt_count: prompts.len(),
    })
}
