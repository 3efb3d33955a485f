// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use super::*;
use crate::data::{valid_grid, Prompt};
use crate::model::{
    forward_with_cache, mean_activations, names, ComponentRef, ModelBundle, ModelConfig, FINAL_POS, PROMPT_LEN,
};
use crate::vocab::{Operator, Tokenizer};

fn tiny(number_token_max: usize) -> ModelBundle {
    let tok = Tokenizer::arithmetic(number_token_max);
    let mut cfg = ModelConfig::desk(tok.vocab_size());
    cfg.n_layers = 2;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.d_mlp = 12;
    ModelBundle::init(cfg, tok, 21).unwrap()
}

fn p(m: &ModelBundle, a: usize, op: Operator, b: usize) -> Prompt {
    Prompt::new(a, op, b, &m.tokenizer).unwrap()
}

#[test]
fn effect_formula_hand_values() {
    let e = effect_from_probabilities(0.5, 0.1, 0.25, 0.2);
    assert!((e.value - 1.0).abs() < 1e-15 && !e.flagged);
    assert!(effect_from_probabilities(0.5, 0.2, 0.6, 0.1).value < 0.0);
    assert_eq!(effect_from_probabilities(0.3, 0.2, 0.3, 0.2).value, 0.0);
    let f = effect_from_probabilities(0.5, 0.0, 0.5, 0.1);
    assert!(f.flagged && f.value.is_finite());
}

#[test]
fn swapping_clean_and_patched_flips_each_numerator() {
    for (a, b, c, d) in [(0.3, 0.1, 0.2, 0.4), (0.05, 0.6, 0.5, 0.01), (0.25, 0.25, 0.1, 0.7)] {
        let fwd = effect_from_probabilities(a, b, c, d).value;
        let rev = effect_from_probabilities(c, d, a, b).value;
        let fwd_terms = ((d - b) / b, (a - c) / c);
        let rev_terms = ((b - d) / d, (c - a) / a);
        assert!((fwd - 0.5 * (fwd_terms.0 + fwd_terms.1)).abs() < 1e-12);
        assert!((rev - 0.5 * (rev_terms.0 + rev_terms.1)).abs() < 1e-12);
        assert!(fwd_terms.0.signum() == -rev_terms.0.signum());
        assert!(fwd_terms.1.signum() == -rev_terms.1.signum());
    }
}

#[test]
fn self_patch_effect_is_exactly_zero() {
    let m = tiny(20);
    let a = p(&m, 4, Operator::Add, 3);
    let targets = [
        ComponentRef::AttnHead { layer: 1, head: 0, position: 3 },
        ComponentRef::MlpLayer { layer: 0, position: 2 },
        ComponentRef::MlpNeuron { layer: 1, neuron: 7, position: 3 },
        ComponentRef::ResidPoint { layer: 1, position: 0 },
        ComponentRef::AttnEdge { layer: 0, head: 1, source: 1, position: 3 },
    ];
    let b = p(&m, 4, Operator::Sub, 3);
    for t in targets {
        // Same tokens except the operator: patch the operator-independent
        // first position only, whose activations coincide.
        if t.position() == 0 {
            assert_eq!(patch_effect(&m, &a, &b, t, EffectSpace::Probability).unwrap().value, 0.0);
        }
    }
    let clean = forward_with_cache(&m, &a.tokens).unwrap();
    for t in targets {
        let set = crate::model::InterventionSet::new(
            &m.config,
            PROMPT_LEN,
            &[crate::model::Intervention::replace(t, clean.get(&t).unwrap())],
        )
        .unwrap();
        let patched = crate::model::run_batch(&m, &[a.tokens], &set).unwrap();
        assert_eq!(patched.logits, clean.logits, "{t}");
    }
}

#[test]
fn component_scan_is_mean_of_direct_effects() {
    let m = tiny(20);
    let pairs = vec![
        (p(&m, 3, Operator::Add, 4), p(&m, 9, Operator::Sub, 1)),
        (p(&m, 6, Operator::Mul, 2), p(&m, 5, Operator::Add, 5)),
    ];
    let single = component_scan(&m, &pairs[..1], Granularity::MlpLayer, EffectSpace::Probability).unwrap();
    let t = ComponentRef::MlpLayer { layer: 1, position: 3 };
    let direct = patch_effect(&m, &pairs[0].0, &pairs[0].1, t, EffectSpace::Probability).unwrap();
    assert_eq!(single.mean_of(&t), Some(direct.value));

    let both = component_scan(&m, &pairs, Granularity::AttnHead, EffectSpace::Logit).unwrap();
    assert_eq!(both.entries.len(), 2 * 2 * PROMPT_LEN);
    for e in &both.entries {
        let manual = e.per_prompt.iter().sum::<f64>() / e.per_prompt.len() as f64;
        assert!((e.mean - manual).abs() < 1e-12);
    }
    let again = component_scan(&m, &pairs, Granularity::AttnHead, EffectSpace::Logit).unwrap();
    assert_eq!(serde_json::to_string(&both).unwrap(), serde_json::to_string(&again).unwrap());
    let same = vec![(pairs[0].0, pairs[0].0)];
    assert!(component_scan(&m, &same, Granularity::MlpLayer, EffectSpace::Probability).is_err());
}

#[test]
fn neuron_scan_matches_patch_effect_and_zero_value_vectors() {
    let mut m = tiny(20);
    let w_out = m.param_mut(&names::w_out(0));
    w_out.row_mut(5).iter_mut().for_each(|v| *v = 0.0);
    let pairs = vec![(p(&m, 7, Operator::Add, 2), p(&m, 4, Operator::Div, 2))];
    let report = neuron_scan(&m, &pairs, 0..2, EffectSpace::Probability).unwrap();
    assert_eq!(report.entries.len(), 2 * 12);
    let only = neuron_scan(&m, &pairs, 1..2, EffectSpace::Probability).unwrap();
    assert_eq!(only.entries.len(), 12);
    let zero = ComponentRef::MlpNeuron { layer: 0, neuron: 5, position: FINAL_POS };
    assert!(report.mean_of(&zero).unwrap().abs() < 1e-9);
    for (layer, neuron) in [(0, 0), (0, 11), (1, 3)] {
        let t = ComponentRef::MlpNeuron { layer, neuron, position: FINAL_POS };
        let direct = patch_effect(&m, &pairs[0].0, &pairs[0].1, t, EffectSpace::Probability).unwrap();
        assert!((report.mean_of(&t).unwrap() - direct.value).abs() < 1e-10);
    }
    assert!(neuron_scan(&m, &pairs, 0..3, EffectSpace::Probability).is_err());
}

fn synthetic_report(means: &[(usize, usize, f64)]) -> EffectReport {
    EffectReport {
        entries: means
            .iter()
            .map(|&(layer, neuron, mean)| EffectEntry {
                component: ComponentRef::MlpNeuron { layer, neuron, position: FINAL_POS },
                mean,
                per_prompt: vec![mean],
                flagged: vec![false],
            })
            .collect(),
        prompt_count: 1,
        operators: BTreeMap::new(),
        space: EffectSpace::Probability,
        flagged_samples: 0,
        flagged_excluded: false,
    }
}

#[test]
fn top_k_selection_and_ties() {
    let r = synthetic_report(&[(0, 0, 0.1), (0, 1, 0.5), (0, 2, 0.5), (0, 3, -1.0), (1, 0, 0.0), (1, 1, 2.0)]);
    let k1 = top_k_neurons(&r, 1, 4).unwrap();
    assert_eq!(k1[&0], vec![1]);
    assert_eq!(k1[&1], vec![1]);
    let all = top_k_neurons(&r, 4, 4).unwrap();
    assert_eq!(all[&0], vec![0, 1, 2, 3]);
    assert!(top_k_neurons(&r, 0, 4).is_err());
    assert!(top_k_neurons(&r, 5, 4).is_err());
}

#[test]
fn faithfulness_endpoints() {
    let m = tiny(20);
    let grid = valid_grid(Operator::Add, 10, &m.tokenizer);
    let means = mean_activations(&m, &grid.iter().map(|p| p.tokens).collect::<Vec<_>>()).unwrap();
    let prompts = &grid[..15];
    let full = faithfulness(&m, prompts, &Circuit::full(&m), &means).unwrap();
    let empty = faithfulness(&m, prompts, &Circuit::empty(), &means).unwrap();
    assert!((full.raw - 1.0).abs() < 1e-6);
    assert!(empty.raw.abs() < 1e-6);
    let mut checked = 0;
    for i in 0..prompts.len() {
        assert!(full.nl_full[i] <= 1.0);
        if !full.degenerate[i] {
            assert!((full.per_prompt[i] - 1.0).abs() < 1e-6);
            assert!(empty.per_prompt[i].abs() < 1e-6);
            checked += 1;
        }
    }
    assert!(checked > 10);
    let keep_all = Circuit::full_with_neurons(&m, [(1, (0..12).collect())].into_iter().collect());
    let same = faithfulness(&m, prompts, &keep_all, &means).unwrap();
    assert_eq!(same.nl_circuit, full.nl_circuit);
    let degenerate = faithfulness_from(vec![0.5], vec![0.3], vec![0.3]).unwrap();
    assert!(degenerate.degenerate[0] && degenerate.raw.is_nan());
    let negative = faithfulness_from(vec![0.1], vec![1.0], vec![0.5]).unwrap();
    assert!((negative.raw + 0.8).abs() < 1e-12 && negative.clamped == 0.0);
}

#[test]
fn activation_pattern_cells_match_fresh_forwards() {
    let m = tiny(30);
    let pat = activation_pattern(&m, 1, 4, Operator::Sub, 12).unwrap();
    for (a, b, v) in pat.grid.cells() {
        let c = forward_with_cache(&m, &p(&m, a, Operator::Sub, b).tokens).unwrap();
        assert_eq!(v.to_bits(), c.h_post_at(1, 0, FINAL_POS)[4].to_bits());
    }
    assert_eq!(pat.grid.cells().count(), valid_grid(Operator::Sub, 12, &m.tokenizer).len());

    let mut dead = m.clone();
    dead.param_mut(&names::w_in(0)).row_mut(2).iter_mut().for_each(|v| *v = 0.0);
    dead.param_mut(&names::w_gate(0)).row_mut(2).iter_mut().for_each(|v| *v = 0.0);
    let flat = activation_pattern(&dead, 0, 2, Operator::Add, 10).unwrap();
    assert!(flat.grid.cells().all(|(_, _, v)| v == 0.0));
}

#[test]
fn logit_pattern_of_planted_result_neuron() {
    let mut m = tiny(200);
    let target = 158;
    let unembed = m.param(names::UNEMBED).clone();
    let v = m.config.vocab_size;
    let mut col: Vec<f64> = (0..8).map(|i| unembed.data()[i * v + target] * 10.0).collect();
    {
        let u = m.param_mut(names::UNEMBED);
        for (i, c) in col.iter().enumerate() {
            u.data_mut()[i * v + target] = *c;
        }
    }
    let w_out = m.param_mut(&names::w_out(1));
    w_out.row_mut(0).copy_from_slice(&col);
    col.clear();
    let pat = logit_pattern(&m, 1, 0, Operator::Add, 100).unwrap();
    let max = pat.grid.cells().map(|c| c.2).fold(f64::NEG_INFINITY, f64::max);
    let mut by_result: BTreeMap<usize, f64> = BTreeMap::new();
    for (a, b, val) in pat.grid.cells() {
        if a + b == target {
            assert_eq!(val, max);
        }
        if let Some(prev) = by_result.insert(a + b, val) {
            assert_eq!(prev, val);
        }
    }
    let masked: Vec<bool> = pat.grid.mask.clone();
    assert_eq!(masked, grid_mask(Operator::Add, 100, 200));
}

#[test]
fn logit_lens_reads_back_unembedding_columns() {
    let tok = Tokenizer::arithmetic(200);
    let m = ModelBundle::init(ModelConfig::desk(tok.vocab_size()), tok, 4).unwrap();
    let u = m.param(names::UNEMBED);
    let v = m.config.vocab_size;
    for t in 0..v {
        let col: Vec<f64> = (0..m.config.d_model).map(|i| 50.0 * u.data()[i * v + t]).collect();
        let lens = crate::model::logit_lens(&m, &col).unwrap();
        assert_eq!(crate::numerics::argmax(&lens), t, "token {t}");
    }
    let zero = crate::model::logit_lens(&m, &vec![0.0; m.config.d_model]).unwrap();
    assert!(zero.iter().all(|&z| z == zero[0]));
}

#[test]
fn attention_pattern_averages() {
    let m = tiny(20);
    let a = p(&m, 1, Operator::Add, 2);
    let b = p(&m, 8, Operator::Mul, 2);
    let single = attention_pattern(&m, &[a], 1, 1).unwrap();
    assert_eq!(single.as_slice(), forward_with_cache(&m, &a.tokens).unwrap().pattern(1, 0, 1));
    let avg = attention_pattern(&m, &[a, b], 0, 0).unwrap();
    for t in 0..PROMPT_LEN {
        let row = &avg[t * PROMPT_LEN..(t + 1) * PROMPT_LEN];
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(row[t + 1..].iter().all(|&w| w == 0.0));
    }
}

#[test]
fn token_scan_shows_planted_periodicity() {
    let mut m = tiny(60);
    let d = m.config.d_model;
    {
        let e = m.param_mut(names::EMBED);
        for t in 0..=60 {
            let row = e.row_mut(t);
            row.iter_mut().for_each(|v| *v = 0.0);
            row[if t % 10 == 8 { 0 } else { 1 }] = 1.0;
        }
    }
    m.param_mut(names::POS_EMBED).data_mut().iter_mut().for_each(|v| *v = 0.0);
    m.param_mut(&names::w_o(0)).data_mut().iter_mut().for_each(|v| *v = 0.0);
    for name in [names::w_in(0), names::w_gate(0)] {
        let w = m.param_mut(&name);
        w.row_mut(3).iter_mut().enumerate().for_each(|(i, v)| *v = if i == 0 { 1.0 } else { 0.0 });
    }
    let scan = token_activation_scan(&m, 0, &[3], 0..=60).unwrap();
    for (t, &h) in scan[0].iter().enumerate() {
        if t % 10 == 8 {
            assert!(h > 1.0, "token {t}: {h}");
        } else {
            assert_eq!(h, 0.0, "token {t}");
        }
    }
    assert!(d > 1);
    assert!(token_activation_scan(&m, 0, &[], 0..=60).unwrap().is_empty());
}

#[test]
fn iou_hand_values() {
    let s = |v: &[usize]| v.iter().map(|&n| (0, n)).collect::<BTreeSet<_>>();
    let sets: BTreeMap<Operator, BTreeSet<(usize, usize)>> = [
        (Operator::Add, s(&[1, 2, 3])),
        (Operator::Sub, s(&[2, 3, 4])),
        (Operator::Mul, s(&[7, 8])),
    ]
    .into_iter()
    .collect();
    let iou = neuron_iou(&sets).unwrap();
    assert_eq!(iou[&(Operator::Add, Operator::Sub)], 0.5);
    assert_eq!(iou[&(Operator::Sub, Operator::Add)], 0.5);
    assert_eq!(iou[&(Operator::Add, Operator::Add)], 1.0);
    assert_eq!(iou[&(Operator::Add, Operator::Mul)], 0.0);
    let mut bad = sets.clone();
    bad.insert(Operator::Div, BTreeSet::new());
    assert!(neuron_iou(&bad).is_err());
}
