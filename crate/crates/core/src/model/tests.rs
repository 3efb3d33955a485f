// SPDX-License-Identifier: MIT OR Apache-2.0

use super::*;
use crate::numerics::kernels;
use crate::vocab::Operator;

fn tiny(variant: MlpVariant, norm: NormVariant) -> ModelBundle {
    let tok = Tokenizer::arithmetic(20);
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_mlp: 16,
        mlp_variant: variant,
        vocab_size: tok.vocab_size(),
        max_positions: PROMPT_LEN,
        norm_variant: norm,
        position_encoding: PositionEncoding::LearnedAbsolute,
    };
    ModelBundle::init(cfg, tok, 7).unwrap()
}

fn gated() -> ModelBundle {
    tiny(MlpVariant::Gated, NormVariant::RmsNorm)
}

fn prompt(m: &ModelBundle, a: usize, op: Operator, b: usize) -> Vec<usize> {
    let t = &m.tokenizer;
    vec![t.number(a).unwrap(), t.operator(op), t.number(b).unwrap(), t.equals()]
}

#[test]
fn batch_and_single_runs_agree_bitwise() {
    let m = gated();
    let ps = vec![
        prompt(&m, 3, Operator::Add, 4),
        prompt(&m, 9, Operator::Sub, 2),
        prompt(&m, 5, Operator::Mul, 1),
    ];
    let batch = run_batch(&m, &ps, &InterventionSet::empty()).unwrap();
    for (b, p) in ps.iter().enumerate() {
        let single = forward_with_cache(&m, p).unwrap();
        assert_eq!(single.logits_of(0), batch.logits_of(b));
        assert_eq!(single.h_post_at(1, 0, FINAL_POS), batch.h_post_at(1, b, FINAL_POS));
    }
    let again = run_batch(&m, &ps, &InterventionSet::empty()).unwrap();
    assert_eq!(batch, again);
}

#[test]
fn attention_rows_are_causal_distributions() {
    let m = gated();
    let c = forward_with_cache(&m, &prompt(&m, 1, Operator::Add, 2)).unwrap();
    for l in 0..2 {
        for h in 0..2 {
            let p = c.pattern(l, 0, h);
            for t in 0..PROMPT_LEN {
                let row = &p[t * PROMPT_LEN..(t + 1) * PROMPT_LEN];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row[t + 1..].iter().all(|&w| w == 0.0));
            }
        }
    }
    let probs = c.probabilities(0);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn gated_h_post_matches_manual_recompute() {
    let m = gated();
    let c = forward_with_cache(&m, &prompt(&m, 6, Operator::Div, 3)).unwrap();
    let h_in = c.mlp_in[1].row(FINAL_POS);
    let w_in = m.param(&names::w_in(1));
    let w_gate = m.param(&names::w_gate(1));
    for n in 0..16 {
        let want = kernels::silu(kernels::dot(h_in, w_gate.row(n))) * kernels::dot(h_in, w_in.row(n));
        let got = c.h_post_at(1, 0, FINAL_POS)[n];
        assert!((want - got).abs() < 1e-12, "neuron {n}: {want} vs {got}");
    }
}

#[test]
fn mlp_output_decomposes_over_value_vectors() {
    for m in [gated(), tiny(MlpVariant::Simple, NormVariant::LayerNorm)] {
        let c = forward_with_cache(&m, &prompt(&m, 4, Operator::Mul, 5)).unwrap();
        for l in 0..2 {
            let h = c.h_post_at(l, 0, FINAL_POS);
            let mut sum = vec![0.0; 8];
            if m.config.mlp_variant == MlpVariant::Simple {
                sum.copy_from_slice(m.param(&names::b_out(l)).data());
            }
            for (n, &a) in h.iter().enumerate() {
                kernels::axpy(a, m.v_out(l, n), &mut sum);
            }
            for (x, y) in sum.iter().zip(c.mlp_out[l].row(FINAL_POS)) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn self_patch_is_identity() {
    let m = gated();
    let p = prompt(&m, 2, Operator::Add, 2);
    let clean = forward_with_cache(&m, &p).unwrap();
    let targets = [
        ComponentRef::MlpLayer { layer: 0, position: 1 },
        ComponentRef::AttnHead { layer: 1, head: 1, position: 3 },
        ComponentRef::ResidPoint { layer: 2, position: 3 },
        ComponentRef::MlpNeuron { layer: 1, neuron: 5, position: 3 },
    ];
    for target in targets {
        let v = clean.get(&target).unwrap();
        let patched = forward_with_interventions(&m, &p, &[Intervention::replace(target, v)]).unwrap();
        assert_eq!(patched.logits, clean.logits, "{target}");
    }
}

#[test]
fn zeroing_every_neuron_leaves_only_the_bias() {
    for m in [gated(), tiny(MlpVariant::Simple, NormVariant::RmsNorm)] {
        let p = prompt(&m, 7, Operator::Sub, 3);
        let ivs: Vec<Intervention> = (0..16)
            .map(|n| Intervention::zero(ComponentRef::MlpNeuron { layer: 0, neuron: n, position: 2 }))
            .collect();
        let c = forward_with_interventions(&m, &p, &ivs).unwrap();
        let expected: Vec<f64> = match m.config.mlp_variant {
            MlpVariant::Gated => vec![0.0; 8],
            MlpVariant::Simple => m.param(&names::b_out(0)).data().to_vec(),
        };
        assert_eq!(c.mlp_out[0].row(2), expected.as_slice());
    }
}

#[test]
fn zeroed_attention_edge_renormalizes_the_row() {
    let m = gated();
    let p = prompt(&m, 1, Operator::Add, 1);
    let edge = ComponentRef::AttnEdge { layer: 0, head: 1, source: 0, position: 1 };
    let c = forward_with_interventions(&m, &p, &[Intervention::zero(edge)]).unwrap();
    let row = &c.pattern(0, 0, 1)[PROMPT_LEN..PROMPT_LEN + 2];
    assert_eq!(row, &[0.0, 1.0]);
    // Unit weight on the current token means the head copies its own value.
    let v_head = &c.values[0].row(1)[4..8];
    let w_o = m.param(&names::w_o(0));
    let mut want = vec![0.0; 8];
    for (i, &vi) in v_head.iter().enumerate() {
        kernels::axpy(vi, w_o.row(4 + i), &mut want);
    }
    let got = c.get(&ComponentRef::AttnHead { layer: 0, head: 1, position: 1 }).unwrap();
    for (a, b) in want.iter().zip(got.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn logit_lens_of_final_residual_gives_logits() {
    let m = gated();
    let c = forward_with_cache(&m, &prompt(&m, 3, Operator::Mul, 3)).unwrap();
    let lens = logit_lens(&m, c.resid_pre[2].row(FINAL_POS)).unwrap();
    assert_eq!(lens.as_slice(), c.logits_of(0));
    assert!(logit_lens(&m, &[0.0; 3]).is_err());
}

#[test]
fn logit_lens_favours_a_planted_direction() {
    let mut m = gated();
    let target = m.tokenizer.number(15).unwrap();
    let v = m.config.vocab_size;
    let unembed = m.param_mut(names::UNEMBED);
    for i in 0..8 {
        for j in 0..v {
            unembed.data_mut()[i * v + j] = if j == target && i == 0 { 5.0 } else { 0.01 * ((i + j) % 3) as f64 };
        }
    }
    let mut dir = vec![0.0; 8];
    dir[0] = 2.0;
    let lens = logit_lens(&m, &dir).unwrap();
    assert_eq!(crate::numerics::argmax(&lens), target);
}

#[test]
fn mean_activations_average_in_prompt_order() {
    let m = gated();
    let a = prompt(&m, 1, Operator::Add, 8);
    let b = prompt(&m, 12, Operator::Div, 4);
    let single = mean_activations(&m, &[a.clone()]).unwrap();
    assert_eq!(single, forward_with_cache(&m, &a).unwrap());
    let pair = mean_activations(&m, &[a.clone(), b.clone()]).unwrap();
    let (ca, cb) = (forward_with_cache(&m, &a).unwrap(), forward_with_cache(&m, &b).unwrap());
    for ((x, y), z) in pair.h_post[1].data().iter().zip(ca.h_post[1].data()).zip(cb.h_post[1].data()) {
        assert!((x - (y + z) / 2.0).abs() < 1e-12);
    }
}

#[test]
fn resume_matches_full_intervened_pass() {
    let m = gated();
    let p = prompt(&m, 10, Operator::Sub, 4);
    let clean = forward_with_cache(&m, &p).unwrap();
    for layer in 0..2 {
        let mut rows = Vec::new();
        let mut expected = Vec::new();
        for n in [0usize, 3, 15] {
            let mut h = clean.h_post_at(layer, 0, FINAL_POS).to_vec();
            h[n] = 0.25;
            rows.extend(mlp_output_rows(&m, layer, &h, 1).into_data());
            let target = ComponentRef::MlpNeuron { layer, neuron: n, position: FINAL_POS };
            let full = forward_with_interventions(&m, &p, &[Intervention::replace(target, Tensor::scalar(0.25))]).unwrap();
            expected.extend_from_slice(full.logits_of(0));
        }
        let got = resume_from_mlp_out(&m, &clean, layer, &Tensor::new(vec![3, 8], rows).unwrap()).unwrap();
        for (g, e) in got.data().iter().zip(&expected) {
            assert!((g - e).abs() < 1e-10);
        }
    }
}

#[test]
fn short_sequences_run() {
    let m = gated();
    let toks: Vec<Vec<usize>> = (0..5).map(|n| vec![m.tokenizer.number(n).unwrap()]).collect();
    let c = run_batch(&m, &toks, &InterventionSet::empty()).unwrap();
    assert_eq!(c.h_post[0].shape(), &[5, 16]);
    assert_eq!(c.logits.shape(), &[5, m.config.vocab_size]);
}

#[test]
fn rejects_bad_inputs() {
    let m = gated();
    let p = prompt(&m, 1, Operator::Add, 1);
    assert!(matches!(
        forward_with_cache(&m, &[0, 1, 999, 3]),
        Err(crate::ForgeError::UnknownToken(999))
    ));
    assert!(forward_with_cache(&m, &p[..3]).is_err());
    let t = ComponentRef::MlpLayer { layer: 0, position: 3 };
    let dup = [Intervention::zero(t), Intervention::scale(t, 2.0)];
    assert!(matches!(
        forward_with_interventions(&m, &p, &dup),
        Err(crate::ForgeError::ConflictingIntervention(_))
    ));
    let oob = ComponentRef::MlpNeuron { layer: 0, neuron: 16, position: 3 };
    assert!(forward_with_interventions(&m, &p, &[Intervention::zero(oob)]).is_err());
    let wrong_len = Intervention::replace(t, Tensor::vector(vec![0.0; 3]));
    assert!(forward_with_interventions(&m, &p, &[wrong_len]).is_err());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    for m in [gated(), tiny(MlpVariant::Simple, NormVariant::LayerNorm)] {
        let mut bytes = Vec::new();
        write_checkpoint(&m, &mut bytes).unwrap();
        let back = read_checkpoint(bytes.as_slice(), "mem").unwrap();
        assert_eq!(back, m);
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(bytes, again);
        assert!(read_checkpoint(&bytes[..bytes.len() - 1], "mem").is_err());
    }
    assert!(matches!(
        read_checkpoint(&b"NOPE0000000000"[..], "junk"),
        Err(crate::ForgeError::Parse { .. })
    ));
}

#[test]
fn checkpoint_files_round_trip() {
    let m = gated();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested").join("m.ckpt");
    save_checkpoint(&m, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), m);
}
