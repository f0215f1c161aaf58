use proptest::prelude::*;

use super::layers::Attention;
use super::*;
use crate::numerics::{ParamStore, Rng};

fn tiny(copy: bool) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        d_model: 8,
        dropout: 0.1,
        vocab_size: 20,
        max_positions: 24,
        copy,
        ..ModelConfig::default()
    }
}

fn model(copy: bool, seed: u64) -> Model {
    Model::new(tiny(copy), seed).unwrap()
}

fn assert_normalized(dist: &MixtureDistribution) {
    let total: f64 = dist.mixed.iter().sum();
    assert!((total - 1.0).abs() <= 1e-9, "mixed sums to {total}");
    for (m, g) in dist.mixed.iter().zip(&dist.gen_dist) {
        assert!(*m >= dist.p_gen * g - 1e-15);
    }
    assert!(dist.p_gen > 0.0 && dist.p_gen <= 1.0);
}

#[test]
fn mixture_scatter_example() {
    // src = [a, b, a] with a = 3, b = 5
    let gen = vec![0.2; 5].into_iter().chain([0.0]).collect::<Vec<_>>();
    let mixed = mixture(&gen, &[0.2, 0.5, 0.3], &[3, 5, 3], 0.0).unwrap();
    assert_eq!(mixed[3], 0.5);
    assert_eq!(mixed[5], 0.5);
    assert_eq!(mixed.iter().sum::<f64>(), 1.0);
}

#[test]
fn mixture_degenerate_gate_is_gen() {
    let gen = vec![0.1, 0.6, 0.3];
    assert_eq!(mixture(&gen, &[0.5, 0.5], &[0, 2], 1.0).unwrap(), gen);
}

#[test]
fn mixture_rejects_misaligned() {
    assert!(mixture(&[1.0], &[0.5, 0.5], &[0], 0.5).is_err());
    assert!(mixture(&[1.0], &[1.0], &[4], 0.5).is_err());
}

#[test]
fn positional_encoding_at_zero() {
    let pe = positional_encoding(4, 6);
    assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    assert_ne!(pe.row(0), pe.row(1));
    assert!((pe.row(1)[0] - 1f64.sin()).abs() < 1e-15);
}

#[test]
fn embed_contracts() {
    let m = model(true, 1);
    let mut tape = Tape::with_params(m.params(), false);
    let e = m.embed(&mut tape, &[]).unwrap();
    assert_eq!(tape.shape(e), &[0, 8]);
    let e = m.embed(&mut tape, &[4, 4]).unwrap();
    assert_ne!(tape.value(e).row(0), tape.value(e).row(1));
    assert!(m.embed(&mut tape, &[20]).is_err());
    assert!(m.embed(&mut tape, &[1; 25]).is_err());
}

#[test]
fn encode_shape_and_padding_invariance() {
    let m = model(true, 3);
    let src = [5, 6, 7, 8];
    let a = m.encode(&src, &[true; 4]).unwrap();
    assert_eq!(a.states.shape(), &[4, 8]);
    let padded = m.encode(&[5, 6, 7, 8, 0, 0, 0], &[true, true, true, true, false, false, false]).unwrap();
    for i in 0..4 {
        for (x, y) in a.states.row(i).iter().zip(padded.states.row(i)) {
            assert!((x - y).abs() <= 1e-9);
        }
    }
    let b = m.encode(&[5, 6, 7, 9], &[true; 4]).unwrap();
    assert!(a.states.max_abs_diff(&b.states) > 1e-6);
    assert!(m.encode(&[], &[]).is_err());
}

#[test]
fn decoders_are_independent() {
    let m = model(true, 4);
    let enc = m.encode(&[5, 6, 7], &[true; 3]).unwrap();
    let a = m.decode_step(DecoderKind::Bspan, &enc, &[10, 11]).unwrap();
    let b = m.decode_step(DecoderKind::Response, &enc, &[10, 11]).unwrap();
    assert_ne!(a.mixed, b.mixed);
    assert_normalized(&a);
    assert_normalized(&b);
    assert!("bspan".parse::<DecoderKind>().is_ok());
    assert!("policy".parse::<DecoderKind>().is_err());
}

#[test]
fn copy_distribution_ignores_padding() {
    let m = model(true, 5);
    let enc = m.encode(&[5, 6, 7, 0], &[true, true, true, false]).unwrap();
    let d = m.decode_step(DecoderKind::Bspan, &enc, &[10]).unwrap();
    assert_eq!(d.copy_dist[3], 0.0);
    assert!((d.copy_dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn no_copy_mode_returns_gen_dist() {
    let m = model(false, 6);
    let enc = m.encode(&[5, 6, 7], &[true; 3]).unwrap();
    let d = m.decode_step(DecoderKind::Response, &enc, &[10, 12]).unwrap();
    assert_eq!(d.p_gen, 1.0);
    assert_eq!(d.mixed, d.gen_dist);
    assert!(d.copy_dist.is_empty());
}

#[test]
fn causal_prefix_invariance() {
    let m = model(true, 7);
    let enc = m.encode(&[5, 6, 7, 8, 9], &[true; 5]).unwrap();
    let full = [10, 3, 14, 2, 19, 7];
    let mut tape = Tape::with_params(m.params(), false);
    let states = tape.constant(enc.states.clone()).unwrap();
    let all = m
        .decode_on(&mut tape, DecoderKind::Bspan, states, &enc.src_tokens, &enc.pad_mask, &full)
        .unwrap();
    let all = tape.value(all.mixed).clone();
    for len in 1..=full.len() {
        let step = m.decode_step(DecoderKind::Bspan, &enc, &full[..len]).unwrap();
        for (x, y) in step.mixed.iter().zip(all.row(len - 1)) {
            assert!((x - y).abs() <= 1e-9);
        }
    }
}

#[test]
fn copy_scores_symmetric_for_identical_states() {
    let m = model(true, 8);
    let mut enc = m.encode(&[5, 6, 7], &[true, true, false]).unwrap();
    let row = enc.states.row(0).to_vec();
    for r in 1..3 {
        enc.states.data_mut()[r * 8..(r + 1) * 8].copy_from_slice(&row);
    }
    let scores = m.copy_scores(DecoderKind::Bspan, &enc, &[0.3; 8]).unwrap();
    assert_eq!(scores[0], scores[1]);
    assert_eq!(scores[2], f64::NEG_INFINITY);
}

#[test]
fn gen_gate_values() {
    let mut m = model(true, 9);
    let (w, b) = m.gate_params(DecoderKind::Bspan);
    m.params_mut().set(w, Tensor::zeros(&[16, 1])).unwrap();
    assert_eq!(m.gen_gate(DecoderKind::Bspan, &[1.0; 8], &[2.0; 8]).unwrap(), 0.5);
    m.params_mut().set(b, Tensor::from_vec(&[1], vec![40.0]).unwrap()).unwrap();
    assert!(m.gen_gate(DecoderKind::Bspan, &[1.0; 8], &[2.0; 8]).unwrap() > 1.0 - 1e-15);

    let weights: Vec<f64> = (0..16).map(|i| 0.1 * i as f64 - 0.7).collect();
    m.params_mut().set(w, Tensor::from_vec(&[16, 1], weights.clone()).unwrap()).unwrap();
    m.params_mut().set(b, Tensor::from_vec(&[1], vec![0.25]).unwrap()).unwrap();
    let dec: Vec<f64> = (0..8).map(|i| 0.05 * i as f64).collect();
    let ctx: Vec<f64> = (0..8).map(|i| -0.1 * i as f64).collect();
    let z: f64 = dec.iter().chain(&ctx).zip(&weights).map(|(x, w)| x * w).sum::<f64>() + 0.25;
    let p = m.gen_gate(DecoderKind::Bspan, &dec, &ctx).unwrap();
    assert!((p - 1.0 / (1.0 + (-z).exp())).abs() < 1e-15);
}

fn attention_store(d: usize) -> (ParamStore, Attention) {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(0);
    let attn = Attention::new(&mut store, "attn", d, 1, &mut rng).unwrap();
    (store, attn)
}

fn set_identity(store: &mut ParamStore, id: ParamId, d: usize) {
    let mut data = vec![0.0; d * d];
    for i in 0..d {
        data[i * d + i] = 1.0;
    }
    store.set(id, Tensor::from_vec(&[d, d], data).unwrap()).unwrap();
}

#[test]
fn attention_two_token_hand_computed() {
    let (mut store, attn) = attention_store(2);
    for w in [attn.query.weight, attn.key.weight, attn.value.weight, attn.output.weight] {
        set_identity(&mut store, w, 2);
    }
    let mut tape = Tape::with_params(&store, false);
    let q = tape.constant(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
    let kv = tape
        .constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
        .unwrap();
    let out = attn.forward(&mut tape, q, kv, None).unwrap();
    // scores [1, 0] / sqrt(2)
    let e = (1.0 / 2f64.sqrt()).exp();
    let w0 = e / (e + 1.0);
    let got = tape.value(out.output).data().to_vec();
    assert!((got[0] - w0).abs() < 1e-15);
    assert!((got[1] - (1.0 - w0)).abs() < 1e-15);
}

#[test]
fn attention_zero_query_is_uniform() {
    let (mut store, attn) = attention_store(4);
    store.set(attn.query.weight, Tensor::zeros(&[4, 4])).unwrap();
    let mut tape = Tape::with_params(&store, false);
    let q = tape.constant(Tensor::from_vec(&[2, 4], vec![0.3; 8]).unwrap()).unwrap();
    let k = tape.constant(Tensor::from_vec(&[3, 4], (0..12).map(f64::from).collect()).unwrap()).unwrap();
    let out = attn.forward(&mut tape, q, k, Some(&[true, false, true])).unwrap();
    assert_eq!(tape.value(out.weights[0]).data(), &[0.5, 0.0, 0.5, 0.5, 0.0, 0.5]);
}

#[test]
fn attention_single_key_forces_value() {
    let (store, attn) = attention_store(3);
    let mut tape = Tape::with_params(&store, false);
    let q = tape.constant(Tensor::from_vec(&[1, 3], vec![0.2, -0.4, 0.9]).unwrap()).unwrap();
    let k = tape.constant(Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap()).unwrap();
    let out = attn.forward(&mut tape, q, k, Some(&[false, true])).unwrap();
    let row = tape.slice(k, 0, 1, 2).unwrap();
    let v = attn.value.forward(&mut tape, row).unwrap();
    let expected = attn.output.forward(&mut tape, v).unwrap();
    assert!(tape.value(out.output).max_abs_diff(tape.value(expected)) < 1e-15);
}

#[test]
fn greedy_decode_stops_and_caps() {
    let mut m = model(false, 10);
    let enc = m.encode(&[5, 6], &[true; 2]).unwrap();
    let (w, b) = m.output_params(DecoderKind::Response);
    m.params_mut().set(w, Tensor::zeros(&[8, 20])).unwrap();
    let mut bias = vec![0.0; 20];
    bias[7] = 5.0;
    m.params_mut().set(b, Tensor::from_vec(&[20], bias).unwrap()).unwrap();
    assert_eq!(m.greedy_decode(DecoderKind::Response, &enc, 1, 7, 10).unwrap(), vec![7]);
    assert_eq!(m.greedy_decode(DecoderKind::Response, &enc, 1, 3, 3).unwrap(), vec![7, 7, 7]);
    // uniform output: every entry ties, lowest id wins
    m.params_mut().set(b, Tensor::zeros(&[20])).unwrap();
    assert_eq!(m.greedy_decode(DecoderKind::Response, &enc, 1, 9, 2).unwrap(), vec![0, 0]);
}

#[test]
fn argmax_prefers_lowest_index() {
    assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
    assert_eq!(argmax(&[1.0]), 0);
}

#[test]
fn from_params_round_trip() {
    let m = model(true, 11);
    let rebuilt = Model::from_params(m.config().clone(), m.params().clone()).unwrap();
    let enc = m.encode(&[5, 6], &[true; 2]).unwrap();
    let a = m.decode_step(DecoderKind::Bspan, &enc, &[2]).unwrap();
    let b = rebuilt.decode_step(DecoderKind::Bspan, &enc, &[2]).unwrap();
    assert_eq!(a, b);
    let other = Model::new(tiny(true), 11).unwrap();
    let smaller = ModelConfig { d_ff: 8, ..tiny(true) };
    assert!(Model::from_params(smaller, other.params().clone()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn mixture_normalized_and_convex(
        gen in prop::collection::vec(0.0f64..1.0, 2..12),
        copy in prop::collection::vec(0.0f64..1.0, 1..8),
        p_gen in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let gt: f64 = gen.iter().sum::<f64>() + 1e-3;
        let gen: Vec<f64> = gen.iter().map(|g| (g + 1e-3 / gen.len() as f64) / gt).collect();
        let ct: f64 = copy.iter().sum::<f64>() + 1e-3;
        let copy: Vec<f64> = copy.iter().map(|c| (c + 1e-3 / copy.len() as f64) / ct).collect();
        let mut rng = Rng::new(seed);
        let src: Vec<usize> = copy.iter().map(|_| rng.below(gen.len())).collect();
        let mixed = mixture(&gen, &copy, &src, p_gen).unwrap();
        prop_assert!((mixed.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        for (m, g) in mixed.iter().zip(&gen) {
            prop_assert!(*m >= p_gen * g);
        }
    }
}

#[test]
fn model_mixture_invariants_random_parameters() {
    let mut rng = Rng::new(99);
    for trial in 0..40 {
        let copy = trial % 4 != 0;
        let m = model(copy, trial);
        let len = 1 + rng.below(6);
        let src: Vec<usize> = (0..len).map(|_| rng.below(20)).collect();
        let mut mask = vec![true; len];
        if len > 1 && rng.bernoulli(0.5) {
            mask[len - 1] = false;
        }
        let enc = m.encode(&src, &mask).unwrap();
        let prefix: Vec<usize> = (0..1 + rng.below(4)).map(|_| rng.below(20)).collect();
        let kind = if rng.bernoulli(0.5) { DecoderKind::Bspan } else { DecoderKind::Response };
        let d = m.decode_step(kind, &enc, &prefix).unwrap();
        assert_normalized(&d);
        if copy {
            let recomputed = mixture(&d.gen_dist, &d.copy_dist, &src, d.p_gen).unwrap();
            for (x, y) in recomputed.iter().zip(&d.mixed) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
