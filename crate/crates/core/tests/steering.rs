mod common;

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use steervec::corpus::{Cell, LanguageTag, ParallelCorpus, Script};
use steervec::model::{LayerHook, Model, ModelConfig};
use steervec::steering::{
    build_positional_bank, lsi_build, lsi_steer, make_hook, steer_cross, steer_learned, steer_mono, ContrastPair,
    LearnedSteering, LsiArtifacts, LsiHook, LsiOptions, ProbeSample, SteeringArtifact, SteeringConfig, SteeringMode,
};
use steervec::vectors::{build_bank, BankEntry, LanguageVectorBank};

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt()
}

fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-10.0f32..10.0, d)
}

fn triple() -> impl Strategy<Value = (Vec<f32>, Vec<f32>, Vec<f32>)> {
    (1usize..24).prop_flat_map(|d| (vec_strategy(d), vec_strategy(d), vec_strategy(d)))
}

proptest! {
    #[test]
    fn norm_restore_keeps_norm((h, t, s) in triple(), alpha in 0.0f32..6.0) {
        prop_assume!(norm(&h) > 1e-3 && norm(&t) > 1e-3);
        let mono = steer_mono(&h, &t, alpha, true, 1e-8).unwrap();
        prop_assert!((norm(&mono) - norm(&h)).abs() <= 1e-6 * norm(&h));
        if let Ok(cross) = steer_cross(&h, &t, &s, alpha, true, 1e-8) {
            prop_assert!((norm(&cross) - norm(&h)).abs() <= 1e-6 * norm(&h));
        }
    }

    #[test]
    fn restored_norm_follows_scale((h, t, _) in triple(), alpha in 0.1f32..6.0, scale in 0.01f32..100.0) {
        prop_assume!(norm(&h) > 1e-3 && norm(&t) > 1e-3);
        let scaled: Vec<f32> = h.iter().map(|x| x * scale).collect();
        let out = steer_mono(&scaled, &t, alpha, true, 1e-8).unwrap();
        let expect = norm(&h) * scale as f64;
        prop_assert!((norm(&out) - expect).abs() <= 1e-6 * expect);
    }

    #[test]
    fn swapped_cross_direction_is_negated((h, t, s) in triple(), alpha in 0.0f32..6.0) {
        let d = h.len();
        let zero = vec![0.0f32; d];
        prop_assume!(steer_cross(&zero, &t, &s, 1.0, false, 1e-8).is_ok());
        let fwd = steer_cross(&zero, &t, &s, alpha, false, 1e-8).unwrap();
        let back = steer_cross(&zero, &s, &t, alpha, false, 1e-8).unwrap();
        for (a, b) in fwd.iter().zip(&back) {
            prop_assert_eq!(a.to_bits(), (-b).to_bits());
        }
    }

    #[test]
    fn steering_is_pure((h, t, s) in triple(), alpha in 0.0f32..6.0, nr: bool) {
        let a = steer_mono(&h, &t, alpha, nr, 1e-8).map(|v| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        let b = steer_mono(&h, &t, alpha, nr, 1e-8).map(|v| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(a.ok(), b.ok());
        let a = steer_cross(&h, &t, &s, alpha, nr, 1e-8).ok();
        let b = steer_cross(&h, &t, &s, alpha, nr, 1e-8).ok();
        prop_assert_eq!(a.map(|v| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()), b.map(|v| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()));
    }

    #[test]
    fn zero_alpha_is_identity((h, t, _s) in triple(), nr: bool) {
        prop_assume!(norm(&t) > 1e-3);
        let out = steer_mono(&h, &t, 0.0, nr, 1e-8).unwrap();
        if !nr {
            prop_assert_eq!(out.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), h.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        } else {
            for (a, b) in out.iter().zip(&h) {
                prop_assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn zero_b_learned_equals_unsupervised((h, t, s) in triple(), alpha in 0.0f64..4.0, nr: bool, seed: u64) {
        let d = h.len();
        let p = LearnedSteering::<f32>::new(1, d, 3, alpha, 0.9, nr, seed).unwrap();
        let scaled: Vec<f32> = s.iter().map(|x| 0.9f32 * x).collect();
        let expect = steer_cross(&h, &t, &scaled, alpha as f32, nr, 1e-8);
        let got = steer_learned(&h, &t, &s, &p, 1);
        match (expect, got) {
            (Ok(e), Ok(g)) => prop_assert_eq!(e.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), g.iter().map(|x| x.to_bits()).collect::<Vec<_>>()),
            (Err(_), Err(_)) => {}
            (e, g) => prop_assert!(false, "diverging outcomes {:?} {:?}", e, g),
        }
    }
}

#[test]
fn cross_with_zero_alpha_is_identity() {
    let h = [0.3f32, -1.2, 4.0];
    let out = steer_cross(&h, &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], 0.0, false, 1e-8).unwrap();
    assert_eq!(out, h);
}

#[test]
fn learned_mono_example() {
    let p = LearnedSteering::<f32>::new(1, 2, 2, 1.0, 0.9, false, 0).unwrap();
    let out = steer_learned(&[0.0, 0.0], &[0.0, 2.0], &[0.0, 2.0], &p, 1).unwrap();
    assert!((out[0] - 0.0).abs() < 1e-6 && (out[1] - 1.0).abs() < 1e-6, "{out:?}");
}

#[test]
fn learned_correction_matches_dense_oracle() {
    let d = 5;
    let mut p = LearnedSteering::<f32>::new(1, d, d, 1.5, 0.9, false, 4).unwrap();
    // A = [I; 0; 0] and B = M, so the correction is h · M.
    let m: Vec<f32> = (0..d * d).map(|i| ((i * 7 % 11) as f32 - 5.0) / 10.0).collect();
    p.a[0] = vec![0.0; 3 * d * d];
    for i in 0..d {
        p.a[0][i * d + i] = 1.0;
    }
    p.b[0] = m.clone();
    let h = [0.2f32, -0.7, 1.1, 0.4, -0.3];
    let t = [1.0f32, 0.5, -0.2, 0.0, 0.3];
    let s = [-0.4f32, 0.1, 0.9, 0.2, -0.6];
    let got = steer_learned(&h, &t, &s, &p, 1).unwrap();
    let num: Vec<f64> = t.iter().zip(&s).map(|(a, b)| *a as f64 - 0.9 * *b as f64).collect();
    let n = num.iter().map(|x| x * x).sum::<f64>().sqrt();
    for j in 0..d {
        let hm: f64 = (0..d).map(|i| h[i] as f64 * m[i * d + j] as f64).sum();
        let expect = h[j] as f64 + 1.5 * num[j] / n + hm;
        assert!((got[j] as f64 - expect).abs() < 1e-5, "dim {j}: {} vs {expect}", got[j]);
    }
}

#[test]
fn lsi_steer_examples() {
    assert_eq!(lsi_steer(&[1.0f32, 1.0], &[2.0, 0.0], 0.5).unwrap(), vec![2.0, 1.0]);
    assert_eq!(lsi_steer(&[1.0f32, -3.0], &[2.0, 7.0], 0.0).unwrap(), vec![1.0, -3.0]);
}

fn probe_samples(toy: &common::Toy, codes: &[String], per: usize) -> Vec<ProbeSample> {
    let mut out = Vec::new();
    for code in codes {
        for (_, cell) in toy.syn.corpus.slice(code).unwrap().into_iter().take(per) {
            let Cell::Tokens(t) = cell else { unreachable!() };
            out.push(ProbeSample {
                code: code.clone(),
                tokens: t.clone(),
            });
        }
    }
    out
}

fn final_state(model: &Model, tokens: &[u32], layer: usize) -> Vec<f64> {
    let (s, _) = model.forward_collect(tokens, None).unwrap();
    s.at(layer, tokens.len() - 1).iter().map(|x| *x as f64).collect()
}

#[test]
fn lsi_full_mask_and_self_difference() {
    let toy = common::toy();
    let codes = toy.syn.codes();
    let probe = probe_samples(toy, &codes[..2], 60);
    let a = toy.syn.render(&codes[0], &[1, 2, 3, 4, 5]).unwrap();
    let b = toy.syn.render(&codes[1], &[6, 7, 8]).unwrap();
    let with: Vec<u32> = b.iter().chain(&a).copied().collect();
    let mut contrast = BTreeMap::new();
    contrast.insert(
        codes[1].clone(),
        vec![ContrastPair {
            with_example: with.clone(),
            instruction_only: a.clone(),
        }],
    );
    contrast.insert(
        codes[0].clone(),
        vec![ContrastPair {
            with_example: a.clone(),
            instruction_only: a.clone(),
        }],
    );
    let art = lsi_build(
        &toy.model,
        &probe,
        &contrast,
        &LsiOptions {
            tau: 1.0,
            ..Default::default()
        },
    )
    .unwrap();
    for layer in 1..=art.n_layers {
        assert!(art.mask(&codes[1], layer).unwrap().iter().all(|m| *m));
        assert!(art.shift(&codes[0], layer).unwrap().iter().all(|x| *x == 0.0));
        let oracle: Vec<f64> = final_state(&toy.model, &with, layer)
            .iter()
            .zip(final_state(&toy.model, &a, layer))
            .map(|(x, y)| x - y)
            .collect();
        for (got, want) in art.shift(&codes[1], layer).unwrap().iter().zip(&oracle) {
            assert!((*got as f64 - want).abs() <= 1e-6 * want.abs().max(1.0));
        }
    }
}

#[test]
fn lsi_two_language_probe() {
    let toy = common::toy();
    let codes = toy.syn.codes();
    let pair = [codes[0].clone(), codes[3].clone()];
    let probe = probe_samples(toy, &pair, 100);
    let contrast: BTreeMap<String, Vec<ContrastPair>> = BTreeMap::new();
    let art = lsi_build(
        &toy.model,
        &probe,
        &contrast,
        &LsiOptions {
            tau: 0.1,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(art.probe_accuracy.iter().all(|a| *a > 0.95), "{:?}", art.probe_accuracy);
    assert_eq!(art.masks.len(), 2);
    for code in &pair {
        for layer in 1..=art.n_layers {
            assert_eq!(art.mask(code, layer).unwrap().iter().filter(|m| **m).count(), 7);
        }
    }
}

/// Adds `gamma * shift[layer]` with no knowledge of the other layers.
struct PerLayerAdd {
    shifts: Vec<Vec<f32>>,
    gamma: f32,
}

impl LayerHook<f32> for PerLayerAdd {
    fn touches(&self, _layer: usize) -> bool {
        true
    }
    fn rewrite(&self, layer: usize, position: usize, h: &mut [f32]) {
        if position == 0 {
            return;
        }
        let out = lsi_steer(h, &self.shifts[layer - 1], self.gamma).unwrap();
        h.copy_from_slice(&out);
    }
}

#[test]
fn lsi_composition_is_per_layer() {
    let toy = common::toy();
    let d = toy.model.config().d_model;
    let n = toy.model.config().n_layers;
    let shifts: Vec<Vec<f32>> = (0..n)
        .map(|l| {
            (0..d)
                .map(|j| if (j + l) % 9 == 0 { 0.3 * (l as f32 + 1.0) } else { 0.0 })
                .collect()
        })
        .collect();
    let art = LsiArtifacts {
        tau: 0.1,
        gamma: 0.7,
        n_layers: n,
        d_model: d,
        masks: BTreeMap::from([(
            "x".to_string(),
            shifts.iter().map(|s| s.iter().map(|x| *x != 0.0).collect()).collect(),
        )]),
        shifts: BTreeMap::from([("x".to_string(), shifts.clone())]),
        probe_accuracy: vec![1.0; n],
        chance: 0.5,
    };
    let hook = LsiHook::new(&art, "x", &SteeringConfig::default()).unwrap();
    let oracle = PerLayerAdd { shifts, gamma: 0.7 };
    let tokens = toy.syn.render(&toy.syn.codes()[2], &[3, 1, 4, 1, 5, 9, 2, 6]).unwrap();
    let (a, la) = toy.model.forward_collect(&tokens, Some(&hook)).unwrap();
    let (b, lb) = toy.model.forward_collect(&tokens, Some(&oracle)).unwrap();
    assert_eq!(a, b);
    assert_eq!(la, lb);
}

fn tiny_model(d: usize, n_layers: usize, vocab: usize) -> Model {
    Model::new(ModelConfig {
        d_model: d,
        n_layers,
        n_heads: 2,
        vocab_size: vocab,
        max_seq_len: 16,
        seed: 8,
    })
    .unwrap()
}

fn token_corpus(rows: &[(&str, &str, Vec<u32>)]) -> ParallelCorpus {
    let tags = vec![
        LanguageTag::new("p", Script::Synthetic { lo: 0, hi: 10 }).unwrap(),
        LanguageTag::new("q", Script::Synthetic { lo: 10, hi: 20 }).unwrap(),
    ];
    ParallelCorpus::from_records(
        tags,
        rows.iter()
            .map(|(id, c, t)| (id.to_string(), c.to_string(), Cell::Tokens(t.clone())))
            .collect::<Vec<_>>(),
    )
    .unwrap()
}

#[test]
fn positional_bank_with_one_counted_position_equals_layer_bank() {
    let corpus = token_corpus(&[
        ("a", "p", vec![1, 2]),
        ("a", "q", vec![11, 12]),
        ("b", "p", vec![3, 4]),
        ("b", "q", vec![13, 14]),
    ]);
    let model = tiny_model(8, 2, 20);
    let pos = build_positional_bank(&model, &corpus, 1).unwrap();
    let bank = build_bank(&model, &corpus).unwrap();
    for code in ["p", "q"] {
        for layer in 1..=2 {
            assert_eq!(pos.vector(code, layer, 2).unwrap(), bank.vector(code, layer).unwrap());
        }
    }
}

#[test]
fn positional_buckets_for_length_three() {
    let corpus = token_corpus(&[
        ("a", "p", vec![1, 2, 3]),
        ("a", "q", vec![11, 12, 13]),
        ("b", "p", vec![4, 5, 6]),
        ("b", "q", vec![14, 15, 16]),
    ]);
    let model = tiny_model(8, 2, 20);
    let pos = build_positional_bank(&model, &corpus, 2).unwrap();
    assert_eq!(pos.count("p", 2).unwrap(), 2);
    assert_eq!(pos.count("p", 3).unwrap(), 2);
    assert!(pos.vector("p", 1, 1).is_err());
    assert!(matches!(
        build_positional_bank(&model, &corpus, 3),
        Err(steervec::Error::EmptyPositionBucket(4))
    ));
}

fn two_bank() -> LanguageVectorBank {
    let entry = |code: &str, v: Vec<f32>| BankEntry {
        tag: LanguageTag::new(code, Script::Synthetic { lo: 0, hi: 1 }).unwrap(),
        vectors: v,
        samples: 1,
        slice_hash: [0; 32],
    };
    LanguageVectorBank::from_entries(
        2,
        3,
        [0; 32],
        vec![
            entry("a", vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
            entry("b", vec![0.0, 1.0, 0.0, 0.0, 0.0, 2.0]),
        ],
    )
    .unwrap()
}

#[test]
fn empty_layer_set_is_identity_and_mono_applies_per_layer() {
    let bank = two_bank();
    let cfg = SteeringConfig {
        mode: SteeringMode::Mono,
        alpha: 1.0,
        ..Default::default()
    };
    let hook = make_hook(SteeringArtifact::Bank(&bank), &cfg.with_layers([]), "a", Some("a")).unwrap();
    assert!(!(1..=2).any(|l| hook.touches(l)));
    let hook = make_hook(SteeringArtifact::Bank(&bank), &cfg, "a", Some("a")).unwrap();
    for layer in 1..=2 {
        let r = bank.language_representation("a", layer).unwrap();
        let mut h = vec![0.5f32, -0.5, 0.25];
        let expect = steer_mono(&h, &r, 1.0, false, 1e-8).unwrap();
        hook.rewrite(layer, 1, &mut h);
        assert_eq!(h, expect);
    }
}

/// Records each row it sees before delegating.
struct Recording<'a, H> {
    inner: &'a H,
    seen: std::sync::Mutex<BTreeMap<(usize, usize), Vec<f32>>>,
}

impl<H: LayerHook<f32>> LayerHook<f32> for Recording<'_, H> {
    fn touches(&self, _layer: usize) -> bool {
        true
    }
    fn rewrite(&self, layer: usize, position: usize, h: &mut [f32]) {
        self.seen.lock().unwrap().insert((layer, position), h.to_vec());
        if self.inner.touches(layer) {
            self.inner.rewrite(layer, position, h);
        }
    }
}

#[test]
fn left_out_layer_passes_its_block_output_through() {
    let toy = common::toy();
    let codes = toy.syn.codes();
    let n = toy.model.config().n_layers;
    let cfg = SteeringConfig {
        alpha: 2.0,
        norm_restore: true,
        ..Default::default()
    };
    let tokens = toy.syn.render(&codes[0], &[5, 3, 8, 1, 2, 7]).unwrap();
    for j in 1..=n {
        let layers: BTreeSet<usize> = (1..=n).filter(|l| *l != j).collect();
        let hook = make_hook(
            SteeringArtifact::Bank(&toy.bank),
            &cfg.with_layers(layers),
            &codes[1],
            Some(&codes[0]),
        )
        .unwrap();
        let rec = Recording {
            inner: &hook,
            seen: Default::default(),
        };
        let (states, _) = toy.model.forward_collect(&tokens, Some(&rec)).unwrap();
        let seen = rec.seen.into_inner().unwrap();
        for p in 0..tokens.len() {
            assert_eq!(states.at(j, p), seen[&(j, p)].as_slice(), "layer {j} position {p}");
            if p > 0 {
                let other = if j == 1 { 2 } else { 1 };
                assert_ne!(states.at(other, p), seen[&(other, p)].as_slice());
            }
        }
    }
}
