use ccf_core::dataset::{ItemCatalog, ItemInfo};
use ccf_core::lm::{tokenize, yes_no_node, yes_no_probs, LmConfig, TinyLm, Vocabulary, NO, UNK, YES};
use ccf_core::params::{grad_check_params, ParamStore, Session};
use ccf_core::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(scale: f64) -> (TinyLm, ParamStore) {
    let lm = TinyLm::new(LmConfig {
        d_model: 8,
        layers: 2,
        heads: 2,
        d_ff: 12,
        max_len: 8,
        vocab_size: 9,
        lora_rank: 2,
        lora_scale: scale,
        init_bound: 0.4,
        seed: 3,
    })
    .unwrap();
    let mut ps = lm.init_params();
    // non-zero up-projections so the adapters take part
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ups: Vec<String> = ps.names().filter(|n| n.ends_with(".up")).map(String::from).collect();
    for n in ups {
        let shape = ps.get(&n).unwrap().shape().to_vec();
        ps.insert(n, Tensor::uniform(&shape, -0.5, 0.5, &mut rng));
    }
    (lm, ps)
}

fn logits(lm: &TinyLm, ps: &ParamStore, x: &Tensor, adapters: bool) -> Tensor {
    let mut s = Session::frozen(ps);
    let xv = s.tape.constant(x.clone());
    let y = lm.forward(&mut s, xv, adapters).unwrap();
    s.tape.value(y).clone()
}

fn catalog() -> ItemCatalog {
    let mut c = ItemCatalog::default();
    for (id, t) in [(1, "Star Wars (1977)"), (2, "Blade Runner (1982)"), (3, "Toy Story (1995)")] {
        c.items.insert(
            id,
            ItemInfo {
                title: t.to_string(),
                genres: vec![],
            },
        );
    }
    c
}

#[test]
fn reserved_answer_tokens() {
    let v = Vocabulary::build(&catalog(), &["Answer with \"Yes\" or \"No\"."]);
    assert_eq!(v.encode("Yes"), [YES]);
    assert_eq!(v.encode("No"), [NO]);
    assert_ne!(YES, NO);
    assert_eq!(v.encode("zebra"), [UNK]);
}

#[test]
fn titles_roundtrip_through_ids() {
    let cat = catalog();
    let v = Vocabulary::build(&cat, &[]);
    for info in cat.items.values() {
        assert_eq!(v.decode(&v.encode(&info.title)), tokenize(&info.title));
    }
}

#[test]
fn readout_examples() {
    assert_eq!(yes_no_probs(&[1.5; 9]).score, 0.5);
    let mut l = vec![0.0; 9];
    l[NO as usize] = -1.0;
    l[YES as usize] = 9.0;
    let p = yes_no_probs(&l);
    assert!((p.score - 1.0 / (1.0 + (-10f64).exp())).abs() < 1e-15);
}

proptest! {
    #[test]
    fn score_is_shift_invariant_and_monotone(l in prop::collection::vec(-5.0..5.0f64, 9), c in -20.0..20.0f64, d in 0.01..3.0f64) {
        let base = yes_no_probs(&l);
        let shifted: Vec<f64> = l.iter().map(|v| v + c).collect();
        prop_assert!((yes_no_probs(&shifted).score - base.score).abs() < 1e-12);
        prop_assert!(base.score > 0.0 && base.score < 1.0);
        let mut up = l.clone();
        up[YES as usize] += d;
        prop_assert!(yes_no_probs(&up).score > base.score);
    }

    #[test]
    fn causal(seed in any::<u64>(), t in 0usize..7, noise in -3.0..3.0f64) {
        let (lm, ps) = tiny(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(&[8, 8], -1.0, 1.0, &mut rng);
        let mut y = x.clone();
        for r in t + 1..8 {
            for c in 0..8 {
                y.data_mut()[r * 8 + c] += noise * (c as f64 - 3.5);
            }
        }
        let (a, b) = (logits(&lm, &ps, &x, true), logits(&lm, &ps, &y, true));
        let v = a.cols();
        prop_assert_eq!(&a.data()[..(t + 1) * v], &b.data()[..(t + 1) * v]);
    }
}

#[test]
fn adapter_delta_is_linear_in_scale() {
    let (lm1, ps) = tiny(0.5);
    let (lm2, _) = tiny(1.5);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::uniform(&[5, 8], -1.0, 1.0, &mut rng);
    let delta = |lm: &TinyLm| {
        let mut s = Session::frozen(&ps);
        let xv = s.tape.constant(x.clone());
        let on = lm.project(&mut s, 1, "v", xv, true).unwrap();
        let off = lm.project(&mut s, 1, "v", xv, false).unwrap();
        let d: Vec<f64> = s.tape.value(on).data().iter().zip(s.tape.value(off).data()).map(|(a, b)| a - b).collect();
        d
    };
    let (d1, d2) = (delta(&lm1), delta(&lm2));
    assert!(d1.iter().any(|v| v.abs() > 1e-3));
    for (a, b) in d1.iter().zip(&d2) {
        assert!((3.0 * a - b).abs() < 1e-10);
    }
}

#[test]
fn gradient_wrt_input_embeddings() {
    let (lm, mut ps) = tiny(0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    ps.insert("input", Tensor::uniform(&[5, 8], -1.0, 1.0, &mut rng));
    let r = grad_check_params(
        &ps,
        &["input".to_string()],
        |s| {
            let x = s.param("input")?;
            let z = lm.forward(s, x, true)?;
            s.tape.mean(z)
        },
        1e-5,
        usize::MAX,
    )
    .unwrap();
    assert!(r.passes(1e-4), "{}", r.max_rel_error);
    assert_eq!(r.checked + r.kinks.len(), 40);
}

#[test]
fn gradient_wrt_every_lm_parameter() {
    let (lm, mut ps) = tiny(0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    ps.insert("input", Tensor::uniform(&[4, 8], -1.0, 1.0, &mut rng));
    let names: Vec<String> = ps.names().filter(|n| *n != "input").map(String::from).collect();
    let r = grad_check_params(
        &ps,
        &names,
        |s| {
            let x = s.param("input")?;
            let z = lm.forward_last(s, x, true)?;
            let p = yes_no_node(s, z)?;
            let l = s.tape.log(p)?;
            s.tape.sum(l)
        },
        1e-5,
        6,
    )
    .unwrap();
    assert!(r.passes(1e-4), "{}", r.max_rel_error);
    assert!(r.checked > 100);
}
