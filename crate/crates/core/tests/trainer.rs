mod common;

use ccf_core::cf::CfBackend;
use ccf_core::fusion::FusionConfig;
use ccf_core::lm::{NO, YES};
use ccf_core::params::{grad_check_params, ParamGroup, Session};
use ccf_core::tensor::Tensor;
use ccf_core::trainer::{
    ctr_loss, ctr_loss_node, train_stage, train_two_stage, BprInput, Instance, ParamPartition, Schedule, Stage,
    TrainConfig,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn loss_examples() {
    let ln2 = std::f64::consts::LN_2;
    assert!((ctr_loss(0.5, 0.5, 1, 2.0) - 4.0 * ln2).abs() < 1e-12);
    assert!((ctr_loss(0.5, 0.5, 0, 2.0) - 4.0 * ln2).abs() < 1e-12);
    let want = -(0.9f64.ln()) - 0.9f64.ln() - 2.0 * sig(0.8).ln();
    assert!((ctr_loss(0.9, 0.1, 1, 2.0) - want).abs() < 1e-12);
    let neg = -(0.9f64.ln()) - 0.9f64.ln() - 2.0 * sig(0.8).ln();
    assert!((ctr_loss(0.1, 0.9, 0, 2.0) - neg).abs() < 1e-12);
}

#[test]
fn zero_weight_leaves_the_two_cross_entropies() {
    for (py, pn, y) in [(0.3, 0.6, 1u8), (0.7, 0.2, 0), (0.01, 0.98, 1)] {
        let yf = f64::from(y);
        let bce = -(yf * f64::ln(py) + (1.0 - yf) * f64::ln(1.0 - py)) - ((1.0 - yf) * f64::ln(pn) + yf * f64::ln(1.0 - pn));
        assert!((ctr_loss(py, pn, y, 0.0) - bce).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn ranking_term_is_bounded_below(py in 0.01..0.99f64, frac in 0.0..1.0f64, k in 0.0..5.0f64) {
        let pn = frac * (1.0 - py);
        let bce = ctr_loss(py, pn, 1, 0.0);
        prop_assert!(ctr_loss(py, pn, 1, k) - bce >= -k * sig(1.0).ln() - 1e-12);
    }

    #[test]
    fn node_matches_scalar_loss(seed in any::<u64>(), y in 0u8..2, k in 0.0..4.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::uniform(&[1, 7], -3.0, 3.0, &mut rng);
        let m = logits.data().iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.data().iter().map(|v| (v - m).exp()).sum();
        let p = |i: u32| (logits.data()[i as usize] - m).exp() / z;
        let ps = ccf_core::params::ParamStore::new();
        let mut s = Session::frozen(&ps);
        let l = s.tape.constant(logits.clone());
        let node = ctr_loss_node(&mut s, l, y, k, BprInput::Probabilities).unwrap();
        prop_assert!((s.tape.value(node).item() - ctr_loss(p(YES), p(NO), y, k)).abs() < 1e-10);
    }
}

#[test]
fn loss_gradient_wrt_logits() {
    for bpr in [BprInput::Probabilities, BprInput::Logits] {
        for y in [0u8, 1] {
            let mut ps = ccf_core::params::ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(u64::from(y));
            ps.insert("z", Tensor::uniform(&[1, 6], -2.0, 2.0, &mut rng));
            let r = grad_check_params(
                &ps,
                &["z".to_string()],
                |s| {
                    let z = s.param("z")?;
                    ctr_loss_node(s, z, y, 2.0, bpr)
                },
                1e-5,
                usize::MAX,
            )
            .unwrap();
            assert!(r.passes(1e-4), "{bpr:?} y={y}: {}", r.max_rel_error);
        }
    }
}

fn data(toy: &common::Toy) -> (Vec<Instance>, Vec<Instance>) {
    let train = vec![
        toy.instance(1, 3, 1, &[1]),
        toy.instance(1, 4, 0, &[1, 2]),
        toy.instance(2, 5, 1, &[3]),
        toy.instance(3, 2, 0, &[5]),
    ];
    let val = vec![toy.instance(2, 1, 1, &[3]), toy.instance(3, 4, 0, &[5]), toy.instance(1, 5, 1, &[])];
    (train, val)
}

fn cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        max_epochs: 2,
        patience: 5,
        lr_stage1: 0.05,
        lr_stage2: 0.05,
        ..TrainConfig::default()
    }
}

#[test]
fn stages_only_write_their_own_groups() {
    let toy = common::toy(&[CfBackend::Mf]);
    let fusion = toy.fusion(FusionConfig::default());
    let pipe = toy.pipeline(fusion.clone());
    let start = toy.params(&fusion);
    let (train, val) = data(&toy);
    let partition = ParamPartition::new(true);
    for stage in [Stage::One, Stage::Two] {
        let mut ps = start.clone();
        let r = train_stage(&pipe, &mut ps, stage, &partition, &train, &val, &TrainConfig { patience: 99, ..cfg() }).unwrap();
        let trainable = partition.trainable(stage);
        let frozen: Vec<String> = start.names().filter(|n| !trainable(n)).map(String::from).collect();
        let moved: Vec<String> = start.names().filter(|n| trainable(n)).map(String::from).collect();
        assert!(!frozen.is_empty() && !moved.is_empty());
        assert!(start.bit_identical(&ps, &frozen), "{stage:?} touched a frozen tensor");
        assert_eq!(r.trainable, moved);
        if r.best_epoch > 0 {
            assert!(!start.bit_identical(&ps, &moved));
        }
        // frozen tensors get no gradient at all
        let mut sess = Session::new(&start, &trainable);
        let refs: Vec<&Instance> = train.iter().collect();
        let loss = pipe.batch_loss(&mut sess, &refs, &cfg()).unwrap();
        let grads = sess.gradients(loss).unwrap();
        assert!(grads.keys().all(|n| trainable(n)));
    }
}

#[test]
fn stage_one_trains_adapters_only() {
    let p = ParamPartition::new(true);
    assert_eq!(p.groups(Stage::One), [ParamGroup::Adapter]);
    assert_eq!(p.groups(Stage::Two), [ParamGroup::Encoder, ParamGroup::Alignment, ParamGroup::Gate]);
    assert_eq!(ParamPartition::new(false).groups(Stage::Two), [ParamGroup::Alignment, ParamGroup::Gate]);
}

#[test]
fn stage1_only_is_the_first_half_of_two_stage() {
    let toy = common::toy(&[CfBackend::Mf]);
    let fusion = toy.fusion(FusionConfig::default());
    let pipe = toy.pipeline(fusion.clone());
    let start = toy.params(&fusion);
    let (train, val) = data(&toy);
    let mut a = start.clone();
    let ra = train_two_stage(&pipe, &mut a, Schedule::Stage1Only, &train, &val, &cfg()).unwrap();
    let mut b = start.clone();
    let partition = ParamPartition::new(true);
    let rb = train_stage(&pipe, &mut b, Stage::One, &partition, &train, &val, &cfg()).unwrap();
    assert_eq!(ra, vec![rb]);
    let names: Vec<String> = a.names().map(String::from).collect();
    assert!(a.bit_identical(&b, &names));
    let mut c = start.clone();
    let rc = train_two_stage(&pipe, &mut c, Schedule::TwoStage, &train, &val, &cfg()).unwrap();
    assert_eq!(rc.len(), 2);
    assert_eq!(rc[0], ra[0]);
    assert!(rc[1].best_val_auc >= rc[0].best_val_auc);
}

#[test]
fn best_snapshot_is_never_worse_than_the_start() {
    let toy = common::toy(&[CfBackend::Mf]);
    let fusion = toy.fusion(FusionConfig::default());
    let pipe = toy.pipeline(fusion.clone());
    let mut ps = toy.params(&fusion);
    let (train, val) = data(&toy);
    let r = train_two_stage(&pipe, &mut ps, Schedule::EndToEnd, &train, &val, &cfg()).unwrap();
    assert_eq!(r[0].stage, Stage::EndToEnd);
    assert!(r[0].best_val_auc >= r[0].initial_val_auc);
    assert_eq!(pipe.auc(&ps, &val).unwrap(), r[0].best_val_auc);
}

#[test]
fn missing_groups_are_rejected() {
    let toy = common::toy(&[CfBackend::Mf]);
    let fusion = toy.fusion(FusionConfig::default());
    let pipe = toy.pipeline(fusion.clone());
    let (train, val) = data(&toy);
    let mut ps = toy.params(&fusion);
    ps.retain(|n| !n.starts_with("cf."));
    assert!(train_two_stage(&pipe, &mut ps, Schedule::TwoStage, &train, &val, &cfg()).is_err());
    let mut ps = toy.params(&fusion);
    assert!(train_stage(&pipe, &mut ps, Stage::One, &ParamPartition::new(true), &[], &val, &cfg()).is_err());
    let bad = TrainConfig { k: -1.0, ..cfg() };
    assert!(train_stage(&pipe, &mut ps, Stage::One, &ParamPartition::new(true), &train, &val, &bad).is_err());
}

#[test]
fn prediction_is_pure_and_ordered() {
    let toy = common::toy(&[CfBackend::Mf]);
    let fusion = toy.fusion(FusionConfig::default());
    let pipe = toy.pipeline(fusion.clone());
    let ps = toy.params(&fusion);
    let (train, val) = data(&toy);
    let before = ps.clone();
    let all: Vec<Instance> = train.iter().chain(&val).cloned().collect();
    let p1 = pipe.predict(&ps, &all).unwrap();
    let p2 = pipe.predict(&ps, &all).unwrap();
    assert_eq!(p1, p2);
    let names: Vec<String> = ps.names().map(String::from).collect();
    assert!(before.bit_identical(&ps, &names));
    // scoring one instance alone gives the batch value
    for (i, inst) in all.iter().enumerate() {
        assert_eq!(pipe.predict(&ps, std::slice::from_ref(inst)).unwrap()[0], p1[i]);
    }
}
