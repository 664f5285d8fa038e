use ccf_core::metrics::{auc, rela_impr};
use proptest::prelude::*;

/// Counts positive/negative pairs directly, ties worth one half.
fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            den += 1.0;
            num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
        }
    }
    num / den
}

fn scored_labels(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2..max, 1u32..50).prop_flat_map(|(n, levels)| {
        (
            prop::collection::vec(0..levels, n).prop_map(move |v| v.into_iter().map(|x| x as f64 / levels as f64).collect()),
            prop::collection::vec(0u8..2, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn auc_matches_pair_counting((scores, mut labels) in scored_labels(300)) {
        labels[0] = 1;
        labels[1] = 0;
        let a = auc(&scores, &labels).unwrap();
        prop_assert!((a - brute_auc(&scores, &labels)).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn rela_impr_identity_and_monotone(base in 0.501..1.0f64, a in 0.0..1.0f64, d in 1e-6..0.5f64) {
        prop_assert_eq!(rela_impr(base, base).unwrap(), 0.0);
        prop_assert!(rela_impr(a + d, base).unwrap() > rela_impr(a, base).unwrap());
    }
}

#[test]
fn equal_scores_give_one_half() {
    assert_eq!(auc(&[0.4; 9], &[1, 0, 0, 1, 0, 1, 1, 0, 0]).unwrap(), 0.5);
}

#[test]
fn printed_relative_improvements() {
    for (m, b, want) in [(0.7295, 0.6482, 54.86), (0.7315, 0.6482, 56.21), (0.7427, 0.5959, 153.08), (0.7792, 0.6887, 47.96)] {
        let got = rela_impr(m, b).unwrap();
        assert!((got - want).abs() <= 0.01, "({m}, {b}) gave {got}");
    }
}

#[test]
fn base_at_chance_is_rejected() {
    assert!(rela_impr(0.6, 0.5).is_err());
    assert!(rela_impr(0.6, 0.4).is_err());
}
