use cfam_core::eval::auc;
use proptest::prelude::*;

/// Quadratic count of ordered (positive, negative) wins with ties worth one
/// half, kept in integers until the final division.
fn brute_force_auc(scores: &[f64], labels: &[i8]) -> f64 {
    let (mut twice_wins, mut pos, mut neg) = (0u64, 0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li > 0 {
            pos += 1;
        } else {
            neg += 1;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if li > 0 && lj < 0 {
                twice_wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    twice_wins as f64 / (2 * pos * neg) as f64
}

fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<i8>)> {
    (2usize..=50).prop_flat_map(|n| {
        (
            // Few distinct levels so ties are common.
            prop_oneof![
                prop::collection::vec((0i32..5).prop_map(|v| v as f64 * 0.5), n),
                prop::collection::vec(-10.0f64..10.0, n),
            ],
            prop::collection::vec(prop_oneof![Just(1i8), Just(-1i8)], n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sorted_auc_equals_pairwise_count((scores, mut labels) in instance()) {
        // Both classes present.
        labels[0] = 1;
        labels[1] = -1;
        let fast = auc(&scores, &labels).unwrap();
        prop_assert_eq!(fast.to_bits(), brute_force_auc(&scores, &labels).to_bits());
    }
}

#[test]
fn all_ties_give_one_half() {
    assert_eq!(auc(&[0.3; 6], &[1, -1, 1, -1, -1, 1]).unwrap(), 0.5);
}

#[test]
fn single_class_is_rejected() {
    assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
}
