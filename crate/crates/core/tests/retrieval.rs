use std::collections::HashSet;

use cfam_core::compat::{sq_dist, FamilyEmbedding};
use cfam_core::eval::{recommend_approx, recommend_exact, CandidateIndex};
use proptest::prelude::*;

fn setup() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, usize)> {
    (1usize..4, 2usize..30).prop_flat_map(|(k, m)| {
        (
            prop::collection::vec(prop::collection::vec((-4i32..4).prop_map(|v| v as f64 * 0.5), 2), m),
            prop::collection::vec((-4i32..4).prop_map(|v| v as f64 * 0.5), 2 * k),
            1usize..8,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    /// The merged per-prototype scans equal a full scan ranked by
    /// `min_k d_k`, ties broken by id.
    #[test]
    fn approximate_search_is_exact_for_min_distance((cands, protos, top_n) in setup()) {
        let families: Vec<FamilyEmbedding<f64>> = cands
            .iter()
            .map(|e| FamilyEmbedding { e0: e.clone(), prototypes: e.repeat(protos.len() / 2) })
            .collect();
        let ids: Vec<u32> = (0..families.len() as u32).map(|i| i * 3 + 1).collect();
        let index = CandidateIndex::new(ids.clone(), &families).unwrap();
        let query = FamilyEmbedding { e0: vec![0.0, 0.0], prototypes: protos.clone() };
        let query_id = ids[0];
        let approx = recommend_approx(query_id, &query, &index, top_n).unwrap();

        let mut brute: Vec<(f64, u32)> = cands
            .iter()
            .zip(&ids)
            .filter(|(_, &id)| id != query_id)
            .map(|(e, &id)| (protos.chunks(2).map(|p| sq_dist(p, e)).fold(f64::INFINITY, f64::min), id))
            .collect();
        brute.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        brute.truncate(top_n);
        prop_assert_eq!(approx.ids(), brute.iter().map(|b| b.1).collect::<Vec<_>>());
        for (e, b) in approx.entries.iter().zip(&brute) {
            prop_assert_eq!(e.score, -b.0);
        }

        let exact = recommend_exact(query_id, &query, &index, top_n).unwrap();
        for list in [&approx, &exact] {
            prop_assert!(list.entries.windows(2).all(|w| w[0].score >= w[1].score));
            let unique: HashSet<u32> = list.ids().into_iter().collect();
            prop_assert_eq!(unique.len(), list.entries.len());
            prop_assert!(!unique.contains(&query_id));
            prop_assert_eq!(list.entries.len(), top_n.min(ids.len() - 1));
        }
    }
}
