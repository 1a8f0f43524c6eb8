use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ItemSet, Pair, PairSet, RelationSpec, Split};
use crate::error::{invalid, Error, Result};

/// Stratified split into train/val/test. Every class contributes at least
/// one item to each split; within a split items keep their original order.
pub fn split_items(items: &ItemSet, ratios: (f64, f64, f64), seed: u64) -> Result<(ItemSet, ItemSet, ItemSet)> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(invalid(format!(
            "split ratios {ratios:?} must be positive and sum to 1"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (class, mut group) in items.by_class().into_iter().enumerate() {
        let n = group.len();
        if n < 3 {
            return Err(Error::Data(format!("class {class} has {n} items; splitting needs 3")));
        }
        group.shuffle(&mut rng);
        let mut train = ((n as f64 * a).round() as usize).max(1);
        let val = ((n as f64 * b).round() as usize).clamp(1, n - 2);
        if train + val > n - 1 {
            train = n - 1 - val;
        }
        parts[0].extend_from_slice(&group[..train]);
        parts[1].extend_from_slice(&group[train..train + val]);
        parts[2].extend_from_slice(&group[train + val..]);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok((
        items.subset(&parts[0])?,
        items.subset(&parts[1])?,
        items.subset(&parts[2])?,
    ))
}

/// For every query item, `pairs_per_item` times: a fair coin picks a
/// positive or negative candidate, drawn uniformly from the split's items
/// of compatible (or incompatible) classes. The query itself is never its
/// own candidate. Duplicate pairs are kept.
pub fn build_pairs(
    items: &ItemSet,
    relation: &RelationSpec,
    pairs_per_item: usize,
    split: Split,
    seed: u64,
) -> Result<PairSet> {
    if items.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if items.num_classes() != relation.num_classes {
        return Err(Error::Data(format!(
            "items have {} classes, relation has {}",
            items.num_classes(),
            relation.num_classes
        )));
    }
    let groups = items.by_class();
    let mut pools: Vec<(Vec<usize>, Vec<usize>)> = Vec::with_capacity(groups.len());
    for class in 0..relation.num_classes {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (other, group) in groups.iter().enumerate() {
            if relation.is_compatible(class, other) {
                pos.extend_from_slice(group);
            } else {
                neg.extend_from_slice(group);
            }
        }
        pos.sort_unstable();
        neg.sort_unstable();
        if !groups[class].is_empty() {
            let self_only = neg.len() == 1 && groups[class].len() == 1;
            if pos.is_empty() || neg.is_empty() || self_only {
                return Err(Error::Data(format!(
                    "class {class} lacks a positive or negative candidate in the {split} split"
                )));
            }
        }
        pools.push((pos, neg));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(items.len() * pairs_per_item);
    for (q, &class) in items.labels().iter().enumerate() {
        let (pos, neg) = &pools[class];
        for _ in 0..pairs_per_item {
            let positive = rng.random_bool(0.5);
            let pool = if positive { pos } else { neg };
            let cand = loop {
                let c = pool[rng.random_range(0..pool.len())];
                if c != q {
                    break c;
                }
            };
            let label = relation.label(class, items.labels()[cand]);
            debug_assert_eq!(label > 0, positive);
            pairs.push(Pair {
                query: items.ids()[q],
                candidate: items.ids()[cand],
                label,
            });
        }
    }
    Ok(PairSet { split, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{check_disjoint, gen_gaussian_mixture, gen_procedural_items};
    use std::collections::HashSet;

    fn hundred() -> ItemSet {
        gen_procedural_items(10, &RelationSpec::plus_one_two(), 8, 7).unwrap()
    }

    #[test]
    fn sixty_twenty_twenty() {
        let items = hundred();
        let (a, b, c) = split_items(&items, (0.6, 0.2, 0.2), 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (60, 20, 20));
        check_disjoint(&[&a, &b, &c]).unwrap();
        let union: HashSet<u32> = a.ids().iter().chain(b.ids()).chain(c.ids()).copied().collect();
        assert_eq!(union, items.id_set());
        for (set, share) in [(&a, 0.6), (&b, 0.2), (&c, 0.2)] {
            for group in set.by_class() {
                assert!((group.len() as f64 - 10.0 * share).abs() <= 1.0);
            }
        }
        let again = split_items(&items, (0.6, 0.2, 0.2), 1).unwrap();
        assert_eq!(again.0.ids(), a.ids());
    }

    #[test]
    fn split_rejects_bad_input() {
        let items = hundred();
        assert!(split_items(&items, (0.5, 0.2, 0.2), 0).is_err());
        assert!(split_items(&items, (1.0, 0.0, 0.0), 0).is_err());
        let tiny = gen_procedural_items(2, &RelationSpec::plus_one_two(), 8, 7).unwrap();
        assert!(matches!(split_items(&tiny, (0.6, 0.2, 0.2), 0), Err(Error::Data(_))));
    }

    #[test]
    fn uneven_classes_keep_every_split_populated() {
        let items = gen_procedural_items(3, &RelationSpec::plus_one_two(), 8, 7).unwrap();
        let (a, b, c) = split_items(&items, (0.8, 0.1, 0.1), 4).unwrap();
        for set in [&a, &b, &c] {
            assert!(set.by_class().iter().all(|g| g.len() == 1));
        }
    }

    #[test]
    fn class_zero_positives_come_from_one_and_two() {
        let items = hundred();
        let r = RelationSpec::plus_one_two();
        let pairs = build_pairs(&items, &r, 20, Split::Train, 3).unwrap();
        let mut seen = HashSet::new();
        for p in &pairs.pairs {
            let (qc, cc) = (
                items.label_by_id(p.query).unwrap(),
                items.label_by_id(p.candidate).unwrap(),
            );
            assert_eq!(p.label, r.label(qc, cc));
            assert_ne!(p.query, p.candidate);
            if qc == 0 && p.is_positive() {
                seen.insert(cc);
            }
        }
        assert_eq!(seen, HashSet::from([1, 2]));
    }

    #[test]
    fn positive_fraction_is_balanced() {
        let r = RelationSpec::plus_one_two();
        let items = gen_gaussian_mixture(100, &r, 0.03, 0).unwrap();
        let pairs = build_pairs(&items, &r, 10, Split::Train, 2024).unwrap();
        assert_eq!(pairs.len(), 10_000);
        let f = pairs.positive_fraction();
        assert!((0.47..=0.53).contains(&f), "{f}");
    }

    #[test]
    fn missing_candidates_is_an_error() {
        let r = RelationSpec::plus_one_two();
        let items = hundred();
        let only_zero: Vec<usize> = items.by_class()[0].clone();
        let subset = items.subset(&only_zero).unwrap();
        assert!(matches!(
            build_pairs(&subset, &r, 1, Split::Test, 0),
            Err(Error::Data(_))
        ));
    }
}
