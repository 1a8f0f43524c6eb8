//! Ranking metrics and compatible-item retrieval.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use cfam_autodiff::Scalar;
use rayon::prelude::*;

use crate::compat::{pair_probability, pcd, sq_dist, CompatModel, FamilyEmbedding};
use crate::data::{ItemId, ItemSet, Pair, RelationSpec};
use crate::error::{invalid, Error, Result};

/// Twice the Mann-Whitney count (`2 * wins + ties`) and `P * N`.
fn auc_counts(scores: &[f64], labels: &[i8]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(invalid(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(invalid(format!("score {s} is not comparable")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut twice_u, mut neg_below, mut pos_total) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] > 0 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_u += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        pos_total += pos;
        i = j;
    }
    if pos_total == 0 || neg_below == 0 {
        return Err(Error::SingleClass);
    }
    Ok((twice_u, pos_total * neg_below))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[i8]) -> Result<f64> {
    let (twice_u, pn) = auc_counts(scores, labels)?;
    Ok(twice_u as f64 / (2 * pn) as f64)
}

/// Fraction of items where `P >= threshold` disagrees with the label; zero
/// for empty input.
pub fn error_rate(probabilities: &[f64], labels: &[i8], threshold: f64) -> f64 {
    if probabilities.is_empty() {
        return 0.0;
    }
    let wrong = probabilities
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| (p >= threshold) != (l > 0))
        .count();
    wrong as f64 / probabilities.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ranked {
    pub id: ItemId,
    /// Negative distance; larger is more compatible.
    pub score: f64,
}

/// Candidates ordered by non-increasing score, ties by ascending id.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub query: ItemId,
    pub entries: Vec<Ranked>,
}

impl RankedList {
    pub fn top(&self) -> Option<ItemId> {
        self.entries.first().map(|r| r.id)
    }

    pub fn ids(&self) -> Vec<ItemId> {
        self.entries.iter().map(|r| r.id).collect()
    }
}

fn by_distance_then_id<T: Scalar>(a: &(T, ItemId), b: &(T, ItemId)) -> Ordering {
    a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

fn ranked<T: Scalar>(query: ItemId, mut scored: Vec<(T, ItemId)>, top_n: usize) -> RankedList {
    scored.sort_by(by_distance_then_id);
    scored.truncate(top_n);
    RankedList {
        query,
        entries: scored
            .into_iter()
            .map(|(d, id)| Ranked { id, score: -d.as_f64() })
            .collect(),
    }
}

/// Precomputed candidate embeddings `E_0(y)`.
#[derive(Clone, Debug)]
pub struct CandidateIndex<T> {
    ids: Vec<ItemId>,
    n: usize,
    e0: Vec<T>,
}

impl<T: Scalar> CandidateIndex<T> {
    pub fn new(ids: Vec<ItemId>, families: &[FamilyEmbedding<T>]) -> Result<Self> {
        if ids.len() != families.len() {
            return Err(invalid(format!("{} ids for {} families", ids.len(), families.len())));
        }
        let n = families.first().map_or(0, FamilyEmbedding::n);
        let mut e0 = Vec::with_capacity(n * families.len());
        for f in families {
            if f.n() != n {
                return Err(Error::Mismatch("candidate embeddings differ in size".into()));
            }
            e0.extend_from_slice(&f.e0);
        }
        Ok(Self { ids, n, e0 })
    }

    pub fn build(model: &CompatModel<T>, items: &ItemSet) -> Result<Self> {
        Self::new(items.ids().to_vec(), &model.encode_items(items)?)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[ItemId] {
        &self.ids
    }

    pub fn embedding(&self, i: usize) -> &[T] {
        &self.e0[i * self.n..(i + 1) * self.n]
    }

    fn check(&self, query: &FamilyEmbedding<T>) -> Result<()> {
        if self.is_empty() {
            return Err(invalid("candidate index is empty"));
        }
        if query.n() != self.n {
            return Err(Error::Mismatch(format!(
                "query latent size {} vs index {}",
                query.n(),
                self.n
            )));
        }
        Ok(())
    }
}

/// Ranks every candidate (except the query itself) by ascending exact PCD.
pub fn recommend_exact<T: Scalar>(
    query_id: ItemId,
    query: &FamilyEmbedding<T>,
    index: &CandidateIndex<T>,
    top_n: usize,
) -> Result<RankedList> {
    index.check(query)?;
    let scored = index
        .ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| id != query_id)
        .map(|(i, &id)| (pcd(&query.prototypes, index.embedding(i)).d, id))
        .collect();
    Ok(ranked(query_id, scored, top_n))
}

/// One nearest-neighbour scan per prototype, run in parallel, merged by
/// `min_k d_k`. The union of per-prototype top-`n` lists always contains the
/// global top-`n` under that score.
pub fn recommend_approx<T: Scalar>(
    query_id: ItemId,
    query: &FamilyEmbedding<T>,
    index: &CandidateIndex<T>,
    top_n: usize,
) -> Result<RankedList> {
    index.check(query)?;
    let lists: Vec<Vec<(T, ItemId)>> = (0..query.k())
        .into_par_iter()
        .map(|k| {
            let p = query.prototype(k);
            let mut scored: Vec<(T, ItemId)> = index
                .ids
                .iter()
                .enumerate()
                .filter(|(_, &id)| id != query_id)
                .map(|(i, &id)| (sq_dist(p, index.embedding(i)), id))
                .collect();
            scored.sort_by(by_distance_then_id);
            scored.truncate(top_n);
            scored
        })
        .collect();
    let mut best: BTreeMap<ItemId, T> = BTreeMap::new();
    for (d, id) in lists.into_iter().flatten() {
        best.entry(id).and_modify(|v| *v = v.min(d)).or_insert(d);
    }
    Ok(ranked(
        query_id,
        best.into_iter().map(|(id, d)| (d, id)).collect(),
        top_n,
    ))
}

/// Pair-level scores from one encoding pass.
#[derive(Clone, Debug)]
pub struct PairScores {
    pub labels: Vec<i8>,
    /// Exact distances.
    pub d: Vec<f64>,
    /// `min_k d_k` per pair.
    pub min_dk: Vec<f64>,
    pub probabilities: Vec<f64>,
}

pub fn score_pairs<T: Scalar>(model: &CompatModel<T>, items: &ItemSet, pairs: &[Pair]) -> Result<PairScores> {
    let fam: HashMap<ItemId, FamilyEmbedding<T>> = model.encode_map(items)?;
    let c = model.c();
    let mut out = PairScores {
        labels: Vec::with_capacity(pairs.len()),
        d: Vec::with_capacity(pairs.len()),
        min_dk: Vec::with_capacity(pairs.len()),
        probabilities: Vec::with_capacity(pairs.len()),
    };
    for p in pairs {
        let missing = |id| Error::Data(format!("pair references unknown item {id}"));
        let q = fam.get(&p.query).ok_or_else(|| missing(p.query))?;
        let y = fam.get(&p.candidate).ok_or_else(|| missing(p.candidate))?;
        let r = q.pcd_to(y);
        out.labels.push(p.label);
        out.d.push(r.d.as_f64());
        out.min_dk
            .push(r.d_k.iter().copied().fold(T::infinity(), T::min).as_f64());
        out.probabilities.push(pair_probability(r.d, c).as_f64());
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub pairs: usize,
    pub auc: f64,
    pub error_rate: f64,
    /// AUC when ranking by `-min_k d_k` instead of the exact distance.
    pub auc_min_dk: f64,
}

pub fn evaluate<T: Scalar>(model: &CompatModel<T>, items: &ItemSet, pairs: &[Pair]) -> Result<EvalReport> {
    let s = score_pairs(model, items, pairs)?;
    let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
    Ok(EvalReport {
        pairs: pairs.len(),
        auc: auc(&neg(&s.d), &s.labels)?,
        error_rate: error_rate(&s.probabilities, &s.labels, 0.5),
        auc_min_dk: auc(&neg(&s.min_dk), &s.labels)?,
    })
}

/// Largest class-level AUC reachable by any scorer with
/// `score(a, b) = score(b, a)`.
///
/// Positives are the ordered class pairs in the relation, negatives all other
/// ordered pairs (including `(a, a)`). A symmetric scorer assigns one score
/// per unordered pair, so it can only order unordered pairs; the pairs fall
/// into types by how many of their directions are positive, all pairs of a
/// type are interchangeable, and every weak ordering of the types is tried.
pub fn symmetric_auc_bound(relation: &RelationSpec) -> f64 {
    let c = relation.num_classes;
    let mut types: BTreeMap<(u64, u64), u64> = BTreeMap::new();
    for a in 0..c {
        for b in a..c {
            let forward = u64::from(relation.is_compatible(a, b));
            let (p, n) = if a == b {
                (forward, 1 - forward)
            } else {
                let back = u64::from(relation.is_compatible(b, a));
                (forward + back, 2 - forward - back)
            };
            *types.entry((p, n)).or_default() += 1;
        }
    }
    let groups: Vec<(u64, u64)> = types.iter().map(|(&(p, n), &m)| (p * m, n * m)).collect();
    let total_p: u64 = groups.iter().map(|g| g.0).sum();
    let total_n: u64 = groups.iter().map(|g| g.1).sum();
    if total_p == 0 || total_n == 0 {
        return 1.0;
    }
    let m = groups.len();
    let mut best = 0u64;
    let mut levels = vec![0usize; m];
    loop {
        let mut twice_u = 0u64;
        for (i, gi) in groups.iter().enumerate() {
            for (j, gj) in groups.iter().enumerate() {
                twice_u += gi.0
                    * gj.1
                    * match levels[i].cmp(&levels[j]) {
                        Ordering::Greater => 2,
                        Ordering::Equal => 1,
                        Ordering::Less => 0,
                    };
            }
        }
        best = best.max(twice_u);
        let mut i = 0;
        while i < m && levels[i] + 1 == m {
            levels[i] = 0;
            i += 1;
        }
        if i == m {
            break;
        }
        levels[i] += 1;
    }
    best as f64 / (2 * total_p * total_n) as f64
}
