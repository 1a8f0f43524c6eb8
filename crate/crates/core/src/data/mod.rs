//! Items, the class-shift compatibility relation, and pair sets.

mod idx;
mod pairs;
mod synth;

use std::collections::{HashMap, HashSet};
use std::fmt;

use cfam_autodiff::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub use idx::{load_idx, parse_idx_images, parse_idx_labels, write_idx, IMAGE_MAGIC, LABEL_MAGIC};
pub use pairs::{build_pairs, split_items};
pub use synth::{gen_gaussian_mixture, gen_procedural_items, mixture_center, GLYPH_NOISE_STD};

pub type ItemId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemShape {
    pub height: usize,
    pub width: usize,
}

impl ItemShape {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Fixed-shape grayscale items with class labels and unique ids.
///
/// Labels are only used to synthesize pairs; models never see them.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemSet {
    shape: ItemShape,
    num_classes: usize,
    pixels: Vec<f64>,
    labels: Vec<usize>,
    ids: Vec<ItemId>,
    index: HashMap<ItemId, usize>,
}

impl ItemSet {
    pub fn new(
        shape: ItemShape,
        num_classes: usize,
        pixels: Vec<f64>,
        labels: Vec<usize>,
        ids: Vec<ItemId>,
    ) -> Result<Self> {
        if shape.pixels() == 0 {
            return Err(invalid("item shape must be non-empty"));
        }
        if pixels.len() != labels.len() * shape.pixels() {
            return Err(Error::Data(format!(
                "{} pixel values for {} items of {}x{}",
                pixels.len(),
                labels.len(),
                shape.height,
                shape.width
            )));
        }
        if ids.len() != labels.len() {
            return Err(Error::Data(format!("{} ids for {} labels", ids.len(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {bad} >= class count {num_classes}")));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            if index.insert(id, i).is_some() {
                return Err(Error::Data(format!("duplicate item id {id}")));
            }
        }
        Ok(Self {
            shape,
            num_classes,
            pixels,
            labels,
            ids,
            index,
        })
    }

    pub fn shape(&self) -> ItemShape {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn ids(&self) -> &[ItemId] {
        &self.ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.shape.pixels();
        &self.pixels[i * p..(i + 1) * p]
    }

    pub fn position(&self, id: ItemId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn image_by_id(&self, id: ItemId) -> Option<&[f64]> {
        self.position(id).map(|i| self.image(i))
    }

    pub fn label_by_id(&self, id: ItemId) -> Option<usize> {
        self.position(id).map(|i| self.labels[i])
    }

    pub fn id_set(&self) -> HashSet<ItemId> {
        self.ids.iter().copied().collect()
    }

    /// Same images and labels under new ids and class count.
    pub fn relabeled(self, ids: Vec<ItemId>, num_classes: usize) -> Result<Self> {
        Self::new(self.shape, num_classes, self.pixels, self.labels, ids)
    }

    /// Items at the given positions, in that order.
    pub fn subset(&self, positions: &[usize]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(positions.len() * self.shape.pixels());
        for &i in positions {
            pixels.extend_from_slice(self.image(i));
        }
        Self::new(
            self.shape,
            self.num_classes,
            pixels,
            positions.iter().map(|&i| self.labels[i]).collect(),
            positions.iter().map(|&i| self.ids[i]).collect(),
        )
    }

    /// Stacks the images of `ids` into a `[ids.len(), pixels]` tensor.
    pub fn batch_tensor<T: Scalar>(&self, ids: &[ItemId]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(ids.len() * self.shape.pixels());
        for &id in ids {
            let img = self
                .image_by_id(id)
                .ok_or_else(|| Error::Data(format!("unknown item id {id}")))?;
            data.extend(img.iter().map(|&v| T::of(v)));
        }
        Ok(Tensor::new(&[ids.len(), self.shape.pixels()], data)?)
    }

    /// Positions grouped by class label.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            groups[l].push(i);
        }
        groups
    }
}

/// `(x, y)` is compatible iff `class(y) = (class(x) + s) mod C` for some
/// shift `s` in the set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSpec {
    pub num_classes: usize,
    pub shifts: Vec<usize>,
}

impl RelationSpec {
    pub fn new(num_classes: usize, shifts: Vec<usize>) -> Result<Self> {
        if num_classes < 2 {
            return Err(invalid("relation needs at least two classes"));
        }
        if shifts.is_empty() {
            return Err(invalid("shift set must be non-empty"));
        }
        if let Some(&s) = shifts.iter().find(|&&s| s == 0 || s >= num_classes) {
            return Err(invalid(format!("shift {s} outside 1..{}", num_classes - 1)));
        }
        let mut shifts = shifts;
        shifts.sort_unstable();
        shifts.dedup();
        Ok(Self { num_classes, shifts })
    }

    /// The asymmetric relation with shifts `{1, 2}` over ten classes.
    pub fn plus_one_two() -> Self {
        Self::new(10, vec![1, 2]).expect("valid relation")
    }

    pub fn is_compatible(&self, query_class: usize, candidate_class: usize) -> bool {
        let c = self.num_classes;
        let delta = (candidate_class % c + c - query_class % c) % c;
        self.shifts.contains(&delta)
    }

    pub fn label(&self, query_class: usize, candidate_class: usize) -> i8 {
        if self.is_compatible(query_class, candidate_class) {
            1
        } else {
            -1
        }
    }

    pub fn positive_classes(&self, query_class: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .shifts
            .iter()
            .map(|s| (query_class + s) % self.num_classes)
            .collect();
        out.sort_unstable();
        out
    }

    /// True when no shift is the mirror (`C - s`) of another, so reversing a
    /// positive pair always yields a negative one.
    pub fn is_mirror_free(&self) -> bool {
        let c = self.num_classes;
        self.shifts.iter().all(|&s| !self.shifts.contains(&(c - s)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub query: ItemId,
    pub candidate: ItemId,
    /// `+1` compatible, `-1` incompatible.
    pub label: i8,
}

impl Pair {
    pub fn is_positive(&self) -> bool {
        self.label > 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    pub split: Split,
    pub pairs: Vec<Pair>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn positive_fraction(&self) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        self.pairs.iter().filter(|p| p.is_positive()).count() as f64 / self.pairs.len() as f64
    }

    pub fn labels(&self) -> Vec<i8> {
        self.pairs.iter().map(|p| p.label).collect()
    }

    /// Checks that every id resolves in `items`.
    pub fn validate_against(&self, items: &ItemSet) -> Result<()> {
        for p in &self.pairs {
            for id in [p.query, p.candidate] {
                if items.position(id).is_none() {
                    return Err(Error::Data(format!(
                        "{} pair references item {id} outside its split",
                        self.split
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn negatives(&self) -> Vec<Pair> {
        self.pairs.iter().copied().filter(|p| !p.is_positive()).collect()
    }
}

/// Errors when any two item sets share an id.
pub fn check_disjoint(sets: &[&ItemSet]) -> Result<()> {
    let mut seen: HashMap<ItemId, usize> = HashMap::new();
    for (s, set) in sets.iter().enumerate() {
        for &id in set.ids() {
            if let Some(prev) = seen.insert(id, s) {
                if prev != s {
                    return Err(Error::Data(format!("item {id} appears in two splits")));
                }
            }
        }
    }
    Ok(())
}

/// Item splits plus the pairs drawn inside each of them.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub relation: RelationSpec,
    pub items: [ItemSet; 3],
    pub pairs: [PairSet; 3],
}

impl Dataset {
    /// Splits `items` (stratified by class) and samples pairs inside each split.
    pub fn from_items(
        items: &ItemSet,
        relation: &RelationSpec,
        ratios: (f64, f64, f64),
        pairs_per_item: usize,
        seed: u64,
    ) -> Result<Self> {
        let (train, val, test) = split_items(items, ratios, crate::derive_seed(seed, 1))?;
        let item_sets = [train, val, test];
        let mut pair_sets = Vec::with_capacity(3);
        for (i, split) in Split::ALL.into_iter().enumerate() {
            pair_sets.push(build_pairs(
                &item_sets[i],
                relation,
                pairs_per_item,
                split,
                crate::derive_seed(seed, 10 + i as u64),
            )?);
        }
        let pairs: [PairSet; 3] = pair_sets.try_into().expect("three splits");
        Ok(Self {
            relation: relation.clone(),
            items: item_sets,
            pairs,
        })
    }

    pub fn split(&self, split: Split) -> (&ItemSet, &PairSet) {
        let i = Split::ALL.iter().position(|&s| s == split).expect("known split");
        (&self.items[i], &self.pairs[i])
    }

    pub fn validate(&self) -> Result<()> {
        check_disjoint(&[&self.items[0], &self.items[1], &self.items[2]])?;
        for (items, pairs) in self.items.iter().zip(&self.pairs) {
            pairs.validate_against(items)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modular_truth_table() {
        let r = RelationSpec::plus_one_two();
        let mut positives = 0;
        for a in 0..10 {
            for b in 0..10 {
                let expected = b == (a + 1) % 10 || b == (a + 2) % 10;
                assert_eq!(r.is_compatible(a, b), expected, "({a}, {b})");
                positives += usize::from(expected);
            }
        }
        assert_eq!(positives, 20);
        assert_eq!(r.positive_classes(0), vec![1, 2]);
        assert_eq!(r.positive_classes(9), vec![0, 1]);
    }

    #[test]
    fn asymmetry_witness() {
        let r = RelationSpec::plus_one_two();
        assert_eq!(r.label(0, 1), 1);
        assert_eq!(r.label(1, 0), -1);
        assert!(r.is_mirror_free());
        for a in 0..10 {
            for b in 0..10 {
                if r.is_compatible(a, b) {
                    assert!(!r.is_compatible(b, a));
                }
            }
        }
        assert!(!RelationSpec::new(10, vec![5]).unwrap().is_mirror_free());
    }

    #[test]
    fn relation_validation() {
        assert!(RelationSpec::new(10, vec![]).is_err());
        assert!(RelationSpec::new(10, vec![0]).is_err());
        assert!(RelationSpec::new(10, vec![10]).is_err());
        assert_eq!(RelationSpec::new(10, vec![2, 1, 2]).unwrap().shifts, vec![1, 2]);
    }

    #[test]
    fn item_set_rejects_duplicates_and_bad_labels() {
        let shape = ItemShape::new(1, 2);
        assert!(ItemSet::new(shape, 2, vec![0.0; 4], vec![0, 1], vec![3, 3]).is_err());
        assert!(ItemSet::new(shape, 2, vec![0.0; 4], vec![0, 2], vec![1, 2]).is_err());
        assert!(ItemSet::new(shape, 2, vec![0.0; 3], vec![0, 1], vec![1, 2]).is_err());
        let ok = ItemSet::new(shape, 2, vec![0.1, 0.2, 0.3, 0.4], vec![0, 1], vec![7, 9]).unwrap();
        assert_eq!(ok.image_by_id(9), Some(&[0.3, 0.4][..]));
        let t = ok.batch_tensor::<f64>(&[9, 7]).unwrap();
        assert_eq!(t.data(), &[0.3, 0.4, 0.1, 0.2]);
    }
}
