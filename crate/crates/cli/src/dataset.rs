//! A generated dataset on disk: per split `{split}-images.idx`,
//! `{split}-labels.idx`, `{split}-ids.csv` and `{split}-pairs.csv`, plus
//! `dataset.toml` describing the relation and item shape.

use std::path::{Path, PathBuf};

use cfam_core::data::{
    gen_gaussian_mixture, gen_procedural_items, load_idx, write_idx, Dataset, ItemSet, ItemShape, RelationSpec, Split,
};
use cfam_core::io::{read_ids, read_pairs, write_ids, write_pairs};
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, Source};
use crate::error::CliError;

pub const META_FILE: &str = "dataset.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    num_classes: usize,
    shifts: Vec<usize>,
    height: usize,
    width: usize,
}

fn file(dir: &Path, split: Split, suffix: &str) -> PathBuf {
    dir.join(format!("{split}-{suffix}"))
}

/// Items for `config`, before splitting.
pub fn make_items(config: &DataConfig, seed: u64) -> Result<(ItemSet, RelationSpec), CliError> {
    match config.source {
        Source::Procedural => {
            let relation = RelationSpec::new(config.num_classes, config.shifts.clone())?;
            let items = gen_procedural_items(config.per_class, &relation, config.image_size, seed)?;
            Ok((items, relation))
        }
        Source::Gaussian => {
            let relation = RelationSpec::new(config.num_classes, config.shifts.clone())?;
            let items = gen_gaussian_mixture(config.per_class, &relation, config.mixture_std, seed)?;
            Ok((items, relation))
        }
        Source::Idx => {
            let (Some(images), Some(labels)) = (&config.idx_images, &config.idx_labels) else {
                return Err(CliError::Usage(
                    "idx source needs data.idx_images and data.idx_labels".into(),
                ));
            };
            let items = load_idx(images, labels)?;
            let relation = RelationSpec::new(config.num_classes.max(items.num_classes()), config.shifts.clone())?;
            let ids = items.ids().to_vec();
            let items = items.relabeled(ids, relation.num_classes)?;
            Ok((items, relation))
        }
    }
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let shape = ds.items[0].shape();
    let meta = Meta {
        num_classes: ds.relation.num_classes,
        shifts: ds.relation.shifts.clone(),
        height: shape.height,
        width: shape.width,
    };
    let text = toml::to_string(&meta).expect("plain table");
    let path = dir.join(META_FILE);
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    for (i, split) in Split::ALL.into_iter().enumerate() {
        let items = &ds.items[i];
        write_idx(items, &file(dir, split, "images.idx"), &file(dir, split, "labels.idx"))?;
        write_ids(&file(dir, split, "ids.csv"), items.ids())?;
        write_pairs(&file(dir, split, "pairs.csv"), &ds.pairs[i])?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    let path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let meta: Meta = toml::from_str(&text)
        .map_err(|e| CliError::Core(cfam_core::Error::Data(format!("{}: {e}", path.display()))))?;
    let relation = RelationSpec::new(meta.num_classes, meta.shifts)?;
    let mut items = Vec::with_capacity(3);
    let mut pairs = Vec::with_capacity(3);
    for split in Split::ALL {
        let raw = load_idx(&file(dir, split, "images.idx"), &file(dir, split, "labels.idx"))?;
        if raw.shape() != ItemShape::new(meta.height, meta.width) {
            return Err(cfam_core::Error::Data(format!("{split} items have shape {:?}", raw.shape())).into());
        }
        let set = raw.relabeled(read_ids(&file(dir, split, "ids.csv"))?, relation.num_classes)?;
        let p = read_pairs(&file(dir, split, "pairs.csv"), split)?;
        for pair in &p.pairs {
            let (q, c) = (set.label_by_id(pair.query), set.label_by_id(pair.candidate));
            if let (Some(q), Some(c)) = (q, c) {
                if relation.label(q, c) != pair.label {
                    return Err(cfam_core::Error::Data(format!(
                        "{split} pair ({}, {}) has label {} against the relation",
                        pair.query, pair.candidate, pair.label
                    ))
                    .into());
                }
            }
        }
        items.push(set);
        pairs.push(p);
    }
    let ds = Dataset {
        relation,
        items: items.try_into().expect("three splits"),
        pairs: pairs.try_into().expect("three splits"),
    };
    ds.validate()?;
    Ok(ds)
}
