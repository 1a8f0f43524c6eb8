//! On-disk formats: binary checkpoints, CSV tables and binary PGM images.
//!
//! Checkpoint layout (all integers little-endian):
//! `b"CFAM"`, `u16` version, `u32` JSON length, JSON metadata, `u32` tensor
//! count, then per tensor `u32` name length, UTF-8 name, `u32` rank, `u32`
//! dims and `f32` values. Tensors are written in name order, so equal inputs
//! give byte-identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use cfam_autodiff::{ParamSet, Scalar, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::compat::{CompatConfig, CompatModel, FamilyEmbedding};
use crate::data::{ItemId, ItemShape, Pair, PairSet, Split};
use crate::error::{invalid, Error, Result};
use crate::gan::{GanConfig, GanModel, GanSpec};
use crate::train::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CFAM";
pub const CHECKPOINT_VERSION: u16 = 1;
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Writes JSON metadata plus named tensors, stored as `f32`.
pub fn write_checkpoint<T: Scalar, M: Serialize>(path: &Path, meta: &M, tensors: &ParamSet<T>) -> Result<()> {
    let json = serde_json::to_vec(meta).map_err(|e| ckpt_err(e.to_string()))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u16::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u32::<LittleEndian>(json.len() as u32)?;
    w.write_all(&json)?;
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for (name, t) in tensors.iter() {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.rank() as u32)?;
        for &d in t.shape() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in t.data() {
            w.write_f32::<LittleEndian>(v.as_f64() as f32)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn eof_as_truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        ckpt_err("file is truncated")
    } else {
        Error::Io(e)
    }
}

/// Reads a checkpoint back; metadata is returned as raw JSON.
pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<(serde_json::Value, ParamSet<T>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof_as_truncated)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ckpt_err(format!("bad magic {magic:?}")));
    }
    let version = r.read_u16::<LittleEndian>().map_err(eof_as_truncated)?;
    if version != CHECKPOINT_VERSION {
        return Err(ckpt_err(format!("unsupported version {version}")));
    }
    let json_len = r.read_u32::<LittleEndian>().map_err(eof_as_truncated)? as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json).map_err(eof_as_truncated)?;
    let meta = serde_json::from_slice(&json).map_err(|e| ckpt_err(format!("metadata: {e}")))?;
    let count = r.read_u32::<LittleEndian>().map_err(eof_as_truncated)?;
    let mut tensors = ParamSet::new();
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>().map_err(eof_as_truncated)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(eof_as_truncated)?;
        let name = String::from_utf8(name).map_err(|_| ckpt_err("tensor name is not UTF-8"))?;
        let rank = r.read_u32::<LittleEndian>().map_err(eof_as_truncated)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32::<LittleEndian>().map_err(eof_as_truncated)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(T::of(r.read_f32::<LittleEndian>().map_err(eof_as_truncated)? as f64));
        }
        if tensors.contains(&name) {
            return Err(ckpt_err(format!("duplicate tensor `{name}`")));
        }
        tensors.insert(name, Tensor::new(&shape, data)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(ckpt_err("trailing bytes after last tensor"));
    }
    Ok((meta, tensors))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CompatMeta {
    kind: String,
    config: CompatConfig,
    epochs_done: usize,
    adam_t: Option<u64>,
    best: Option<(f64, usize)>,
}

/// A compatibility model plus the training state needed to resume.
#[derive(Clone, Debug)]
pub struct CompatCheckpoint<T> {
    pub model: CompatModel<T>,
    pub epochs_done: usize,
    pub best: Option<(f64, usize)>,
    pub adam: Option<AdamState<T>>,
}

pub fn save_compat<T: Scalar>(path: &Path, ckpt: &CompatCheckpoint<T>) -> Result<()> {
    let meta = CompatMeta {
        kind: "compat".into(),
        config: ckpt.model.config().clone(),
        epochs_done: ckpt.epochs_done,
        adam_t: ckpt.adam.as_ref().map(|a| a.t),
        best: ckpt.best,
    };
    let mut tensors = ckpt.model.params().clone();
    if let Some(adam) = &ckpt.adam {
        for (n, t) in adam.m.iter() {
            tensors.insert(format!("{ADAM_M}{n}"), t.clone());
        }
        for (n, t) in adam.v.iter() {
            tensors.insert(format!("{ADAM_V}{n}"), t.clone());
        }
    }
    write_checkpoint(path, &meta, &tensors)
}

fn check_kind(meta: &serde_json::Value, kind: &str) -> Result<()> {
    match meta.get("kind").and_then(|k| k.as_str()) {
        Some(k) if k == kind => Ok(()),
        Some(k) => Err(Error::Mismatch(format!(
            "checkpoint holds a `{k}` model, expected `{kind}`"
        ))),
        None => Err(ckpt_err("metadata has no kind")),
    }
}

pub fn load_compat<T: Scalar>(path: &Path) -> Result<CompatCheckpoint<T>> {
    let (meta, tensors) = read_checkpoint::<T>(path)?;
    check_kind(&meta, "compat")?;
    let meta: CompatMeta = serde_json::from_value(meta).map_err(|e| ckpt_err(format!("metadata: {e}")))?;
    let mut params = ParamSet::new();
    let mut m = ParamSet::new();
    let mut v = ParamSet::new();
    for (name, t) in tensors {
        if let Some(n) = name.strip_prefix(ADAM_M) {
            m.insert(n, t);
        } else if let Some(n) = name.strip_prefix(ADAM_V) {
            v.insert(n, t);
        } else {
            params.insert(name, t);
        }
    }
    let model = CompatModel::from_parts(meta.config, params)?;
    let adam = match meta.adam_t {
        Some(t) => {
            let state = AdamState { t, m, v };
            if !state.matches(model.params()) {
                return Err(Error::Mismatch("optimizer moments do not match the model".into()));
            }
            Some(state)
        }
        None if m.is_empty() && v.is_empty() => None,
        None => return Err(ckpt_err("optimizer moments without a step counter")),
    };
    Ok(CompatCheckpoint {
        model,
        epochs_done: meta.epochs_done,
        best: meta.best,
        adam,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GanMeta {
    kind: String,
    config: GanConfig,
    spec: GanSpec,
    steps_done: usize,
}

pub fn save_gan<T: Scalar>(path: &Path, gan: &GanModel<T>, steps_done: usize) -> Result<()> {
    let meta = GanMeta {
        kind: "gan".into(),
        config: gan.config.clone(),
        spec: gan.spec.clone(),
        steps_done,
    };
    write_checkpoint(path, &meta, &gan.all_params())
}

/// The model and the number of steps it was trained for.
pub fn load_gan<T: Scalar>(path: &Path) -> Result<(GanModel<T>, usize)> {
    let (meta, tensors) = read_checkpoint::<T>(path)?;
    check_kind(&meta, "gan")?;
    let meta: GanMeta = serde_json::from_value(meta).map_err(|e| ckpt_err(format!("metadata: {e}")))?;
    Ok((GanModel::from_parts(meta.config, meta.spec, tensors)?, meta.steps_done))
}

/// Serializes `rows` with a header taken from the field names. Floats use
/// the shortest representation that parses back to the same value.
pub fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<D: DeserializeOwned>(path: &Path) -> Result<Vec<D>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub split: String,
    pub pairs: usize,
    pub auc: f64,
    pub error_rate: f64,
    pub auc_min_dk: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingRow {
    pub query_id: ItemId,
    pub rank: usize,
    pub candidate_id: ItemId,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRow {
    pub query_id: ItemId,
    pub candidate_id: ItemId,
    pub label: i8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdRow {
    pub id: ItemId,
}

pub fn write_pairs(path: &Path, pairs: &PairSet) -> Result<()> {
    let rows: Vec<PairRow> = pairs
        .pairs
        .iter()
        .map(|p| PairRow {
            query_id: p.query,
            candidate_id: p.candidate,
            label: p.label,
        })
        .collect();
    write_csv(path, &rows)
}

pub fn read_pairs(path: &Path, split: Split) -> Result<PairSet> {
    let rows: Vec<PairRow> = read_csv(path)?;
    let pairs = rows
        .into_iter()
        .map(|r| {
            if r.label != 1 && r.label != -1 {
                return Err(Error::Data(format!("pair label {} is not +1 or -1", r.label)));
            }
            Ok(Pair {
                query: r.query_id,
                candidate: r.candidate_id,
                label: r.label,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PairSet { split, pairs })
}

pub fn write_ids(path: &Path, ids: &[ItemId]) -> Result<()> {
    let rows: Vec<IdRow> = ids.iter().map(|&id| IdRow { id }).collect();
    write_csv(path, &rows)
}

pub fn read_ids(path: &Path) -> Result<Vec<ItemId>> {
    Ok(read_csv::<IdRow>(path)?.into_iter().map(|r| r.id).collect())
}

/// Columns `id, e0_0.., p1_0.., p2_0..`, one row per item.
pub fn write_embeddings<T: Scalar>(path: &Path, ids: &[ItemId], families: &[FamilyEmbedding<T>]) -> Result<()> {
    if ids.len() != families.len() {
        return Err(invalid(format!("{} ids for {} embeddings", ids.len(), families.len())));
    }
    let mut w = csv::Writer::from_path(path)?;
    if let Some(f) = families.first() {
        let mut header = vec!["id".to_string()];
        header.extend((0..f.n()).map(|i| format!("e0_{i}")));
        for k in 1..=f.k() {
            header.extend((0..f.n()).map(|i| format!("p{k}_{i}")));
        }
        w.write_record(&header)?;
        for (id, fam) in ids.iter().zip(families) {
            if fam.n() != f.n() || fam.k() != f.k() {
                return Err(Error::Mismatch("embeddings have different sizes".into()));
            }
            let mut rec = vec![id.to_string()];
            rec.extend(fam.e0.iter().chain(&fam.prototypes).map(|v| v.as_f64().to_string()));
            w.write_record(&rec)?;
        }
    } else {
        w.write_record(["id"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<(Vec<ItemId>, Vec<FamilyEmbedding<f64>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let n = header.iter().filter(|h| h.starts_with("e0_")).count();
    let width = header.len().saturating_sub(1);
    if header.get(0) != Some("id") || (n > 0 && width % n != 0) || (n == 0 && width != 0) {
        return Err(Error::Data("malformed embeddings header".into()));
    }
    let mut ids = Vec::new();
    let mut families = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Data(format!("bad value `{s}`: {e}")))
        };
        ids.push(
            rec[0]
                .parse::<ItemId>()
                .map_err(|e| Error::Data(format!("bad id: {e}")))?,
        );
        let vals = rec.iter().skip(1).map(parse).collect::<Result<Vec<_>>>()?;
        let prototypes = vals[n..].to_vec();
        families.push(FamilyEmbedding {
            e0: vals[..n].to_vec(),
            prototypes,
        });
    }
    Ok((ids, families))
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary (`P5`) 8-bit PGM; values are clamped to `[0, 1]` and quantized.
pub fn write_pgm(path: &Path, shape: ItemShape, pixels: &[f64]) -> Result<()> {
    if pixels.len() != shape.pixels() {
        return Err(Error::Mismatch(format!(
            "{} pixels for a {}x{} image",
            pixels.len(),
            shape.height,
            shape.width
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n255\n", shape.width, shape.height)?;
    let bytes: Vec<u8> = pixels.iter().map(|&v| to_byte(v)).collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Reads a `P5` PGM with maxval 255, scaling pixels to `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<(ItemShape, Vec<f64>)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Truncated("PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::Data(format!("PGM magic `{}` is not P5", fields[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Data(format!("bad PGM header field `{s}`")))
    };
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Data(format!("PGM maxval {maxval} unsupported")));
    }
    let n = width * height;
    if bytes.len() < pos + n {
        return Err(Error::Truncated(format!("PGM raster needs {n} bytes")));
    }
    let pixels = bytes[pos..pos + n].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((ItemShape::new(height, width), pixels))
}

/// Tiles images row-major into a grid with `cols` columns and `pad` pixels
/// of black spacing between tiles.
pub fn image_grid(images: &[&[f64]], shape: ItemShape, cols: usize, pad: usize) -> Result<(ItemShape, Vec<f64>)> {
    if images.is_empty() || cols == 0 {
        return Err(invalid("grid needs at least one image and one column"));
    }
    let cols = cols.min(images.len());
    let rows = images.len().div_ceil(cols);
    let gw = cols * shape.width + (cols - 1) * pad;
    let gh = rows * shape.height + (rows - 1) * pad;
    let mut out = vec![0.0; gw * gh];
    for (i, img) in images.iter().enumerate() {
        if img.len() != shape.pixels() {
            return Err(Error::Mismatch(format!("image {i} has {} pixels", img.len())));
        }
        let (r, c) = (i / cols, i % cols);
        let (oy, ox) = (r * (shape.height + pad), c * (shape.width + pad));
        for y in 0..shape.height {
            let dst = (oy + y) * gw + ox;
            out[dst..dst + shape.width].copy_from_slice(&img[y * shape.width..(y + 1) * shape.width]);
        }
    }
    Ok((ItemShape::new(gh, gw), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compat::Mode;
    use crate::train::EpochRecord;

    fn model() -> CompatModel<f64> {
        let mut cfg = CompatConfig::new(Mode::Pcd, 2, 3, ItemShape::new(2, 4));
        cfg.trunk = vec![5];
        CompatModel::new(cfg, 3).unwrap()
    }

    #[test]
    fn compat_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        let mut adam = AdamState::new(m.params());
        adam.t = 7;
        let ckpt = CompatCheckpoint {
            model: m.clone(),
            epochs_done: 4,
            best: Some((0.25, 3)),
            adam: Some(adam.clone()),
        };
        save_compat(&path, &ckpt).unwrap();
        let back = load_compat::<f64>(&path).unwrap();
        assert_eq!(back.epochs_done, 4);
        assert_eq!(back.best, Some((0.25, 3)));
        assert_eq!(back.adam.unwrap(), adam);
        assert_eq!(back.model.config(), m.config());
        for (n, t) in m.params().iter() {
            let b = back.model.params().get(n).unwrap();
            for (x, y) in t.data().iter().zip(b.data()) {
                assert_eq!(*y, *x as f32 as f64);
            }
        }
        // Rewriting the loaded model gives the same bytes.
        let again = dir.path().join("again.ckpt");
        save_compat(&again, &load_compat::<f64>(&path).unwrap()).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_compat(
            &path,
            &CompatCheckpoint {
                model: model(),
                epochs_done: 0,
                best: None,
                adam: None,
            },
        )
        .unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_compat::<f64>(&cut), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&cut, &bad).unwrap();
        assert!(matches!(load_compat::<f64>(&cut), Err(Error::Checkpoint(_))));
        assert!(matches!(load_gan::<f64>(&path), Err(Error::Mismatch(_))));
    }

    #[test]
    fn csv_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        let hist = vec![
            EpochRecord {
                epoch: 1,
                train_loss: 0.1 + 0.2,
                val_loss: 1.0 / 3.0,
                val_auc: f64::NAN,
            },
            EpochRecord {
                epoch: 2,
                train_loss: 1e-300,
                val_loss: 12345.678901234567,
                val_auc: 0.875,
            },
        ];
        write_csv(&path, &hist).unwrap();
        let back: Vec<EpochRecord> = read_csv(&path).unwrap();
        assert_eq!(back[1], hist[1]);
        assert_eq!(back[0].train_loss.to_bits(), hist[0].train_loss.to_bits());
        assert!(back[0].val_auc.is_nan());

        let fams = vec![
            FamilyEmbedding {
                e0: vec![0.1, -2.5],
                prototypes: vec![1.0 / 7.0, 2.0, 3.0, 4.0],
            },
            FamilyEmbedding {
                e0: vec![5.0, 6.0],
                prototypes: vec![7.0, 8.0, 9.0, -0.0],
            },
        ];
        let path = dir.path().join("e.csv");
        write_embeddings(&path, &[4, 9], &fams).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("id,e0_0,e0_1,p1_0,p1_1,p2_0,p2_1\n"));
        assert_eq!(read_embeddings(&path).unwrap(), (vec![4, 9], fams));

        let pairs = PairSet {
            split: Split::Val,
            pairs: vec![
                Pair {
                    query: 1,
                    candidate: 2,
                    label: 1,
                },
                Pair {
                    query: 2,
                    candidate: 1,
                    label: -1,
                },
            ],
        };
        let path = dir.path().join("p.csv");
        write_pairs(&path, &pairs).unwrap();
        assert_eq!(read_pairs(&path, Split::Val).unwrap(), pairs);
        assert_eq!(
            std::fs::read_to_string(&path).unwrap().lines().next(),
            Some("query_id,candidate_id,label")
        );
    }

    #[test]
    fn pgm_round_trip_and_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let shape = ItemShape::new(2, 3);
        let px = [0.0, 1.0, 0.5, 0.25, 2.0, -1.0];
        write_pgm(&path, shape, &px).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        let (s, back) = read_pgm(&path).unwrap();
        assert_eq!(s, shape);
        let expect: Vec<f64> = px.iter().map(|&v| to_byte(v) as f64 / 255.0).collect();
        assert_eq!(back, expect);

        let a = [1.0; 4];
        let b = [0.5; 4];
        let c = [0.25; 4];
        let (gs, grid) = image_grid(&[&a, &b, &c], ItemShape::new(2, 2), 2, 1).unwrap();
        assert_eq!(gs, ItemShape::new(5, 5));
        assert_eq!(&grid[0..5], &[1.0, 1.0, 0.0, 0.5, 0.5]);
        assert_eq!(&grid[10..15], &[0.0; 5]);
        assert_eq!(&grid[15..20], &[0.25, 0.25, 0.0, 0.0, 0.0]);
    }
}
