use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};

use super::{ItemSet, ItemShape};
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Parsed image file: `(count, height, width, raw bytes)`.
pub type IdxImages = (usize, usize, usize, Vec<u8>);

fn header(cur: &mut Cursor<&[u8]>, expected: u32, what: &str) -> Result<u32> {
    let magic = cur
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Truncated(format!("{what} header")))?;
    if magic != expected {
        return Err(Error::BadMagic { found: magic, expected });
    }
    Ok(magic)
}

fn dim(cur: &mut Cursor<&[u8]>, what: &str) -> Result<usize> {
    cur.read_u32::<BigEndian>()
        .map(|v| v as usize)
        .map_err(|_| Error::Truncated(format!("{what} dimensions")))
}

fn payload(cur: &mut Cursor<&[u8]>, len: usize, what: &str) -> Result<Vec<u8>> {
    let mut out = vec![0u8; len];
    cur.read_exact(&mut out)
        .map_err(|_| Error::Truncated(format!("{what}: expected {len} data bytes")))?;
    Ok(out)
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let mut cur = Cursor::new(bytes);
    header(&mut cur, IMAGE_MAGIC, "image file")?;
    let n = dim(&mut cur, "image file")?;
    let h = dim(&mut cur, "image file")?;
    let w = dim(&mut cur, "image file")?;
    let data = payload(&mut cur, n * h * w, "image file")?;
    Ok((n, h, w, data))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut cur = Cursor::new(bytes);
    header(&mut cur, LABEL_MAGIC, "label file")?;
    let n = dim(&mut cur, "label file")?;
    payload(&mut cur, n, "label file")
}

/// Reads an MNIST-format image/label pair. Pixels are scaled to `[0, 1]`,
/// ids are positions and the class count is `max label + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<ItemSet> {
    let (n, h, w, raw) = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if labels.len() != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    ItemSet::new(
        ItemShape::new(h, w),
        classes,
        raw.into_iter().map(|b| f64::from(b) / 255.0).collect(),
        labels,
        (0..n as u32).collect(),
    )
}

/// Writes `items` as IDX, quantizing pixels to `round(255 v)`.
pub fn write_idx(items: &ItemSet, images_path: &Path, labels_path: &Path) -> Result<()> {
    let shape = items.shape();
    let mut img = Vec::with_capacity(16 + items.pixels().len());
    img.write_u32::<BigEndian>(IMAGE_MAGIC)?;
    for d in [items.len(), shape.height, shape.width] {
        img.write_u32::<BigEndian>(d as u32)?;
    }
    img.extend(
        items
            .pixels()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut lab = Vec::with_capacity(8 + items.len());
    lab.write_u32::<BigEndian>(LABEL_MAGIC)?;
    lab.write_u32::<BigEndian>(items.len() as u32)?;
    for &l in items.labels() {
        let byte = u8::try_from(l).map_err(|_| Error::Data(format!("label {l} does not fit a byte")))?;
        lab.push(byte);
    }
    fs::File::create(images_path)?.write_all(&img)?;
    fs::File::create(labels_path)?.write_all(&lab)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_images(n: u32, h: u32, w: u32) -> Vec<u8> {
        let mut b = vec![0x00, 0x00, 0x08, 0x03];
        for d in [n, h, w] {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend((0..n * h * w).map(|i| (i % 256) as u8));
        b
    }

    fn fixture_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = vec![0x00, 0x00, 0x08, 0x01];
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    fn write_pair(dir: &Path, images: &[u8], labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("images");
        let lp = dir.join("labels");
        fs::write(&ip, images).unwrap();
        fs::write(&lp, labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn four_image_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_pair(dir.path(), &fixture_images(4, 28, 28), &fixture_labels(&[3, 1, 4, 1]));
        let items = load_idx(&ip, &lp).unwrap();
        assert_eq!(items.len(), 4);
        assert_eq!(items.shape(), ItemShape::new(28, 28));
        assert_eq!(items.labels(), &[3, 1, 4, 1]);
        assert_eq!(items.num_classes(), 5);
        assert_eq!(items.image(0)[0], 0.0);
        assert_eq!(items.image(0)[255], 1.0);
        assert_eq!(items.image(0)[51], 51.0 / 255.0);
    }

    #[test]
    fn count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_pair(dir.path(), &fixture_images(4, 8, 8), &fixture_labels(&[0, 1, 2]));
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(matches!(err, Error::CountMismatch { images: 4, labels: 3 }));
        assert!(err.to_string().contains("count mismatch"));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = fixture_images(1, 8, 8);
        bytes[3] = 0x02;
        let err = parse_idx_images(&bytes).unwrap_err();
        assert!(matches!(err, Error::BadMagic { found: 0x802, .. }));
        assert!(err.to_string().contains("bad magic"));
        assert!(matches!(
            parse_idx_labels(&fixture_images(1, 8, 8)).unwrap_err(),
            Error::BadMagic {
                found: 0x803,
                expected: 0x801
            }
        ));
    }

    #[test]
    fn truncated() {
        let bytes = fixture_images(2, 8, 8);
        assert!(matches!(
            parse_idx_images(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(parse_idx_images(&bytes[..6]), Err(Error::Truncated(_))));
        assert!(matches!(
            parse_idx_labels(&[0, 0, 8, 1, 0, 0, 0, 5, 1]),
            Err(Error::Truncated(_))
        ));
    }

    #[test]
    fn round_trip_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let items = super::super::gen_procedural_items(3, &super::super::RelationSpec::plus_one_two(), 10, 1).unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&items, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.labels(), items.labels());
        assert_eq!(back.shape(), items.shape());
        for (a, b) in back.pixels().iter().zip(items.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        write_idx(&back, &ip, &lp).unwrap();
        assert_eq!(load_idx(&ip, &lp).unwrap(), back);
    }
}
