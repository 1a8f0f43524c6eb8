use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ItemSet, ItemShape, RelationSpec};
use crate::error::{invalid, Result};

pub const GLYPH_NOISE_STD: f64 = 0.05;

const MIXTURE_RADIUS: f64 = 0.3;

/// Renders `per_class` noisy copies of one glyph per class.
///
/// Glyphs: horizontal bars (0-2), vertical bars (3-5), the two diagonals
/// (6, 7), a box outline (8) and a filled centre block (9). Item ids run
/// from 0 in class-major order.
pub fn gen_procedural_items(
    per_class: usize,
    relation: &RelationSpec,
    image_size: usize,
    seed: u64,
) -> Result<ItemSet> {
    if image_size < 8 {
        return Err(invalid(format!("image size {image_size} < 8")));
    }
    if per_class == 0 {
        return Err(invalid("per_class must be at least 1"));
    }
    let classes = relation.num_classes;
    if classes > 10 {
        return Err(invalid(format!(
            "{classes} classes; procedural glyphs exist for at most 10"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, GLYPH_NOISE_STD).expect("positive std");
    let p = image_size * image_size;
    let n = per_class * classes;
    let mut pixels = Vec::with_capacity(n * p);
    let mut labels = Vec::with_capacity(n);
    for class in 0..classes {
        let glyph = glyph(class, image_size);
        for _ in 0..per_class {
            pixels.extend(glyph.iter().map(|&v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0)));
            labels.push(class);
        }
    }
    ItemSet::new(
        ItemShape::new(image_size, image_size),
        classes,
        pixels,
        labels,
        (0..n as u32).collect(),
    )
}

fn glyph(class: usize, s: usize) -> Vec<f64> {
    let t = (s / 8).max(1);
    let lo = s / 4;
    let hi = s - s / 4;
    let band = |centre: usize, v: usize| v + t / 2 >= centre && v < centre + t - t / 2;
    let on = |r: usize, c: usize| -> bool {
        match class {
            0 => band(s / 6, r),
            1 => band(s / 2, r),
            2 => band(s - 1 - s / 6, r),
            3 => band(s / 6, c),
            4 => band(s / 2, c),
            5 => band(s - 1 - s / 6, c),
            6 => r.abs_diff(c) < t,
            7 => (r + c).abs_diff(s - 1) < t,
            8 => {
                let inside = |v: usize| v >= lo && v < hi;
                let edge = |v: usize| v.abs_diff(lo) < t || v.abs_diff(hi - 1) < t;
                inside(r) && inside(c) && (edge(r) || edge(c))
            }
            _ => {
                let q = s / 3;
                r >= q && r < s - q && c >= q && c < s - q
            }
        }
    };
    let mut out = vec![0.0; s * s];
    for r in 0..s {
        for c in 0..s {
            if on(r, c) {
                out[r * s + c] = 1.0;
            }
        }
    }
    out
}

/// Cluster centre of `class` for the two-dimensional mixture: evenly spaced
/// on a circle around `(0.5, 0.5)`.
pub fn mixture_center(class: usize, num_classes: usize) -> [f64; 2] {
    let angle = std::f64::consts::TAU * class as f64 / num_classes as f64;
    [0.5 + MIXTURE_RADIUS * angle.cos(), 0.5 + MIXTURE_RADIUS * angle.sin()]
}

/// Two-dimensional Gaussian-mixture "images" of shape `1 x 2`, one cluster
/// per class, clipped to `[0, 1]`.
pub fn gen_gaussian_mixture(per_class: usize, relation: &RelationSpec, std: f64, seed: u64) -> Result<ItemSet> {
    if per_class == 0 {
        return Err(invalid("per_class must be at least 1"));
    }
    if !(std >= 0.0 && std.is_finite()) {
        return Err(invalid(format!("mixture std {std} must be finite and non-negative")));
    }
    let classes = relation.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, std).expect("valid std");
    let n = per_class * classes;
    let mut pixels = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for class in 0..classes {
        let centre = mixture_center(class, classes);
        for _ in 0..per_class {
            for c in centre {
                pixels.push((c + noise.sample(&mut rng)).clamp(0.0, 1.0));
            }
            labels.push(class);
        }
    }
    ItemSet::new(ItemShape::new(1, 2), classes, pixels, labels, (0..n as u32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hundred_items_ten_per_class() {
        let items = gen_procedural_items(10, &RelationSpec::plus_one_two(), 16, 7).unwrap();
        assert_eq!(items.len(), 100);
        for group in items.by_class() {
            assert_eq!(group.len(), 10);
        }
        assert!(items.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let r = RelationSpec::plus_one_two();
        let a = gen_procedural_items(5, &r, 12, 99).unwrap();
        let b = gen_procedural_items(5, &r, 12, 99).unwrap();
        let bits = |s: &ItemSet| s.pixels().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a, b);
        let c = gen_procedural_items(5, &r, 12, 100).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn rejects_small_images_and_too_many_classes() {
        let r = RelationSpec::plus_one_two();
        assert!(gen_procedural_items(1, &r, 7, 0).is_err());
        assert!(gen_procedural_items(0, &r, 8, 0).is_err());
        let wide = RelationSpec::new(11, vec![1]).unwrap();
        assert!(gen_procedural_items(1, &wide, 8, 0).is_err());
    }

    #[test]
    fn glyphs_are_pairwise_distinct() {
        for s in [8, 16, 28] {
            let glyphs: Vec<Vec<f64>> = (0..10).map(|c| glyph(c, s)).collect();
            for a in 0..10 {
                assert!(glyphs[a].iter().any(|&v| v > 0.0), "class {a} blank at {s}");
                for b in a + 1..10 {
                    assert_ne!(glyphs[a], glyphs[b], "classes {a} and {b} at size {s}");
                }
            }
        }
    }

    /// One-vs-rest perceptrons on raw pixels as a separability oracle.
    #[test]
    fn classes_are_linearly_separable() {
        let items = gen_procedural_items(50, &RelationSpec::plus_one_two(), 16, 3).unwrap();
        let p = items.shape().pixels();
        for class in 0..10 {
            let mut w = vec![0.0; p + 1];
            let mut converged = false;
            for _ in 0..200 {
                let mut mistakes = 0;
                for i in 0..items.len() {
                    let x = items.image(i);
                    let y = if items.labels()[i] == class { 1.0 } else { -1.0 };
                    let s: f64 = w[p] + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
                    if y * s <= 0.0 {
                        mistakes += 1;
                        for (wj, xj) in w.iter_mut().zip(x) {
                            *wj += y * xj;
                        }
                        w[p] += y;
                    }
                }
                if mistakes == 0 {
                    converged = true;
                    break;
                }
            }
            assert!(converged, "class {class} not separated");
        }
    }

    #[test]
    fn mixture_clusters_sit_on_their_centres() {
        let r = RelationSpec::new(4, vec![1, 2]).unwrap();
        let items = gen_gaussian_mixture(200, &r, 0.03, 5).unwrap();
        assert_eq!(items.shape(), ItemShape::new(1, 2));
        for (class, group) in items.by_class().iter().enumerate() {
            let centre = mixture_center(class, 4);
            let mean = |d: usize| group.iter().map(|&i| items.image(i)[d]).sum::<f64>() / group.len() as f64;
            assert!((mean(0) - centre[0]).abs() < 0.01);
            assert!((mean(1) - centre[1]).abs() < 0.01);
        }
    }
}
