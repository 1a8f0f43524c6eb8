//! Dense layers on top of the autodiff graph.

use cfam_autodiff::{Graph, NodeId, ParamSet, Scalar, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::Result;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    LeakyRelu,
    Sigmoid,
}

/// Glorot-uniform weights `[fan_in, fan_out]` and zero biases, stored as
/// `{name}.w` and `{name}.b`.
pub fn init_dense<T: Scalar, R: Rng>(params: &mut ParamSet<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    let w: Vec<T> = (0..fan_in * fan_out).map(|_| T::of(dist.sample(rng))).collect();
    params.insert(
        format!("{name}.w"),
        Tensor::new(&[fan_in, fan_out], w).expect("consistent shape"),
    );
    params.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

/// Initializes `{prefix}.{i}` for each consecutive pair in `widths`.
pub fn init_mlp<T: Scalar, R: Rng>(params: &mut ParamSet<T>, prefix: &str, widths: &[usize], rng: &mut R) {
    for (i, w) in widths.windows(2).enumerate() {
        init_dense(params, &format!("{prefix}.{i}"), w[0], w[1], rng);
    }
}

pub fn dense<T: Scalar>(g: &mut Graph<T>, x: NodeId, name: &str, fan_out: usize, act: Activation) -> Result<NodeId> {
    let fan_in = g.shape(x)[1];
    let w = g.param(&format!("{name}.w"), &[fan_in, fan_out])?;
    let b = g.param(&format!("{name}.b"), &[fan_out])?;
    let z = g.affine(x, w, b)?;
    Ok(match act {
        Activation::Linear => z,
        Activation::LeakyRelu => g.leaky_relu(z, T::of(LEAKY_SLOPE))?,
        Activation::Sigmoid => g.sigmoid(z)?,
    })
}

/// Leaky-ReLU hidden layers followed by an output layer with `last`.
pub fn mlp<T: Scalar>(g: &mut Graph<T>, x: NodeId, prefix: &str, widths: &[usize], last: Activation) -> Result<NodeId> {
    let mut h = x;
    let layers = widths.len().saturating_sub(1);
    for (i, &out) in widths.iter().skip(1).enumerate() {
        let act = if i + 1 == layers { last } else { Activation::LeakyRelu };
        h = dense(g, h, &format!("{prefix}.{i}"), out, act)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cfam_autodiff::Bindings;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_shapes_and_param_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::<f64>::new();
        init_mlp(&mut params, "net", &[4, 8, 3], &mut rng);
        assert_eq!(
            params.names().cloned().collect::<Vec<_>>(),
            ["net.0.b", "net.0.w", "net.1.b", "net.1.w"]
        );
        let mut g = Graph::new();
        let x = g.input("x", &[5, 4]).unwrap();
        let y = mlp(&mut g, x, "net", &[4, 8, 3], Activation::Sigmoid).unwrap();
        assert_eq!(g.shape(y), &[5, 3]);
        let xv = Tensor::full(&[5, 4], 0.3);
        let out = g
            .eval_one(&Bindings::new().with("x", &xv).with_params(&params), y)
            .unwrap();
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamSet::<f64>::new();
        init_dense(&mut params, "d", 10, 14, &mut rng);
        let limit = 0.5;
        assert!(params.get("d.w").unwrap().data().iter().all(|v| v.abs() <= limit));
        assert!(params.get("d.b").unwrap().data().iter().all(|&v| v == 0.0));
    }
}
