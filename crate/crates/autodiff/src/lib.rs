//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! Graphs are built once with static shapes and evaluated many times with
//! different leaf bindings. Gradients are appended to the graph as ordinary
//! nodes, so they can themselves be differentiated (double backprop).
//!
//! ```
//! use cfam_autodiff::{Bindings, Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param("x", &[]).unwrap();
//! let y = g.square(x).unwrap();
//! let three = Tensor::scalar(3.0);
//! let b = Bindings::new().with("x", &three);
//! assert_eq!(g.eval_one(&b, y).unwrap().item(), Some(9.0));
//! let grads = g.backward(y, &b).unwrap();
//! assert_eq!(grads.get("x").unwrap().item(), Some(6.0));
//! ```

mod check;
mod error;
mod eval;
mod grad;
mod graph;
mod params;
mod scalar;
mod tensor;

pub use check::{finite_diff_check, finite_diff_check_params};
pub use error::{GraphError, Result};
pub use eval::Bindings;
pub use graph::{Graph, NodeId};
pub use params::ParamSet;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
