//! Symbolic reverse mode.
//!
//! [`Graph::gradients`] appends the adjoint computation to the same graph
//! as ordinary primitive nodes. The resulting gradient nodes can be
//! evaluated, combined into new losses, and differentiated again, which is
//! what a gradient-norm penalty needs.

use crate::error::{GraphError, Result};
use crate::eval::Bindings;
use crate::graph::{Graph, NodeId, Op};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

impl<T: Scalar> Graph<T> {
    /// Appends nodes computing `d output / d w` for every `w` in `wrt` and
    /// returns their ids. `output` must hold a single value. Nodes without a
    /// path to `output` get an all-zero constant.
    pub fn gradients(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        let out_node = self.nodes.get(output.0).ok_or(GraphError::UnknownNode(output.0))?;
        if numel(&out_node.shape) != 1 {
            return Err(GraphError::NonScalarOutput {
                node: output.0,
                shape: out_node.shape.clone(),
            });
        }
        for w in wrt {
            if w.0 >= self.nodes.len() {
                return Err(GraphError::UnknownNode(w.0));
            }
        }

        let n = output.0 + 1;
        let mut depends = vec![false; n];
        for w in wrt {
            if w.0 < n {
                depends[w.0] = true;
            }
        }
        for i in 0..n {
            let node = &self.nodes[i];
            if depends[i] || node.op.is_leaf() {
                continue;
            }
            if matches!(node.op, Op::StopGradient | Op::Step { .. }) {
                continue;
            }
            depends[i] = node.inputs.iter().any(|j| depends[j.0]);
        }

        let mut adjoint: Vec<Option<NodeId>> = vec![None; n];
        if depends[output.0] {
            let seed = Tensor::ones(&self.nodes[output.0].shape.clone());
            adjoint[output.0] = Some(self.constant(seed));
        }
        for i in (0..n).rev() {
            let Some(g) = adjoint[i] else { continue };
            if !depends[i] || self.nodes[i].op.is_leaf() {
                continue;
            }
            let inputs = self.nodes[i].inputs.clone();
            for (slot, j) in inputs.iter().enumerate() {
                if !depends[j.0] {
                    continue;
                }
                if let Some(contrib) = self.vjp(i, slot, g)? {
                    adjoint[j.0] = Some(match adjoint[j.0] {
                        Some(prev) => self.add(prev, contrib)?,
                        None => contrib,
                    });
                }
            }
        }

        wrt.iter()
            .map(|w| match adjoint.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let shape = self.nodes[w.0].shape.clone();
                    Ok(self.constant(Tensor::zeros(&shape)))
                }
            })
            .collect()
    }

    /// Vector-Jacobian product of node `i` with respect to its input `slot`.
    fn vjp(&mut self, i: usize, slot: usize, g: NodeId) -> Result<Option<NodeId>> {
        let node = &self.nodes[i];
        let op = node.op.clone();
        let inputs = node.inputs.clone();
        let this = NodeId(i);
        let a = inputs[0];
        let shape_a = self.nodes[a.0].shape.clone();
        let contrib = match op {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => return Ok(None),
            Op::Step { .. } | Op::StopGradient => return Ok(None),
            Op::Add | Op::AddConst(_) => g,
            Op::Sub => {
                if slot == 0 {
                    g
                } else {
                    self.neg(g)?
                }
            }
            Op::Mul => {
                let other = inputs[1 - slot];
                self.mul(g, other)?
            }
            Op::Neg => self.neg(g)?,
            Op::Scale(c) => self.scale(g, c)?,
            Op::Square => {
                let two_a = self.scale(a, T::of(2.0))?;
                self.mul(g, two_a)?
            }
            Op::Sqrt => {
                let d = self.half_recip_sqrt(a)?;
                self.mul(g, d)?
            }
            Op::HalfRecipSqrt => {
                let r = self.recip(a)?;
                let hr = self.mul(this, r)?;
                let d = self.scale(hr, T::of(-0.5))?;
                self.mul(g, d)?
            }
            Op::Recip => {
                let sq = self.square(this)?;
                let d = self.neg(sq)?;
                self.mul(g, d)?
            }
            Op::Exp => self.mul(g, this)?,
            Op::Log => {
                let r = self.recip(a)?;
                self.mul(g, r)?
            }
            Op::Sigmoid => {
                let ns = self.neg(this)?;
                let one_minus = self.add_const(ns, T::one())?;
                let d = self.mul(this, one_minus)?;
                self.mul(g, d)?
            }
            Op::LeakyRelu(alpha) => {
                let d = self.step(a, T::zero(), alpha, alpha, T::one())?;
                self.mul(g, d)?
            }
            Op::MaxConst(c) => {
                let d = self.step(a, c, T::zero(), T::zero(), T::one())?;
                self.mul(g, d)?
            }
            Op::MinConst(c) => {
                let d = self.step(a, c, T::one(), T::zero(), T::zero())?;
                self.mul(g, d)?
            }
            Op::MatMul => {
                if slot == 0 {
                    let bt = self.transpose(inputs[1])?;
                    self.matmul(g, bt)?
                } else {
                    let at = self.transpose(a)?;
                    self.matmul(at, g)?
                }
            }
            Op::Transpose => self.transpose(g)?,
            Op::SumAll => self.broadcast_scalar(g, &shape_a)?,
            Op::SumRows => self.broadcast_rows(g, shape_a[0])?,
            Op::SumCols => self.broadcast_cols(g, shape_a[1])?,
            Op::BroadcastScalar => self.sum_all(g)?,
            Op::BroadcastRows(_) => self.sum_rows(g)?,
            Op::BroadcastCols(_) => self.sum_cols(g)?,
            Op::Reshape => self.reshape(g, &shape_a)?,
            Op::ConcatCols => {
                let ca = shape_a[1];
                if slot == 0 {
                    self.slice_cols(g, 0, ca)?
                } else {
                    let cb = self.nodes[inputs[1].0].shape[1];
                    self.slice_cols(g, ca, cb)?
                }
            }
            Op::SliceCols { start, len } => self.pad_cols(g, start, shape_a[1] - start - len)?,
            Op::PadCols { left, .. } => self.slice_cols(g, left, shape_a[1])?,
            Op::Softmin => {
                // d w / d d = -(diag(w) - w w^T), applied row-wise.
                let k = shape_a[1];
                let gw = self.mul(g, this)?;
                let s = self.sum_cols(gw)?;
                let sb = self.broadcast_cols(s, k)?;
                let centered = self.sub(g, sb)?;
                let m = self.mul(this, centered)?;
                self.neg(m)?
            }
        };
        Ok(Some(contrib))
    }

    /// Gradient nodes of `output` with respect to every parameter leaf,
    /// cached per output.
    pub fn param_gradients(&mut self, output: NodeId) -> Result<Vec<(String, NodeId)>> {
        if let Some(cached) = self.grad_cache.get(&output) {
            return Ok(cached.clone());
        }
        let names = self.param_names();
        let ids: Vec<NodeId> = names.iter().map(|n| self.leaves[n]).collect();
        let grads = self.gradients(output, &ids)?;
        let pairs: Vec<(String, NodeId)> = names.into_iter().zip(grads).collect();
        self.grad_cache.insert(output, pairs.clone());
        Ok(pairs)
    }

    /// `d output / d p` for every parameter `p`, evaluated at `bindings`.
    pub fn backward(&mut self, output: NodeId, bindings: &Bindings<'_, T>) -> Result<ParamSet<T>> {
        let pairs = self.param_gradients(output)?;
        let ids: Vec<NodeId> = pairs.iter().map(|(_, id)| *id).collect();
        let values = self.eval(bindings, &ids)?;
        Ok(pairs.into_iter().map(|(n, _)| n).zip(values).collect())
    }

    /// Value of `output` together with its parameter gradients, from a single
    /// evaluation pass.
    pub fn value_and_backward(&mut self, output: NodeId, bindings: &Bindings<'_, T>) -> Result<(T, ParamSet<T>)> {
        let pairs = self.param_gradients(output)?;
        let mut ids: Vec<NodeId> = vec![output];
        ids.extend(pairs.iter().map(|(_, id)| *id));
        let mut values = self.eval(bindings, &ids)?;
        let grads = values.split_off(1);
        let value = values[0].item().expect("scalar output");
        Ok((value, pairs.into_iter().map(|(n, _)| n).zip(grads).collect()))
    }
}
