use std::collections::{BTreeMap, HashMap};

use crate::error::{GraphError, Result};
use crate::graph::{Graph, NodeId, Op};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Borrowed name → tensor map used to bind the leaves of a graph.
#[derive(Clone, Debug, Default)]
pub struct Bindings<'a, T> {
    map: HashMap<&'a str, &'a Tensor<T>>,
}

impl<'a, T: Scalar> Bindings<'a, T> {
    pub fn new() -> Self {
        Self { map: HashMap::new() }
    }

    pub fn bind(&mut self, name: &'a str, value: &'a Tensor<T>) -> &mut Self {
        self.map.insert(name, value);
        self
    }

    pub fn with(mut self, name: &'a str, value: &'a Tensor<T>) -> Self {
        self.map.insert(name, value);
        self
    }

    pub fn with_params(mut self, params: &'a ParamSet<T>) -> Self {
        for (name, value) in params.iter() {
            self.map.insert(name.as_str(), value);
        }
        self
    }

    pub fn with_map(mut self, map: &'a BTreeMap<String, Tensor<T>>) -> Self {
        for (name, value) in map {
            self.map.insert(name.as_str(), value);
        }
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor<T>> {
        self.map.get(name).copied()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    fn needed(&self, outputs: &[NodeId]) -> Result<Vec<bool>> {
        let mut needed = vec![false; self.nodes.len()];
        let mut stack = Vec::with_capacity(outputs.len());
        for &o in outputs {
            if o.0 >= self.nodes.len() {
                return Err(GraphError::UnknownNode(o.0));
            }
            stack.push(o.0);
        }
        while let Some(i) = stack.pop() {
            if needed[i] {
                continue;
            }
            needed[i] = true;
            stack.extend(self.nodes[i].inputs.iter().map(|n| n.0));
        }
        Ok(needed)
    }

    /// Evaluates every node required by `outputs`; entries for nodes that were
    /// not needed are `None`.
    pub(crate) fn evaluate(&self, bindings: &Bindings<'_, T>, outputs: &[NodeId]) -> Result<Vec<Option<Tensor<T>>>> {
        let needed = self.needed(outputs)?;
        let mut values: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if !needed[i] {
                continue;
            }
            let value = match &node.op {
                Op::Input(name) | Op::Param(name) => {
                    let t = bindings.get(name).ok_or_else(|| GraphError::Unbound(name.clone()))?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(GraphError::BindingShape {
                            name: name.clone(),
                            expected: node.shape.clone(),
                            got: t.shape().to_vec(),
                        });
                    }
                    t.clone()
                }
                Op::Const(t) => t.clone(),
                op => {
                    let args: Vec<&Tensor<T>> = node
                        .inputs
                        .iter()
                        .map(|n| values[n.0].as_ref().expect("inputs evaluated first"))
                        .collect();
                    apply(op, &args, &node.shape)
                }
            };
            if !value.is_finite() {
                return Err(GraphError::NonFinite {
                    node: i,
                    op: node.op.name(),
                });
            }
            values[i] = Some(value);
        }
        Ok(values)
    }

    /// Values of `outputs`, in order.
    pub fn eval(&self, bindings: &Bindings<'_, T>, outputs: &[NodeId]) -> Result<Vec<Tensor<T>>> {
        let values = self.evaluate(bindings, outputs)?;
        Ok(outputs
            .iter()
            .map(|o| values[o.0].clone().expect("output evaluated"))
            .collect())
    }

    pub fn eval_one(&self, bindings: &Bindings<'_, T>, output: NodeId) -> Result<Tensor<T>> {
        Ok(self.eval(bindings, &[output])?.remove(0))
    }

    /// Evaluates every output registered with [`Graph::mark_output`].
    pub fn forward(&self, bindings: &Bindings<'_, T>) -> Result<BTreeMap<String, Tensor<T>>> {
        let ids: Vec<NodeId> = self.outputs.values().copied().collect();
        let values = self.eval(bindings, &ids)?;
        Ok(self.outputs.keys().cloned().zip(values).collect())
    }

    /// Smallest distance between any input of a kinked primitive (relu,
    /// max/min with constant, step) and its kink, over the nodes needed for
    /// `outputs`. `None` when no such primitive is evaluated.
    pub fn kink_margin(&self, bindings: &Bindings<'_, T>, outputs: &[NodeId]) -> Result<Option<T>> {
        let values = self.evaluate(bindings, outputs)?;
        let mut margin: Option<T> = None;
        for (node, value) in self.nodes.iter().zip(&values) {
            if value.is_none() {
                continue;
            }
            let threshold = match node.op {
                Op::LeakyRelu(_) => T::zero(),
                Op::MaxConst(c) | Op::MinConst(c) => c,
                Op::Step { threshold, .. } => threshold,
                _ => continue,
            };
            let x = values[node.inputs[0].0].as_ref().expect("evaluated");
            for &v in x.data() {
                let m = (v - threshold).abs();
                margin = Some(margin.map_or(m, |cur| cur.min(m)));
            }
        }
        Ok(margin)
    }
}

fn apply<T: Scalar>(op: &Op<T>, args: &[&Tensor<T>], shape: &[usize]) -> Tensor<T> {
    let a = args[0];
    let build = |data: Vec<T>| Tensor::new(shape, data).expect("shape checked at construction");
    match op {
        Op::Input(_) | Op::Param(_) | Op::Const(_) => unreachable!("leaves handled by caller"),
        Op::Add => a.zip_map(args[1], |x, y| x + y),
        Op::Sub => a.zip_map(args[1], |x, y| x - y),
        Op::Mul => a.zip_map(args[1], |x, y| x * y),
        Op::Neg => a.map(|x| -x),
        Op::Scale(c) => a.map(|x| x * *c),
        Op::AddConst(c) => a.map(|x| x + *c),
        Op::Square => a.map(|x| x * x),
        Op::Sqrt => a.map(|x| x.sqrt()),
        Op::HalfRecipSqrt => a.map(|x| {
            if x > T::zero() {
                T::of(0.5) / x.sqrt()
            } else {
                T::zero()
            }
        }),
        Op::Recip => a.map(|x| T::one() / x),
        Op::Exp => a.map(|x| x.exp()),
        Op::Log => a.map(|x| x.ln()),
        Op::Sigmoid => a.map(sigmoid),
        Op::LeakyRelu(alpha) => a.map(|x| if x > T::zero() { x } else { *alpha * x }),
        Op::MaxConst(c) => a.map(|x| if x > *c { x } else { *c }),
        Op::MinConst(c) => a.map(|x| if x < *c { x } else { *c }),
        Op::Step {
            threshold,
            below,
            at,
            above,
        } => a.map(|x| {
            if x > *threshold {
                *above
            } else if x < *threshold {
                *below
            } else {
                *at
            }
        }),
        Op::MatMul => a.matmul(args[1]),
        Op::Transpose => a.transpose(),
        Op::SumAll => Tensor::scalar(a.sum()),
        Op::SumRows => {
            let cols = shape[0];
            let mut out = vec![T::zero(); cols];
            for row in a.data().chunks(cols) {
                for (o, &x) in out.iter_mut().zip(row) {
                    *o = *o + x;
                }
            }
            build(out)
        }
        Op::SumCols => {
            let cols = a.shape()[1];
            build(a.data().chunks(cols).map(|r| r.iter().copied().sum()).collect())
        }
        Op::BroadcastScalar => build(vec![a.data()[0]; shape.iter().product()]),
        Op::BroadcastRows(rows) => {
            let mut out = Vec::with_capacity(rows * a.len());
            for _ in 0..*rows {
                out.extend_from_slice(a.data());
            }
            build(out)
        }
        Op::BroadcastCols(cols) => {
            let mut out = Vec::with_capacity(cols * a.len());
            for &x in a.data() {
                out.extend(std::iter::repeat_n(x, *cols));
            }
            build(out)
        }
        Op::Reshape | Op::StopGradient => build(a.data().to_vec()),
        Op::ConcatCols => {
            let (ca, cb) = (a.shape()[1], args[1].shape()[1]);
            let mut out = Vec::with_capacity(a.len() + args[1].len());
            for (ra, rb) in a.data().chunks(ca).zip(args[1].data().chunks(cb)) {
                out.extend_from_slice(ra);
                out.extend_from_slice(rb);
            }
            build(out)
        }
        Op::SliceCols { start, len } => {
            let c = a.shape()[1];
            let mut out = Vec::with_capacity(shape[0] * len);
            for row in a.data().chunks(c) {
                out.extend_from_slice(&row[*start..start + len]);
            }
            build(out)
        }
        Op::PadCols { left, right } => {
            let c = a.shape()[1];
            let mut out = Vec::with_capacity(shape[0] * shape[1]);
            for row in a.data().chunks(c) {
                out.extend(std::iter::repeat_n(T::zero(), *left));
                out.extend_from_slice(row);
                out.extend(std::iter::repeat_n(T::zero(), *right));
            }
            build(out)
        }
        Op::Softmin => {
            let k = a.shape()[1];
            let mut out = Vec::with_capacity(a.len());
            for row in a.data().chunks(k) {
                let lo = row.iter().copied().fold(T::infinity(), T::min);
                let start = out.len();
                out.extend(row.iter().map(|&d| (lo - d).exp()));
                let total: T = out[start..].iter().copied().sum();
                for w in &mut out[start..] {
                    *w = *w / total;
                }
            }
            build(out)
        }
    }
}
