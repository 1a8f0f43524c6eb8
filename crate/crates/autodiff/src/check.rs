use crate::error::{GraphError, Result};
use crate::eval::Bindings;
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;

/// Compares [`Graph::backward`] against central differences for every
/// parameter entry and returns the largest
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_diff_check<T: Scalar>(
    graph: &mut Graph<T>,
    output: NodeId,
    bindings: &Bindings<'_, T>,
    epsilon: f64,
) -> Result<f64> {
    let names = graph.param_names();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    finite_diff_check_params(graph, output, bindings, epsilon, &names)
}

/// Like [`finite_diff_check`], restricted to the named parameters.
///
/// Use this when part of the graph sits behind a stop-gradient: the
/// numeric derivative with respect to a blocked parameter is not zero even
/// though the analytic one is by construction.
pub fn finite_diff_check_params<T: Scalar>(
    graph: &mut Graph<T>,
    output: NodeId,
    bindings: &Bindings<'_, T>,
    epsilon: f64,
    params: &[&str],
) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(GraphError::Epsilon(epsilon));
    }
    let analytic = graph.backward(output, bindings)?;
    let eps = T::of(epsilon);
    let mut worst = 0.0f64;
    for &name in params {
        let base = bindings
            .get(name)
            .ok_or_else(|| GraphError::Unbound(name.to_string()))?;
        let grad = analytic
            .get(name)
            .ok_or_else(|| GraphError::Unbound(name.to_string()))?;
        let mut probe = base.clone();
        for i in 0..base.len() {
            let x0 = base.data()[i];
            probe.data_mut()[i] = x0 + eps;
            let plus = eval_scalar(graph, output, bindings, name, &probe)?;
            probe.data_mut()[i] = x0 - eps;
            let minus = eval_scalar(graph, output, bindings, name, &probe)?;
            probe.data_mut()[i] = x0;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = (grad.data()[i].as_f64() - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn eval_scalar<T: Scalar>(
    graph: &Graph<T>,
    output: NodeId,
    bindings: &Bindings<'_, T>,
    name: &str,
    value: &crate::Tensor<T>,
) -> Result<f64> {
    let mut b = bindings.clone();
    b.bind(name, value);
    let out = graph.eval_one(&b, output)?;
    Ok(out.item().expect("scalar output").as_f64())
}
