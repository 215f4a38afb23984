//! Central finite-difference gradient checking.

use std::collections::HashMap;

use super::{Feed, Graph, GraphError, NodeId, Tensor};

/// Numerical gradient of the scalar node `output` with respect to each input
/// in `wrt`, by central differences with step `h`.
pub fn central_difference(
    graph: &Graph,
    feed: &HashMap<String, Tensor<f64>>,
    output: NodeId,
    wrt: &[&str],
    h: f64,
) -> Result<HashMap<String, Tensor<f64>>, GraphError> {
    let eval_at = |feed: &HashMap<String, Tensor<f64>>| -> Result<f64, GraphError> {
        let f: Feed<'_, f64> = feed.iter().map(|(k, v)| (k.as_str(), v)).collect();
        Ok(graph.forward(&f)?.value(output).item())
    };
    let mut out = HashMap::new();
    for &name in wrt {
        let base = feed.get(name).ok_or_else(|| GraphError::MissingInput(name.to_string()))?;
        let mut grad = Vec::with_capacity(base.len());
        let mut work = feed.clone();
        for k in 0..base.len() {
            let orig = base.data()[k];
            work.get_mut(name).unwrap().data_mut()[k] = orig + h;
            let plus = eval_at(&work)?;
            work.get_mut(name).unwrap().data_mut()[k] = orig - h;
            let minus = eval_at(&work)?;
            work.get_mut(name).unwrap().data_mut()[k] = orig;
            grad.push((plus - minus) / (2.0 * h));
        }
        out.insert(name.to_string(), Tensor::new(base.shape().to_vec(), grad)?);
    }
    Ok(out)
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
