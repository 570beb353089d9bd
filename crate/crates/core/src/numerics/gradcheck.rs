use crate::error::{Error, Result};

use super::{Graph, Tensor, TensorId};

/// Compares the recorded backward pass against central finite differences.
///
/// `f` must build a scalar loss from the tensor it is handed. Returns the
/// maximum over coordinates of `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, TensorId) -> Result<TensorId>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!(
            "grad_check eps must lie in [1e-7, 1e-3], got {eps}"
        )));
    }

    // Analytic gradient from one recorded backward pass.
    let mut graph = Graph::new();
    let mut probe = x.clone();
    probe.requires_grad = true;
    probe.zero_grad();
    let id = graph.leaf(probe);
    let loss = f(&mut graph, id)?;
    graph.backward(loss)?;
    let analytic: Vec<f64> = match graph.grad(id) {
        Some(g) => g.to_vec(),
        None => vec![0.0; x.numel()],
    };

    // Central differences, one coordinate at a time.
    let eval = |point: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let id = g.constant(point.clone());
        let loss = f(&mut g, id)?;
        if !g.value(loss).is_scalar() {
            return Err(Error::Contract(
                "grad_check function must produce a scalar".into(),
            ));
        }
        Ok(g.value(loss).data()[0])
    };

    let mut max_err: f64 = 0.0;
    let mut point = x.clone();
    point.requires_grad = false;
    for i in 0..x.numel() {
        let orig = point.data()[i];
        point.data_mut()[i] = orig + eps;
        let up = eval(&point)?;
        point.data_mut()[i] = orig - eps;
        let down = eval(&point)?;
        point.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
