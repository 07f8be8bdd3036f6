use alloc::vec::Vec;

use super::{Graph, Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max_i |autodiff_i - central_i| / max(1, |central_i|)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `eps`, over every coordinate of `x`. Values read
/// with [`Graph::stopped`] stay at their unperturbed values.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.data.len()).collect();
    grad_check_coords(f, x, eps, &coords)
}

/// Like [`grad_check`] but only probes the listed coordinates.
pub fn grad_check_coords<F>(mut f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x);
    let y = f(&mut g, xv)?;
    let grads = g.backward(y)?;
    let analytic: Vec<f64> = match grads.get(xv) {
        Some(d) => d.to_vec(),
        None => alloc::vec![0.0; x.data.len()],
    };

    let log = g.stop_log().to_vec();
    let mut eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::replaying(log.clone());
        let v = g.param(t);
        let y = f(&mut g, v)?;
        Ok(g.scalar(y))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
    };
    let mut probe = x.clone();
    for &i in coords {
        if i >= x.data.len() {
            return Err(TensorError::Index {
                index: i,
                len: x.data.len(),
            });
        }
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        if err > report.max_rel_error || !err.is_finite() {
            report.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::row_vector(vec![0.3, -1.2, 2.5, 0.0]);
        let r = grad_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::row_vector(vec![1.0, 2.0]);
        let r = grad_check(
            |g, _| g.constant_from(1, 1, vec![4.0]),
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }
}
