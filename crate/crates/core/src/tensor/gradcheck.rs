use super::array::Tensor;
use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Worst relative error per parameter tensor.
    pub per_param: Vec<f64>,
    pub tolerance: f64,
    pub pass: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.value(out)
        .item()
        .ok_or_else(|| Error::NonScalarRoot(g.value(out).shape().to_vec()))
}

/// Check the gradient of the scalar function `f` at `params`.
///
/// `f` receives a fresh graph and one leaf per parameter tensor and returns
/// the scalar output node.
pub fn grad_check<F>(f: F, params: &[Tensor], epsilon: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside (0, 1e-2]")));
    }
    let first = evaluate(&f, params)?;
    let second = evaluate(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic(first, second));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + epsilon;
            let plus = evaluate(&f, &work)?;
            work[pi].data_mut()[e] = orig - epsilon;
            let minus = evaluate(&f, &work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            worst = worst.max(relative_error(grad.data()[e], numeric));
        }
        per_param.push(worst);
    }
    let max_relative_error = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_relative_error,
        per_param,
        tolerance,
        pass: max_relative_error <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn sum_is_exact() {
        let p = vec![
            Tensor::vector(vec![0.3, -1.2, 4.0]),
            Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        ];
        let report = grad_check(
            |g, v| {
                let a = g.sum(v[0])?;
                let b = g.sum(v[1])?;
                g.add(a, b)
            },
            &p,
            1e-5,
            1e-10,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
        assert!(report.max_relative_error <= 1e-10);
    }

    #[test]
    fn rejects_bad_epsilon() {
        let p = vec![Tensor::scalar(1.0)];
        assert!(grad_check(|g, v| g.sum(v[0]), &p, 0.5, 1e-4).is_err());
        assert!(grad_check(|g, v| g.sum(v[0]), &p, 0.0, 1e-4).is_err());
    }

    #[test]
    fn detects_non_determinism() {
        let calls = Cell::new(0u32);
        let p = vec![Tensor::scalar(1.0)];
        let res = grad_check(
            |g, v| {
                calls.set(calls.get() + 1);
                let k = g.constant(Tensor::scalar(f64::from(calls.get())));
                g.mul(v[0], k)
            },
            &p,
            1e-5,
            1e-4,
        );
        assert!(matches!(res, Err(Error::NonDeterministic(..))));
    }
}
