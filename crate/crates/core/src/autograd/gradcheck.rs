//! Central finite-difference gradient verification.

use crate::autograd::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct CheckReport {
    /// Largest relative error over all checked input elements.
    pub max_rel_error: f64,
    /// (input index, element index) where the largest error occurred.
    pub worst: (usize, usize),
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
    pub pass: bool,
}

/// Denominator floor so that gradients that are zero on both sides do not
/// turn finite-difference rounding noise into a huge relative error.
const REL_FLOOR: f64 = 1e-6;

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::NonScalarLoss {
            shape: g.shape(out).to_vec(),
        });
    }
    Ok(g.data(out)[0])
}

/// Compares analytic gradients of the scalar function `f` against
/// `(f(x + eps) - f(x - eps)) / (2 eps)` for every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64, tol: f64) -> Result<CheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("grad_check eps must be positive, got {eps}")));
    }
    let base = eval(&f, inputs)?;
    if eval(&f, inputs)?.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_rel_error = 0.0f64;
    let mut worst = (0, 0);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let mut grads = Vec::with_capacity(t.numel());
        for ei in 0..t.numel() {
            let orig = t.data()[ei];
            work[ti].data_mut()[ei] = orig + eps;
            let plus = eval(&f, &work)?;
            work[ti].data_mut()[ei] = orig - eps;
            let minus = eval(&f, &work)?;
            work[ti].data_mut()[ei] = orig;
            let num = (plus - minus) / (2.0 * eps);
            let ana = analytic[ti][ei];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(REL_FLOOR);
            if !(rel <= max_rel_error) {
                max_rel_error = rel;
                worst = (ti, ei);
            }
            grads.push(num);
        }
        numeric.push(grads);
    }
    Ok(CheckReport {
        pass: max_rel_error < tol,
        max_rel_error,
        worst,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let rep = grad_check(
            |g, v| {
                let sq = g.square(v[0]);
                Ok(g.sum(sq))
            },
            &[x],
            1e-4,
            1e-8,
        )
        .unwrap();
        assert_eq!(rep.analytic[0], vec![2.0, 4.0]);
        assert!(rep.pass, "{}", rep.max_rel_error);
    }

    #[test]
    fn corrupted_backward_fails() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let rep = grad_check(
            |g, v| {
                let val = g.value(v[0]).map(|a| a * a);
                // True derivative is 2a; report 3a instead.
                let y = g.custom(
                    &[v[0]],
                    val,
                    Box::new(|ins, _, go| vec![ins[0].iter().zip(go).map(|(a, g)| 3.0 * a * g).collect()]),
                );
                Ok(g.sum(y))
            },
            &[x],
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(!rep.pass);
    }

    #[test]
    fn nondeterministic_function_rejected() {
        use std::sync::atomic::{AtomicU64, Ordering};
        let counter = AtomicU64::new(0);
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        let res = grad_check(
            |g, v| {
                let k = counter.fetch_add(1, Ordering::SeqCst) as f64;
                let s = g.sum(v[0]);
                Ok(g.scale(s, 1.0 + k))
            },
            &[x],
            1e-4,
            1e-4,
        );
        assert!(matches!(res, Err(Error::NonDeterministic)));
    }
}
