use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input number, flat component) of the worst component
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Smallest denominator of the relative error. With 64-bit floats and a step
/// around 1e-5, central differences of an O(1) objective resolve gradients
/// only to about 1e-10, so smaller components are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn eval_scalar(f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>, inputs: &[Tensor], grad: bool) -> Result<(f64, Graph, Vec<Var>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if grad { g.param(t.clone()) } else { g.constant(t.clone()) })
        .collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::contract(format!("grad_check needs a scalar function, got {:?}", g.shape(out))));
    }
    let y = g.data(out)[0];
    if grad {
        g.backward(out)?;
    }
    Ok((y, g, vars))
}

/// Central-difference check of `f` over several inputs at once.
///
/// `select(input, component)` restricts which components are perturbed;
/// the analytic gradient is always computed in full.
pub fn grad_check_many(
    f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    eps: f64,
    select: &dyn Fn(usize, usize) -> bool,
) -> Result<GradCheckReport> {
    if eps <= 0.0 {
        return Err(Error::contract("eps must be positive"));
    }
    let (_, g, vars) = eval_scalar(f, inputs, true)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    drop(g);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for ci in 0..t.numel() {
            if !select(ti, ci) {
                continue;
            }
            let orig = t.data()[ci];
            work[ti].data_mut()[ci] = orig + eps;
            let (plus, ..) = eval_scalar(f, &work, false)?;
            work[ti].data_mut()[ci] = orig - eps;
            let (minus, ..) = eval_scalar(f, &work, false)?;
            work[ti].data_mut()[ci] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric {
                    index: ci,
                    detail: format!("function non-finite when perturbing input {ti}"),
                });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_error(analytic[ti][ci], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (ti, ci);
            }
        }
    }
    Ok(report)
}

/// Max relative error between the analytic gradient of scalar `f` at `x`
/// and central differences with step `eps`.
pub fn grad_check(f: impl Fn(&mut Graph, Var) -> Result<Var>, x: &Tensor, eps: f64) -> Result<f64> {
    let wrapped = |g: &mut Graph, vars: &[Var]| f(g, vars[0]);
    grad_check_many(&wrapped, std::slice::from_ref(x), eps, &|_, _| true).map(|r| r.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(vec![5], vec![0.3, -1.2, 2.0, 0.0, 7.5]).unwrap();
        let err = grad_check(|g, v| g.sum_all(v), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn silu_sum_is_tight() {
        let x = Tensor::new(vec![6], vec![-3.0, -0.7, 0.1, 0.9, 2.2, 4.0]).unwrap();
        let err = grad_check(
            |g, v| {
                let s = g.silu(v);
                g.sum_all(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn non_finite_reports_index() {
        let x = Tensor::new(vec![2], vec![1.0, 800.0]).unwrap();
        let r = grad_check(
            |g, v| {
                let e = g.exp(v);
                let e2 = g.mul(e, e)?;
                g.sum_all(e2)
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(Error::Numeric { index: 1, .. }) | Err(Error::Numeric { index: 0, .. })));
    }
}
