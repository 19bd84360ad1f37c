use thiserror::Error;

use super::{FaultyAdjoint, Graph, Tensor, TensorError, Var};

/// Denominator floor for the relative error, so that near-zero gradients
/// are compared absolutely instead of amplifying round-off.
const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

#[derive(Debug, Error)]
pub enum GradcheckError {
    #[error("function is not deterministic: two evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn evaluate<F>(f: &F, params: &[(String, Tensor<f64>)]) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.constant(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.value(loss)
        .item()
        .ok_or_else(|| TensorError::NonScalarLoss(g.shape(loss).to_vec()))
}

/// Compares reverse-mode adjoints of the scalar function `f` against
/// central finite differences `(f(θ+ε) − f(θ−ε)) / 2ε` for every element
/// of every parameter.
///
/// `f` receives the graph and one leaf per entry of `params`, in order.
pub fn gradcheck<F>(
    f: F,
    params: &[(String, Tensor<f64>)],
    eps: f64,
    tol: f64,
) -> Result<GradcheckReport, GradcheckError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    gradcheck_with_fault(f, params, eps, tol, None)
}

/// [`gradcheck`] with an optional deliberately wrong adjoint rule on the
/// analytic side; a correct checker must report the failure.
pub fn gradcheck_with_fault<F>(
    f: F,
    params: &[(String, Tensor<f64>)],
    eps: f64,
    tol: f64,
    fault: Option<FaultyAdjoint>,
) -> Result<GradcheckReport, GradcheckError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    gradcheck_sampled(f, params, eps, tol, fault, usize::MAX)
}

/// Like [`gradcheck_with_fault`] but probes at most `per_param` evenly
/// spaced elements of each parameter. Large models are otherwise too slow
/// to difference element by element.
pub fn gradcheck_sampled<F>(
    f: F,
    params: &[(String, Tensor<f64>)],
    eps: f64,
    tol: f64,
    fault: Option<FaultyAdjoint>,
    per_param: usize,
) -> Result<GradcheckReport, GradcheckError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let per_param = per_param.max(1);
    let first = evaluate(&f, params)?;
    let second = evaluate(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(GradcheckError::NonDeterministic { first, second });
    }

    let mut g = match fault {
        Some(fault) => Graph::with_fault(fault),
        None => Graph::new(),
    };
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v)).collect();

    let mut work: Vec<(String, Tensor<f64>)> = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for (p, grad) in analytic.iter().enumerate() {
        let mut worst = ParamCheck {
            name: params[p].0.clone(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
        };
        let n = grad.numel();
        let probes: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|i| i * n / per_param).collect()
        };
        for k in probes {
            let orig = work[p].1.data()[k];
            work[p].1.data_mut()[k] = orig + eps;
            let plus = evaluate(&f, &work)?;
            work[p].1.data_mut()[k] = orig - eps;
            let minus = evaluate(&f, &work)?;
            work[p].1.data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[k];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > worst.max_rel_error {
                worst.max_rel_error = rel;
                worst.worst_index = k;
            }
            worst.max_abs_error = worst.max_abs_error.max(abs);
        }
        checks.push(worst);
    }
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        params: checks,
        max_rel_error,
        tol,
        passed: max_rel_error < tol,
    })
}
