//! Central finite-difference verification of tape gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest error over all parameter tensors.
    pub max_rel_err: f64,
    /// One error per parameter tensor, in input order.
    pub per_param: Vec<f64>,
    /// Number of scalar entries perturbed.
    pub checked: usize,
    /// Entries whose step was refined below `h`.
    pub refined: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::inference();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(TensorError::NonScalarRoot(v.shape().to_vec()));
    }
    let y = v.data()[0];
    if !y.is_finite() {
        return Err(TensorError::Evaluation(format!("objective evaluated to {y}")));
    }
    Ok(y)
}

/// Checks every entry of every parameter; returns the largest relative error.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    Ok(grad_check_sampled(f, params, h, None)?.max_rel_err)
}

/// Compares the analytic gradient of the scalar `f` with central differences.
///
/// For each parameter tensor the error is
/// `max_i |analytic_i - numeric_i| / max(max_i |analytic_i|, max_i |numeric_i|, 1e-6)`
/// over the checked entries. With `max_per_param = Some(n)` only `n` evenly
/// spaced entries per tensor are perturbed.
pub fn grad_check_sampled<F>(
    f: F,
    params: &[Tensor<f64>],
    h: f64,
    max_per_param: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check(f, params, h, max_per_param, None)
}

/// [`grad_check_sampled`] for piecewise-smooth objectives.
///
/// An entry whose error exceeds `tol` at step `h` is re-examined: if the
/// central differences at `h` and `h / 2` disagree by more than `tol / 10`
/// (relative), the objective has slope discontinuities inside the stencil,
/// and the step is divided by ten until two successive estimates agree or
/// the step reaches `h * 1e-3`. Every entry is compared against its final
/// estimate; none are skipped.
pub fn grad_check_refined<F>(
    f: F,
    params: &[Tensor<f64>],
    h: f64,
    max_per_param: Option<usize>,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check(f, params, h, max_per_param, Some(tol))
}

fn central<F>(f: &F, work: &mut [Tensor<f64>], pi: usize, idx: usize, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let orig = work[pi].data()[idx];
    work[pi].data_mut()[idx] = orig + h;
    let plus = evaluate(f, work);
    work[pi].data_mut()[idx] = orig - h;
    let minus = evaluate(f, work);
    work[pi].data_mut()[idx] = orig;
    Ok((plus? - minus?) / (2.0 * h))
}

fn check<F>(
    f: F,
    params: &[Tensor<f64>],
    h: f64,
    max_per_param: Option<usize>,
    refine: Option<f64>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    if !g.value(root).data()[0].is_finite() {
        return Err(TensorError::Evaluation("non-finite objective".into()));
    }
    let grads = g.backward(root)?;

    let mut work = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut checked = 0;
    let mut refined = 0;
    for (pi, &var) in vars.iter().enumerate() {
        let analytic = grads.tensor(&g, var);
        let n = params[pi].numel();
        let count = max_per_param.map_or(n, |m| m.min(n));
        let mut max_diff: f64 = 0.0;
        let mut scale: f64 = 1e-6;
        for j in 0..count {
            let idx = if count == n {
                j
            } else {
                ((j as f64 + 0.5) * n as f64 / count as f64) as usize
            };
            let a = analytic.data()[idx];
            let mut numeric = central(&f, &mut work, pi, idx, h)?;
            checked += 1;
            if let Some(tol) = refine {
                let rel = |x: f64, y: f64| (x - y).abs() / a.abs().max(x.abs()).max(y.abs()).max(1e-6);
                let mut step = h;
                if rel(a, numeric) >= tol {
                    while step > h * 1e-3 {
                        let half = central(&f, &mut work, pi, idx, step / 2.0)?;
                        if rel(numeric, half) <= tol / 10.0 {
                            break;
                        }
                        step /= 10.0;
                        numeric = central(&f, &mut work, pi, idx, step)?;
                    }
                }
                if step < h {
                    refined += 1;
                }
            }
            max_diff = max_diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        per_param.push(max_diff / scale);
    }
    Ok(GradCheckReport {
        max_rel_err: per_param.iter().copied().fold(0.0, f64::max),
        per_param,
        checked,
        refined,
    })
}
