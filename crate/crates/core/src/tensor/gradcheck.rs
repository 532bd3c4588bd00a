use super::{Real, TapeOf, TensorOf, Var};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest per-coordinate relative error over all parameters.
    pub max_rel_err: f64,
    /// Largest relative error per parameter tensor, in input order.
    pub per_param: Vec<f64>,
    /// `(param index, flat coordinate, analytic, numeric)` at the maximum.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(p + eps) - f(p - eps)) / (2 eps)`, coordinate by coordinate.
///
/// `f` builds the loss on the supplied tape from parameter handles in the
/// same order as `params`; it must be deterministic.
pub fn grad_check<T, F>(params: &[TensorOf<T>], eps: f64, mut f: F) -> Result<GradCheckReport>
where
    T: Real,
    F: FnMut(&mut TapeOf<T>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(params, &mut f)?;
    let numeric = central_differences(params, eps, &mut f)?;
    Ok(compare(&analytic, &numeric))
}

/// A loss that can be built at any precision.
pub trait Objective {
    fn build<T: Real>(&self, tape: &mut TapeOf<T>, params: &[Var]) -> Result<Var>;
}

/// Backward pass at precision `A`, reference differences in 64-bit.
pub fn grad_check_mixed<A, O>(params: &[TensorOf<A>], eps: f64, f: &O) -> Result<GradCheckReport>
where
    A: Real,
    O: Objective,
{
    let analytic = analytic_grads(params, &mut |t: &mut TapeOf<A>, v: &[Var]| f.build(t, v))?;
    let wide: Vec<TensorOf<f64>> = params.iter().map(|p| p.cast()).collect();
    let numeric = central_differences(&wide, eps, &mut |t: &mut TapeOf<f64>, v: &[Var]| f.build(t, v))?;
    Ok(compare(&analytic, &numeric))
}

fn analytic_grads<T, F>(params: &[TensorOf<T>], f: &mut F) -> Result<Vec<Vec<f64>>>
where
    T: Real,
    F: FnMut(&mut TapeOf<T>, &[Var]) -> Result<Var>,
{
    let mut tape = TapeOf::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    Ok(vars
        .iter()
        .map(|v| grads.wrt(*v).data().iter().map(|g| g.f64()).collect())
        .collect())
}

fn central_differences<T, F>(params: &[TensorOf<T>], eps: f64, f: &mut F) -> Result<Vec<Vec<f64>>>
where
    T: Real,
    F: FnMut(&mut TapeOf<T>, &[Var]) -> Result<Var>,
{
    let mut eval = |ps: &[TensorOf<T>]| -> Result<f64> {
        let mut t = TapeOf::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.param(p.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item().f64())
    };
    let mut work: Vec<TensorOf<T>> = params.to_vec();
    let eps_t = T::of(eps);
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..work.len() {
        let mut col = Vec::with_capacity(work[pi].len());
        for ci in 0..work[pi].len() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + eps_t;
            let up = eval(&work)?;
            work[pi].data_mut()[ci] = orig - eps_t;
            let down = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            // the perturbed coordinates are not exactly ±eps after rounding
            let step = (orig + eps_t).f64() - (orig - eps_t).f64();
            col.push((up - down) / step);
        }
        out.push(col);
    }
    Ok(out)
}

fn compare(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        per_param: vec![0.0; analytic.len()],
        worst: None,
        coordinates: 0,
    };
    for (pi, (an, nu)) in analytic.iter().zip(numeric).enumerate() {
        for (ci, (&a, &n)) in an.iter().zip(nu).enumerate() {
            let rel = (a - n).abs() / (a.abs() + n.abs()).max(1e-6);
            report.coordinates += 1;
            if rel > report.per_param[pi] {
                report.per_param[pi] = rel;
            }
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel;
                report.worst = Some((pi, ci, a, n));
            }
        }
    }
    report
}
