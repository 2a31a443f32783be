use rand::seq::index::sample;
use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is essentially zero are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, points: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.data()[0])
}

fn analytic<F>(f: &F, points: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars.iter().map(|&v| g.grad(v)).collect())
}

fn check<F>(
    f: &F,
    points: &[Tensor<f64>],
    step: f64,
    coords: &[Vec<usize>],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let grads = analytic(f, points)?;
    let mut work: Vec<Tensor<f64>> = points.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for (t, idxs) in coords.iter().enumerate() {
        for &c in idxs {
            let orig = work[t].data()[c];
            work[t].data_mut()[c] = orig + step;
            let plus = evaluate(f, &work)?;
            work[t].data_mut()[c] = orig - step;
            let minus = evaluate(f, &work)?;
            work[t].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(grads[t].data()[c], numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = Some((t, c));
            }
        }
    }
    Ok(report)
}

/// Central-difference check of every coordinate of every input; returns the
/// worst relative error.
pub fn grad_check<F>(f: F, points: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let coords: Vec<Vec<usize>> = points.iter().map(|p| (0..p.numel()).collect()).collect();
    Ok(check(&f, points, step, &coords)?.max_rel_error)
}

/// Like [`grad_check`] but probes at most `per_input` random coordinates of
/// each input. Used for models with tens of thousands of parameters.
pub fn grad_check_sampled<F, R>(
    f: F,
    points: &[Tensor<f64>],
    step: f64,
    per_input: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let coords: Vec<Vec<usize>> = points
        .iter()
        .map(|p| {
            let n = p.numel();
            if n <= per_input {
                (0..n).collect()
            } else {
                sample(rng, n, per_input).into_vec()
            }
        })
        .collect();
    check(&f, points, step, &coords)
}
