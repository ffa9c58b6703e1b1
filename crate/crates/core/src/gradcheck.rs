//! Central finite-difference verification of tape gradients.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    /// `(param index, coordinate)` where the max was attained.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences with step `eps`.
///
/// `f` must register `params[i]` under id `i`. When `max_coords` is set,
/// at most that many evenly strided coordinates per parameter are checked.
pub fn grad_check<F>(params: &[Tensor], eps: f64, max_coords: Option<usize>, f: F) -> Result<GradCheckReport>
where
    F: for<'p> Fn(&mut Graph<'p>, &'p [Tensor]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Precondition(format!("eps {eps} outside [1e-7, 1e-4]")));
    }
    let analytic = {
        let mut g = Graph::new();
        let loss = f(&mut g, params)?;
        g.backward(loss)?
    };

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, ps)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "grad_check objective".into(),
            });
        }
        Ok(v)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for pi in 0..params.len() {
        let len = params[pi].len();
        let stride = match max_coords {
            Some(k) if k > 0 && len > k => len.div_ceil(k),
            _ => 1,
        };
        for c in (0..len).step_by(stride) {
            let orig = work[pi].data()[c];
            work[pi].data_mut()[c] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[c] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let exact = analytic.get(pi).map_or(0.0, |t| t.data()[c]);
            let rel = libm::fabs(exact - numeric) / f64::max(1.0, libm::fabs(numeric));
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = f64::max(rel, report.max_rel_error);
                report.worst = Some((pi, c));
            }
        }
    }
    Ok(report)
}
