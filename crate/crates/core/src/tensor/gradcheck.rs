//! Central finite-difference check of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over checked smooth coordinates of
    /// `|analytic − central| / max(1, |central|)`.
    pub max_rel_error: f64,
    /// Number of coordinates compared.
    pub checked: usize,
    /// `(input, flat index, relative error)` for coordinates where the left
    /// and right one-sided slopes disagree (a kink). They are reported but do
    /// not enter `max_rel_error`.
    pub kinks: Vec<(usize, usize, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Checks the gradient of the scalar `f` at `point`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|t, vs| f(t, vs[0]), std::slice::from_ref(point), step, usize::MAX)
}

/// Checks the gradient of `f` with respect to several inputs at once.
///
/// At most `coords_per_input` coordinates of each input are perturbed,
/// chosen at an even stride so large tables stay affordable.
pub fn grad_check_many<F>(
    f: F,
    points: &[Tensor],
    step: f64,
    coords_per_input: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let eval = |pts: &[Tensor], track: bool| -> Result<(f64, Option<Vec<Tensor>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.leaf(p.clone(), track)).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out).item();
        if !track {
            return Ok((value, None));
        }
        let grads = tape.backward(out)?;
        let gs = vars
            .iter()
            .zip(pts)
            .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok((value, Some(gs)))
    };

    let (f0, analytic) = eval(points, true)?;
    let analytic = analytic.expect("tracked evaluation returns gradients");

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        kinks: Vec::new(),
    };
    let mut work: Vec<Tensor> = points.to_vec();
    for (input, point) in points.iter().enumerate() {
        let n = point.len();
        let stride = if coords_per_input >= n { 1 } else { n.div_ceil(coords_per_input) };
        for idx in (0..n).step_by(stride) {
            let orig = point.data()[idx];
            work[input].data_mut()[idx] = orig + step;
            let (fp, _) = eval(&work, false)?;
            work[input].data_mut()[idx] = orig - step;
            let (fm, _) = eval(&work, false)?;
            work[input].data_mut()[idx] = orig;

            let central = (fp - fm) / (2.0 * step);
            let rel = (analytic[input].data()[idx] - central).abs() / central.abs().max(1.0);
            let right = (fp - f0) / step;
            let left = (f0 - fm) / step;
            if (right - left).abs() > step.sqrt() * (1.0 + right.abs() + left.abs()) {
                report.kinks.push((input, idx, rel));
                continue;
            }
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
        }
    }
    Ok(report)
}
