use crate::array::Array;
use crate::diff::{Graph, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic adjoints against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Max over checked coordinates of `|analytic - fd| / max(1, |fd|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because the function has a kink there.
    pub kinks: usize,
}

fn eval<F>(f: &F, point: &[Array]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaves: Vec<Var> = point.iter().map(|a| g.param(a.clone())).collect();
    let root = f(&mut g, &leaves)?;
    let v = g.value(root);
    if !v.is_scalar() {
        return Err(Error::NonScalarRoot(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Check every coordinate of every leaf of `f` at `point` with step `h`.
///
/// A coordinate is treated as a kink when the gap between the one-sided
/// differences does not shrink as the step halves; such coordinates are
/// counted in [`GradCheck::kinks`] and left out of the error.
pub fn grad_check<F>(f: F, point: &[Array], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0 && h <= 1e-3) {
        return Err(Error::invalid(format!("step {h} outside (0, 1e-3]")));
    }
    let mut g = Graph::new();
    let leaves: Vec<Var> = point.iter().map(|a| g.param(a.clone())).collect();
    let root = f(&mut g, &leaves)?;
    let f0 = g.value(root).clone();
    if !f0.is_scalar() {
        return Err(Error::NonScalarRoot(f0.shape().to_vec()));
    }
    let f0 = f0.item();
    let grads = g.backward(root)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        kinks: 0,
    };
    let mut probe = point.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt_or_zeros(*leaf, &point[li]);
        for k in 0..point[li].len() {
            let x0 = point[li].data()[k];
            let mut at = |dx: f64| -> Result<f64> {
                probe[li].data_mut()[k] = x0 + dx;
                let v = eval(&f, &probe);
                probe[li].data_mut()[k] = x0;
                v
            };
            let (fp, fm) = (at(h)?, at(-h)?);
            let (fp2, fm2) = (at(h / 2.0)?, at(-h / 2.0)?);
            let central = (fp - fm) / (2.0 * h);
            let gap = ((fp - f0) - (f0 - fm)).abs() / h;
            let gap_half = ((fp2 - f0) - (f0 - fm2)).abs() / (h / 2.0);
            if gap > 1e-6 * central.abs().max(1.0) && gap_half > 0.75 * gap {
                report.kinks += 1;
                continue;
            }
            let err = (analytic.data()[k] - central).abs() / central.abs().max(1.0);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}
