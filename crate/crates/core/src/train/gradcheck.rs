use crate::error::Result;
use crate::nn::Gradients;
use crate::policy::Pmat;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `|fd - analytic| / max(|fd|, |analytic|, 1e-3)`.
    pub max_error: f64,
    pub checked: usize,
}

const STEP: f64 = 1e-5;

/// Compare `analytic` with central differences of `f` on every `stride`-th
/// scalar of the parameter groups in `groups`.
pub fn check_gradient<F>(model: &Pmat, analytic: &Gradients, f: F, groups: &[&str], stride: usize) -> Result<GradCheck>
where
    F: Fn(&Pmat) -> Result<f64>,
{
    let mut probe = model.clone();
    let mut max_error: f64 = 0.0;
    let mut checked = 0;
    for k in 0..model.store.len() {
        if !groups.contains(&model.store.segments()[k].group()) {
            continue;
        }
        for i in (0..model.store.segments()[k].data.len()).step_by(stride.max(1)) {
            let x = model.store.segments()[k].data[i];
            probe.store.segments_mut()[k].data[i] = x + STEP;
            let up = f(&probe)?;
            probe.store.segments_mut()[k].data[i] = x - STEP;
            let down = f(&probe)?;
            probe.store.segments_mut()[k].data[i] = x;
            let fd = (up - down) / (2.0 * STEP);
            let an = analytic.grads[k][i];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            max_error = max_error.max(err);
            checked += 1;
        }
    }
    Ok(GradCheck { max_error, checked })
}
