use serde::Serialize;

use super::tensor::Tensor;

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub h: f64,
    pub tol: f64,
    pub max_rel_error: f64,
    pub params: Vec<ParamCheck>,
    /// Names of parameters whose error exceeded `tol`.
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Errors below this magnitude are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

/// Compares `analytic` gradients with central differences of `loss`.
///
/// `max_coords` limits how many coordinates of each parameter are perturbed
/// (evenly strided); `None` checks all of them.
pub fn grad_check<F>(
    mut loss: F,
    params: &[(String, Tensor)],
    analytic: &[Vec<f64>],
    h: f64,
    tol: f64,
    max_coords: Option<usize>,
) -> GradCheckReport
where
    F: FnMut(&[Tensor]) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    assert_eq!(params.len(), analytic.len());
    let mut work: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut checks = Vec::with_capacity(params.len());
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;

    for (pi, (name, t)) in params.iter().enumerate() {
        let n = t.len();
        let stride = match max_coords {
            Some(k) if k < n => n.div_ceil(k),
            _ => 1,
        };
        let mut max_rel: f64 = 0.0;
        let mut count = 0;
        for i in (0..n).step_by(stride) {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + h;
            let up = loss(&work);
            work[pi].data_mut()[i] = orig - h;
            let down = loss(&work);
            work[pi].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            max_rel = max_rel.max(rel);
            count += 1;
        }
        if max_rel > tol {
            failures.push(name.clone());
        }
        worst = worst.max(max_rel);
        checks.push(ParamCheck {
            name: name.clone(),
            max_rel_error: max_rel,
            coords_checked: count,
        });
    }

    GradCheckReport {
        h,
        tol,
        max_rel_error: worst,
        params: checks,
        failures,
    }
}
