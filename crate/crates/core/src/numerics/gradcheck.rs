//! Central finite-difference gradient checker.

/// Step size for central differences.
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter slot, flat index) of the worst coordinate.
    pub worst: (usize, usize),
    pub tolerance: f64,
    pub passed: bool,
}

/// Checks the analytic gradient of a deterministic scalar function against
/// central finite differences, coordinate by coordinate.
///
/// `f` takes the full parameter list and returns `(loss, gradients)` with one
/// gradient vector per parameter slot. The relative error convention is
/// `|num - ana| / max(|num| + |ana|, 1e-8)`.
pub fn grad_check<F>(mut f: F, params: &[Vec<f64>], tolerance: f64) -> GradCheckReport
where
    F: FnMut(&[Vec<f64>]) -> (f64, Vec<Vec<f64>>),
{
    let (_, analytic) = f(params);
    assert_eq!(
        analytic.len(),
        params.len(),
        "gradient slots must match parameter slots"
    );

    let mut work: Vec<Vec<f64>> = params.to_vec();
    let mut max_rel_error = 0.0;
    let mut worst = (0, 0);
    for slot in 0..params.len() {
        assert_eq!(analytic[slot].len(), params[slot].len());
        for i in 0..params[slot].len() {
            let orig = work[slot][i];
            work[slot][i] = orig + FD_STEP;
            let (loss_plus, _) = f(&work);
            work[slot][i] = orig - FD_STEP;
            let (loss_minus, _) = f(&work);
            work[slot][i] = orig;

            let numeric = (loss_plus - loss_minus) / (2.0 * FD_STEP);
            let ana = analytic[slot][i];
            let rel = (numeric - ana).abs() / (numeric.abs() + ana.abs()).max(1e-8);
            if rel > max_rel_error {
                max_rel_error = rel;
                worst = (slot, i);
            }
        }
    }

    GradCheckReport {
        max_rel_error,
        worst,
        tolerance,
        passed: max_rel_error <= tolerance,
    }
}
