//! Central finite-difference verification of analytic gradients.

/// Result of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter index with the worst relative error.
    pub worst_index: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compare `analytic` against central finite differences of `loss` at the
/// given parameter indices. `step` is the absolute perturbation (the check
/// runs in f64).
pub fn check_gradient(
    loss: &mut dyn FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    indices: &[usize],
    step: f64,
) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len());
    let mut work = params.to_vec();
    let mut max_rel_err = 0.0f64;
    let mut worst_index = 0;
    for &i in indices {
        let orig = work[i];
        work[i] = orig + step;
        let up = loss(&work);
        work[i] = orig - step;
        let down = loss(&work);
        work[i] = orig;
        let fd = (up - down) / (2.0 * step);
        let an = analytic[i];
        let denom = fd.abs().max(an.abs());
        // treat a pair of negligible gradients as agreeing
        let rel = if denom < 1e-8 { 0.0 } else { (fd - an).abs() / denom };
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    GradCheckReport { checked: indices.len(), max_rel_err, worst_index }
}

/// Deterministically pick `count` distinct parameter indices.
pub fn sample_indices(total: usize, count: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rng = crate::rng::stream(seed, "gradcheck_indices");
    let mut all: Vec<usize> = (0..total).collect();
    all.shuffle(&mut rng);
    all.truncate(count.min(total));
    all.sort_unstable();
    all
}
