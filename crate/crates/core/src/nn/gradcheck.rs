//! Finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates_checked: usize,
}

/// Compares the analytic gradient of `f` at `params` with central differences
/// on up to `samples` randomly chosen coordinates.
///
/// `f` returns `(loss, gradient)` and must be deterministic. The relative error
/// of a coordinate is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(mut f: F, params: &[f64], epsilon: f64, samples: usize, seed: u64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(params);
    assert_eq!(
        analytic.len(),
        params.len(),
        "gradient length must match parameter count"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<usize> = if samples >= params.len() {
        (0..params.len()).collect()
    } else {
        let mut idx = sample(&mut rng, params.len(), samples).into_vec();
        idx.sort_unstable();
        idx
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates_checked: coords.len(),
    };
    let mut theta = params.to_vec();
    for &i in &coords {
        let orig = theta[i];
        theta[i] = orig + epsilon;
        let (up, _) = f(&theta);
        theta[i] = orig - epsilon;
        let (down, _) = f(&theta);
        theta[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_error || i == coords[0] {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report
}
