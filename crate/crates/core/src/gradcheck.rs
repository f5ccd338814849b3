//! Central finite differences and the error metric used by every gradient
//! check in the crate (unit tests, self-check, acceptance).

/// Entries with magnitude below this are compared on an absolute scale.
///
/// Central differences at `ε = 1e-5` on losses of order one carry roughly
/// `1e-10` of absolute error, so a pure ratio is meaningless for entries that
/// are themselves near zero.
pub const RELATIVE_FLOOR: f64 = 1e-4;

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Largest [`relative_error`] over paired entries.
pub fn max_relative_error<'a>(
    analytic: impl IntoIterator<Item = &'a f64>,
    numeric: impl IntoIterator<Item = &'a f64>,
) -> f64 {
    analytic
        .into_iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}

/// Central-difference gradient of `f` at `x`, perturbing each coordinate in turn.
pub fn central_difference<F>(x: &[f64], epsilon: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + epsilon;
            let plus = f(&probe);
            probe[i] = orig - epsilon;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * epsilon)
        })
        .collect()
}
