//! Central finite-difference gradient checking.
//!
//! The checker treats the function under test as a black box from a flat
//! parameter slice to a scalar, so it stays independent of how the analytic
//! backward is implemented.

/// Step used for central differences (f64).
pub const FD_STEP: f64 = 1e-5;
/// Relative tolerance where the analytic gradient is meaningfully nonzero.
pub const REL_TOL: f64 = 1e-6;
/// Below this magnitude the comparison switches to absolute.
pub const ABS_SWITCH: f64 = 1e-8;

/// d/dx_i f(x) for every i, by central differences.
pub fn finite_difference<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Elementwise pass/fail under the tolerance rule: relative error within
/// REL_TOL where |analytic| > ABS_SWITCH, absolute error within ABS_SWITCH
/// otherwise. Returns the worst offender on failure.
pub fn compare(analytic: &[f64], numeric: &[f64]) -> Result<(), String> {
    assert_eq!(analytic.len(), numeric.len());
    for (i, (&a, &n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        let err = (a - n).abs();
        let ok = if a.abs() > ABS_SWITCH {
            err / a.abs() <= REL_TOL
        } else {
            err <= ABS_SWITCH
        };
        if !ok {
            return Err(format!(
                "gradient mismatch at {i}: analytic {a:e}, numeric {n:e}, abs err {err:e}"
            ));
        }
    }
    Ok(())
}

/// Convenience wrapper: check an analytic gradient of a scalar function.
pub fn check<F>(f: F, x: &[f64], analytic: &[f64]) -> Result<(), String>
where
    F: Fn(&[f64]) -> f64,
{
    let numeric = finite_difference(&f, x, FD_STEP);
    compare(analytic, &numeric)
}
