//! Central finite-difference gradient checking.

/// Denominator floor for relative errors. Central differences at h = 1e-6 on
/// an O(1) loss carry ~1e-9 of roundoff, so entries smaller than this are
/// effectively judged on absolute error.
pub const FD_FLOOR: f64 = 1e-4;

/// Max relative error between `analytic` and central differences of `f`
/// around `x`, using `max(|a|, |n|, floor)` as the denominator.
pub fn max_rel_error(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    h: f64,
    floor: f64,
) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut xp = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        let num = (fp - fm) / (2.0 * h);
        let denom = num.abs().max(analytic[i].abs()).max(floor);
        worst = worst.max((num - analytic[i]).abs() / denom);
    }
    worst
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}
