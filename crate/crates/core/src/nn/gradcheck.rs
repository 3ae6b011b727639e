use super::Params;

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Maximum relative error between `analytic` and central differences of `f` at `x`.
pub fn grad_check(x: &[f64], analytic: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(x.len(), analytic.len(), "gradient length");
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * h)));
    }
    worst
}

/// [`grad_check`] with the fourth-order five-point stencil
/// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, for losses whose large
/// value would drown small gradient entries in roundoff at tiny `h`.
pub fn grad_check5(x: &[f64], analytic: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(x.len(), analytic.len(), "gradient length");
    let mut probe = x.to_vec();
    let mut at = |i: usize, d: f64, probe: &mut Vec<f64>| {
        probe[i] = x[i] + d;
        let v = f(probe);
        probe[i] = x[i];
        v
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let (f2, f1) = (at(i, 2.0 * h, &mut probe), at(i, h, &mut probe));
        let (b1, b2) = (at(i, -h, &mut probe), at(i, -2.0 * h, &mut probe));
        // Differences first: a parameter with no effect gives exactly zero.
        let num = (8.0 * (f1 - b1) - (f2 - b2)) / (12.0 * h);
        worst = worst.max(relative_error(analytic[i], num));
    }
    worst
}

/// [`grad_check`] over every scalar of a parameter struct.
pub fn grad_check_params<P: Params<f64>>(params: &P, grads: &P, h: f64, mut loss: impl FnMut(&P) -> f64) -> f64 {
    let mut scratch = params.clone();
    grad_check(&params.flatten(), &grads.flatten(), h, |v| {
        scratch.unflatten(v);
        loss(&scratch)
    })
}
