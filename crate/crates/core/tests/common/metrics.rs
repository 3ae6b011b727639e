//! Brute-force metric oracles: every candidate threshold is evaluated by
//! recounting all trials (O(n²)).

pub fn thresholds(trials: &[(f64, bool)]) -> Vec<f64> {
    let mut th: Vec<f64> = trials.iter().map(|t| t.0).collect();
    th.push(f64::NEG_INFINITY);
    th.push(f64::INFINITY);
    th.sort_by(f64::total_cmp);
    th.dedup();
    th
}

/// `(threshold, p_fa, p_miss)` at every candidate threshold.
pub fn rates(trials: &[(f64, bool)]) -> Vec<(f64, f64, f64)> {
    let n_t = trials.iter().filter(|t| t.1).count() as f64;
    let n_n = trials.len() as f64 - n_t;
    thresholds(trials)
        .into_iter()
        .map(|th| {
            let fa = trials.iter().filter(|t| !t.1 && t.0 >= th).count() as f64;
            let miss = trials.iter().filter(|t| t.1 && t.0 < th).count() as f64;
            (th, fa / n_n, miss / n_t)
        })
        .collect()
}

fn counts(trials: &[(f64, bool)]) -> (i128, i128, Vec<(i128, i128)>) {
    let n_t = trials.iter().filter(|t| t.1).count() as i128;
    let n_n = trials.len() as i128 - n_t;
    let pts = thresholds(trials)
        .into_iter()
        .map(|th| {
            let fa = trials.iter().filter(|t| !t.1 && t.0 >= th).count() as i128;
            let miss = trials.iter().filter(|t| t.1 && t.0 < th).count() as i128;
            (fa, miss)
        })
        .collect();
    (n_t, n_n, pts)
}

/// Exact fractions `(num, den > 0)` compared by cross-multiplication.
fn less(a: (i128, i128), b: (i128, i128)) -> bool {
    a.0 * b.1 < b.0 * a.1
}

/// Lowest point of the convex hull of the operating points on the line
/// `p_fa = p_miss`: the minimum over all pairs of points that straddle it,
/// evaluated as an exact fraction and rounded once.
pub fn eer(trials: &[(f64, bool)]) -> f64 {
    let (n_t, n_n, pts) = counts(trials);
    let pts: Vec<(i128, i128)> = pts.into_iter().map(|(f, m)| (f * n_t, m * n_n)).collect();
    let s = n_t * n_n;
    let mut best: Option<(i128, i128)> = None;
    let mut consider = |c: (i128, i128)| {
        let c = if c.1 < 0 { (-c.0, -c.1) } else { c };
        if best.is_none_or(|b| less(c, b)) {
            best = Some(c);
        }
    };
    for a in &pts {
        for b in &pts {
            let (da, db) = (a.0 - a.1, b.0 - b.1);
            if da == 0 {
                consider((a.0, s));
            } else if da < 0 && db > 0 {
                consider((a.0 * b.1 - a.1 * b.0, ((b.1 - a.1) - (b.0 - a.0)) * s));
            }
        }
    }
    let (num, den) = best.expect("a point on each side of the diagonal");
    let g = gcd(num, den);
    (num / g) as f64 / (den / g) as f64
}

fn gcd(a: i128, b: i128) -> i128 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

pub fn min_dcf(trials: &[(f64, bool)], p: f64, c_miss: f64, c_fa: f64) -> f64 {
    let norm = (p * c_miss).min((1.0 - p) * c_fa);
    rates(trials)
        .into_iter()
        .map(|(_, fa, miss)| (p * c_miss * miss + (1.0 - p) * c_fa * fa) / norm)
        .fold(f64::INFINITY, f64::min)
}
