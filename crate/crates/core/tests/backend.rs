use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use spkdino::backend::{
    cosine_score, length_normalize, logreg_objective, LogReg, LogRegConfig, Pca, Plda, PldaInit, SW_JITTER,
};
use spkdino::linalg::{Cholesky, Matrix};
use spkdino::rng;

fn normal(r: &mut rng::Rng) -> f64 {
    StandardNormal.sample(r)
}

/// `n_spk` speakers with `n_sess` sessions each from `μ + V y + ε`, `ε ~ N(0, L Lᵀ)`.
fn generate(
    mu: &[f64],
    v: &Matrix<f64>,
    sw_factor: &Matrix<f64>,
    n_spk: usize,
    n_sess: usize,
    seed: u64,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut r = rng::seeded(seed);
    let (d, q) = v.shape();
    let ys = whitened_latents(n_spk, q, &mut r);
    let mut xs = Vec::new();
    let mut labels = Vec::new();
    for (s, y) in ys.iter().enumerate() {
        let vy = v.matvec(y);
        for _ in 0..n_sess {
            let z: Vec<f64> = (0..d).map(|_| normal(&mut r)).collect();
            let eps = sw_factor.matvec(&z);
            xs.push((0..d).map(|i| mu[i] + vy[i] + eps[i]).collect());
            labels.push(s);
        }
    }
    (xs, labels)
}

/// Speaker latents with zero sample mean and identity sample covariance, so
/// that refitting measures the estimator rather than the draw.
fn whitened_latents(n: usize, q: usize, r: &mut rng::Rng) -> Vec<Vec<f64>> {
    let mut ys: Vec<Vec<f64>> = (0..n).map(|_| (0..q).map(|_| normal(r)).collect()).collect();
    let mean: Vec<f64> = (0..q)
        .map(|k| ys.iter().map(|y| y[k]).sum::<f64>() / n as f64)
        .collect();
    let mut cov = Matrix::zeros(q, q);
    for y in ys.iter_mut() {
        y.iter_mut().zip(&mean).for_each(|(a, m)| *a -= m);
        cov.add_outer(y, y, 1.0 / n as f64);
    }
    let l = Cholesky::new(&cov).unwrap();
    let lf = l.factor();
    ys.iter()
        .map(|y| {
            // solve L z = y (forward substitution)
            let mut z = vec![0.0; q];
            for i in 0..q {
                let s: f64 = (0..i).map(|j| lf[(i, j)] * z[j]).sum();
                z[i] = (y[i] - s) / lf[(i, i)];
            }
            z
        })
        .collect()
}

/// Log-likelihood of every speaker's stacked sessions under the dense
/// `nD × nD` covariance `1 1ᵀ ⊗ S_b + I ⊗ S_w`.
fn dense_log_likelihood(m: &Plda<f64>, xs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let d = m.dim();
    let sb = m.v.matmul(&m.v.transpose()).unwrap();
    let n_spk = labels.iter().max().unwrap() + 1;
    let mut total = 0.0;
    for s in 0..n_spk {
        let sess: Vec<&Vec<f64>> = xs.iter().zip(labels).filter(|(_, &l)| l == s).map(|(x, _)| x).collect();
        let n = sess.len();
        let mut cov = Matrix::zeros(n * d, n * d);
        for a in 0..n {
            for b in 0..n {
                for i in 0..d {
                    for j in 0..d {
                        cov[(a * d + i, b * d + j)] = sb[(i, j)] + if a == b { m.sw[(i, j)] } else { 0.0 };
                    }
                }
            }
        }
        let x: Vec<f64> = sess
            .iter()
            .flat_map(|x| x.iter().zip(&m.mu).map(|(a, b)| a - b))
            .collect();
        let c = Cholesky::new(&cov).unwrap();
        total += -0.5 * ((n * d) as f64 * std::f64::consts::TAU.ln() + c.log_det() + c.quad_form_inv(&x));
    }
    total
}

fn dataset(k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut r = rng::seeded(100 + k as u64);
    let d = 3 + k;
    let q = 1 + k;
    let mu: Vec<f64> = (0..d).map(|_| normal(&mut r)).collect();
    let v = Matrix::from_vec(d, q, (0..d * q).map(|_| normal(&mut r)).collect()).unwrap();
    let mut l = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..=i {
            l[(i, j)] = if i == j {
                0.5 + r.random::<f64>()
            } else {
                0.3 * normal(&mut r)
            };
        }
    }
    generate(&mu, &v, &l, 15 + 5 * k, 2 + k, 7 + k as u64)
}

#[test]
fn em_log_likelihood_is_monotone_and_matches_dense_oracle() {
    for k in 0..3 {
        let (xs, labels) = dataset(k);
        let q = 1 + k;
        let fit = Plda::fit(&xs, &labels, q, 50, PldaInit::Pca).unwrap();
        assert_eq!(fit.log_likelihood.len(), 51);
        for w in fit.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "dataset {k}: {} -> {}", w[0], w[1]);
        }
        for iters in [0, 1, 7, 50] {
            let f = Plda::fit(&xs, &labels, q, iters, PldaInit::Pca).unwrap();
            let oracle = dense_log_likelihood(&f.model, &xs, &labels);
            let reported = *f.log_likelihood.last().unwrap();
            assert!(
                (oracle - reported).abs() < 1e-8 * oracle.abs().max(1.0),
                "dataset {k}, {iters} iterations: {reported} vs {oracle}"
            );
            assert_eq!(f.log_likelihood[..], fit.log_likelihood[..=iters]);
        }
    }
}

#[test]
fn em_recovers_generating_between_class_covariance() {
    let mut r = rng::seeded(3);
    let (d, q) = (4, 2);
    let mu: Vec<f64> = (0..d).map(|_| normal(&mut r)).collect();
    let v = Matrix::from_vec(d, q, (0..d * q).map(|_| 1.5 * normal(&mut r)).collect()).unwrap();
    let l = Matrix::diag(&[0.6, 0.8, 0.5, 0.7]);
    let (xs, labels) = generate(&mu, &v, &l, 200, 10, 4);
    let fit = Plda::fit(&xs, &labels, q, 50, PldaInit::Pca).unwrap();
    let truth = v.matmul(&v.transpose()).unwrap();
    let err = fit.model.between().sub(&truth).frobenius() / truth.frobenius();
    assert!(err < 0.1, "relative S_b error {err}");
}

#[test]
fn single_session_speakers_keep_zero_voices() {
    let (xs, _) = dataset(1);
    let labels: Vec<usize> = (0..xs.len()).collect();
    let fit = Plda::fit(&xs, &labels, 2, 10, PldaInit::Zero).unwrap();
    assert!(fit.model.v.as_slice().iter().all(|&x| x == 0.0));
    let d = xs[0].len();
    let n = xs.len() as f64;
    let mean: Vec<f64> = (0..d).map(|i| xs.iter().map(|x| x[i]).sum::<f64>() / n).collect();
    for i in 0..d {
        for j in 0..d {
            let c: f64 = xs.iter().map(|x| (x[i] - mean[i]) * (x[j] - mean[j])).sum::<f64>() / n
                + if i == j { SW_JITTER } else { 0.0 };
            assert!((fit.model.sw[(i, j)] - c).abs() < 1e-10);
        }
    }
}

fn gauss1(x: f64, var: f64) -> f64 {
    (-0.5 * x * x / var).exp() / (std::f64::consts::TAU * var).sqrt()
}

#[test]
fn one_dimensional_llr_matches_quadrature() {
    let m = Plda {
        mu: vec![0.0],
        v: Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
        sw: Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
    };
    let scorer = m.scorer().unwrap();
    for (e, t) in [(0.0, 0.0), (0.7, -1.3), (2.0, 2.5)] {
        // ∫ N(e; y, 1) N(t; y, 1) N(y; 0, 1) dy by the trapezoid rule on [−15, 15].
        let n = 60_000;
        let h = 30.0 / n as f64;
        let mut joint = 0.0;
        for i in 0..=n {
            let y = -15.0 + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            joint += w * h * gauss1(e - y, 1.0) * gauss1(t - y, 1.0) * gauss1(y, 1.0);
        }
        let oracle = joint.ln() - gauss1(e, 2.0).ln() - gauss1(t, 2.0).ln();
        let llr = scorer.llr(&[e], &[t]);
        assert!((llr - oracle).abs() < 1e-6, "({e}, {t}): {llr} vs {oracle}");
    }
}

#[test]
fn zero_voices_score_zero() {
    let (xs, labels) = dataset(0);
    let mut m = Plda::fit(&xs, &labels, 1, 5, PldaInit::Pca).unwrap().model;
    m.v.fill(0.0);
    let s = m.scorer().unwrap();
    for w in xs.windows(2) {
        assert_eq!(s.llr(&w[0], &w[1]), 0.0);
    }
}

#[test]
fn pca_reconstruction_error_is_sum_of_dropped_variances() {
    let mut r = rng::seeded(9);
    let xs: Vec<Vec<f64>> = (0..50)
        .map(|_| (0..8).map(|j| normal(&mut r) * (1.0 + j as f64 * 0.4)).collect())
        .collect();
    let p = Pca::fit(&xs, 3).unwrap();
    let n = xs.len() as f64;
    let mean: Vec<f64> = (0..8).map(|i| xs.iter().map(|x| x[i]).sum::<f64>() / n).collect();
    // trace of the sample covariance, computed directly
    let trace: f64 = xs
        .iter()
        .map(|x| x.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum::<f64>()
        / (n - 1.0);
    let dropped = trace - p.variances.iter().sum::<f64>();
    let err: f64 = xs
        .iter()
        .map(|x| {
            let xr = p.inverse_transform(&p.transform(x));
            x.iter().zip(&xr).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        })
        .sum::<f64>()
        / (n - 1.0);
    assert!((err - dropped).abs() < 1e-8, "{err} vs {dropped}");
    let gram = p.components.transpose().matmul(&p.components).unwrap();
    assert!(gram.sub(&Matrix::identity(3)).frobenius() < 1e-8);
    assert!(p.variances.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn logreg_gradient_vanishes_and_matches_finite_differences() {
    let mut r = rng::seeded(5);
    let xs: Vec<Vec<f64>> = (0..60)
        .map(|i| {
            let c = (i % 3) as f64;
            vec![c + normal(&mut r), -c + 0.5 * normal(&mut r), normal(&mut r)]
        })
        .collect();
    let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
    let cfg = LogRegConfig::default();
    let m = LogReg::fit(&xs, &labels, &cfg).unwrap();
    assert!(m.grad_norm < 1e-6);
    let mut theta = m.weights.as_slice().to_vec();
    theta.extend(&m.bias);
    let (_, g) = logreg_objective(&theta, &xs, &labels, 3, cfg.l2);
    let h = 1e-5;
    for i in 0..theta.len() {
        let mut p = theta.clone();
        p[i] += h;
        let mut q = theta.clone();
        q[i] -= h;
        let fd = (logreg_objective(&p, &xs, &labels, 3, cfg.l2).0 - logreg_objective(&q, &xs, &labels, 3, cfg.l2).0)
            / (2.0 * h);
        assert!((fd - g[i]).abs() < 1e-5, "{i}: {fd} vs {}", g[i]);
    }
    // away from the optimum too
    let off: Vec<f64> = theta.iter().map(|t| t + 0.3).collect();
    let (_, g) = logreg_objective(&off, &xs, &labels, 3, cfg.l2);
    for i in 0..off.len() {
        let mut p = off.clone();
        p[i] += h;
        let mut q = off.clone();
        q[i] -= h;
        let fd = (logreg_objective(&p, &xs, &labels, 3, cfg.l2).0 - logreg_objective(&q, &xs, &labels, 3, cfg.l2).0)
            / (2.0 * h);
        assert!((fd - g[i]).abs() < 1e-5);
    }
}

fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, d).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_is_scale_invariant(a in vec_strategy(5), b in vec_strategy(5), ka in -6i32..6, kb in -6i32..6, s in 0.01f64..100.0) {
        let base = cosine_score(&a, &b);
        // power-of-two scales are exact in floating point
        let sa: Vec<f64> = a.iter().map(|x| x * 2f64.powi(ka)).collect();
        let sb: Vec<f64> = b.iter().map(|x| x * 2f64.powi(kb)).collect();
        prop_assert_eq!(cosine_score(&sa, &sb), base);
        let ga: Vec<f64> = a.iter().map(|x| x * s).collect();
        prop_assert!((cosine_score(&ga, &b) - base).abs() < 1e-14);
        prop_assert!(base.abs() <= 1.0 + 1e-15);
    }

    #[test]
    fn isotropic_plda_orders_like_cosine(
        a in 0.1f64..3.0, b in 0.1f64..3.0,
        vs in prop::collection::vec(vec_strategy(4), 6..10),
    ) {
        let m = Plda {
            mu: vec![0.0; 4],
            v: Matrix::diag(&[a.sqrt(); 4]),
            sw: Matrix::diag(&[b; 4]),
        };
        let s = m.scorer().unwrap();
        let us: Vec<Vec<f64>> = vs.iter().map(|v| length_normalize(v)).collect();
        let mut pairs: Vec<(f64, f64)> = Vec::new();
        for i in 0..us.len() {
            for j in i + 1..us.len() {
                pairs.push((cosine_score(&us[i], &us[j]), s.llr(&us[i], &us[j])));
            }
        }
        for p in &pairs {
            for q in &pairs {
                if p.0 < q.0 - 1e-12 {
                    prop_assert!(p.1 < q.1);
                }
            }
        }
    }

    #[test]
    fn plda_score_is_symmetric(k in 0usize..3, i in 0usize..20, j in 0usize..20) {
        let (xs, labels) = dataset(k);
        let m = Plda::fit(&xs, &labels, 1 + k, 3, PldaInit::Pca).unwrap().model;
        let s = m.scorer().unwrap();
        prop_assert!((s.llr(&xs[i], &xs[j]) - s.llr(&xs[j], &xs[i])).abs() < 1e-9);
    }

    #[test]
    fn full_rank_pca_round_trips(vs in prop::collection::vec(vec_strategy(4), 6..12)) {
        let p = Pca::fit(&vs, 4).unwrap();
        for v in &vs {
            let back = p.inverse_transform(&p.transform(v));
            for (x, y) in v.iter().zip(&back) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn logreg_posteriors_sum_to_one(seed in 0u64..1000) {
        let mut r = rng::seeded(seed);
        let xs: Vec<Vec<f64>> = (0..12).map(|_| vec![normal(&mut r), normal(&mut r)]).collect();
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let m = LogReg::fit(&xs, &labels, &LogRegConfig { max_iter: 200, ..LogRegConfig::default() }).unwrap();
        for x in &xs {
            prop_assert!((m.predict_proba(x).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
