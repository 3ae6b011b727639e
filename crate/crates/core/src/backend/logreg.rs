use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{dot, lit, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct LogRegConfig {
    /// L2 penalty on the weights (not the biases).
    pub l2: f64,
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        Self {
            l2: 1e-2,
            grad_tol: 1e-6,
            max_iter: 20_000,
        }
    }
}

/// Multinomial logistic regression.
#[derive(Clone, Debug, PartialEq)]
pub struct LogReg<T> {
    /// `C × D`.
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
    pub iterations: usize,
    /// Gradient norm at the returned parameters.
    pub grad_norm: f64,
}

fn softmax_in_place<T: Scalar>(z: &mut [T]) {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
}

/// Penalized mean negative log-likelihood and its gradient, parameters flattened as `[W | b]`.
pub fn objective<T: Scalar>(theta: &[T], xs: &[Vec<T>], labels: &[usize], n_classes: usize, l2: f64) -> (T, Vec<T>) {
    let d = xs[0].len();
    let (w, b) = theta.split_at(n_classes * d);
    let mut grad = vec![T::zero(); theta.len()];
    let mut loss = T::zero();
    let inv_n = T::one() / lit::<T>(xs.len() as f64);
    for (x, &y) in xs.iter().zip(labels) {
        let mut p: Vec<T> = (0..n_classes).map(|c| dot(&w[c * d..(c + 1) * d], x) + b[c]).collect();
        softmax_in_place(&mut p);
        loss -= p[y].max(T::min_positive_value()).ln() * inv_n;
        p[y] -= T::one();
        for c in 0..n_classes {
            let g = p[c] * inv_n;
            for (gw, xv) in grad[c * d..(c + 1) * d].iter_mut().zip(x) {
                *gw += g * *xv;
            }
            grad[n_classes * d + c] += g;
        }
    }
    let l2 = lit::<T>(l2);
    loss += lit::<T>(0.5) * l2 * dot(w, w);
    for (g, wv) in grad.iter_mut().zip(w) {
        *g += l2 * *wv;
    }
    (loss, grad)
}

impl<T: Scalar> LogReg<T> {
    /// Full-batch gradient descent, Barzilai–Borwein step proposals with Armijo backtracking.
    pub fn fit(xs: &[Vec<T>], labels: &[usize], cfg: &LogRegConfig) -> Result<Self> {
        if xs.is_empty() || xs.len() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} vectors, {} labels",
                xs.len(),
                labels.len()
            )));
        }
        let n_classes = labels.iter().copied().max().unwrap_or(0) + 1;
        if n_classes < 2 {
            return Err(Error::InvalidArgument(
                "logistic regression needs at least two classes".into(),
            ));
        }
        let d = xs[0].len();
        let mut theta = vec![T::zero(); n_classes * (d + 1)];
        let (mut loss, mut grad) = objective(&theta, xs, labels, n_classes, cfg.l2);
        let mut step = T::one();
        let mut iterations = 0;
        let gnorm = |g: &[T]| dot(g, g).sqrt().as_f64();
        while gnorm(&grad) >= cfg.grad_tol && iterations < cfg.max_iter {
            let g2 = dot(&grad, &grad);
            let mut t = step;
            let (new_theta, new_loss, new_grad) = loop {
                let cand: Vec<T> = theta.iter().zip(&grad).map(|(a, g)| *a - t * *g).collect();
                let (l, g) = objective(&cand, xs, labels, n_classes, cfg.l2);
                if l <= loss - lit::<T>(1e-4) * t * g2 || t < lit(1e-20) {
                    break (cand, l, g);
                }
                t *= lit(0.5);
            };
            // Barzilai–Borwein proposal for the next step
            let s: Vec<T> = new_theta.iter().zip(&theta).map(|(a, b)| *a - *b).collect();
            let y: Vec<T> = new_grad.iter().zip(&grad).map(|(a, b)| *a - *b).collect();
            let sy = dot(&s, &y);
            step = if sy > T::zero() { dot(&s, &s) / sy } else { t * lit(2.0) };
            if !new_loss.is_finite() {
                return Err(Error::Diverged("logistic regression loss is not finite".into()));
            }
            let stalled = new_theta == theta;
            theta = new_theta;
            loss = new_loss;
            grad = new_grad;
            iterations += 1;
            if stalled {
                break;
            }
        }
        let grad_norm = gnorm(&grad);
        let bias = theta.split_off(n_classes * d);
        Ok(Self {
            weights: Matrix::from_vec(n_classes, d, theta)?,
            bias,
            iterations,
            grad_norm,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn predict_proba(&self, x: &[T]) -> Vec<T> {
        let mut z = self.weights.matvec(x);
        for (a, b) in z.iter_mut().zip(&self.bias) {
            *a += *b;
        }
        softmax_in_place(&mut z);
        z
    }

    pub fn predict(&self, x: &[T]) -> usize {
        argmax(&self.predict_proba(x))
    }
}

pub(crate) fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_two_class() {
        let xs: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                vec![s * (1.0 + 0.1 * i as f64), 0.3 * (i as f64 - 10.0) / 10.0]
            })
            .collect();
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let m = LogReg::fit(&xs, &labels, &LogRegConfig::default()).unwrap();
        assert!(m.grad_norm < 1e-6);
        for (x, &l) in xs.iter().zip(&labels) {
            assert_eq!(m.predict(x), l);
            let p = m.predict_proba(x);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
