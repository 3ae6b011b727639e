use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{spd_inverse, symmetric_eigen, Cholesky, Matrix};
use crate::scalar::{dot, lit, Scalar};

use super::{class_means, mean_vector};

/// Added to the diagonal of the within-class covariance.
pub const SW_JITTER: f64 = 1e-8;

/// `w = μ + V y + ε`, `y ~ N(0, I_q)`, `ε ~ N(0, S_w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Plda<T> {
    pub mu: Vec<T>,
    /// `D × q` eigen-voice matrix.
    pub v: Matrix<T>,
    /// `D × D` within-class covariance.
    pub sw: Matrix<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PldaInit {
    /// `V = 0`, `S_w` = total covariance.
    Zero,
    /// `V` = top-`q` principal directions of the speaker means scaled by the
    /// square root of their variances, `S_w` = within-class scatter.
    Pca,
}

/// Fitted model with the EM log-likelihood trace.
#[derive(Clone, Debug)]
pub struct PldaFit<T> {
    pub model: Plda<T>,
    /// Marginal log-likelihood of the training data before each iteration and after the last.
    pub log_likelihood: Vec<f64>,
}

struct SpeakerStats<T> {
    n: usize,
    /// Σ_j (x_ij − μ)
    sum: Vec<T>,
}

struct Centered<T> {
    speakers: Vec<SpeakerStats<T>>,
    /// Σ_ij (x_ij − μ)(x_ij − μ)ᵀ
    scatter: Matrix<T>,
    n_total: usize,
}

fn center_data<T: Scalar>(xs: &[Vec<T>], labels: &[usize], mu: &[T]) -> Centered<T> {
    let d = mu.len();
    let n_spk = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut speakers: Vec<SpeakerStats<T>> = (0..n_spk)
        .map(|_| SpeakerStats {
            n: 0,
            sum: vec![T::zero(); d],
        })
        .collect();
    let mut scatter = Matrix::zeros(d, d);
    for (x, &l) in xs.iter().zip(labels) {
        let dx: Vec<T> = x.iter().zip(mu).map(|(a, b)| *a - *b).collect();
        scatter.add_outer(&dx, &dx, T::one());
        let s = &mut speakers[l];
        s.n += 1;
        for (a, b) in s.sum.iter_mut().zip(&dx) {
            *a += *b;
        }
    }
    speakers.retain(|s| s.n > 0);
    Centered {
        speakers,
        scatter,
        n_total: xs.len(),
    }
}

/// Posterior of one speaker's latent: precision `L = I + n VᵀS⁻¹V` and mean `L⁻¹VᵀS⁻¹s`.
struct Posterior<T> {
    l_chol: Cholesky<T>,
    mean: Vec<T>,
}

impl<T: Scalar> Plda<T> {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn rank(&self) -> usize {
        self.v.cols()
    }

    /// `S_b = V Vᵀ`.
    pub fn between(&self) -> Matrix<T> {
        self.v.matmul(&self.v.transpose()).expect("shapes")
    }

    fn check(xs: &[Vec<T>], labels: &[usize]) -> Result<usize> {
        if xs.len() != labels.len() || xs.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "{} vectors, {} labels",
                xs.len(),
                labels.len()
            )));
        }
        let d = xs[0].len();
        if xs.iter().any(|x| x.len() != d) {
            return Err(Error::DimensionMismatch("PLDA inputs differ in length".into()));
        }
        Ok(d)
    }

    /// EM fit with `q` latent dimensions and `n_iter` iterations.
    pub fn fit(xs: &[Vec<T>], labels: &[usize], q: usize, n_iter: usize, init: PldaInit) -> Result<PldaFit<T>> {
        let d = Self::check(xs, labels)?;
        if q > d {
            return Err(Error::InvalidArgument(format!("rank {q} exceeds dimension {d}")));
        }
        let mu = mean_vector(xs);
        let data = center_data(xs, labels, &mu);
        if data.speakers.len() < 2 {
            return Err(Error::InvalidArgument("PLDA needs at least two speakers".into()));
        }
        let inv_n = T::one() / lit::<T>(data.n_total as f64);
        let total = data.scatter.scale(inv_n);
        let mut model = match init {
            PldaInit::Zero => Plda {
                mu: mu.clone(),
                v: Matrix::zeros(d, q),
                sw: total.clone(),
            },
            PldaInit::Pca => {
                let means: Vec<Vec<T>> = data
                    .speakers
                    .iter()
                    .map(|s| s.sum.iter().map(|x| *x / lit::<T>(s.n as f64)).collect())
                    .collect();
                let mut between = Matrix::zeros(d, d);
                for m in &means {
                    between.add_outer(m, m, T::one());
                }
                let between = between.scale(T::one() / lit::<T>(means.len() as f64));
                let (vals, vecs) = symmetric_eigen(&between)?;
                let mut v = Matrix::zeros(d, q);
                for k in 0..q {
                    let s = vals[k].max(T::zero()).sqrt();
                    for r in 0..d {
                        v[(r, k)] = vecs[(r, k)] * s;
                    }
                }
                // within-class scatter: total scatter minus the speaker-mean part
                let mut within = data.scatter.clone();
                for (s, m) in data.speakers.iter().zip(&means) {
                    within.add_outer(m, m, -lit::<T>(s.n as f64));
                }
                let mut within = within.scale(inv_n);
                within.symmetrize();
                Plda {
                    mu: mu.clone(),
                    v,
                    sw: within,
                }
            }
        };
        model.sw = regularize(model.sw)?;
        let mut ll = Vec::with_capacity(n_iter + 1);
        for _ in 0..n_iter {
            let posts = model.posteriors(&data)?;
            ll.push(model.marginal_ll(&data, &posts)?);
            model = model.m_step(&data, &posts)?;
        }
        let posts = model.posteriors(&data)?;
        ll.push(model.marginal_ll(&data, &posts)?);
        Ok(PldaFit {
            model,
            log_likelihood: ll,
        })
    }

    fn posteriors(&self, data: &Centered<T>) -> Result<Vec<Posterior<T>>> {
        let q = self.rank();
        let sw_chol = Cholesky::new(&self.sw)?;
        // S⁻¹V column by column
        let mut siv = Matrix::zeros(self.dim(), q);
        for k in 0..q {
            for (r, v) in sw_chol.solve(&self.v.col(k)).into_iter().enumerate() {
                siv[(r, k)] = v;
            }
        }
        let vt_si_v = self.v.transpose().matmul(&siv)?;
        data.speakers
            .iter()
            .map(|s| {
                let mut l = vt_si_v.scale(lit::<T>(s.n as f64));
                l.add_diagonal(T::one());
                l.symmetrize();
                let l_chol = Cholesky::new(&l)?;
                let mean = l_chol.solve(&siv.tr_matvec(&s.sum));
                Ok(Posterior { l_chol, mean })
            })
            .collect()
    }

    /// Σ_i [Σ_j log N(x_ij; 0, S_w) − ½ log|L_i| + ½ ȳ_iᵀ L_i ȳ_i].
    fn marginal_ll(&self, data: &Centered<T>, posts: &[Posterior<T>]) -> Result<f64> {
        let sw_chol = Cholesky::new(&self.sw)?;
        let d = self.dim() as f64;
        let n = data.n_total as f64;
        // Σ_ij x S⁻¹ x = tr(S⁻¹ · scatter)
        let si = sw_chol.inverse();
        let mut tr = 0.0;
        for r in 0..self.dim() {
            tr += dot(si.row(r), &data.scatter.col(r)).as_f64();
        }
        let mut ll = -0.5 * (n * d * std::f64::consts::TAU.ln() + n * sw_chol.log_det().as_f64() + tr);
        for p in posts {
            // ȳᵀ L ȳ = ȳ · (VᵀS⁻¹s)
            let l_mean = matvec_chol(&p.l_chol, &p.mean);
            ll += -0.5 * p.l_chol.log_det().as_f64() + 0.5 * dot(&p.mean, &l_mean).as_f64();
        }
        Ok(ll)
    }

    fn m_step(&self, data: &Centered<T>, posts: &[Posterior<T>]) -> Result<Self> {
        let (d, q) = (self.dim(), self.rank());
        if q == 0 {
            return Ok(Plda {
                mu: self.mu.clone(),
                v: self.v.clone(),
                sw: regularize(data.scatter.scale(T::one() / lit::<T>(data.n_total as f64)))?,
            });
        }
        let mut sy = Matrix::zeros(d, q); // Σ s_i ȳ_iᵀ
        let mut r = Matrix::zeros(q, q); // Σ n_i (L_i⁻¹ + ȳ_i ȳ_iᵀ)
        for (s, p) in data.speakers.iter().zip(posts) {
            sy.add_outer(&s.sum, &p.mean, T::one());
            let nf = lit::<T>(s.n as f64);
            r.add_scaled_inplace(&p.l_chol.inverse(), nf);
            r.add_outer(&p.mean, &p.mean, nf);
        }
        r.symmetrize();
        let v = sy.matmul(&spd_inverse(&r)?)?;
        let mut sw = data.scatter.sub(&v.matmul(&sy.transpose())?);
        sw = sw.scale(T::one() / lit::<T>(data.n_total as f64));
        sw.symmetrize();
        Ok(Plda {
            mu: self.mu.clone(),
            v,
            sw: regularize(sw)?,
        })
    }

    /// Precomputes the closed-form verification score.
    pub fn scorer(&self) -> Result<PldaScorer<T>> {
        let sb = self.between();
        let st = sb.add(&self.sw);
        let st_inv = spd_inverse(&st)?;
        // Schur complement S_t − S_b S_t⁻¹ S_b
        let mut schur = st.sub(&sb.matmul(&st_inv)?.matmul(&sb)?);
        schur.symmetrize();
        let schur_chol = Cholesky::new(&schur)?;
        let schur_inv = schur_chol.inverse();
        let mut q = st_inv.sub(&schur_inv);
        q.symmetrize();
        let p = st_inv.matmul(&sb)?.matmul(&schur_inv)?;
        let half = lit::<T>(0.5);
        let constant = half * (Cholesky::new(&st)?.log_det() - schur_chol.log_det());
        Ok(PldaScorer {
            mu: self.mu.clone(),
            q,
            p,
            constant,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text, path)
    }

    /// `plda <D> <q>`, then μ, the `D` rows of `V` and the `D` rows of `S_w`.
    pub fn to_text(&self) -> String {
        let mut s = format!("plda {} {}\n", self.dim(), self.rank());
        let mut line = |v: &[T]| {
            let parts: Vec<String> = v.iter().map(|x| format!("{:.16e}", x.as_f64())).collect();
            let _ = writeln!(s, "{}", parts.join(" "));
        };
        line(&self.mu);
        for r in 0..self.dim() {
            line(self.v.row(r));
        }
        for r in 0..self.dim() {
            line(self.sw.row(r));
        }
        s
    }

    /// Inverse of [`Plda::to_text`]; `path` only labels errors.
    pub fn parse_text(text: &str, path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::parse(path, m.to_string());
        let mut lines = text.lines();
        let head: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
        let (d, q) = match head.as_slice() {
            ["plda", d, q] => (
                d.parse::<usize>().map_err(|_| bad("bad dimension"))?,
                q.parse::<usize>().map_err(|_| bad("bad rank"))?,
            ),
            _ => return Err(bad("expected `plda <D> <q>` header")),
        };
        let mut row = |n: usize| -> Result<Vec<T>> {
            let v: Vec<T> = lines
                .next()
                .ok_or_else(|| bad("truncated model"))?
                .split_whitespace()
                .map(|t| t.parse::<f64>().map(lit::<T>).map_err(|_| bad("bad number")))
                .collect::<Result<_>>()?;
            if v.len() != n {
                return Err(bad("wrong row length"));
            }
            Ok(v)
        };
        let mu = row(d)?;
        let mut v = Vec::with_capacity(d * q);
        for _ in 0..d {
            v.extend(row(q)?);
        }
        let mut sw = Vec::with_capacity(d * d);
        for _ in 0..d {
            sw.extend(row(d)?);
        }
        Ok(Plda {
            mu,
            v: Matrix::from_vec(d, q, v)?,
            sw: Matrix::from_vec(d, d, sw)?,
        })
    }
}

fn matvec_chol<T: Scalar>(c: &Cholesky<T>, x: &[T]) -> Vec<T> {
    // L Lᵀ x
    let l = c.factor();
    let lt_x = l.tr_matvec(x);
    l.matvec(&lt_x)
}

/// Symmetric, jittered, and verified positive definite.
fn regularize<T: Scalar>(mut s: Matrix<T>) -> Result<Matrix<T>> {
    s.symmetrize();
    s.add_diagonal(lit(SW_JITTER));
    Cholesky::new(&s).map_err(|e| Error::Singular(format!("within-class covariance: {e}")))?;
    Ok(s)
}

/// `llr(e, t) = ½eᵀQe + ½tᵀQt + eᵀPt + const` on mean-removed inputs.
#[derive(Clone, Debug)]
pub struct PldaScorer<T> {
    mu: Vec<T>,
    q: Matrix<T>,
    p: Matrix<T>,
    constant: T,
}

impl<T: Scalar> PldaScorer<T> {
    pub fn llr(&self, e: &[T], t: &[T]) -> T {
        let e: Vec<T> = e.iter().zip(&self.mu).map(|(a, b)| *a - *b).collect();
        let t: Vec<T> = t.iter().zip(&self.mu).map(|(a, b)| *a - *b).collect();
        let half = lit::<T>(0.5);
        half * dot(&e, &self.q.matvec(&e))
            + half * dot(&t, &self.q.matvec(&t))
            + dot(&e, &self.p.matvec(&t))
            + self.constant
    }

    /// Score of `e` against each class's mean enrollment vector.
    pub fn classify(&self, class_enroll: &[Vec<T>], e: &[T]) -> Vec<T> {
        class_enroll.iter().map(|c| self.llr(c, e)).collect()
    }

    /// Averaged per-class enrollment vectors.
    pub fn enroll_classes(xs: &[Vec<T>], labels: &[usize], n_classes: usize) -> Result<Vec<Vec<T>>> {
        class_means(xs, labels, n_classes)
    }
}
