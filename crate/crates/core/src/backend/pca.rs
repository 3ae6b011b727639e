use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigen, Matrix};
use crate::scalar::{lit, Scalar};

use super::mean_vector;

/// Principal components of a set of vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca<T> {
    pub mean: Vec<T>,
    /// `D × dim`, orthonormal columns.
    pub components: Matrix<T>,
    /// Sample variances along each component, non-increasing.
    pub variances: Vec<T>,
}

/// Sample covariance (divisor `n − 1`) around `mean`.
pub(crate) fn sample_covariance<T: Scalar>(xs: &[Vec<T>], mean: &[T]) -> Matrix<T> {
    let d = mean.len();
    let mut c = Matrix::zeros(d, d);
    for x in xs {
        let dx: Vec<T> = x.iter().zip(mean).map(|(a, b)| *a - *b).collect();
        c.add_outer(&dx, &dx, T::one());
    }
    c.scale(T::one() / lit::<T>((xs.len().max(2) - 1) as f64))
}

impl<T: Scalar> Pca<T> {
    pub fn fit(xs: &[Vec<T>], dim: usize) -> Result<Self> {
        let n = xs.len();
        if n < 2 {
            return Err(Error::InvalidArgument("PCA needs at least two vectors".into()));
        }
        let d = xs[0].len();
        if xs.iter().any(|x| x.len() != d) {
            return Err(Error::DimensionMismatch("PCA inputs differ in length".into()));
        }
        if dim == 0 || dim > d.min(n - 1) {
            return Err(Error::InvalidArgument(format!(
                "PCA dimension {dim} outside 1..={}",
                d.min(n - 1)
            )));
        }
        let mean = mean_vector(xs);
        let (vals, vecs) = symmetric_eigen(&sample_covariance(xs, &mean))?;
        let mut components = Matrix::zeros(d, dim);
        for k in 0..dim {
            let mut col = vecs.col(k);
            // Sign convention: the largest-magnitude entry is positive.
            let pivot = col
                .iter()
                .copied()
                .fold(T::zero(), |m, x| if x.abs() > m.abs() { x } else { m });
            if pivot < T::zero() {
                col.iter_mut().for_each(|x| *x = -*x);
            }
            for (r, v) in col.into_iter().enumerate() {
                components[(r, k)] = v;
            }
        }
        Ok(Self {
            mean,
            components,
            variances: vals.into_iter().take(dim).map(|v| v.max(T::zero())).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.components.cols()
    }

    pub fn transform(&self, x: &[T]) -> Vec<T> {
        let dx: Vec<T> = x.iter().zip(&self.mean).map(|(a, b)| *a - *b).collect();
        self.components.tr_matvec(&dx)
    }

    pub fn inverse_transform(&self, z: &[T]) -> Vec<T> {
        let mut x = self.components.matvec(z);
        for (a, m) in x.iter_mut().zip(&self.mean) {
            *a += *m;
        }
        x
    }
}
