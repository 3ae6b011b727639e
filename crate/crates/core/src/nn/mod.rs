//! Differentiable building blocks with hand-derived gradients.
//!
//! Networks are plain parameter structs. A struct of the same type holds
//! gradients, so accumulation, optimizer updates and EMA all work through the
//! [`Params`] tensor views.

mod adam;
mod checkpoint;
mod encoder;
mod gradcheck;
mod head;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, FORMAT_VERSION};
pub use encoder::{EncoderCache, EncoderConfig, EncoderParams, GradScope, POOL_VAR_FLOOR};
pub use gradcheck::{grad_check, grad_check5, grad_check_params, relative_error};
pub use head::{HeadCache, HeadConfig, HeadParams, BOTTLENECK_NORM_FLOOR};

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::Rng;
use crate::scalar::{lit, Scalar};

/// A fixed, ordered collection of named tensors.
pub trait Params<T: Scalar>: Clone {
    /// Tensors in canonical order, names prefixed with `prefix`.
    fn named(&self, prefix: &str) -> Vec<(String, &Matrix<T>)>;

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>>;

    fn tensors(&self) -> Vec<&Matrix<T>> {
        self.named("").into_iter().map(|(_, t)| t).collect()
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(T::zero()));
        z
    }

    fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.as_slice().len()).sum()
    }

    fn flatten(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.n_params());
        for t in self.tensors() {
            v.extend_from_slice(t.as_slice());
        }
        v
    }

    fn unflatten(&mut self, v: &[T]) {
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.as_slice().len();
            t.as_mut_slice().copy_from_slice(&v[off..off + n]);
            off += n;
        }
        assert_eq!(off, v.len(), "flat vector length");
    }

    /// `self += s · other`.
    fn add_scaled(&mut self, other: &Self, s: T) {
        let src = other.tensors();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            dst.add_scaled_inplace(src, s);
        }
    }

    fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            t.as_mut_slice().iter_mut().for_each(|x| *x *= s);
        }
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Hook run after every optimizer update (e.g. re-normalizing rows).
    /// `trainable` is the update's per-tensor mask; `None` means all tensors moved.
    fn post_step(&mut self, _trainable: Option<&[bool]>) {}

    /// Per-tensor mask, `true` where `pred(name)` holds.
    fn mask_where(&self, pred: impl Fn(&str) -> bool) -> Vec<bool> {
        self.named("").iter().map(|(n, _)| pred(n)).collect()
    }
}

/// `y = W x + b` with `W: out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T> {
    pub w: Matrix<T>,
    pub b: Matrix<T>,
}

impl<T: Scalar> Affine<T> {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            w: Matrix::zeros(out_dim, in_dim),
            b: Matrix::zeros(1, out_dim),
        }
    }

    /// He-normal weights, zero bias.
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / in_dim.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..out_dim * in_dim).map(|_| lit::<T>(normal.sample(rng))).collect();
        Self {
            w: Matrix::from_vec(out_dim, in_dim, data).expect("shape"),
            b: Matrix::zeros(1, out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        let mut y = self.w.matvec(x);
        for (o, b) in y.iter_mut().zip(self.b.as_slice()) {
            *o += *b;
        }
        y
    }

    /// Row-wise forward for a `T × in` matrix.
    pub fn forward_rows(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.in_dim() {
            return Err(Error::DimensionMismatch(format!(
                "affine expects {} inputs, got {}",
                self.in_dim(),
                x.cols()
            )));
        }
        let mut out = Matrix::zeros(x.rows(), self.out_dim());
        for t in 0..x.rows() {
            let xt = x.row(t);
            let yt = out.row_mut(t);
            for (o, (wrow, b)) in yt.iter_mut().zip(self.w.iter_rows().zip(self.b.as_slice())) {
                *o = crate::scalar::dot(wrow, xt) + *b;
            }
        }
        Ok(out)
    }

    /// Accumulates `dW += g xᵀ`, `db += g`; returns `Wᵀ g`.
    pub fn backward(&self, x: &[T], g: &[T], grad: &mut Affine<T>) -> Vec<T> {
        grad.w.add_outer(g, x, T::one());
        for (d, gi) in grad.b.as_mut_slice().iter_mut().zip(g) {
            *d += *gi;
        }
        self.w.tr_matvec(g)
    }

    fn named<'a>(&'a self, prefix: &str) -> [(String, &'a Matrix<T>); 2] {
        [(format!("{prefix}.w"), &self.w), (format!("{prefix}.b"), &self.b)]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix<T>; 2] {
        [&mut self.w, &mut self.b]
    }

    pub(crate) fn from_checkpoint(ck: &Checkpoint<T>, prefix: &str) -> Result<Self> {
        let w = ck.get(&format!("{prefix}.w"))?.clone();
        let b = ck.get(&format!("{prefix}.b"))?.clone();
        if b.rows() != 1 || b.cols() != w.rows() {
            return Err(Error::DimensionMismatch(format!("bias shape for {prefix}")));
        }
        Ok(Self { w, b })
    }
}

impl<T: Scalar> Params<T> for Affine<T> {
    fn named(&self, prefix: &str) -> Vec<(String, &Matrix<T>)> {
        Affine::named(self, prefix).into_iter().collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        Affine::tensors_mut(self).into_iter().collect()
    }
}

/// Student/teacher network: encoder followed by the projection head.
#[derive(Clone, Debug, PartialEq)]
pub struct DinoNet<T> {
    pub encoder: EncoderParams<T>,
    pub head: HeadParams<T>,
}

impl<T: Scalar> DinoNet<T> {
    pub fn init(enc: &EncoderConfig, head: &HeadConfig, rng: &mut Rng) -> Result<Self> {
        let encoder = EncoderParams::init(enc, rng)?;
        let head = HeadParams::init(encoder.embed_dim(), head, rng)?;
        Ok(Self { encoder, head })
    }

    /// Logits only; no intermediate state is retained.
    pub fn logits(&self, f: &crate::features::FeatureMatrix<T>) -> Result<Vec<T>> {
        self.head.logits(&self.encoder.embed(f)?)
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            encoder: EncoderParams::from_checkpoint(ck, &format!("{prefix}enc"))?,
            head: HeadParams::from_checkpoint(ck, &format!("{prefix}head"))?,
        })
    }
}

impl<T: Scalar> Params<T> for DinoNet<T> {
    fn named(&self, prefix: &str) -> Vec<(String, &Matrix<T>)> {
        let mut v = self.encoder.named(&format!("{prefix}enc"));
        v.extend(self.head.named(&format!("{prefix}head")));
        v
    }

    fn post_step(&mut self, trainable: Option<&[bool]>) {
        let n_enc = self.encoder.tensors().len();
        self.head.post_step(trainable.map(|m| &m[n_enc..]));
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.head.tensors_mut());
        v
    }
}

#[inline]
pub(crate) fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}
