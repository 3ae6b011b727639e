use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::Rng;
use crate::scalar::{lit, norm, Scalar};

use super::{relu, Affine, Checkpoint, Params};

/// Lower bound on the bottleneck norm before l2 normalization.
pub const BOTTLENECK_NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    /// Output dimension `K`.
    pub out_dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            bottleneck: 32,
            out_dim: 256,
        }
    }
}

/// Projection head: three affine layers (ReLU after the first two), l2
/// normalization of the bottleneck, then a weight-normalized affine map to `K`
/// logits whose per-row gain is fixed at one.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    pub l1: Affine<T>,
    pub l2: Affine<T>,
    pub l3: Affine<T>,
    /// Direction matrix `K × bottleneck`; rows are normalized in the forward pass.
    pub last: Matrix<T>,
}

#[derive(Clone, Debug)]
pub struct HeadCache<T> {
    pub input: Vec<T>,
    pub a1: Vec<T>,
    pub a2: Vec<T>,
    pub u: Vec<T>,
    pub u_norm: T,
    pub z: Vec<T>,
}

impl<T: Scalar> HeadParams<T> {
    pub fn init(in_dim: usize, cfg: &HeadConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.hidden == 0 || cfg.bottleneck == 0 || cfg.out_dim == 0 || in_dim == 0 {
            return Err(Error::InvalidArgument("head widths must be positive".into()));
        }
        let mut last = Affine::init(cfg.out_dim, cfg.bottleneck, rng).w;
        normalize_rows(&mut last);
        Ok(Self {
            l1: Affine::init(cfg.hidden, in_dim, rng),
            l2: Affine::init(cfg.hidden, cfg.hidden, rng),
            l3: Affine::init(cfg.bottleneck, cfg.hidden, rng),
            last,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.last.rows()
    }

    pub fn config(&self) -> HeadConfig {
        HeadConfig {
            hidden: self.l1.out_dim(),
            bottleneck: self.l3.out_dim(),
            out_dim: self.out_dim(),
        }
    }

    fn check_input(&self, e: &[T]) -> Result<()> {
        if e.len() != self.l1.in_dim() {
            return Err(Error::DimensionMismatch(format!(
                "head expects {} inputs, got {}",
                self.l1.in_dim(),
                e.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, e: &[T]) -> Result<(Vec<T>, HeadCache<T>)> {
        self.check_input(e)?;
        let a1: Vec<T> = self.l1.forward(e).into_iter().map(relu).collect();
        let a2: Vec<T> = self.l2.forward(&a1).into_iter().map(relu).collect();
        let u = self.l3.forward(&a2);
        let u_norm = norm(&u).max(lit(BOTTLENECK_NORM_FLOOR));
        let z: Vec<T> = u.iter().map(|x| *x / u_norm).collect();
        let logits = self
            .last
            .iter_rows()
            .map(|v| {
                let n = norm(v);
                crate::scalar::dot(v, &z) / n
            })
            .collect();
        Ok((
            logits,
            HeadCache {
                input: e.to_vec(),
                a1,
                a2,
                u,
                u_norm,
                z,
            },
        ))
    }

    pub fn logits(&self, e: &[T]) -> Result<Vec<T>> {
        Ok(self.forward(e)?.0)
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the input embedding.
    pub fn backward(&self, cache: &HeadCache<T>, g_logits: &[T], grads: &mut HeadParams<T>) -> Vec<T> {
        self.backward_with(cache, g_logits, grads, true)
    }

    /// As [`backward`](Self::backward); `last_layer = false` leaves the
    /// weight-normalized layer's gradient untouched.
    pub fn backward_with(
        &self,
        cache: &HeadCache<T>,
        g_logits: &[T],
        grads: &mut HeadParams<T>,
        last_layer: bool,
    ) -> Vec<T> {
        let b = self.last.cols();
        let mut g_z = vec![T::zero(); b];
        for (k, (&g, v)) in g_logits.iter().zip(self.last.iter_rows()).enumerate() {
            if g == T::zero() {
                continue;
            }
            let n = norm(v);
            let inv = T::one() / n;
            for (gz, vi) in g_z.iter_mut().zip(v) {
                *gz += g * *vi * inv;
            }
            if last_layer {
                // dlogit/dv = (z − (ŵ·z) ŵ) / ‖v‖
                let wz = crate::scalar::dot(v, &cache.z) * inv;
                for ((dv, vi), zi) in grads.last.row_mut(k).iter_mut().zip(v).zip(&cache.z) {
                    *dv += g * (*zi - wz * *vi * inv) * inv;
                }
            }
        }
        let g_u: Vec<T> = if cache.u_norm > lit(BOTTLENECK_NORM_FLOOR) {
            let gz_z = crate::scalar::dot(&g_z, &cache.z);
            g_z.iter()
                .zip(&cache.z)
                .map(|(g, z)| (*g - gz_z * *z) / cache.u_norm)
                .collect()
        } else {
            g_z.iter().map(|g| *g / cache.u_norm).collect()
        };
        let mut g_a2 = self.l3.backward(&cache.a2, &g_u, &mut grads.l3);
        mask_relu(&mut g_a2, &cache.a2);
        let mut g_a1 = self.l2.backward(&cache.a1, &g_a2, &mut grads.l2);
        mask_relu(&mut g_a1, &cache.a1);
        self.l1.backward(&cache.input, &g_a1, &mut grads.l1)
    }

    /// Restores unit-norm rows of the weight-normalized layer.
    pub fn renormalize(&mut self) {
        normalize_rows(&mut self.last);
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>, prefix: &str) -> Result<Self> {
        let h = Self {
            l1: Affine::from_checkpoint(ck, &format!("{prefix}.l1"))?,
            l2: Affine::from_checkpoint(ck, &format!("{prefix}.l2"))?,
            l3: Affine::from_checkpoint(ck, &format!("{prefix}.l3"))?,
            last: ck.get(&format!("{prefix}.last.v"))?.clone(),
        };
        if h.l2.in_dim() != h.l1.out_dim() || h.l3.in_dim() != h.l2.out_dim() || h.last.cols() != h.l3.out_dim() {
            return Err(Error::DimensionMismatch("head layers do not chain".into()));
        }
        Ok(h)
    }

    /// Name of the weight-normalized output tensor under `prefix`.
    pub fn last_layer_name(prefix: &str) -> String {
        format!("{prefix}.last.v")
    }
}

fn mask_relu<T: Scalar>(g: &mut [T], act: &[T]) {
    for (gi, a) in g.iter_mut().zip(act) {
        if *a <= T::zero() {
            *gi = T::zero();
        }
    }
}

fn normalize_rows<T: Scalar>(m: &mut Matrix<T>) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let n = norm(row);
        if n > T::zero() {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
}

impl<T: Scalar> Params<T> for HeadParams<T> {
    fn named(&self, prefix: &str) -> Vec<(String, &Matrix<T>)> {
        let mut v = self.l1.named(&format!("{prefix}.l1")).to_vec();
        v.extend(self.l2.named(&format!("{prefix}.l2")));
        v.extend(self.l3.named(&format!("{prefix}.l3")));
        v.push((Self::last_layer_name(prefix), &self.last));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut v: Vec<&mut Matrix<T>> = self.l1.tensors_mut().into_iter().collect();
        v.extend(self.l2.tensors_mut());
        v.extend(self.l3.tensors_mut());
        v.push(&mut self.last);
        v
    }

    /// Frozen directions are left bit-identical.
    fn post_step(&mut self, trainable: Option<&[bool]>) {
        if trainable.is_none_or(|m| m.last() == Some(&true)) {
            self.renormalize();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn rows_start_unit_norm() {
        let h = HeadParams::<f64>::init(8, &HeadConfig::default(), &mut rng::seeded(0)).unwrap();
        for r in h.last.iter_rows() {
            assert!((norm(r) - 1.0).abs() < 1e-12);
        }
        assert_eq!(h.out_dim(), 256);
    }

    #[test]
    fn basis_directions_read_out_the_bottleneck() {
        let cfg = HeadConfig {
            hidden: 3,
            bottleneck: 4,
            out_dim: 4,
        };
        let mut h = HeadParams::<f64>::init(2, &cfg, &mut rng::seeded(5)).unwrap();
        h.last = Matrix::identity(4);
        let (logits, cache) = h.forward(&[0.3, -0.8]).unwrap();
        for (l, z) in logits.iter().zip(&cache.z) {
            assert!((l - z).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_bottleneck_uses_the_norm_floor() {
        let cfg = HeadConfig {
            hidden: 3,
            bottleneck: 2,
            out_dim: 3,
        };
        let mut h = HeadParams::<f64>::init(2, &cfg, &mut rng::seeded(5)).unwrap();
        h.l3 = Affine::zeros(2, 3);
        let (logits, cache) = h.forward(&[1.0, 1.0]).unwrap();
        assert_eq!(cache.u_norm, BOTTLENECK_NORM_FLOOR);
        assert!(logits.iter().all(|l| *l == 0.0));
    }

    #[test]
    fn input_dimension_is_checked() {
        let h = HeadParams::<f64>::init(8, &HeadConfig::default(), &mut rng::seeded(0)).unwrap();
        assert!(h.forward(&[0.0; 7]).is_err());
    }
}
