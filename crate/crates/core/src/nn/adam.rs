use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{lit, Scalar};

use super::Params;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub amsgrad: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 1e-5,
            amsgrad: true,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid adam settings {self:?}")))
        }
    }
}

/// Adam moments for every tensor of a [`Params`] value, with per-tensor step
/// counts so tensors that sit out some steps still get correct bias correction.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub cfg: AdamConfig,
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
    /// Running elementwise maximum of `v`; empty unless amsgrad is on.
    pub v_max: Vec<Matrix<T>>,
    pub steps: Vec<u64>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<P: Params<T>>(params: &P, cfg: AdamConfig) -> Self {
        let zeros: Vec<Matrix<T>> = params
            .tensors()
            .iter()
            .map(|t| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        let n = zeros.len();
        let v_max = if cfg.amsgrad { zeros.clone() } else { Vec::new() };
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            v_max,
            steps: vec![0; n],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.steps.iter().copied().max().unwrap_or(0)
    }

    /// One update with learning rate `lr`. Tensors whose `trainable` flag is
    /// false are left bit-identical (no decay either). Calls
    /// [`Params::post_step`] afterwards.
    pub fn step<P: Params<T>>(&mut self, params: &mut P, grads: &P, lr: f64, trainable: Option<&[bool]>) -> Result<()> {
        let gts = grads.tensors();
        if gts.len() != self.m.len() {
            return Err(Error::DimensionMismatch(
                "optimizer state does not match parameters".into(),
            ));
        }
        if !gts.iter().all(|g| g.is_finite()) {
            return Err(Error::Diverged("non-finite gradient".into()));
        }
        let c = &self.cfg;
        let (b1, b2) = (lit::<T>(c.beta1), lit::<T>(c.beta2));
        let one = T::one();
        let eps = lit::<T>(c.eps);
        let lr_t = lit::<T>(lr);
        let decay = lit::<T>(lr * c.weight_decay);
        for (i, p) in params.tensors_mut().into_iter().enumerate() {
            if trainable.is_some_and(|mask| !mask[i]) {
                continue;
            }
            let g = gts[i];
            if g.shape() != p.shape() {
                return Err(Error::DimensionMismatch(format!("gradient shape for tensor {i}")));
            }
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = one - b1.powi(t);
            let bc2_sqrt = (one - b2.powi(t)).sqrt();
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            let mut vmax = self.v_max.get_mut(i).map(|x| x.as_mut_slice());
            for (j, (pj, gj)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
                let gj = *gj;
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let second = match vmax.as_deref_mut() {
                    Some(vm) => {
                        if v[j] > vm[j] {
                            vm[j] = v[j];
                        }
                        vm[j]
                    }
                    None => v[j],
                };
                if c.weight_decay > 0.0 {
                    *pj -= decay * *pj;
                }
                let denom = second.sqrt() / bc2_sqrt + eps;
                *pj -= lr_t * (m[j] / bc1) / denom;
            }
        }
        params.post_step(trainable);
        if !params.is_finite() {
            return Err(Error::Diverged("non-finite parameters after update".into()));
        }
        Ok(())
    }
}
