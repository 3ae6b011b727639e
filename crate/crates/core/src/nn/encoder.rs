use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::linalg::Matrix;
use crate::rng::Rng;
use crate::scalar::{lit, Scalar};

use super::{relu, Affine, Checkpoint, Params};

/// Added to the pooled population variance before the square root.
pub const POOL_VAR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    /// Widths of the frame-level affine+ReLU layers.
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 24,
            hidden: vec![64, 64],
            embed_dim: 32,
        }
    }
}

impl EncoderConfig {
    /// Same layer types, every hidden width doubled.
    pub fn widened(&self) -> Self {
        Self {
            hidden: self.hidden.iter().map(|h| 2 * h).collect(),
            ..self.clone()
        }
    }
}

/// Which encoder parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradScope {
    All,
    /// Only the embedding affine after pooling; the frame stack is not visited.
    PostPooling,
}

/// Frame-level affine+ReLU stack, mean+std pooling over time, embedding affine.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub layers: Vec<Affine<T>>,
    pub embed: Affine<T>,
}

/// Intermediates of one forward pass.
#[derive(Clone, Debug)]
pub struct EncoderCache<T> {
    /// `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
    pub acts: Vec<Matrix<T>>,
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

impl<T: Scalar> EncoderCache<T> {
    pub fn pooled(&self) -> Vec<T> {
        let mut p = self.mean.clone();
        p.extend_from_slice(&self.std);
        p
    }
}

impl<T: Scalar> EncoderParams<T> {
    pub fn init(cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.input_dim == 0 || cfg.embed_dim == 0 || cfg.hidden.contains(&0) {
            return Err(Error::InvalidArgument("encoder widths must be positive".into()));
        }
        let mut layers = Vec::with_capacity(cfg.hidden.len());
        let mut prev = cfg.input_dim;
        for &h in &cfg.hidden {
            layers.push(Affine::init(h, prev, rng));
            prev = h;
        }
        let embed = Affine::init(cfg.embed_dim, 2 * prev, rng);
        Ok(Self { layers, embed })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(self.embed.in_dim() / 2, Affine::in_dim)
    }

    pub fn embed_dim(&self) -> usize {
        self.embed.out_dim()
    }

    pub fn config(&self) -> EncoderConfig {
        EncoderConfig {
            input_dim: self.input_dim(),
            hidden: self.layers.iter().map(Affine::out_dim).collect(),
            embed_dim: self.embed_dim(),
        }
    }

    fn frame_stack(&self, f: &FeatureMatrix<T>) -> Result<Vec<Matrix<T>>> {
        if f.n_frames() == 0 {
            return Err(Error::InvalidArgument("encoder input has no frames".into()));
        }
        if f.dim() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "encoder expects {}-dim frames, got {}",
                self.input_dim(),
                f.dim()
            )));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(f.matrix().clone());
        for layer in &self.layers {
            let mut z = layer.forward_rows(acts.last().expect("non-empty"))?;
            z.as_mut_slice().iter_mut().for_each(|v| *v = relu(*v));
            acts.push(z);
        }
        Ok(acts)
    }

    fn pool(h: &Matrix<T>) -> (Vec<T>, Vec<T>) {
        let n = lit::<T>(h.rows() as f64);
        let d = h.cols();
        let mut mean = vec![T::zero(); d];
        for row in h.iter_rows() {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += *x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![T::zero(); d];
        for row in h.iter_rows() {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                let c = *x - *m;
                *v += c * c;
            }
        }
        let floor = lit::<T>(POOL_VAR_FLOOR);
        let std = var.into_iter().map(|v| (v / n + floor).sqrt()).collect();
        (mean, std)
    }

    pub fn forward(&self, f: &FeatureMatrix<T>) -> Result<(Vec<T>, EncoderCache<T>)> {
        let acts = self.frame_stack(f)?;
        let (mean, std) = Self::pool(acts.last().expect("non-empty"));
        let cache = EncoderCache { acts, mean, std };
        let e = self.embed.forward(&cache.pooled());
        Ok((e, cache))
    }

    /// Embedding without keeping intermediates.
    pub fn embed(&self, f: &FeatureMatrix<T>) -> Result<Vec<T>> {
        Ok(self.forward(f)?.0)
    }

    /// Accumulates the gradient of `⟨g_embed, embedding⟩` into `grads`.
    pub fn backward(&self, cache: &EncoderCache<T>, g_embed: &[T], grads: &mut EncoderParams<T>, scope: GradScope) {
        let g_pooled = self.embed.backward(&cache.pooled(), g_embed, &mut grads.embed);
        if scope == GradScope::PostPooling || self.layers.is_empty() {
            return;
        }
        let h = cache.acts.last().expect("non-empty");
        let t_n = h.rows();
        let d = h.cols();
        let inv_t = T::one() / lit::<T>(t_n as f64);
        let (g_mean, g_std) = g_pooled.split_at(d);
        // d std_j / d h_tj = (h_tj − mean_j) / (T · std_j)
        let std_coef: Vec<T> = g_std.iter().zip(&cache.std).map(|(g, s)| *g * inv_t / *s).collect();
        let mut g_h = Matrix::zeros(t_n, d);
        for t in 0..t_n {
            let row = h.row(t);
            let gr = g_h.row_mut(t);
            for j in 0..d {
                gr[j] = g_mean[j] * inv_t + std_coef[j] * (row[j] - cache.mean[j]);
            }
        }
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let out = &cache.acts[li + 1];
            let inp = &cache.acts[li];
            let gl = &mut grads.layers[li];
            let need_input_grad = li > 0;
            let mut g_in = if need_input_grad {
                Matrix::zeros(t_n, layer.in_dim())
            } else {
                Matrix::zeros(0, 0)
            };
            for t in 0..t_n {
                let xt = inp.row(t);
                let yt = out.row(t);
                for (o, (&gy, &y)) in g_h.row(t).iter().zip(yt).enumerate() {
                    if y <= T::zero() || gy == T::zero() {
                        continue;
                    }
                    for (dw, x) in gl.w.row_mut(o).iter_mut().zip(xt) {
                        *dw += gy * *x;
                    }
                    gl.b.as_mut_slice()[o] += gy;
                    if need_input_grad {
                        for (gi, w) in g_in.row_mut(t).iter_mut().zip(layer.w.row(o)) {
                            *gi += gy * *w;
                        }
                    }
                }
            }
            if !need_input_grad {
                break;
            }
            g_h = g_in;
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>, prefix: &str) -> Result<Self> {
        let mut layers = Vec::new();
        while ck.has(&format!("{prefix}.layer{}.w", layers.len())) {
            layers.push(Affine::from_checkpoint(ck, &format!("{prefix}.layer{}", layers.len()))?);
        }
        let embed = Affine::from_checkpoint(ck, &format!("{prefix}.embed"))?;
        let mut prev = layers.first().map_or(embed.in_dim() / 2, Affine::in_dim);
        for l in &layers {
            if l.in_dim() != prev {
                return Err(Error::DimensionMismatch("encoder layers do not chain".into()));
            }
            prev = l.out_dim();
        }
        if embed.in_dim() != 2 * prev {
            return Err(Error::DimensionMismatch("embedding input is not 2x last width".into()));
        }
        Ok(Self { layers, embed })
    }
}

impl<T: Scalar> Params<T> for EncoderParams<T> {
    fn named(&self, prefix: &str) -> Vec<(String, &Matrix<T>)> {
        let mut v = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            v.extend(l.named(&format!("{prefix}.layer{i}")));
        }
        v.extend(self.embed.named(&format!("{prefix}.embed")));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut v = Vec::new();
        for l in self.layers.iter_mut() {
            v.extend(l.tensors_mut());
        }
        v.extend(self.embed.tensors_mut());
        v
    }
}
