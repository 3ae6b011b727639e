//! Randomized gradient-check instances. Each returns the maximum elementwise
//! relative error against finite differences, or `None` when the draw puts a
//! ReLU pre-activation too close to its kink for differencing to be meaningful.

use rand::Rng as _;
use spkdino::dino::dino_loss;
use spkdino::features::FeatureMatrix;
use spkdino::linalg::Matrix;
use spkdino::nn::{
    grad_check, grad_check5, grad_check_params, DinoNet, EncoderConfig, EncoderParams, GradScope, HeadConfig,
    HeadParams, Params,
};
use spkdino::rng;
use spkdino::supervised::aam_loss;

const H: f64 = 1e-5;
const KINK: f64 = 1e-3;
/// Step of the five-point stencil.
const H5: f64 = 1e-3;

pub fn frames(t: usize, d: usize, r: &mut rng::Rng) -> FeatureMatrix<f64> {
    let rows: Vec<Vec<f64>> = (0..t)
        .map(|_| (0..d).map(|_| r.random_range(-2.0..2.0)).collect())
        .collect();
    FeatureMatrix::from_rows(&rows, 0.01).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn encoder_near_kink(enc: &EncoderParams<f64>, f: &FeatureMatrix<f64>, margin: f64) -> bool {
    let mut x = f.matrix().clone();
    for l in &enc.layers {
        let mut z = l.forward_rows(&x).unwrap();
        if z.as_slice().iter().any(|v| v.abs() < margin) {
            return true;
        }
        z.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        x = z;
    }
    false
}

fn head_near_kink(h: &HeadParams<f64>, e: &[f64], margin: f64) -> bool {
    let z1 = h.l1.forward(e);
    let a1: Vec<f64> = z1.iter().map(|v| v.max(0.0)).collect();
    z1.iter().chain(&h.l2.forward(&a1)).any(|v| v.abs() < margin)
}

fn jitter_biases(enc: &mut EncoderParams<f64>, r: &mut rng::Rng) {
    for l in enc.layers.iter_mut() {
        l.b.as_mut_slice()
            .iter_mut()
            .for_each(|b| *b = r.random_range(-0.5..0.5));
    }
}

fn jitter_head(head: &mut HeadParams<f64>, r: &mut rng::Rng) {
    for l in [&mut head.l1, &mut head.l2, &mut head.l3] {
        l.b.as_mut_slice()
            .iter_mut()
            .for_each(|b| *b = r.random_range(-0.5..0.5));
    }
    head.last
        .as_mut_slice()
        .iter_mut()
        .for_each(|v| *v *= r.random_range(0.5..2.0));
}

pub fn encoder(seed: u64) -> Option<f64> {
    let mut r = rng::seeded(seed);
    let cfg = EncoderConfig {
        input_dim: 4,
        hidden: vec![6, 5],
        embed_dim: 3,
    };
    let mut enc = EncoderParams::<f64>::init(&cfg, &mut r).unwrap();
    jitter_biases(&mut enc, &mut r);
    let f = frames(5, 4, &mut r);
    if encoder_near_kink(&enc, &f, KINK) {
        return None;
    }
    let w: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
    let (_, cache) = enc.forward(&f).unwrap();
    let mut g = enc.zeros_like();
    enc.backward(&cache, &w, &mut g, GradScope::All);
    Some(grad_check_params(&enc, &g, H, |p| dot(&p.embed(&f).unwrap(), &w)))
}

pub fn head(seed: u64) -> Option<f64> {
    let mut r = rng::seeded(seed);
    let cfg = HeadConfig {
        hidden: 6,
        bottleneck: 4,
        out_dim: 5,
    };
    let mut head = HeadParams::<f64>::init(3, &cfg, &mut r).unwrap();
    jitter_head(&mut head, &mut r);
    let e: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
    if head_near_kink(&head, &e, KINK) {
        return None;
    }
    let (_, cache) = head.forward(&e).unwrap();
    if cache.u_norm < 1e-3 {
        return None;
    }
    let w: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut g = head.zeros_like();
    let g_in = head.backward(&cache, &w, &mut g);
    let err = grad_check_params(&head, &g, H, |p| dot(&p.logits(&e).unwrap(), &w));
    let err_in = grad_check(&e, &g_in, H, |x| dot(&head.logits(x).unwrap(), &w));
    Some(err.max(err_in))
}

/// Multi-crop loss through the whole student (encoder and head), plus the
/// loss gradient with respect to the student logits themselves. The student
/// temperature makes the loss O(10), so like the AAM check this uses the
/// fourth-order stencil at a coarser step, with a kink margin to match.
pub fn dino(seed: u64) -> Option<f64> {
    let mut r = rng::seeded(seed);
    let enc_cfg = EncoderConfig {
        input_dim: 3,
        hidden: vec![5],
        embed_dim: 4,
    };
    let head_cfg = HeadConfig {
        hidden: 5,
        bottleneck: 3,
        out_dim: 6,
    };
    let mut net = DinoNet::<f64>::init(&enc_cfg, &head_cfg, &mut r).unwrap();
    jitter_biases(&mut net.encoder, &mut r);
    jitter_head(&mut net.head, &mut r);
    let views: Vec<FeatureMatrix<f64>> = [5, 5, 3, 3].iter().map(|&t| frames(t, 3, &mut r)).collect();
    let teacher: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..6).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let center: Vec<f64> = (0..6).map(|_| r.random_range(-0.2..0.2)).collect();
    for v in &views {
        let e = net.encoder.embed(v).unwrap();
        let (_, hc) = net.head.forward(&e).unwrap();
        if encoder_near_kink(&net.encoder, v, 10.0 * H5) || head_near_kink(&net.head, &e, 10.0 * H5) || hc.u_norm < 1e-2
        {
            return None;
        }
    }
    let loss_of = |p: &DinoNet<f64>| {
        let s: Vec<Vec<f64>> = views.iter().map(|v| p.logits(v).unwrap()).collect();
        dino_loss(&teacher, &s, &center, 0.1, 0.04).unwrap().0
    };
    let mut grads = net.zeros_like();
    let mut logits = Vec::new();
    let mut caches = Vec::new();
    for v in &views {
        let (e, ec) = net.encoder.forward(v).unwrap();
        let (l, hc) = net.head.forward(&e).unwrap();
        logits.push(l);
        caches.push((ec, hc));
    }
    let (_, g_logits) = dino_loss(&teacher, &logits, &center, 0.1, 0.04).unwrap();
    for ((ec, hc), gl) in caches.iter().zip(&g_logits) {
        let ge = net.head.backward(hc, gl, &mut grads.head);
        net.encoder.backward(ec, &ge, &mut grads.encoder, GradScope::All);
    }
    let mut scratch = net.clone();
    let err_net = grad_check5(&net.flatten(), &grads.flatten(), H5, |v| {
        scratch.unflatten(v);
        loss_of(&scratch)
    });
    // Head logits are cosines over τ_s, so their softmax entries reach e^-20
    // and those gradients sit below any difference quotient's roundoff; the
    // logit-level check therefore uses moderately spread logits.
    let flat: Vec<f64> = (0..views.len() * 6).map(|_| r.random_range(-0.3..0.3)).collect();
    let (_, g_flat) = dino_loss(
        &teacher,
        &flat.chunks(6).map(<[f64]>::to_vec).collect::<Vec<_>>(),
        &center,
        0.1,
        0.04,
    )
    .unwrap();
    let err_logits = grad_check5(&flat, &g_flat.concat(), H5, |x| {
        let s: Vec<Vec<f64>> = x.chunks(6).map(<[f64]>::to_vec).collect();
        dino_loss(&teacher, &s, &center, 0.1, 0.04).unwrap().0
    });
    Some(err_net.max(err_logits))
}

pub fn aam_batch(b: usize, e: usize, c: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>, Matrix<f64>) {
    let mut r = rng::seeded(seed);
    let embs = (0..b)
        .map(|_| (0..e).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let labels = (0..b).map(|_| r.random_range(0..c)).collect();
    let w = Matrix::from_vec(c, e, (0..c * e).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    (embs, labels, w)
}

/// AAM loss at scale 30, margin 0.3. The scale makes the loss O(10) while
/// saturated entries are tiny, so the fourth-order stencil is used, and each
/// embedding is differenced through its own term of the batch mean.
pub fn aam(seed: u64) -> Option<f64> {
    let (embs, labels, w) = aam_batch(6, 8, 5, seed);
    let (s, m) = (30.0, 0.3);
    let out = aam_loss(&embs, &labels, &w, s, m).unwrap();
    let b = embs.len() as f64;
    let mut worst = 0.0f64;
    for (i, (e, g)) in embs.iter().zip(&out.g_embed).enumerate() {
        let err = grad_check5(e, g, H5, |x| {
            aam_loss(&[x.to_vec()], &labels[i..=i], &w, s, m).unwrap().loss / b
        });
        worst = worst.max(err);
    }
    let err_w = grad_check5(w.as_slice(), out.g_classifier.w.as_slice(), H5, |x| {
        let wm = Matrix::from_vec(5, 8, x.to_vec()).unwrap();
        aam_loss(&embs, &labels, &wm, s, m).unwrap().loss
    });
    Some(worst.max(err_w))
}

/// Errors of the first `n` usable instances, drawing seeds from `0..`.
pub fn instances(n: usize, f: impl Fn(u64) -> Option<f64>) -> Vec<f64> {
    (0u64..).filter_map(&f).take(n).collect()
}
