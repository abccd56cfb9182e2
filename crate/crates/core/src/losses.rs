//! Cosine metric head, cross-entropy, KL divergence and the distillation
//! objectives. Probability batches are `[queries, way]` tensors.
//!
//! Every log is taken of `max(p, PROB_EPS)`, and the gradients below are the
//! exact derivatives of the clamped expressions.

use crate::error::{Result, RsadError};
use crate::nn::functional::{cosine, cosine_backward, softmax_backward, softmax_into};
use crate::nn::{Real, Tensor};

pub const PROB_EPS: f64 = 1e-8;

fn clamped_ln<T: Real>(v: T) -> T {
    v.max(T::c(PROB_EPS)).ln()
}

/// `tau * cos(query_emb[q], proto_emb[q, n])`, shape `[nq, way]`.
pub fn cosine_logits<T: Real>(query_emb: &Tensor<T>, proto_emb: &Tensor<T>, tau: f64) -> Tensor<T> {
    let (nq, way, c) = (proto_emb.shape()[0], proto_emb.shape()[1], proto_emb.shape()[2]);
    assert_eq!(query_emb.shape(), &[nq, c], "query embeddings do not match prototypes");
    let tau = T::c(tau);
    Tensor::from_fn(&[nq, way], |i| {
        let (q, n) = (i / way, i % way);
        tau * cosine(query_emb.item(q), &proto_emb.item(q)[n * c..(n + 1) * c])
    })
}

/// Gradients of [`cosine_logits`] w.r.t. both embedding tensors.
pub fn cosine_logits_backward<T: Real>(
    query_emb: &Tensor<T>,
    proto_emb: &Tensor<T>,
    d_logits: &Tensor<T>,
    tau: f64,
) -> (Tensor<T>, Tensor<T>) {
    let (nq, way, c) = (proto_emb.shape()[0], proto_emb.shape()[1], proto_emb.shape()[2]);
    let mut dq = Tensor::zeros(query_emb.shape());
    let mut dp = Tensor::zeros(proto_emb.shape());
    let tau = T::c(tau);
    for q in 0..nq {
        for n in 0..way {
            let g = tau * d_logits.data()[q * way + n];
            cosine_backward(
                query_emb.item(q),
                &proto_emb.item(q)[n * c..(n + 1) * c],
                g,
                dq.item_mut(q),
                &mut dp.item_mut(q)[n * c..(n + 1) * c],
            );
        }
    }
    (dq, dp)
}

pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let way = logits.shape()[1];
    let mut out = Tensor::zeros(logits.shape());
    for (z, p) in logits.data().chunks(way).zip(out.data_mut().chunks_mut(way)) {
        softmax_into(z, p);
    }
    out
}

/// Chains a gradient w.r.t. row-softmax outputs back to the logits.
pub fn softmax_rows_backward<T: Real>(probs: &Tensor<T>, d_probs: &Tensor<T>) -> Tensor<T> {
    let way = probs.shape()[1];
    let mut out = Tensor::zeros(probs.shape());
    for ((p, g), d) in probs
        .data()
        .chunks(way)
        .zip(d_probs.data().chunks(way))
        .zip(out.data_mut().chunks_mut(way))
    {
        softmax_backward(p, g, d);
    }
    out
}

/// Class distribution of one query: `softmax_n(tau * cos(query, proto_n))`.
pub fn classify<T: Real>(query_emb: &[T], proto_embs: &[Vec<T>], tau: f64) -> Result<Vec<T>> {
    if proto_embs.is_empty() {
        return Err(RsadError::input("classify needs at least one prototype"));
    }
    let logits: Vec<T> = proto_embs.iter().map(|p| T::c(tau) * cosine(query_emb, p)).collect();
    let mut out = vec![T::zero(); logits.len()];
    softmax_into(&logits, &mut out);
    Ok(out)
}

fn check_labels(probs: &Tensor<impl Real>, labels: &[usize]) -> Result<()> {
    let (nq, way) = (probs.shape()[0], probs.shape()[1]);
    if labels.len() != nq {
        return Err(RsadError::input(format!("{} labels for {nq} queries", labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= way) {
        return Err(RsadError::input(format!("label {y} outside {way}-way episode")));
    }
    Ok(())
}

/// Mean over queries of `-ln max(p_true, eps)`.
pub fn cross_entropy<T: Real>(probs: &Tensor<T>, labels: &[usize]) -> Result<T> {
    check_labels(probs, labels)?;
    let way = probs.shape()[1];
    let total: T = labels
        .iter()
        .enumerate()
        .map(|(q, &y)| -clamped_ln(probs.data()[q * way + y]))
        .sum();
    Ok(total / T::c(labels.len() as f64))
}

/// Gradient of [`cross_entropy`] w.r.t. the logits behind `probs`:
/// `(p - onehot) / nq`, zero for rows whose true-class probability is clamped.
pub fn cross_entropy_grad<T: Real>(probs: &Tensor<T>, labels: &[usize]) -> Tensor<T> {
    let way = probs.shape()[1];
    let inv = T::one() / T::c(labels.len() as f64);
    let mut out = Tensor::zeros(probs.shape());
    for (q, &y) in labels.iter().enumerate() {
        let p = &probs.data()[q * way..(q + 1) * way];
        if p[y] < T::c(PROB_EPS) {
            continue;
        }
        let row = &mut out.data_mut()[q * way..(q + 1) * way];
        for (n, (d, &pn)) in row.iter_mut().zip(p).enumerate() {
            *d = (pn - if n == y { T::one() } else { T::zero() }) * inv;
        }
    }
    out
}

/// `sum_i p_i (ln p_i - ln max(q_i, eps))` with `0 ln 0 = 0`.
pub fn kl_row<T: Real>(p: &[T], q: &[T]) -> T {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > T::zero())
        .map(|(&pi, &qi)| pi * (pi.ln() - clamped_ln(qi)))
        .sum()
}

fn check_pair<T: Real>(p: &Tensor<T>, q: &Tensor<T>) -> Result<()> {
    if p.shape() != q.shape() || p.shape().len() != 2 {
        return Err(RsadError::input(format!(
            "distribution batches differ: {:?} vs {:?}",
            p.shape(),
            q.shape()
        )));
    }
    Ok(())
}

/// Per-query KL(p || q), averaged over the batch.
pub fn kl_div<T: Real>(p: &Tensor<T>, q: &Tensor<T>) -> Result<T> {
    check_pair(p, q)?;
    let way = p.shape()[1];
    let total: T = p
        .data()
        .chunks(way)
        .zip(q.data().chunks(way))
        .map(|(a, b)| kl_row(a, b))
        .sum();
    Ok(total / T::c(p.shape()[0] as f64))
}

/// Gradient of [`kl_div`]`(p, q)` w.r.t. the logits behind `q`, with `p`
/// held constant.
pub fn kl_grad_target_fixed<T: Real>(p: &Tensor<T>, q: &Tensor<T>) -> Tensor<T> {
    let inv = T::one() / T::c(p.shape()[0] as f64);
    let eps = T::c(PROB_EPS);
    let dq = Tensor::from_fn(q.shape(), |i| {
        let (pi, qi) = (p.data()[i], q.data()[i]);
        if qi < eps {
            T::zero()
        } else {
            -pi / qi * inv
        }
    });
    softmax_rows_backward(q, &dq)
}

/// Gradient of [`kl_div`]`(p, q)` w.r.t. the logits behind `p`, with `q`
/// held constant.
pub fn kl_grad_source<T: Real>(p: &Tensor<T>, q: &Tensor<T>) -> Tensor<T> {
    let inv = T::one() / T::c(p.shape()[0] as f64);
    let dp = Tensor::from_fn(p.shape(), |i| {
        let (pi, qi) = (p.data()[i], q.data()[i]);
        if pi > T::zero() {
            (pi.ln() - clamped_ln(qi) + T::one()) * inv
        } else {
            T::zero()
        }
    });
    softmax_rows_backward(p, &dp)
}

/// Symmetric distillation term `KL(p_i || p_s) + KL(p_s || p_i)`.
pub fn sag_loss<T: Real>(p_i: &Tensor<T>, p_s: &Tensor<T>) -> Result<T> {
    Ok(kl_div(p_i, p_s)? + kl_div(p_s, p_i)?)
}

/// Logit gradients of `sag_loss` for each branch. In each KL term the first
/// argument is the target and carries no gradient, so branch `i` receives the
/// gradient of `KL(p_s || p_i)` only and vice versa.
pub fn sag_grads<T: Real>(p_i: &Tensor<T>, p_s: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (kl_grad_target_fixed(p_s, p_i), kl_grad_target_fixed(p_i, p_s))
}

pub fn total_loss<T: Real>(cls1: T, cls2: T, sag: T, alpha: f64) -> T {
    cls1 + cls2 + T::c(alpha) * sag
}

/// Unidirectional distillation objective `cls + alpha * KL(p_i || p_s)`.
pub fn ud_kd_loss<T: Real>(cls: T, p_i: &Tensor<T>, p_s: &Tensor<T>, alpha: f64) -> Result<T> {
    Ok(cls + T::c(alpha) * kl_div(p_i, p_s)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(rows: &[&[f64]]) -> Tensor<f64> {
        let way = rows[0].len();
        Tensor::from_vec(&[rows.len(), way], rows.concat())
    }

    #[test]
    fn classify_hand_case() {
        let q = vec![1.0, 0.0, 0.0, 0.0, 0.0];
        let protos: Vec<Vec<f64>> = (0..5)
            .map(|n| (0..5).map(|i| if i == n { 1.0 } else { 0.0 }).collect())
            .collect();
        let p = classify(&q, &protos, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 4.0)).abs() < 1e-12);
        assert!((p[1] - 1.0 / (e + 4.0)).abs() < 1e-12);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(classify::<f64>(&q, &[], 1.0).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = dist(&[&[0.2; 5]]);
        assert!((cross_entropy(&uniform, &[0]).unwrap() - 5f64.ln()).abs() < 1e-12);
        let mixed = dist(&[&[1.0, 0.0, 0.0, 0.0, 0.0], &[0.2; 5]]);
        assert!((cross_entropy(&mixed, &[0, 3]).unwrap() - 5f64.ln() / 2.0).abs() < 1e-12);
        let zero = dist(&[&[1.0, 0.0]]);
        assert!(cross_entropy(&zero, &[1]).unwrap().is_finite());
    }

    #[test]
    fn kl_cases() {
        let p = dist(&[&[1.0, 0.0]]);
        let h = dist(&[&[0.5, 0.5]]);
        assert!((kl_div(&p, &h).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert_eq!(kl_div(&h, &h).unwrap(), 0.0);
        let a = dist(&[&[0.9, 0.1]]);
        let (ab, ba) = (kl_div(&a, &h).unwrap(), kl_div(&h, &a).unwrap());
        assert!(ab > 0.0 && ba > 0.0 && (ab - ba).abs() > 1e-3);
        // second direction hits the clamp: 0.5 ln(0.5/1) + 0.5 ln(0.5/1e-8)
        let want = 2f64.ln() + 0.5 * (0.5f64).ln() + 0.5 * (0.5 / PROB_EPS).ln();
        assert!((sag_loss(&p, &h).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn sag_grad_two_class_hand_derivation() {
        // branch i gets d/dz_i KL(p_s || p_i) = (p_i - p_s) / nq per row
        let pi = dist(&[&[0.7, 0.3], &[0.2, 0.8]]);
        let ps = dist(&[&[0.4, 0.6], &[0.5, 0.5]]);
        let (gi, gs) = sag_grads(&pi, &ps);
        for k in 0..4 {
            let want_i = (pi.data()[k] - ps.data()[k]) / 2.0;
            assert!((gi.data()[k] - want_i).abs() < 1e-12);
            assert!((gs.data()[k] + want_i).abs() < 1e-12);
        }
    }

    fn logits_to_probs(z: &[f64], way: usize) -> Tensor<f64> {
        softmax_rows(&Tensor::from_vec(&[z.len() / way, way], z.to_vec()))
    }

    #[test]
    fn gradient_helpers_match_finite_differences() {
        let za = [0.3, -1.0, 0.5, 1.2, 0.1, -0.4];
        let zb = [-0.2, 0.4, 0.9, 0.0, -0.7, 0.6];
        let labels = [2, 0];
        let eps = 1e-6;
        let pa = logits_to_probs(&za, 3);
        let pb = logits_to_probs(&zb, 3);
        let grads = [
            cross_entropy_grad(&pa, &labels),
            kl_grad_target_fixed(&pb, &pa),
            kl_grad_source(&pa, &pb),
        ];
        let objectives: [&dyn Fn(&Tensor<f64>) -> f64; 3] = [
            &|p| cross_entropy(p, &labels).unwrap(),
            &|p| kl_div(&pb, p).unwrap(),
            &|p| kl_div(p, &pb).unwrap(),
        ];
        for (g, f) in grads.iter().zip(objectives) {
            for k in 0..6 {
                let (mut up, mut dn) = (za, za);
                up[k] += eps;
                dn[k] -= eps;
                let fd = (f(&logits_to_probs(&up, 3)) - f(&logits_to_probs(&dn, 3))) / (2.0 * eps);
                assert!((fd - g.data()[k]).abs() < 1e-7, "{fd} vs {}", g.data()[k]);
            }
        }
    }

    #[test]
    fn cosine_logits_backward_matches_finite_differences() {
        let q = Tensor::from_vec(&[2, 3], vec![0.5, -0.2, 1.0, 0.3, 0.3, -0.9]);
        let p = Tensor::from_fn(&[2, 2, 3], |i| ((i as f64) * 0.9).sin());
        let w = Tensor::from_vec(&[2, 2], vec![0.4, -1.0, 0.7, 0.2]);
        let f = |q: &Tensor<f64>, p: &Tensor<f64>| -> f64 {
            cosine_logits(q, p, 10.0).data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let (dq, dp) = cosine_logits_backward(&q, &p, &w, 10.0);
        let eps = 1e-6;
        for k in 0..q.len() {
            let (mut a, mut b) = (q.clone(), q.clone());
            a.data_mut()[k] += eps;
            b.data_mut()[k] -= eps;
            assert!(((f(&a, &p) - f(&b, &p)) / (2.0 * eps) - dq.data()[k]).abs() < 1e-6);
        }
        for k in 0..p.len() {
            let (mut a, mut b) = (p.clone(), p.clone());
            a.data_mut()[k] += eps;
            b.data_mut()[k] -= eps;
            assert!(((f(&q, &a) - f(&q, &b)) / (2.0 * eps) - dp.data()[k]).abs() < 1e-6);
        }
    }

    fn simplex(raw: Vec<f64>) -> Vec<f64> {
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative_and_zero_on_equal(a in prop::collection::vec(0.01f64..1.0, 5), b in prop::collection::vec(0.01f64..1.0, 5)) {
            let (p, q) = (simplex(a), simplex(b));
            prop_assert!(kl_row(&p, &q) >= -1e-12);
            prop_assert!(kl_row(&p, &p).abs() < 1e-12);
        }

        #[test]
        fn classify_ignores_embedding_scale(q in prop::collection::vec(-1.0f64..1.0, 4), s in 0.01f64..100.0, which in 0usize..3) {
            let protos: Vec<Vec<f64>> = (0..3).map(|n| (0..4).map(|i| ((n * 4 + i) as f64).sin()).collect()).collect();
            let base = classify(&q, &protos, 10.0).unwrap();
            let mut scaled = protos.clone();
            scaled[which].iter_mut().for_each(|v| *v *= s);
            let qs: Vec<f64> = q.iter().map(|v| v * s).collect();
            for other in [classify(&q, &scaled, 10.0).unwrap(), classify(&qs, &protos, 10.0).unwrap()] {
                for (x, y) in base.iter().zip(&other) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn sag_is_symmetric_and_total_is_affine(a in prop::collection::vec(0.0f64..1.0, 4), b in prop::collection::vec(0.01f64..1.0, 4), alpha in 0.0f64..10.0) {
            let p = Tensor::from_vec(&[1, 4], simplex(a.iter().map(|v| v + 1e-3).collect()));
            let q = Tensor::from_vec(&[1, 4], simplex(b));
            let s = sag_loss(&p, &q).unwrap();
            prop_assert_eq!(s, sag_loss(&q, &p).unwrap());
            prop_assert_eq!(total_loss(0.7, 0.4, s, alpha), (0.7 + 0.4) + alpha * s);
            prop_assert_eq!(total_loss(0.7, 0.4, s, 0.0), 0.7 + 0.4);
            let ud = ud_kd_loss(0.7, &p, &q, alpha).unwrap();
            let identity = total_loss(0.7, 0.4, s, alpha) - 0.4 - alpha * kl_div(&q, &p).unwrap();
            prop_assert!((ud - identity).abs() < 1e-9);
        }
    }
}
