use serde::{Deserialize, Serialize};

use super::LossGrads;
use crate::error::{Error, Result};
use crate::ops::{cosine_sim, cosine_sim_backward, log_sum_exp, softmax};
use crate::tensor::Real;

/// Two item indices and their graded similarity label.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradedPair {
    pub a: usize,
    pub b: usize,
    pub label: f64,
}

impl GradedPair {
    pub fn new(a: usize, b: usize, label: f64) -> Self {
        Self { a, b, label }
    }
}

fn check_tau<T: Real>(tau: T) -> Result<()> {
    if tau > T::zero() && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("temperature tau = {tau} must be > 0")))
    }
}

/// InfoNCE on precomputed similarities: `-log softmax([s+, s-..] / tau)[0]`.
///
/// Returns the loss and its gradient with respect to each score, positive first.
pub fn info_nce_scores<T: Real>(pos: T, negs: &[T], tau: T) -> Result<(T, Vec<T>)> {
    check_tau(tau)?;
    if negs.is_empty() {
        return Err(Error::Config("contrastive loss needs at least one negative".into()));
    }
    let logits: Vec<T> = std::iter::once(pos)
        .chain(negs.iter().copied())
        .map(|s| s / tau)
        .collect();
    let shifted: Vec<T> = logits.iter().map(|&l| l - logits[0]).collect();
    let loss = if shifted.iter().all(|&z| z <= T::zero()) {
        // positive dominates: ln(1 + sum) keeps precision when the loss is tiny
        shifted[1..].iter().map(|z| z.exp()).sum::<T>().ln_1p()
    } else {
        log_sum_exp(&shifted)?
    };
    let mut d = softmax(&logits)?;
    d[0] = d[0] - T::one();
    Ok((loss, d.into_iter().map(|g| g / tau).collect()))
}

/// InfoNCE with cosine similarity between a query and its keys.
pub fn info_nce<T: Real>(q: &[T], pos: &[T], negs: &[&[T]], tau: T) -> Result<LossGrads<T>> {
    check_tau(tau)?;
    if negs.is_empty() {
        return Err(Error::Config("contrastive loss needs at least one negative".into()));
    }
    let keys: Vec<&[T]> = std::iter::once(pos).chain(negs.iter().copied()).collect();
    let scores = keys
        .iter()
        .map(|k| cosine_sim(q, k))
        .collect::<Result<Vec<_>>>()?;
    let (loss, d_scores) = info_nce_scores(scores[0], &scores[1..], tau)?;
    let mut d_q = vec![T::zero(); q.len()];
    let mut grads = Vec::with_capacity(keys.len() + 1);
    let mut key_grads = Vec::with_capacity(keys.len());
    for (k, &ds) in keys.iter().zip(&d_scores) {
        let (dq, dk) = cosine_sim_backward(q, k, ds)?;
        for (acc, g) in d_q.iter_mut().zip(dq) {
            *acc = *acc + g;
        }
        key_grads.push(dk);
    }
    grads.push(d_q);
    grads.extend(key_grads);
    Ok(LossGrads { loss, grads })
}

/// Classification as contrastive triplets: the input against its label
/// embedding, with every other label as a negative. Same form as [`info_nce`].
pub fn cls_contrastive<T: Real>(
    x: &[T],
    y_pos: &[T],
    y_negs: &[&[T]],
    tau: T,
) -> Result<LossGrads<T>> {
    info_nce(x, y_pos, y_negs, tau)
}

/// Cosent ranking loss:
/// `log(1 + sum_{label(i,j) > label(m,n)} exp((cos(m,n) - cos(i,j)) / tau))`.
pub fn cosent<T: Real>(items: &[&[T]], pairs: &[GradedPair], tau: T) -> Result<LossGrads<T>> {
    check_tau(tau)?;
    for p in pairs {
        if p.a >= items.len() || p.b >= items.len() {
            return Err(Error::range(
                "cosent pair index",
                format!("({}, {})", p.a, p.b),
                "[0, items)",
            ));
        }
    }
    let cos = pairs
        .iter()
        .map(|p| cosine_sim(items[p.a], items[p.b]))
        .collect::<Result<Vec<_>>>()?;

    // (higher-labelled pair, lower-labelled pair)
    let mut ordered = Vec::new();
    for (hi, ph) in pairs.iter().enumerate() {
        for (lo, pl) in pairs.iter().enumerate() {
            if ph.label > pl.label {
                ordered.push((hi, lo));
            }
        }
    }
    let mut grads: Vec<Vec<T>> = items.iter().map(|it| vec![T::zero(); it.len()]).collect();
    if ordered.is_empty() {
        return Ok(LossGrads {
            loss: T::zero(),
            grads,
        });
    }
    let mut exponents = Vec::with_capacity(ordered.len() + 1);
    exponents.push(T::zero());
    exponents.extend(ordered.iter().map(|&(hi, lo)| (cos[lo] - cos[hi]) / tau));
    let loss = log_sum_exp(&exponents)?;

    let mut d_cos = vec![T::zero(); pairs.len()];
    for (&(hi, lo), &z) in ordered.iter().zip(&exponents[1..]) {
        let w = (z - loss).exp() / tau;
        d_cos[lo] = d_cos[lo] + w;
        d_cos[hi] = d_cos[hi] - w;
    }
    for (p, &dc) in pairs.iter().zip(&d_cos) {
        if dc == T::zero() {
            continue;
        }
        let (da, db) = cosine_sim_backward(items[p.a], items[p.b], dc)?;
        for (acc, g) in grads[p.a].iter_mut().zip(da) {
            *acc = *acc + g;
        }
        for (acc, g) in grads[p.b].iter_mut().zip(db) {
            *acc = *acc + g;
        }
    }
    Ok(LossGrads { loss, grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numerical_gradient, GradTolerance};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TAU: f64 = 0.07;

    fn unit_at_cos(cos: f64) -> Vec<f64> {
        vec![cos, (1.0 - cos * cos).max(0.0).sqrt()]
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Softmax cross-entropy over explicit logits, target class 0.
    fn softmax_xent(logits: &[f64]) -> f64 {
        let denom: f64 = logits.iter().map(|l| l.exp()).sum();
        -(logits[0].exp() / denom).ln()
    }

    #[test]
    fn symmetric_negative_is_ln2() {
        let q = [1.0, 0.0];
        let k = unit_at_cos(0.3);
        let out = info_nce(&q, &k, &[&k], TAU).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-12);
        let cls = cls_contrastive(&q, &k, &[&k], TAU).unwrap();
        assert!((cls.loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn separated_scores_near_zero_loss() {
        let (loss, _) = info_nce_scores(1.0f64, &[-1.0], TAU).unwrap();
        // log1p(e^(-2/0.07)) evaluated at 40 digits
        assert!((loss - 3.904_687_043_2e-13).abs() < 1e-22, "{loss:e}");
    }

    #[test]
    fn matches_softmax_cross_entropy_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = rand_vec(&mut rng, 8);
        let pos = rand_vec(&mut rng, 8);
        let negs: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, 8)).collect();
        let neg_refs: Vec<&[f64]> = negs.iter().map(|v| v.as_slice()).collect();
        let out = info_nce(&q, &pos, &neg_refs, TAU).unwrap();
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            d / (na * nb)
        };
        let mut logits = vec![cos(&q, &pos) / TAU];
        logits.extend(negs.iter().map(|n| cos(&q, n) / TAU));
        assert!((out.loss - softmax_xent(&logits)).abs() < 1e-10);
        let cls = cls_contrastive(&q, &pos, &neg_refs, TAU).unwrap();
        assert_eq!(cls.loss.to_bits(), out.loss.to_bits());
    }

    #[test]
    fn five_label_classification_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_vec(&mut rng, 6);
        let labels: Vec<Vec<f64>> = (0..5).map(|_| rand_vec(&mut rng, 6)).collect();
        let negs: Vec<&[f64]> = labels[1..].iter().map(|v| v.as_slice()).collect();
        let out = cls_contrastive(&x, &labels[0], &negs, TAU).unwrap();
        let logits: Vec<f64> = labels
            .iter()
            .map(|y| crate::ops::cosine_sim(&x, y).unwrap() / TAU)
            .collect();
        assert!((out.loss - softmax_xent(&logits)).abs() < 1e-10);
    }

    #[test]
    fn configuration_errors() {
        let q = [1.0, 0.0];
        assert!(matches!(info_nce(&q, &q, &[], TAU), Err(Error::Config(_))));
        assert!(matches!(info_nce(&q, &q, &[&q], 0.0), Err(Error::Parameter(_))));
        assert!(matches!(info_nce(&q, &q, &[&q], -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn info_nce_gradients_over_seeds() {
        let tol = GradTolerance::default();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let dim = 6;
            let n = 4;
            let flat = rand_vec(&mut rng, dim * (n + 2));
            let eval = |v: &[f64]| {
                let chunks: Vec<&[f64]> = v.chunks(dim).collect();
                info_nce(chunks[0], chunks[1], &chunks[2..], TAU).unwrap().loss
            };
            let chunks: Vec<&[f64]> = flat.chunks(dim).collect();
            let out = info_nce(chunks[0], chunks[1], &chunks[2..], TAU).unwrap();
            let analytic: Vec<f64> = out.grads.concat();
            if let Err(m) = tol.compare("info_nce", &analytic, &numerical_gradient(eval, &flat, tol.h)) {
                panic!("seed {seed}: {m}");
            }
        }
    }

    #[test]
    fn cosent_empty_ordering_is_zero() {
        let a = [1.0, 0.0];
        let b = [0.5, 0.5];
        let pairs = [GradedPair::new(0, 1, 1.0), GradedPair::new(1, 0, 1.0)];
        let out = cosent(&[&a, &b], &pairs, TAU).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn cosent_two_pair_value() {
        // cos(0,1) = 0.9 labelled 1, cos(0,2) = 0.1 labelled 0
        let q = [1.0, 0.0];
        let a = unit_at_cos(0.9);
        let b = unit_at_cos(0.1);
        let pairs = [GradedPair::new(0, 1, 1.0), GradedPair::new(0, 2, 0.0)];
        let out = cosent(&[&q, &a, &b], &pairs, TAU).unwrap();
        assert!((out.loss - 1.088_008_10e-5).abs() < 1e-12, "{:e}", out.loss);
    }

    #[test]
    fn cosent_invalid_index() {
        let q = [1.0, 0.0];
        let pairs = [GradedPair::new(0, 3, 1.0)];
        assert!(matches!(cosent(&[&q], &pairs, TAU), Err(Error::Range { .. })));
    }

    #[test]
    fn cosent_matches_double_loop_oracle_and_gradients() {
        let tol = GradTolerance::default();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let dim = 5;
            let flat = rand_vec(&mut rng, dim * 5);
            let pairs: Vec<GradedPair> = (0..4)
                .map(|i| GradedPair::new(0, i + 1, rng.random_range(0..3) as f64))
                .collect();
            let eval = |v: &[f64]| {
                let items: Vec<&[f64]> = v.chunks(dim).collect();
                cosent(&items, &pairs, TAU).unwrap().loss
            };
            let items: Vec<&[f64]> = flat.chunks(dim).collect();
            let out = cosent(&items, &pairs, TAU).unwrap();

            let mut sum = 0.0;
            for pi in &pairs {
                for pm in &pairs {
                    if pi.label > pm.label {
                        let cij = crate::ops::cosine_sim(items[pi.a], items[pi.b]).unwrap();
                        let cmn = crate::ops::cosine_sim(items[pm.a], items[pm.b]).unwrap();
                        sum += ((cmn - cij) / TAU).exp();
                    }
                }
            }
            let oracle = (1.0 + sum).ln();
            assert!((out.loss - oracle).abs() <= 1e-10 * oracle.max(1.0), "seed {seed}");

            let analytic: Vec<f64> = out.grads.concat();
            if let Err(m) = tol.compare("cosent", &analytic, &numerical_gradient(eval, &flat, tol.h)) {
                panic!("seed {seed}: {m}");
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn info_nce_permutation_invariant(
            pos in -1.0f64..1.0,
            mut negs in proptest::collection::vec(-1.0f64..1.0, 1..8),
        ) {
            let (a, _) = info_nce_scores(pos, &negs, TAU).unwrap();
            negs.reverse();
            let (b, _) = info_nce_scores(pos, &negs, TAU).unwrap();
            negs.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let (c, _) = info_nce_scores(pos, &negs, TAU).unwrap();
            proptest::prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            proptest::prop_assert!((a - c).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn info_nce_monotone_in_scores(
            pos in -0.9f64..0.9,
            negs in proptest::collection::vec(-0.9f64..0.9, 1..6),
            which in 0usize..6,
        ) {
            let eps = 1e-3;
            let (base, _) = info_nce_scores(pos, &negs, TAU).unwrap();
            let (up, _) = info_nce_scores(pos + eps, &negs, TAU).unwrap();
            proptest::prop_assert!(up < base);
            let mut bumped = negs.clone();
            let i = which % negs.len();
            bumped[i] += eps;
            let (worse, _) = info_nce_scores(pos, &bumped, TAU).unwrap();
            proptest::prop_assert!(worse > base);
        }

        #[test]
        fn cosent_nonnegative(
            flat in proptest::collection::vec(-1.0f64..1.0, 12),
            labels in proptest::collection::vec(0u8..3, 3),
        ) {
            let items: Vec<&[f64]> = flat.chunks(3).collect();
            proptest::prop_assume!(items.iter().all(|v| crate::ops::l2_norm(v) > 1e-3));
            let pairs: Vec<GradedPair> = labels
                .iter()
                .enumerate()
                .map(|(i, &l)| GradedPair::new(0, i + 1, l as f64))
                .collect();
            let out = cosent(&items, &pairs, TAU).unwrap();
            proptest::prop_assert!(out.loss >= 0.0);
        }
    }
}
