//! The two-part training objective: class-weighted cross-entropy over the
//! four quality classes plus binary cross-entropy over the five explanation
//! flags, combined as `total = w_q * quality + w_e * explanations`.
//!
//! Probabilities are clamped to `[LOG_EPS, 1 - LOG_EPS]` before every log.
//! Gradients treat the clamp exactly (zero slope where it saturates) so
//! finite differences match the analytic values.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ClassWeights;
use crate::network::{softmax, Scalar, EXPLANATIONS, QUALITY_CLASSES};
use crate::types::{ExplanationSet, QualityClass};

pub const LOG_EPS: f64 = 1e-7;

/// Loss term weights; the explanation term is weighted 5x by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub quality: f64,
    pub explanations: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            quality: 1.0,
            explanations: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub quality: f64,
    pub explanations: f64,
}

fn check_batch(n: usize, targets: usize, what: &str) -> Result<()> {
    if n == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    if n != targets {
        return Err(Error::Argument(format!(
            "{what}: {n} outputs but {targets} targets"
        )));
    }
    Ok(())
}

/// Multi-hot `(N, 5)` target matrix from explanation sets.
pub fn explanation_targets<F: Scalar>(sets: &[ExplanationSet]) -> Array2<F> {
    let mut z = Array2::<F>::zeros((sets.len(), EXPLANATIONS));
    for (ni, set) in sets.iter().enumerate() {
        for kind in set.iter() {
            z[[ni, kind.index()]] = F::one();
        }
    }
    z
}

/// Class-weighted quality cross-entropy over softmax probabilities:
/// `-(1 / (N * 4)) * sum_i w(y_i) * log p_i[y_i]`.
pub fn loss_quality<F: Scalar>(
    probs: &Array2<F>,
    targets: &[QualityClass],
    weights: &ClassWeights,
) -> Result<f64> {
    let (n, d) = probs.dim();
    check_batch(n, targets.len(), "quality loss")?;
    debug_assert_eq!(d, QUALITY_CLASSES);
    let mut total = 0.0;
    for (ni, &y) in targets.iter().enumerate() {
        let p = probs[[ni, y.index()]].to_f64().clamp(LOG_EPS, 1.0 - LOG_EPS);
        total -= weights.get(y) * p.ln();
    }
    Ok(total / (n * QUALITY_CLASSES) as f64)
}

/// Explanation binary cross-entropy over sigmoid probabilities:
/// `-(1 / (N * 5)) * sum_ic z*log p + (1-z)*log(1-p)`.
pub fn loss_explanations<F: Scalar>(probs: &Array2<F>, targets: &Array2<F>) -> Result<f64> {
    let (n, c) = probs.dim();
    check_batch(n, targets.dim().0, "explanation loss")?;
    debug_assert_eq!(c, EXPLANATIONS);
    let mut total = 0.0;
    for (&p, &z) in probs.iter().zip(targets.iter()) {
        let p = p.to_f64().clamp(LOG_EPS, 1.0 - LOG_EPS);
        let z = z.to_f64();
        total -= z * p.ln() + (1.0 - z) * (1.0 - p).ln();
    }
    Ok(total / (n * EXPLANATIONS) as f64)
}

pub fn total_loss(quality: f64, explanations: f64, weights: &LossWeights) -> f64 {
    weights.quality * quality + weights.explanations * explanations
}

/// Loss and logit gradients in one pass. Returns the weighted loss parts
/// plus `d total / d qual_logits` and the direct `d total / d expl_logits`
/// (the concatenation path is handled by the network backward).
pub fn loss_and_grads<F: Scalar>(
    qual_logits: &Array2<F>,
    expl_logits: &Array2<F>,
    qual_targets: &[QualityClass],
    expl_targets: &Array2<F>,
    class_weights: &ClassWeights,
    loss_weights: &LossWeights,
) -> Result<(LossParts, Array2<F>, Array2<F>)> {
    let qual_probs = softmax(qual_logits);
    let expl_probs = expl_logits.mapv(crate::network::layers::sigmoid);
    let quality = loss_quality(&qual_probs, qual_targets, class_weights)?;
    let explanations = loss_explanations(&expl_probs, expl_targets)?;

    let n = qual_logits.dim().0;

    // Quality: dL/dp_y = -w/p_y inside the clamp, zero where saturated; the
    // softmax Jacobian turns a single-component dL/dp into
    // dlogit_k = dL/dp_y * p_y * (delta_yk - p_k).
    let mut d_qual = Array2::<F>::zeros(qual_logits.raw_dim());
    let q_scale = loss_weights.quality / (n * QUALITY_CLASSES) as f64;
    for (ni, &y) in qual_targets.iter().enumerate() {
        let py = qual_probs[[ni, y.index()]].to_f64();
        if py <= LOG_EPS || py >= 1.0 - LOG_EPS {
            continue;
        }
        let w = class_weights.get(y);
        for k in 0..QUALITY_CLASSES {
            let pk = qual_probs[[ni, k]].to_f64();
            let delta = if k == y.index() { 1.0 } else { 0.0 };
            d_qual[[ni, k]] = F::from_f64(q_scale * w * (pk - delta));
        }
    }

    // Explanations: per-term clamp, then the sigmoid chain p(1-p).
    let mut d_expl = Array2::<F>::zeros(expl_logits.raw_dim());
    let e_scale = loss_weights.explanations / (n * EXPLANATIONS) as f64;
    for ((idx, &p), &z) in expl_probs.indexed_iter().zip(expl_targets.iter()) {
        let p = p.to_f64();
        let z = z.to_f64();
        let active = p > LOG_EPS && p < 1.0 - LOG_EPS;
        if !active {
            continue;
        }
        // dL/dp = -(z/p) + (1-z)/(1-p); dp/dlogit = p(1-p).
        let dldp = -(z / p) + (1.0 - z) / (1.0 - p);
        d_expl[idx] = F::from_f64(e_scale * dldp * p * (1.0 - p));
    }

    Ok((
        LossParts {
            total: total_loss(quality, explanations, loss_weights),
            quality: loss_weights.quality * quality,
            explanations: loss_weights.explanations * explanations,
        },
        d_qual,
        d_expl,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;
    use proptest::prelude::*;
    use crate::types::ExplanationKind;

    #[test]
    fn quality_loss_matches_hand_computation() {
        // Single sample, uniform probs: loss = -w * ln(0.25) / 4.
        let probs = arr2(&[[0.25f64, 0.25, 0.25, 0.25]]);
        let weights = ClassWeights::uniform();
        let loss = loss_quality(&probs, &[QualityClass::Lesion], &weights).unwrap();
        assert_abs_diff_eq!(loss, -(0.25f64.ln()) / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn class_weight_scales_quality_loss() {
        let probs = arr2(&[[0.7f64, 0.1, 0.1, 0.1]]);
        let base = loss_quality(&probs, &[QualityClass::Lesion], &ClassWeights::uniform()).unwrap();
        let weighted = loss_quality(
            &probs,
            &[QualityClass::Lesion],
            &ClassWeights { weights: [3.0, 1.0, 1.0, 1.0] },
        )
        .unwrap();
        assert_abs_diff_eq!(weighted, 3.0 * base, epsilon = 1e-12);
    }

    #[test]
    fn explanation_loss_matches_hand_computation() {
        // One sample, targets [1,0,0,0,0], probs [0.8, 0.5, ...].
        let probs = arr2(&[[0.8f64, 0.5, 0.5, 0.5, 0.5]]);
        let targets = explanation_targets::<f64>(&[ExplanationSet::from_kinds(&[
            ExplanationKind::BadFraming,
        ])]);
        let loss = loss_explanations(&probs, &targets).unwrap();
        let expect = -(0.8f64.ln() + 4.0 * 0.5f64.ln()) / 5.0;
        assert_abs_diff_eq!(loss, expect, epsilon = 1e-12);
    }

    #[test]
    fn perfect_predictions_give_near_zero_loss() {
        let probs = arr2(&[[1.0f64 - 1e-9, 1e-10, 1e-10, 1e-10]]);
        let loss = loss_quality(&probs, &[QualityClass::Lesion], &ClassWeights::uniform()).unwrap();
        assert!(loss < 1e-6);
    }

    #[test]
    fn clamp_keeps_confident_mistakes_finite() {
        let probs = arr2(&[[0.0f64, 1.0, 0.0, 0.0]]);
        let loss = loss_quality(&probs, &[QualityClass::Lesion], &ClassWeights::uniform()).unwrap();
        assert!(loss.is_finite());
        assert_abs_diff_eq!(loss, -LOG_EPS.ln() / 4.0, epsilon = 1e-9);

        let eprobs = arr2(&[[0.0f64, 1.0, 0.0, 0.0, 0.0]]);
        let targets = arr2(&[[1.0f64, 0.0, 0.0, 0.0, 0.0]]);
        assert!(loss_explanations(&eprobs, &targets).unwrap().is_finite());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = crate::rng::stream(3, "loss-fd", 0);
        let qual_logits = Array2::from_shape_fn((3, 4), |_| rand::Rng::gen_range(&mut rng, -2.0..2.0f64));
        let expl_logits = Array2::from_shape_fn((3, 5), |_| rand::Rng::gen_range(&mut rng, -2.0..2.0f64));
        let qual_targets = [QualityClass::Lesion, QualityClass::PoorQuality, QualityClass::NoSkin];
        let expl_targets = explanation_targets::<f64>(&[
            ExplanationSet::empty(),
            ExplanationSet::from_kinds(&[ExplanationKind::Blurry, ExplanationKind::BadLight]),
            ExplanationSet::empty(),
        ]);
        let cw = ClassWeights { weights: [1.0, 10.0, 4.49, 3.7] };
        let lw = LossWeights::default();

        let eval = |q: &Array2<f64>, e: &Array2<f64>| -> f64 {
            let qp = softmax(q);
            let ep = e.mapv(crate::network::layers::sigmoid);
            total_loss(
                loss_quality(&qp, &qual_targets, &cw).unwrap(),
                loss_explanations(&ep, &expl_targets).unwrap(),
                &lw,
            )
        };

        let (parts, d_qual, d_expl) =
            loss_and_grads(&qual_logits, &expl_logits, &qual_targets, &expl_targets, &cw, &lw)
                .unwrap();
        assert_abs_diff_eq!(parts.total, eval(&qual_logits, &expl_logits), epsilon = 1e-12);

        let h = 1e-6;
        for idx in [(0usize, 0usize), (1, 3), (2, 2)] {
            let mut q = qual_logits.clone();
            q[idx] += h;
            let fd = (eval(&q, &expl_logits) - eval(&qual_logits, &expl_logits)) / h;
            assert_abs_diff_eq!(fd, d_qual[idx], epsilon = 1e-5);
        }
        for idx in [(0usize, 1usize), (1, 0), (2, 4)] {
            let mut e = expl_logits.clone();
            e[idx] += h;
            let fd = (eval(&qual_logits, &e) - eval(&qual_logits, &expl_logits)) / h;
            assert_abs_diff_eq!(fd, d_expl[idx], epsilon = 1e-5);
        }
    }

    #[test]
    fn batch_size_mismatch_is_an_error() {
        let probs = arr2(&[[0.25f64, 0.25, 0.25, 0.25]]);
        assert!(loss_quality(&probs, &[], &ClassWeights::uniform()).is_err());
    }

    proptest! {
        #[test]
        fn losses_are_nonnegative_and_finite(
            qvals in proptest::collection::vec(-20.0f64..20.0, 8),
            evals in proptest::collection::vec(-20.0f64..20.0, 10),
        ) {
            let q = Array2::from_shape_vec((2, 4), qvals).unwrap();
            let e = Array2::from_shape_vec((2, 5), evals).unwrap();
            let qp = softmax(&q);
            let ep = e.mapv(crate::network::layers::sigmoid);
            let targets = explanation_targets::<f64>(&[
                ExplanationSet::empty(),
                ExplanationSet::from_kinds(&[ExplanationKind::TooFarAway]),
            ]);
            let lq = loss_quality(&qp, &[QualityClass::Lesion, QualityClass::HealthySkin], &ClassWeights::uniform()).unwrap();
            let le = loss_explanations(&ep, &targets).unwrap();
            prop_assert!(lq.is_finite() && lq >= 0.0);
            prop_assert!(le.is_finite() && le >= 0.0);
        }
    }
}
