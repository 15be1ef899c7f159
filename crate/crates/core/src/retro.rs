//! The retrieval math: neighbor class distributions, the guidance factor
//! that reweights training losses, prediction interpolation, and the
//! attention weights for neural demonstrations.
//!
//! Everything here is pure f64 arithmetic over inputs the caller has already
//! retrieved, so each function is easy to pin with hand-computed values.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::index::Hit;
use crate::types::{ClassId, Distribution, Embedding};

/// Floor applied to the reference probability inside [`guidance_factor`] so
/// a class with zero retrieved mass yields a large but finite factor.
pub const P_REF_FLOOR: f64 = 1e-8;

/// Hyperparameters shared by training and inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RetroHyper {
    /// Neighbors retrieved per query.
    pub k: usize,
    /// Strength of the guidance term on the training loss.
    pub beta: f64,
    /// Interpolation weight on the neighbor distribution at inference.
    pub lambda: f64,
    /// Demonstrations fused per class.
    pub m: usize,
    /// Temperature for prototype scoring.
    pub tau: f64,
}

impl RetroHyper {
    pub fn new(k: usize, beta: f64, lambda: f64, m: usize, tau: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidK);
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidConfig(format!(
                "lambda must lie in [0, 1], got {lambda}"
            )));
        }
        if !beta.is_finite() || beta < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "beta must be a non-negative real, got {beta}"
            )));
        }
        if !tau.is_finite() || tau <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "tau must be positive, got {tau}"
            )));
        }
        Ok(RetroHyper {
            k,
            beta,
            lambda,
            m,
            tau,
        })
    }

    /// Labeled-corpus defaults: shallow neighborhoods and a conservative
    /// mix-in weight.
    pub fn few_shot(corpus_len: usize) -> Self {
        RetroHyper {
            k: corpus_len.saturating_sub(1).clamp(1, 8),
            beta: 0.1,
            lambda: 0.2,
            m: 1,
            tau: 0.07,
        }
    }

    /// Unlabeled-store defaults: wide neighborhoods and a neighbor-heavy mix.
    pub fn zero_shot() -> Self {
        RetroHyper {
            k: 256,
            beta: 0.1,
            lambda: 0.7,
            m: 1,
            tau: 0.07,
        }
    }
}

/// Numerically safe softmax: subtracts the max before exponentiating.
/// Shared by every exp-normalization in the crate.
pub(crate) fn softmax(scores: &[f64]) -> Vec<f64> {
    debug_assert!(!scores.is_empty());
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Exponentially-weighted vote of the neighbors, grouped by class:
/// `P(y) ∝ Σ_{i : class_i = y} exp(score_i)`.
///
/// `neighbors` pairs each retrieved entry's class with its similarity.
pub fn knn_distribution(neighbors: &[(ClassId, f32)], class_count: usize) -> Result<Distribution> {
    if neighbors.is_empty() {
        return Err(Error::EmptyNeighborhood);
    }
    let scores: Vec<f64> = neighbors.iter().map(|(_, s)| *s as f64).collect();
    let weights = softmax(&scores);
    let mut mass = vec![0.0f64; class_count];
    for ((class, _), w) in neighbors.iter().zip(&weights) {
        let slot = mass.get_mut(*class as usize).ok_or(Error::DimensionMismatch {
            expected: class_count,
            got: *class as usize + 1,
        })?;
        *slot += w;
    }
    Distribution::from_weights(mass)
}

/// Everything one retrieval produces for the training loop: which entries
/// were hit, their similarities, the neighbor class distribution, and the
/// probability that distribution assigns to a designated reference class
/// (the query's gold label during training).
#[derive(Debug, Clone)]
pub struct KnnResult {
    pub neighbor_entries: Vec<usize>,
    pub scores: Vec<f32>,
    pub p_knn: Distribution,
    pub p_ref: Option<f64>,
}

impl KnnResult {
    /// Assemble from index hits plus each hit's class.
    pub fn from_hits(
        hits: &[Hit],
        classes: &[ClassId],
        class_count: usize,
        reference: Option<ClassId>,
    ) -> Result<Self> {
        if hits.len() != classes.len() {
            return Err(Error::DimensionMismatch {
                expected: hits.len(),
                got: classes.len(),
            });
        }
        let pairs: Vec<(ClassId, f32)> = classes
            .iter()
            .zip(hits)
            .map(|(c, h)| (*c, h.score))
            .collect();
        let p_knn = knn_distribution(&pairs, class_count)?;
        let p_ref = reference.map(|c| p_knn.get(c));
        Ok(KnnResult {
            neighbor_entries: hits.iter().map(|h| h.entry).collect(),
            scores: hits.iter().map(|h| h.score).collect(),
            p_knn,
            p_ref,
        })
    }
}

/// Guidance factor `F = -ln(p_ref)`, with `p_ref` clamped to
/// `[P_REF_FLOOR, 1]`. Large when the neighbors put little mass on the
/// reference class, zero when they are certain of it.
pub fn guidance_factor(p_ref: f64) -> f64 {
    -p_ref.clamp(P_REF_FLOOR, 1.0).ln()
}

/// Scale a cross-entropy loss by how badly the neighbors cover the gold
/// class: `(1 + beta * factor) * ce`.
pub fn modulated_loss(ce: f64, factor: f64, beta: f64) -> f64 {
    (1.0 + beta * factor) * ce
}

/// Mix the model and neighbor distributions:
/// `(1 - lambda) * p_model + lambda * p_knn`.
///
/// At `lambda = 0` the result is bitwise `p_model`; at `lambda = 1` it is
/// bitwise `p_knn` (adding zero and multiplying by one are exact).
pub fn interpolate(
    p_model: &Distribution,
    p_knn: &Distribution,
    lambda: f64,
) -> Result<Distribution> {
    if p_model.len() != p_knn.len() {
        return Err(Error::DimensionMismatch {
            expected: p_model.len(),
            got: p_knn.len(),
        });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    // The limits hand back the inputs bit for bit; renormalizing would
    // perturb the last ulp whenever the incoming mass is not exactly 1.
    if lambda == 0.0 {
        return Ok(p_model.clone());
    }
    if lambda == 1.0 {
        return Ok(p_knn.clone());
    }
    let mixed: Vec<f64> = p_model
        .probs()
        .iter()
        .zip(p_knn.probs())
        .map(|(pm, pk)| (1.0 - lambda) * pm + lambda * pk)
        .collect();
    Distribution::from_weights(mixed)
}

/// Attention weights over one class's retrieved demonstrations plus their
/// weighted average vector.
#[derive(Debug, Clone)]
pub struct DemoWeights {
    /// Softmax of the query–demonstration inner products.
    pub alphas: Vec<f64>,
    /// `Σ alpha_i * demo_i`, in f64 for downstream fusion.
    pub aggregate: Vec<f64>,
}

/// Softmax-attend the query over one class's demonstration embeddings and
/// average them. The caller treats the output as a constant: no gradient
/// flows back through retrieved vectors.
pub fn demo_weights(query: &Embedding, demos: &[&Embedding]) -> Result<DemoWeights> {
    if demos.is_empty() {
        return Err(Error::EmptyNeighborhood);
    }
    let d = query.dim();
    for demo in demos {
        if demo.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: demo.dim(),
            });
        }
    }
    let sims: Vec<f64> = demos.iter().map(|c| query.dot(c) as f64).collect();
    let alphas = softmax(&sims);
    let mut aggregate = vec![0.0f64; d];
    for (alpha, demo) in alphas.iter().zip(demos) {
        for (out, v) in aggregate.iter_mut().zip(demo.values()) {
            *out += alpha * *v as f64;
        }
    }
    Ok(DemoWeights { alphas, aggregate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb(values: &[f32]) -> Embedding {
        Embedding::new(values.to_vec()).unwrap()
    }

    /// Frozen two-neighbor case. Softmax over scores (2.0, 1.0) is
    /// (e^1, e^0) / (e^1 + e^0) = (0.7310585786300049, 0.2689414213699951),
    /// computed once by hand and pinned.
    #[test]
    fn knn_distribution_matches_hand_softmax() {
        let dist = knn_distribution(&[(0, 2.0), (1, 1.0)], 2).unwrap();
        assert!((dist.get(0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!((dist.get(1) - 0.268_941_421_369_995_1).abs() < 1e-15);
    }

    /// Same-class neighbors pool their exponential weights.
    #[test]
    fn knn_distribution_pools_same_class_mass() {
        let pooled = knn_distribution(&[(0, 1.5), (0, 0.5), (1, 1.5)], 2).unwrap();
        // exp(1.5) + exp(0.5) vs exp(1.5), normalized.
        let e15 = 1.5f64.exp();
        let e05 = 0.5f64.exp();
        let expect0 = (e15 + e05) / (e15 + e05 + e15);
        assert!((pooled.get(0) - expect0).abs() < 1e-12);
    }

    /// A class absent from the neighborhood gets exactly zero mass.
    #[test]
    fn knn_distribution_gives_absent_class_exact_zero() {
        let dist = knn_distribution(&[(0, 3.0), (0, -1.0)], 3).unwrap();
        assert_eq!(dist.get(1), 0.0);
        assert_eq!(dist.get(2), 0.0);
        assert_eq!(dist.get(0), 1.0);
    }

    #[test]
    fn knn_distribution_rejects_bad_input() {
        assert!(matches!(
            knn_distribution(&[], 2),
            Err(Error::EmptyNeighborhood)
        ));
        assert!(matches!(
            knn_distribution(&[(5, 1.0)], 2),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn guidance_factor_floors_and_clamps() {
        assert_eq!(guidance_factor(1.0), 0.0);
        assert_eq!(guidance_factor(2.0), 0.0, "over-unity input clamps to 1");
        // -ln(1e-8) = 8 ln 10 = 18.420680743952367
        let floor = guidance_factor(0.0);
        assert!((floor - 18.420_680_743_952_367).abs() < 1e-12);
        assert_eq!(guidance_factor(-0.5), floor, "negative input clamps to the floor");
        assert!((guidance_factor(0.25) - 2.0f64.ln() * 2.0).abs() < 1e-12);
    }

    #[test]
    fn modulated_loss_scales_linearly() {
        assert_eq!(modulated_loss(2.0, 0.0, 0.5), 2.0);
        assert_eq!(modulated_loss(2.0, 3.0, 0.5), 5.0);
        assert_eq!(modulated_loss(0.0, 100.0, 1.0), 0.0);
    }

    #[test]
    fn interpolate_limits_are_bitwise_identities() {
        let pm = Distribution::new(vec![0.123456789, 0.876543211]).unwrap();
        let pk = Distribution::new(vec![0.999, 0.001]).unwrap();
        assert_eq!(interpolate(&pm, &pk, 0.0).unwrap(), pm);
        assert_eq!(interpolate(&pm, &pk, 1.0).unwrap(), pk);
    }

    #[test]
    fn interpolate_hand_value() {
        let pm = Distribution::new(vec![0.8, 0.2]).unwrap();
        let pk = Distribution::new(vec![0.4, 0.6]).unwrap();
        let mix = interpolate(&pm, &pk, 0.25).unwrap();
        assert!((mix.get(0) - 0.7).abs() < 1e-15);
        assert!((mix.get(1) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn interpolate_validates_inputs() {
        let pm = Distribution::uniform(2);
        let pk = Distribution::uniform(3);
        assert!(matches!(
            interpolate(&pm, &pk, 0.5),
            Err(Error::DimensionMismatch { .. })
        ));
        let pk2 = Distribution::uniform(2);
        assert!(interpolate(&pm, &pk2, 1.5).is_err());
        assert!(interpolate(&pm, &pk2, -0.1).is_err());
    }

    /// Single demonstration: alpha must be exactly 1 and the aggregate the
    /// demonstration itself.
    #[test]
    fn demo_weights_single_neighbor_is_identity() {
        let q = emb(&[0.3, -0.2]);
        let c = emb(&[1.5, 2.5]);
        let w = demo_weights(&q, &[&c]).unwrap();
        assert_eq!(w.alphas, vec![1.0]);
        assert_eq!(w.aggregate, vec![1.5, 2.5]);
    }

    /// Two demos with hand-computed attention: sims 1.0 and 0.0 give the
    /// same 0.731/0.269 split as the softmax oracle above.
    #[test]
    fn demo_weights_hand_case() {
        let q = emb(&[1.0, 0.0]);
        let c1 = emb(&[1.0, 0.0]);
        let c2 = emb(&[0.0, 1.0]);
        let w = demo_weights(&q, &[&c1, &c2]).unwrap();
        assert!((w.alphas[0] - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!((w.alphas[1] - 0.268_941_421_369_995_1).abs() < 1e-15);
        assert!((w.aggregate[0] - w.alphas[0]).abs() < 1e-15);
        assert!((w.aggregate[1] - w.alphas[1]).abs() < 1e-15);
    }

    #[test]
    fn demo_weights_rejects_empty_or_mismatched() {
        let q = emb(&[1.0, 0.0]);
        assert!(matches!(demo_weights(&q, &[]), Err(Error::EmptyNeighborhood)));
        let bad = emb(&[1.0]);
        assert!(demo_weights(&q, &[&bad]).is_err());
    }

    #[test]
    fn hyper_validation() {
        assert!(RetroHyper::new(0, 0.1, 0.2, 1, 0.07).is_err());
        assert!(RetroHyper::new(8, -0.1, 0.2, 1, 0.07).is_err());
        assert!(RetroHyper::new(8, 0.1, 1.2, 1, 0.07).is_err());
        assert!(RetroHyper::new(8, 0.1, 0.2, 1, 0.0).is_err());
        assert!(RetroHyper::new(8, 0.1, 0.2, 0, 0.07).is_ok(), "m = 0 is legal");
        let few = RetroHyper::few_shot(3);
        assert_eq!(few.k, 2, "k caps at corpus size minus one");
        let big = RetroHyper::few_shot(100);
        assert_eq!(big.k, 8);
        assert_eq!(RetroHyper::few_shot(1).k, 1, "singleton corpus keeps k = 1");
        assert_eq!(RetroHyper::zero_shot().k, 256);
    }

    proptest! {
        /// Shifting every score by a constant leaves the distribution
        /// unchanged (softmax shift invariance). The shift itself rounds in
        /// f32 — about 4e-6 of exponent wobble at |score| near 50 — so the
        /// tolerance is bounded by the input precision, not the softmax.
        #[test]
        fn knn_shift_invariance(
            scores in proptest::collection::vec(-20.0f32..20.0, 1..12),
            shift in -30.0f32..30.0,
        ) {
            let classes: Vec<ClassId> = (0..scores.len() as u32).map(|i| i % 3).collect();
            let base: Vec<(ClassId, f32)> =
                classes.iter().zip(&scores).map(|(c, s)| (*c, *s)).collect();
            let shifted: Vec<(ClassId, f32)> =
                classes.iter().zip(&scores).map(|(c, s)| (*c, *s + shift)).collect();
            let a = knn_distribution(&base, 3).unwrap();
            let b = knn_distribution(&shifted, 3).unwrap();
            for (x, y) in a.probs().iter().zip(b.probs()) {
                prop_assert!((x - y).abs() < 1e-4);
            }
        }

        /// Interpolation outputs stay on the simplex for any lambda.
        #[test]
        fn interpolate_stays_on_simplex(
            wa in proptest::collection::vec(0.01f64..10.0, 4),
            wb in proptest::collection::vec(0.01f64..10.0, 4),
            lambda in 0.0f64..=1.0,
        ) {
            let pa = Distribution::from_weights(wa).unwrap();
            let pb = Distribution::from_weights(wb).unwrap();
            let mix = interpolate(&pa, &pb, lambda).unwrap();
            let sum: f64 = mix.probs().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            for p in mix.probs() {
                prop_assert!(*p >= 0.0);
            }
        }

        /// The fused aggregate lies in the convex hull of its inputs:
        /// coordinate-wise between the min and max of the demos.
        #[test]
        fn demo_aggregate_in_convex_hull(
            demos in proptest::collection::vec(
                proptest::collection::vec(-5.0f32..5.0, 3),
                1..6
            ),
            q in proptest::collection::vec(-5.0f32..5.0, 3),
        ) {
            let demos: Vec<Embedding> =
                demos.into_iter().map(|v| Embedding::new(v).unwrap()).collect();
            let refs: Vec<&Embedding> = demos.iter().collect();
            let w = demo_weights(&Embedding::new(q).unwrap(), &refs).unwrap();
            let alpha_sum: f64 = w.alphas.iter().sum();
            prop_assert!((alpha_sum - 1.0).abs() < 1e-12);
            for j in 0..3 {
                let lo = demos.iter().map(|c| c.values()[j] as f64).fold(f64::INFINITY, f64::min);
                let hi = demos.iter().map(|c| c.values()[j] as f64).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(w.aggregate[j] >= lo - 1e-9 && w.aggregate[j] <= hi + 1e-9);
            }
        }
    }
}
