//! Memorization analysis via influence functions.
//!
//! For a fitted model with mean training loss `L̄` and Hessian
//! `H = ∇²L̄(θ̂) + δI`, the deletion score of training example `a` against a
//! probability target `P` is
//!
//! ```text
//! S(a) = -∇P(θ̂)ᵀ H⁻¹ ∇L(a, θ̂)
//! ```
//!
//! which approximates `n · (P_without_a - P_with_a)` — positive when the
//! example props up the target probability. Everything here is explicit and
//! dense: the Hessian is materialized, damped, Cholesky-factorized, and its
//! condition number is estimated before any score is trusted. Desk-scale
//! parameter counts only.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::Serialize;

use crate::encoder::ToyEncoder;
use crate::error::{Error, Result};
use crate::par::par_map_range;
use crate::types::{ClassId, Example, LabelSpace, Template};

// ---------------------------------------------------------------------------
// Model interface

/// What the influence machinery needs from a fitted model. Gradients are
/// taken at explicit parameter vectors so the Hessian can be built by
/// finite-differencing the analytic gradient when no closed form exists.
pub trait InfluenceModel: Sync {
    fn param_count(&self) -> usize;
    fn example_count(&self) -> usize;
    /// The fitted parameters the scores are evaluated at.
    fn params(&self) -> Vec<f64>;
    /// Gradient of training example `i`'s loss at `params`.
    fn loss_grad(&self, params: &[f64], i: usize) -> Result<Vec<f64>>;
    /// Gradient of the probability the model puts on example `i`'s own gold
    /// label.
    fn self_prob_grad(&self, params: &[f64], i: usize) -> Result<Vec<f64>>;
    /// Gradient of the probability of `probe`'s gold label given its input.
    fn probe_prob_grad(&self, _params: &[f64], _probe: &Example) -> Result<Vec<f64>> {
        Err(Error::InvalidConfig(
            "model does not support probe targets".into(),
        ))
    }
    /// Closed-form mean-loss Hessian, if the model has one. `None` falls
    /// back to central differences of the mean analytic gradient.
    fn mean_loss_hessian(&self, _params: &[f64]) -> Result<Option<DMatrix<f64>>> {
        Ok(None)
    }
}

/// Whose probability each score differentiates.
#[derive(Debug, Clone)]
pub enum Target {
    /// Example `a` is scored against its own gold label: how much deleting
    /// it would drop the model's confidence on it.
    SelfLabel,
    /// Every example is scored against one fixed labeled probe.
    Probe(Example),
}

#[derive(Debug, Clone)]
pub struct InfluenceOptions {
    /// Damping values to try, smallest first; the first whose damped
    /// Hessian factorizes with an acceptable condition number wins.
    pub damping: Vec<f64>,
    pub max_condition: f64,
    /// Step for finite-difference Hessian columns.
    pub fd_step: f64,
    pub target: Target,
}

impl Default for InfluenceOptions {
    fn default() -> Self {
        InfluenceOptions {
            damping: vec![1e-4, 1e-3, 1e-2],
            max_condition: 1e8,
            fd_step: 1e-4,
            target: Target::SelfLabel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum HessianSource {
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, Serialize)]
pub struct MemorizationReport {
    /// One deletion score per training example, in example order.
    pub scores: Vec<f64>,
    /// Damping that was actually used.
    pub damping: f64,
    /// Condition estimate of the damped Hessian.
    pub condition: f64,
    pub hessian: HessianSource,
    /// No damping value met the condition bound; the largest factorizable
    /// one was used anyway. Scores are suspect.
    pub fallback: bool,
}

// ---------------------------------------------------------------------------
// Core computation

/// Compute deletion scores for every training example.
pub fn memorization_score(
    model: &dyn InfluenceModel,
    options: &InfluenceOptions,
) -> Result<MemorizationReport> {
    let n = model.example_count();
    let p = model.param_count();
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    if options.damping.is_empty()
        || options
            .damping
            .iter()
            .any(|d| !d.is_finite() || *d < 0.0)
    {
        return Err(Error::InvalidConfig(
            "damping values must be finite and >= 0".into(),
        ));
    }
    if !(options.fd_step > 0.0) || !(options.max_condition > 1.0) {
        return Err(Error::InvalidConfig(
            "fd_step must be > 0 and max_condition > 1".into(),
        ));
    }

    let params = model.params();
    if params.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: params.len(),
        });
    }

    let (hessian, source) = match model.mean_loss_hessian(&params)? {
        Some(h) => {
            if h.nrows() != p || h.ncols() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    got: h.nrows(),
                });
            }
            (h, HessianSource::Analytic)
        }
        None => (
            fd_hessian(model, &params, options.fd_step)?,
            HessianSource::FiniteDifference,
        ),
    };

    let mut damping = options.damping.clone();
    damping.sort_by(f64::total_cmp);

    let mut chosen: Option<(Cholesky<f64, Dyn>, f64, f64, bool)> = None;
    let mut last_good: Option<(Cholesky<f64, Dyn>, f64, f64)> = None;
    for &delta in &damping {
        let mut damped = hessian.clone();
        for i in 0..p {
            damped[(i, i)] += delta;
        }
        let Some(chol) = Cholesky::new(damped.clone()) else {
            continue;
        };
        let condition = condition_estimate(&damped, &chol);
        if condition <= options.max_condition {
            chosen = Some((chol, delta, condition, false));
            break;
        }
        last_good = Some((chol, delta, condition));
    }
    let (chol, delta, condition, fallback) = match (chosen, last_good) {
        (Some(c), _) => c,
        (None, Some((chol, delta, condition))) => (chol, delta, condition, true),
        (None, None) => {
            return Err(Error::SingularHessian(
                *damping.last().expect("non-empty damping"),
            ))
        }
    };

    let scores: Result<Vec<f64>> = match &options.target {
        Target::SelfLabel => par_map_range(n, |i| {
            let g = DVector::from_vec(model.loss_grad(&params, i)?);
            let z = chol.solve(&g);
            let dp = DVector::from_vec(model.self_prob_grad(&params, i)?);
            Ok(-dp.dot(&z))
        })
        .into_iter()
        .collect(),
        Target::Probe(probe) => {
            // One solve serves every example: H is symmetric, so
            // dpᵀ H⁻¹ g == (H⁻¹ dp)ᵀ g.
            let dp = DVector::from_vec(model.probe_prob_grad(&params, probe)?);
            let z = chol.solve(&dp);
            par_map_range(n, |i| {
                let g = DVector::from_vec(model.loss_grad(&params, i)?);
                Ok(-z.dot(&g))
            })
            .into_iter()
            .collect()
        }
    };

    Ok(MemorizationReport {
        scores: scores?,
        damping: delta,
        condition,
        hessian: source,
        fallback,
    })
}

/// Mean analytic loss gradient across all examples (sequential sum, so the
/// result is independent of thread count).
fn mean_grad(model: &dyn InfluenceModel, params: &[f64]) -> Result<Vec<f64>> {
    let n = model.example_count();
    let mut acc = vec![0.0; model.param_count()];
    for i in 0..n {
        let g = model.loss_grad(params, i)?;
        for (a, gi) in acc.iter_mut().zip(&g) {
            *a += gi;
        }
    }
    let inv = 1.0 / n as f64;
    for a in &mut acc {
        *a *= inv;
    }
    Ok(acc)
}

/// Central-difference Hessian of the mean loss, built column by column from
/// the analytic gradient and symmetrized.
fn fd_hessian(model: &dyn InfluenceModel, params: &[f64], step: f64) -> Result<DMatrix<f64>> {
    let p = params.len();
    let columns: Result<Vec<Vec<f64>>> = par_map_range(p, |k| {
        let mut plus = params.to_vec();
        plus[k] += step;
        let mut minus = params.to_vec();
        minus[k] -= step;
        let gp = mean_grad(model, &plus)?;
        let gm = mean_grad(model, &minus)?;
        Ok(gp
            .iter()
            .zip(&gm)
            .map(|(a, b)| (a - b) / (2.0 * step))
            .collect())
    })
    .into_iter()
    .collect();
    let columns = columns?;

    let mut h = DMatrix::zeros(p, p);
    for (k, col) in columns.iter().enumerate() {
        for (l, v) in col.iter().enumerate() {
            h[(l, k)] = *v;
        }
    }
    // Exact symmetry matters to Cholesky; differencing noise breaks it.
    let ht = h.transpose();
    Ok((h + ht) * 0.5)
}

/// Condition number estimate: power iteration for the largest eigenvalue,
/// inverse iteration through the Cholesky factor for the smallest.
/// Deterministic start vector, fixed iteration budget.
fn condition_estimate(h: &DMatrix<f64>, chol: &Cholesky<f64, Dyn>) -> f64 {
    let p = h.nrows();
    let start = DVector::from_element(p, 1.0 / (p as f64).sqrt());

    let mut v = start.clone();
    let mut lambda_max = 0.0;
    for _ in 0..100 {
        let w = h * &v;
        let norm = w.norm();
        if norm == 0.0 {
            break;
        }
        v = w / norm;
        lambda_max = v.dot(&(h * &v));
    }

    let mut u = start;
    let mut mu_max = 0.0; // largest eigenvalue of H^-1
    for _ in 0..100 {
        let w = chol.solve(&u);
        let norm = w.norm();
        if norm == 0.0 {
            break;
        }
        u = w / norm;
        mu_max = u.dot(&chol.solve(&u));
    }

    if lambda_max <= 0.0 || mu_max <= 0.0 {
        return f64::INFINITY;
    }
    lambda_max * mu_max
}

// ---------------------------------------------------------------------------
// Deciles

#[derive(Debug, Clone, Serialize)]
pub struct DecileStat {
    /// 0 holds the highest scores.
    pub decile: usize,
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Example indices in this decile, highest score first.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecileReport {
    pub deciles: Vec<DecileStat>,
    /// Share of total positive score mass held by the top decile.
    pub top_decile_share: f64,
    /// All scores are (numerically) identical, so the ranking carries no
    /// information.
    pub degenerate: bool,
}

/// Rank scores into ten buckets, highest first. Ties order by example
/// index. Needs at least ten examples.
pub fn decile_report(scores: &[f64]) -> Result<DecileReport> {
    let n = scores.len();
    if n < 10 {
        return Err(Error::CorpusTooSmall { need: 10, got: n });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidConfig(
            "scores must be finite to rank".into(),
        ));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = (hi - lo).abs() <= 1e-12 * hi.abs().max(1.0);

    let positive_total: f64 = scores.iter().filter(|s| **s > 0.0).sum();

    let mut deciles = Vec::with_capacity(10);
    for d in 0..10 {
        let start = d * n / 10;
        let end = (d + 1) * n / 10;
        let members: Vec<usize> = order[start..end].to_vec();
        let vals: Vec<f64> = members.iter().map(|&i| scores[i]).collect();
        let sum: f64 = vals.iter().sum();
        deciles.push(DecileStat {
            decile: d,
            count: members.len(),
            mean: sum / vals.len() as f64,
            min: vals.iter().cloned().fold(f64::INFINITY, f64::min),
            max: vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            members,
        });
    }

    let top_positive: f64 = deciles[0]
        .members
        .iter()
        .map(|&i| scores[i])
        .filter(|s| *s > 0.0)
        .sum();
    let top_decile_share = if positive_total > 0.0 {
        top_positive / positive_total
    } else {
        0.0
    };

    Ok(DecileReport {
        deciles,
        top_decile_share,
        degenerate,
    })
}

// ---------------------------------------------------------------------------
// Reference model: one-parameter quadratic

/// Mean of `½(θ - aᵢ)²`: everything has a closed form, which pins the
/// whole influence pipeline. At damping δ the score of example `i` is
/// exactly `(aᵢ - θ̂) / (1 + δ)` with `θ̂ = mean(a)`.
pub struct QuadraticModel {
    targets: Vec<f64>,
    theta: f64,
}

impl QuadraticModel {
    pub fn fit(targets: Vec<f64>) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if targets.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidConfig("targets must be finite".into()));
        }
        let theta = targets.iter().sum::<f64>() / targets.len() as f64;
        Ok(QuadraticModel { targets, theta })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// The exact deletion score at damping `delta`.
    pub fn exact_score(&self, i: usize, delta: f64) -> f64 {
        (self.targets[i] - self.theta) / (1.0 + delta)
    }
}

impl InfluenceModel for QuadraticModel {
    fn param_count(&self) -> usize {
        1
    }

    fn example_count(&self) -> usize {
        self.targets.len()
    }

    fn params(&self) -> Vec<f64> {
        vec![self.theta]
    }

    fn loss_grad(&self, params: &[f64], i: usize) -> Result<Vec<f64>> {
        Ok(vec![params[0] - self.targets[i]])
    }

    fn self_prob_grad(&self, _params: &[f64], _i: usize) -> Result<Vec<f64>> {
        // The "probability" is the parameter itself.
        Ok(vec![1.0])
    }

    fn mean_loss_hessian(&self, _params: &[f64]) -> Result<Option<DMatrix<f64>>> {
        Ok(Some(DMatrix::from_element(1, 1, 1.0)))
    }
}

// ---------------------------------------------------------------------------
// Reference model: ridge softmax regression

/// Multinomial logistic regression with an L2 term folded into every
/// per-example loss, fitted by Newton's method on the analytic Hessian.
/// Parameters are the weight matrix flattened row-major by class.
pub struct SoftmaxRegression {
    x: Vec<Vec<f64>>,
    y: Vec<ClassId>,
    classes: usize,
    dim: usize,
    l2: f64,
    params: Vec<f64>,
}

impl SoftmaxRegression {
    /// Fit by full Newton steps until the mean gradient is tiny.
    pub fn fit(x: Vec<Vec<f64>>, y: Vec<ClassId>, classes: usize, l2: f64) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::EmptyCorpus);
        }
        if classes < 2 {
            return Err(Error::InvalidConfig("need at least two classes".into()));
        }
        if !(l2 > 0.0) || !l2.is_finite() {
            return Err(Error::InvalidConfig(
                "l2 must be positive so the loss is strictly convex".into(),
            ));
        }
        let dim = x[0].len();
        if dim == 0 || x.iter().any(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: 0,
            });
        }
        if y.iter().any(|c| *c as usize >= classes) {
            return Err(Error::InvalidConfig("label out of range".into()));
        }

        let mut model = SoftmaxRegression {
            x,
            y,
            classes,
            dim,
            l2,
            params: vec![0.0; classes * dim],
        };
        for _ in 0..100 {
            let params = model.params.clone();
            let g = mean_grad(&model, &params)?;
            let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if gmax < 1e-12 {
                break;
            }
            let h = model
                .mean_loss_hessian(&params)?
                .expect("analytic hessian");
            let chol = Cholesky::new(h).ok_or(Error::SingularHessian(0.0))?;
            let step = chol.solve(&DVector::from_vec(g));
            for (p, s) in model.params.iter_mut().zip(step.iter()) {
                *p -= s;
            }
        }
        Ok(model)
    }

    pub fn probs(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = (0..self.classes)
            .map(|c| {
                let row = &params[c * self.dim..(c + 1) * self.dim];
                row.iter().zip(x).map(|(w, v)| w * v).sum()
            })
            .collect();
        crate::retro::softmax(&logits)
    }

    /// P(gold | x) for a training example at the fitted parameters.
    pub fn self_prob(&self, i: usize) -> f64 {
        self.probs(&self.params, &self.x[i])[self.y[i] as usize]
    }

    pub fn example(&self, i: usize) -> (&[f64], ClassId) {
        (&self.x[i], self.y[i])
    }

    /// Refit on all examples except `skip` (the leave-one-out oracle).
    pub fn refit_without(&self, skip: usize) -> Result<SoftmaxRegression> {
        let x: Vec<Vec<f64>> = self
            .x
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != skip)
            .map(|(_, r)| r.clone())
            .collect();
        let y: Vec<ClassId> = self
            .y
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != skip)
            .map(|(_, c)| *c)
            .collect();
        SoftmaxRegression::fit(x, y, self.classes, self.l2)
    }

    fn prob_grad_at(&self, params: &[f64], x: &[f64], class: ClassId) -> Vec<f64> {
        let p = self.probs(params, x);
        let py = p[class as usize];
        let mut g = vec![0.0; self.classes * self.dim];
        for c in 0..self.classes {
            let coef = py * ((c == class as usize) as i32 as f64 - p[c]);
            for (j, xj) in x.iter().enumerate() {
                g[c * self.dim + j] = coef * xj;
            }
        }
        g
    }
}

impl InfluenceModel for SoftmaxRegression {
    fn param_count(&self) -> usize {
        self.classes * self.dim
    }

    fn example_count(&self) -> usize {
        self.x.len()
    }

    fn params(&self) -> Vec<f64> {
        self.params.clone()
    }

    fn loss_grad(&self, params: &[f64], i: usize) -> Result<Vec<f64>> {
        let x = &self.x[i];
        let p = self.probs(params, x);
        let mut g = vec![0.0; self.classes * self.dim];
        for c in 0..self.classes {
            let coef = p[c] - (c == self.y[i] as usize) as i32 as f64;
            for (j, xj) in x.iter().enumerate() {
                g[c * self.dim + j] = coef * xj + self.l2 * params[c * self.dim + j];
            }
        }
        Ok(g)
    }

    fn self_prob_grad(&self, params: &[f64], i: usize) -> Result<Vec<f64>> {
        Ok(self.prob_grad_at(params, &self.x[i], self.y[i]))
    }

    fn probe_prob_grad(&self, params: &[f64], probe: &Example) -> Result<Vec<f64>> {
        let feat = probe.feature_vec().ok_or(Error::MixedModes(0))?;
        let x: Vec<f64> = feat.values().iter().map(|v| *v as f64).collect();
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(self.prob_grad_at(params, &x, probe.gold()?))
    }

    fn mean_loss_hessian(&self, params: &[f64]) -> Result<Option<DMatrix<f64>>> {
        // Mean of (diag(p) - ppᵀ) ⊗ xxᵀ plus the ridge.
        let p_total = self.classes * self.dim;
        let mut h = DMatrix::zeros(p_total, p_total);
        for (x, _) in self.x.iter().zip(&self.y) {
            let p = self.probs(params, x);
            for c in 0..self.classes {
                for c2 in 0..self.classes {
                    let coef = if c == c2 {
                        p[c] * (1.0 - p[c])
                    } else {
                        -p[c] * p[c2]
                    };
                    for (j, xj) in x.iter().enumerate() {
                        for (j2, xj2) in x.iter().enumerate() {
                            h[(c * self.dim + j, c2 * self.dim + j2)] +=
                                coef * xj * xj2;
                        }
                    }
                }
            }
        }
        h /= self.x.len() as f64;
        for i in 0..p_total {
            h[(i, i)] += self.l2;
        }
        Ok(Some(h))
    }
}

// ---------------------------------------------------------------------------
// Encoder-backed variants

/// Influence view of a trained text encoder. The per-example loss is the
/// encoder's weighted cross-entropy with the weights frozen at their final
/// training values, and probability gradients are scaled by `prob_scale`
/// (1 - lambda when predictions interpolate with a frozen neighbor vote,
/// since the vote contributes no parameter gradient).
pub struct EncoderInfluence {
    encoder: ToyEncoder,
    template: Template,
    labels: LabelSpace,
    train: Vec<Example>,
    weights: Vec<f64>,
    prob_scale: f64,
}

impl EncoderInfluence {
    pub fn new(
        encoder: ToyEncoder,
        template: Template,
        labels: LabelSpace,
        train: Vec<Example>,
        weights: Vec<f64>,
        prob_scale: f64,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if weights.len() != train.len() {
            return Err(Error::DimensionMismatch {
                expected: train.len(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(Error::InvalidConfig(
                "loss weights must be positive and finite".into(),
            ));
        }
        if !(prob_scale.is_finite() && prob_scale > 0.0 && prob_scale <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "prob_scale must be in (0, 1], got {prob_scale}"
            )));
        }
        for ex in &train {
            ex.gold()?;
            if ex.tokens().is_none() {
                return Err(Error::MixedModes(0));
            }
        }
        Ok(EncoderInfluence {
            encoder,
            template,
            labels,
            train,
            weights,
            prob_scale,
        })
    }

    fn at(&self, params: &[f64]) -> Result<ToyEncoder> {
        let mut enc = self.encoder.clone();
        enc.set_params(params)?;
        Ok(enc)
    }

    fn grad_of(&self, params: &[f64], ex: &Example, weight: f64) -> Result<(f64, Vec<f64>)> {
        let enc = self.at(params)?;
        let input = self.template.apply(ex.tokens().expect("validated text"));
        let (loss, grad) = enc.backward(&input, None, ex.gold()?, &self.labels, weight)?;
        let mut flat = grad.embed;
        flat.extend_from_slice(&grad.head);
        Ok((loss, flat))
    }
}

impl InfluenceModel for EncoderInfluence {
    fn param_count(&self) -> usize {
        self.encoder.param_count()
    }

    fn example_count(&self) -> usize {
        self.train.len()
    }

    fn params(&self) -> Vec<f64> {
        self.encoder.params()
    }

    fn loss_grad(&self, params: &[f64], i: usize) -> Result<Vec<f64>> {
        Ok(self.grad_of(params, &self.train[i], self.weights[i])?.1)
    }

    fn self_prob_grad(&self, params: &[f64], i: usize) -> Result<Vec<f64>> {
        let ex = &self.train[i];
        let enc = self.at(params)?;
        let input = self.template.apply(ex.tokens().expect("validated text"));
        let p = enc
            .class_distribution(&input, None, &self.labels)?
            .get(ex.gold()?);
        // P = exp(-CE), so dP = -P * dCE.
        let (_, g) = self.grad_of(params, ex, 1.0)?;
        Ok(g.into_iter().map(|v| -p * v * self.prob_scale).collect())
    }

    fn probe_prob_grad(&self, params: &[f64], probe: &Example) -> Result<Vec<f64>> {
        probe.gold()?;
        if probe.tokens().is_none() {
            return Err(Error::MixedModes(0));
        }
        let enc = self.at(params)?;
        let input = self.template.apply(probe.tokens().unwrap());
        let p = enc
            .class_distribution(&input, None, &self.labels)?
            .get(probe.gold()?);
        let (_, grad) = enc.backward(&input, None, probe.gold()?, &self.labels, 1.0)?;
        let mut flat = grad.embed;
        flat.extend_from_slice(&grad.head);
        Ok(flat
            .into_iter()
            .map(|v| -p * v * self.prob_scale)
            .collect())
    }
}
