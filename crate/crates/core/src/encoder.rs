//! A deliberately small differentiable encoder: a token embedding table,
//! mean pooling over the (templated, optionally demonstration-fused) token
//! sequence, and a linear head over label words. Forward passes, losses and
//! gradients are all hand-written in f64.
//!
//! Also hosts the prototype classifier used in feature mode, where inputs
//! are precomputed vectors instead of token sequences.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::binfmt::{Reader, Writer};
use crate::error::{Error, Result};
use crate::retro::softmax;
use crate::types::{
    verbalize, ClassId, Distribution, Embedding, LabelSpace, TemplatedTokens, TokenId,
};

const ENCODER_MAGIC: &[u8; 4] = b"RENC";
const ENCODER_VERSION: u32 = 1;
const PROTO_MAGIC: &[u8; 4] = b"RPRO";
const PROTO_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Demonstration fusion input

/// One class's fused demonstration: the attention-weighted average of its
/// retrieved neighbors plus the class's label word. The aggregate is a
/// constant with respect to the encoder parameters — only the label word
/// participates in the embedding table — so retrieval stays outside the
/// gradient path by construction.
#[derive(Debug, Clone)]
pub struct DemoSlot {
    pub aggregate: Vec<f64>,
    pub label_token: TokenId,
}

/// Demonstration slots appended to a query, one per class, in class order.
#[derive(Debug, Clone)]
pub struct FusedInput {
    pub slots: Vec<DemoSlot>,
}

// ---------------------------------------------------------------------------
// Toy encoder

/// Gradients with the same shape as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    /// `vocab_size * d`, row-major.
    pub embed: Vec<f64>,
    /// `word_count * d`, row-major.
    pub head: Vec<f64>,
}

impl Gradient {
    pub fn zeros(vocab_size: usize, word_count: usize, d: usize) -> Self {
        Gradient {
            embed: vec![0.0; vocab_size * d],
            head: vec![0.0; word_count * d],
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (a, b) in self.embed.iter_mut().zip(&other.embed) {
            *a += scale * b;
        }
        for (a, b) in self.head.iter_mut().zip(&other.head) {
            *a += scale * b;
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyEncoder {
    vocab_size: usize,
    word_count: usize,
    d: usize,
    /// Token embedding table, `vocab_size * d`.
    embed: Vec<f64>,
    /// Label-word head, `word_count * d`.
    head: Vec<f64>,
}

impl ToyEncoder {
    /// Fresh encoder: embeddings uniform in (-0.1, 0.1) from the seed, head
    /// all zeros (so an untrained encoder predicts uniform over words).
    pub fn new(vocab_size: usize, word_count: usize, d: usize, seed: u64) -> Self {
        assert!(vocab_size > 0 && word_count > 0 && d > 0);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let embed = (0..vocab_size * d)
            .map(|_| rng.random_range(-0.1..0.1))
            .collect();
        ToyEncoder {
            vocab_size,
            word_count,
            d,
            embed,
            head: vec![0.0; word_count * d],
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn word_count(&self) -> usize {
        self.word_count
    }

    pub fn param_count(&self) -> usize {
        self.embed.len() + self.head.len()
    }

    /// Flat parameter vector: embedding table rows, then head rows.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(&self.embed);
        out.extend_from_slice(&self.head);
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let split = self.embed.len();
        self.embed.copy_from_slice(&params[..split]);
        self.head.copy_from_slice(&params[split..]);
        Ok(())
    }

    fn embed_row(&self, token: TokenId) -> Result<&[f64]> {
        let t = token as usize;
        if t >= self.vocab_size {
            return Err(Error::UnknownToken(token));
        }
        Ok(&self.embed[t * self.d..(t + 1) * self.d])
    }

    fn check_fused(&self, fused: Option<&FusedInput>) -> Result<()> {
        if let Some(f) = fused {
            for slot in &f.slots {
                if slot.aggregate.len() != self.d {
                    return Err(Error::DimensionMismatch {
                        expected: self.d,
                        got: slot.aggregate.len(),
                    });
                }
                if slot.label_token as usize >= self.vocab_size {
                    return Err(Error::UnknownToken(slot.label_token));
                }
            }
        }
        Ok(())
    }

    /// Mean-pool the templated sequence, with fused demonstration slots
    /// (aggregate vector + label word embedding) appended when present.
    pub fn hidden(&self, input: &TemplatedTokens, fused: Option<&FusedInput>) -> Result<Vec<f64>> {
        self.check_fused(fused)?;
        let slots = fused.map_or(0, |f| f.slots.len());
        let n = input.tokens.len() + 2 * slots;
        debug_assert!(n > 0, "templated input always contains the mask token");
        let mut h = vec![0.0f64; self.d];
        for &token in &input.tokens {
            let row = self.embed_row(token)?;
            for (acc, v) in h.iter_mut().zip(row) {
                *acc += v;
            }
        }
        if let Some(f) = fused {
            for slot in &f.slots {
                for (acc, v) in h.iter_mut().zip(&slot.aggregate) {
                    *acc += v;
                }
                let row = self.embed_row(slot.label_token)?;
                for (acc, v) in h.iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        for v in h.iter_mut() {
            *v /= n as f64;
        }
        Ok(h)
    }

    /// The hidden state rounded to f32 — the form stored as keys and used
    /// as retrieval queries.
    pub fn encode(&self, input: &TemplatedTokens, fused: Option<&FusedInput>) -> Result<Embedding> {
        let h = self.hidden(input, fused)?;
        Embedding::new(h.into_iter().map(|v| v as f32).collect())
    }

    /// Softmax over label-word logits for a pooled hidden state.
    pub fn predict_words(&self, hidden: &[f64]) -> Result<Vec<f64>> {
        if hidden.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: hidden.len(),
            });
        }
        let logits: Vec<f64> = (0..self.word_count)
            .map(|w| {
                let row = &self.head[w * self.d..(w + 1) * self.d];
                row.iter().zip(hidden).map(|(a, b)| a * b).sum()
            })
            .collect();
        Ok(softmax(&logits))
    }

    /// Full forward pass to a class distribution.
    pub fn class_distribution(
        &self,
        input: &TemplatedTokens,
        fused: Option<&FusedInput>,
        labels: &LabelSpace,
    ) -> Result<Distribution> {
        if labels.word_count() != self.word_count {
            return Err(Error::DimensionMismatch {
                expected: self.word_count,
                got: labels.word_count(),
            });
        }
        let h = self.hidden(input, fused)?;
        verbalize(&self.predict_words(&h)?, labels)
    }

    /// Weighted cross-entropy of the gold class: `weight * -ln P(gold)`.
    pub fn loss(
        &self,
        input: &TemplatedTokens,
        fused: Option<&FusedInput>,
        gold: ClassId,
        labels: &LabelSpace,
        weight: f64,
    ) -> Result<f64> {
        let dist = self.class_distribution(input, fused, labels)?;
        if gold as usize >= dist.len() {
            return Err(Error::DimensionMismatch {
                expected: dist.len(),
                got: gold as usize + 1,
            });
        }
        Ok(weight * -dist.get(gold).ln())
    }

    /// Hand-written backward pass for [`ToyEncoder::loss`]. Returns the loss
    /// and the gradient. The unweighted gradient is computed first and
    /// scaled once by `weight` at the end, so doubling the weight doubles
    /// every component exactly and a zero weight yields exact zeros.
    ///
    /// Gradient support: only embedding rows of tokens in the input (and of
    /// fused label words) and the head are touched. Fused aggregates are
    /// constants — nothing propagates into retrieved vectors.
    pub fn backward(
        &self,
        input: &TemplatedTokens,
        fused: Option<&FusedInput>,
        gold: ClassId,
        labels: &LabelSpace,
        weight: f64,
    ) -> Result<(f64, Gradient)> {
        if labels.word_count() != self.word_count {
            return Err(Error::DimensionMismatch {
                expected: self.word_count,
                got: labels.word_count(),
            });
        }
        if gold as usize >= labels.class_count() {
            return Err(Error::DimensionMismatch {
                expected: labels.class_count(),
                got: gold as usize + 1,
            });
        }
        let h = self.hidden(input, fused)?;
        let probs = self.predict_words(&h)?;

        // Class masses under the aggregation, tracking the winning word for
        // max (ties to the lower word id, matching verbalize's fold).
        let class_count = labels.class_count();
        let mut mass = vec![0.0f64; class_count];
        let mut winner = vec![usize::MAX; class_count];
        for class in 0..class_count {
            let words = labels.words_of_class(class as ClassId);
            match labels.aggregation() {
                crate::types::Aggregation::Sum => {
                    mass[class] = words.iter().map(|w| probs[*w as usize]).sum();
                }
                crate::types::Aggregation::Max => {
                    let mut best = words[0] as usize;
                    for w in words.iter().skip(1) {
                        if probs[*w as usize] > probs[best] {
                            best = *w as usize;
                        }
                    }
                    winner[class] = best;
                    mass[class] = probs[best];
                }
            }
        }
        let z_total: f64 = mass.iter().sum();
        let gold_mass = mass[gold as usize];
        if gold_mass <= 0.0 || z_total <= 0.0 {
            return Err(Error::DegenerateDistribution);
        }
        let ce = z_total.ln() - gold_mass.ln();

        // d ce / d p_v, via the class masses.
        let mut dp = vec![0.0f64; self.word_count];
        for w in 0..self.word_count {
            let class = labels.class_of_word(w as u32) as usize;
            let dmass = match labels.aggregation() {
                crate::types::Aggregation::Sum => 1.0,
                crate::types::Aggregation::Max => {
                    if winner[class] == w {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            let dce_dmass = 1.0 / z_total
                - if class == gold as usize {
                    1.0 / gold_mass
                } else {
                    0.0
                };
            dp[w] = dmass * dce_dmass;
        }

        // Softmax backward: d ce / d z_u = p_u * (dp_u - Σ_v dp_v p_v).
        let inner: f64 = dp.iter().zip(&probs).map(|(a, b)| a * b).sum();
        let dz: Vec<f64> = probs
            .iter()
            .zip(&dp)
            .map(|(p, g)| p * (g - inner))
            .collect();

        let mut grad = Gradient::zeros(self.vocab_size, self.word_count, self.d);

        // Head rows: d ce / d W[u] = dz_u * h.
        for (u, g) in dz.iter().enumerate() {
            let row = &mut grad.head[u * self.d..(u + 1) * self.d];
            for (slot, hv) in row.iter_mut().zip(&h) {
                *slot = g * hv;
            }
        }

        // Into the pooled state: d ce / d h = Wᵀ dz.
        let mut dh = vec![0.0f64; self.d];
        for (u, g) in dz.iter().enumerate() {
            let row = &self.head[u * self.d..(u + 1) * self.d];
            for (acc, w) in dh.iter_mut().zip(row) {
                *acc += g * w;
            }
        }

        // Mean pooling fans 1/n of dh to each contributing embedding row.
        let slots = fused.map_or(0, |f| f.slots.len());
        let n = input.tokens.len() + 2 * slots;
        let inv = 1.0 / n as f64;
        let bump = |token: TokenId, grad: &mut Gradient| {
            let t = token as usize * self.d;
            for (j, g) in dh.iter().enumerate() {
                grad.embed[t + j] += inv * g;
            }
        };
        for &token in &input.tokens {
            bump(token, &mut grad);
        }
        if let Some(f) = fused {
            for slot in &f.slots {
                bump(slot.label_token, &mut grad);
            }
        }

        // One final scale keeps weighting exact.
        if weight != 1.0 {
            for g in grad.embed.iter_mut() {
                *g *= weight;
            }
            for g in grad.head.iter_mut() {
                *g *= weight;
            }
        }
        Ok((weight * ce, grad))
    }

    /// Plain SGD update: `theta -= lr * grad`.
    pub fn apply_gradient(&mut self, grad: &Gradient, lr: f64) {
        for (p, g) in self.embed.iter_mut().zip(&grad.embed) {
            *p -= lr * g;
        }
        for (p, g) in self.head.iter_mut().zip(&grad.head) {
            *p -= lr * g;
        }
    }

    // -- checkpoint format ---------------------------------------------------

    /// Serialize to the `RENC` checkpoint: magic, version, vocab size, word
    /// count, dim, then the embedding and head rows as little-endian f32.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new();
        w.push_bytes(ENCODER_MAGIC);
        w.push_u32(ENCODER_VERSION);
        w.push_u32(self.vocab_size as u32);
        w.push_u32(self.word_count as u32);
        w.push_u32(self.d as u32);
        for v in &self.embed {
            w.push_f32(*v as f32);
        }
        for v in &self.head {
            w.push_f32(*v as f32);
        }
        fs::write(path, w.into_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader::new(&data);
        let bad = |msg: &str| Error::CorruptCheckpoint(msg.to_string());
        let magic = r.take_bytes(4).ok_or_else(|| bad("file too short"))?;
        if magic != ENCODER_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.take_u32().ok_or_else(|| bad("missing version"))?;
        if version != ENCODER_VERSION {
            return Err(Error::CorruptCheckpoint(format!(
                "unsupported version {version}"
            )));
        }
        let vocab_size = r.take_u32().ok_or_else(|| bad("missing header"))? as usize;
        let word_count = r.take_u32().ok_or_else(|| bad("missing header"))? as usize;
        let d = r.take_u32().ok_or_else(|| bad("missing header"))? as usize;
        if vocab_size == 0 || word_count == 0 || d == 0 {
            return Err(bad("zero-sized header field"));
        }
        let expected = (vocab_size + word_count)
            .checked_mul(d)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| bad("header overflows"))?;
        if r.remaining() != expected {
            return Err(Error::CorruptCheckpoint(format!(
                "expected {expected} payload bytes, found {}",
                r.remaining()
            )));
        }
        let mut read_rows = |count: usize| -> Vec<f64> {
            (0..count * d)
                .map(|_| r.take_f32().expect("length pre-validated") as f64)
                .collect()
        };
        let embed = read_rows(vocab_size);
        let head = read_rows(word_count);
        Ok(ToyEncoder {
            vocab_size,
            word_count,
            d,
            embed,
            head,
        })
    }
}

// ---------------------------------------------------------------------------
// Prototype classifier (feature mode)

/// Fixed per-class weight vectors scored against feature inputs by
/// temperature-scaled cosine similarity.
#[derive(Debug, Clone)]
pub struct PrototypeClassifier {
    /// `classes * d`, row-major, f64.
    weights: Vec<f64>,
    classes: usize,
    d: usize,
    tau: f64,
}

impl PrototypeClassifier {
    pub fn new(weights: Vec<Vec<f64>>, tau: f64) -> Result<Self> {
        if weights.len() < 2 {
            return Err(Error::InvalidConfig(
                "prototype classifier needs at least two classes".into(),
            ));
        }
        if !tau.is_finite() || tau <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "tau must be positive, got {tau}"
            )));
        }
        let d = weights[0].len();
        if d == 0 {
            return Err(Error::InvalidConfig("prototype dimension is zero".into()));
        }
        let mut flat = Vec::with_capacity(weights.len() * d);
        for row in &weights {
            if row.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteEmbedding);
            }
            if row.iter().map(|v| v * v).sum::<f64>() == 0.0 {
                return Err(Error::ZeroNorm);
            }
            flat.extend_from_slice(row);
        }
        Ok(PrototypeClassifier {
            weights: flat,
            classes: weights.len(),
            d,
            tau,
        })
    }

    /// Build each class weight as the mean of shared context vectors and
    /// that class's own vector — the pooled form used when prototypes are
    /// distilled from a handful of descriptors per class.
    pub fn from_pooled(context: &[Vec<f64>], class_vecs: &[Vec<f64>], tau: f64) -> Result<Self> {
        let weights = class_vecs
            .iter()
            .map(|cv| {
                let mut acc = cv.clone();
                for ctx in context {
                    for (a, b) in acc.iter_mut().zip(ctx) {
                        *a += b;
                    }
                }
                let inv = 1.0 / (context.len() + 1) as f64;
                acc.iter_mut().for_each(|a| *a *= inv);
                acc
            })
            .collect();
        PrototypeClassifier::new(weights, tau)
    }

    pub fn class_count(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn weight(&self, class: ClassId) -> &[f64] {
        let c = class as usize;
        &self.weights[c * self.d..(c + 1) * self.d]
    }

    /// `softmax(cos(w_i, feature) / tau)` over classes.
    pub fn predict(&self, feature: &Embedding) -> Result<Distribution> {
        if feature.dim() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: feature.dim(),
            });
        }
        let fnorm = feature
            .values()
            .iter()
            .map(|v| *v as f64 * *v as f64)
            .sum::<f64>()
            .sqrt();
        if fnorm == 0.0 {
            return Err(Error::ZeroNorm);
        }
        let logits: Vec<f64> = (0..self.classes)
            .map(|c| {
                let row = &self.weights[c * self.d..(c + 1) * self.d];
                let dot: f64 = row
                    .iter()
                    .zip(feature.values())
                    .map(|(w, v)| w * *v as f64)
                    .sum();
                let wnorm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                dot / (wnorm * fnorm) / self.tau
            })
            .collect();
        Distribution::from_weights(softmax(&logits))
    }

    /// Serialize to the `RPRO` checkpoint: magic, version, class count,
    /// dim, tau, then the weight rows as little-endian f32.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new();
        w.push_bytes(PROTO_MAGIC);
        w.push_u32(PROTO_VERSION);
        w.push_u32(self.classes as u32);
        w.push_u32(self.d as u32);
        w.push_f32(self.tau as f32);
        for v in &self.weights {
            w.push_f32(*v as f32);
        }
        fs::write(path, w.into_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader::new(&data);
        let bad = |msg: &str| Error::CorruptCheckpoint(msg.to_string());
        let magic = r.take_bytes(4).ok_or_else(|| bad("file too short"))?;
        if magic != PROTO_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.take_u32().ok_or_else(|| bad("missing version"))?;
        if version != PROTO_VERSION {
            return Err(Error::CorruptCheckpoint(format!(
                "unsupported version {version}"
            )));
        }
        let classes = r.take_u32().ok_or_else(|| bad("missing header"))? as usize;
        let d = r.take_u32().ok_or_else(|| bad("missing header"))? as usize;
        let tau = r.take_f32().ok_or_else(|| bad("missing tau"))? as f64;
        let expected = classes
            .checked_mul(d)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| bad("header overflows"))?;
        if r.remaining() != expected {
            return Err(Error::CorruptCheckpoint(format!(
                "expected {expected} payload bytes, found {}",
                r.remaining()
            )));
        }
        let mut rows = Vec::with_capacity(classes);
        for _ in 0..classes {
            rows.push(
                (0..d)
                    .map(|_| r.take_f32().expect("length pre-validated") as f64)
                    .collect::<Vec<f64>>(),
            );
        }
        PrototypeClassifier::new(rows, tau)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Aggregation, Vocab};

    fn labels(vocab: &Vocab, agg: Aggregation) -> LabelSpace {
        LabelSpace::parse("pos\tgood,fine\nneg\tbad\n", Some(vocab), agg).unwrap()
    }

    fn vocab() -> Vocab {
        Vocab::from_tokens([
            "[MASK]", "good", "fine", "bad", "a", "b", "c", "d", "e", "f",
        ])
        .unwrap()
    }

    fn randomized(seed: u64, vocab_size: usize, words: usize, d: usize) -> ToyEncoder {
        // Head starts at zero by design, which would zero out the embedding
        // gradients; give every parameter a random value for gradient tests.
        let mut enc = ToyEncoder::new(vocab_size, words, d, seed);
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed);
        let params: Vec<f64> = (0..enc.param_count())
            .map(|_| rng.random_range(-0.5..0.5))
            .collect();
        enc.set_params(&params).unwrap();
        enc
    }

    fn sample_fused(enc: &ToyEncoder, seed: u64) -> FusedInput {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        FusedInput {
            slots: vec![
                DemoSlot {
                    aggregate: (0..enc.dim()).map(|_| rng.random_range(-0.3..0.3)).collect(),
                    label_token: 1,
                },
                DemoSlot {
                    aggregate: (0..enc.dim()).map(|_| rng.random_range(-0.3..0.3)).collect(),
                    label_token: 3,
                },
            ],
        }
    }

    fn input(tokens: &[TokenId]) -> TemplatedTokens {
        TemplatedTokens {
            tokens: tokens.to_vec(),
            mask_pos: tokens.len() - 1,
        }
    }

    /// Relative-or-absolute error used by all gradient comparisons here.
    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
    }

    /// Central finite differences over every parameter.
    fn fd_gradient(
        enc: &ToyEncoder,
        x: &TemplatedTokens,
        fused: Option<&FusedInput>,
        gold: ClassId,
        labels: &LabelSpace,
        weight: f64,
        step: f64,
    ) -> Vec<f64> {
        let theta = enc.params();
        (0..theta.len())
            .map(|i| {
                let mut plus = theta.clone();
                plus[i] += step;
                let mut minus = theta.clone();
                minus[i] -= step;
                let mut ep = enc.clone();
                ep.set_params(&plus).unwrap();
                let mut em = enc.clone();
                em.set_params(&minus).unwrap();
                let lp = ep.loss(x, fused, gold, labels, weight).unwrap();
                let lm = em.loss(x, fused, gold, labels, weight).unwrap();
                (lp - lm) / (2.0 * step)
            })
            .collect()
    }

    #[test]
    fn hidden_is_mean_of_rows() {
        let enc = randomized(1, 10, 3, 4);
        let x = input(&[4, 5, 0]);
        let h = enc.hidden(&x, None).unwrap();
        for j in 0..4 {
            let manual = (enc.embed_row(4).unwrap()[j]
                + enc.embed_row(5).unwrap()[j]
                + enc.embed_row(0).unwrap()[j])
                / 3.0;
            assert_eq!(h[j], manual);
        }
    }

    #[test]
    fn fusion_extends_the_mean() {
        let enc = randomized(2, 10, 3, 4);
        let x = input(&[4, 0]);
        let fused = sample_fused(&enc, 3);
        let h = enc.hidden(&x, Some(&fused)).unwrap();
        // 2 tokens + 2 * (aggregate, label word) = 6 pooled vectors.
        for j in 0..4 {
            let manual = (enc.embed_row(4).unwrap()[j]
                + enc.embed_row(0).unwrap()[j]
                + fused.slots[0].aggregate[j]
                + enc.embed_row(1).unwrap()[j]
                + fused.slots[1].aggregate[j]
                + enc.embed_row(3).unwrap()[j])
                / 6.0;
            assert!((h[j] - manual).abs() < 1e-15);
        }
    }

    #[test]
    fn fresh_encoder_predicts_uniform_words() {
        let enc = ToyEncoder::new(10, 3, 4, 9);
        let h = enc.hidden(&input(&[4, 5, 0]), None).unwrap();
        let p = enc.predict_words(&h).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_out_of_vocab_tokens_and_bad_dims() {
        let enc = randomized(4, 10, 3, 4);
        assert!(matches!(
            enc.hidden(&input(&[99]), None),
            Err(Error::UnknownToken(99))
        ));
        assert!(enc.predict_words(&[0.0; 3]).is_err());
        let bad_fused = FusedInput {
            slots: vec![DemoSlot {
                aggregate: vec![0.0; 2],
                label_token: 1,
            }],
        };
        assert!(enc.hidden(&input(&[0]), Some(&bad_fused)).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences_plain() {
        let vocab = vocab();
        let labels = labels(&vocab, Aggregation::Sum);
        let enc = randomized(7, vocab.len(), labels.word_count(), 5);
        let x = input(&[4, 5, 6, 0]);
        let (loss, grad) = enc.backward(&x, None, 0, &labels, 1.0).unwrap();
        assert!(loss > 0.0);
        let fd = fd_gradient(&enc, &x, None, 0, &labels, 1.0, 1e-5);
        let analytic: Vec<f64> = grad.embed.iter().chain(&grad.head).copied().collect();
        for (a, b) in analytic.iter().zip(&fd) {
            assert!(rel_err(*a, *b) < 1e-6, "analytic {a} vs fd {b}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences_fused_and_weighted() {
        let vocab = vocab();
        let labels = labels(&vocab, Aggregation::Sum);
        let enc = randomized(8, vocab.len(), labels.word_count(), 5);
        let x = input(&[7, 8, 0]);
        let fused = sample_fused(&enc, 11);
        let weight = 1.7;
        let (_, grad) = enc.backward(&x, Some(&fused), 1, &labels, weight).unwrap();
        let fd = fd_gradient(&enc, &x, Some(&fused), 1, &labels, weight, 1e-5);
        let analytic: Vec<f64> = grad.embed.iter().chain(&grad.head).copied().collect();
        for (a, b) in analytic.iter().zip(&fd) {
            assert!(rel_err(*a, *b) < 1e-6, "analytic {a} vs fd {b}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences_max_aggregation() {
        let vocab = vocab();
        let labels = labels(&vocab, Aggregation::Max);
        let enc = randomized(13, vocab.len(), labels.word_count(), 5);
        let x = input(&[5, 6, 0]);
        let (_, grad) = enc.backward(&x, None, 0, &labels, 1.0).unwrap();
        let fd = fd_gradient(&enc, &x, None, 0, &labels, 1.0, 1e-5);
        let analytic: Vec<f64> = grad.embed.iter().chain(&grad.head).copied().collect();
        for (a, b) in analytic.iter().zip(&fd) {
            assert!(rel_err(*a, *b) < 1e-6, "analytic {a} vs fd {b}");
        }
    }

    /// Tokens that appear nowhere in the (fused) input must have an exactly
    /// zero gradient row; fused label words must not.
    #[test]
    fn gradient_support_is_input_tokens_plus_label_words() {
        let vocab = vocab();
        let labels = labels(&vocab, Aggregation::Sum);
        let enc = randomized(10, vocab.len(), labels.word_count(), 5);
        let x = input(&[4, 5, 0]);
        let fused = sample_fused(&enc, 12);
        let (_, grad) = enc.backward(&x, Some(&fused), 0, &labels, 1.0).unwrap();
        let d = enc.dim();
        let touched = [4usize, 5, 0, 1, 3];
        for t in 0..enc.vocab_size() {
            let row = &grad.embed[t * d..(t + 1) * d];
            if touched.contains(&t) {
                assert!(row.iter().any(|g| *g != 0.0), "token {t} should get gradient");
            } else {
                assert!(row.iter().all(|g| *g == 0.0), "token {t} must stay zero");
            }
        }
    }

    #[test]
    fn weight_scales_gradient_exactly() {
        let vocab = vocab();
        let labels = labels(&vocab, Aggregation::Sum);
        let enc = randomized(14, vocab.len(), labels.word_count(), 5);
        let x = input(&[6, 7, 0]);
        let (l1, g1) = enc.backward(&x, None, 1, &labels, 1.0).unwrap();
        let (l2, g2) = enc.backward(&x, None, 1, &labels, 2.0).unwrap();
        assert_eq!(l2, 2.0 * l1);
        for (a, b) in g1.embed.iter().zip(&g2.embed) {
            assert_eq!(*b, 2.0 * *a);
        }
        for (a, b) in g1.head.iter().zip(&g2.head) {
            assert_eq!(*b, 2.0 * *a);
        }
        let (l0, g0) = enc.backward(&x, None, 1, &labels, 0.0).unwrap();
        assert_eq!(l0, 0.0);
        assert!(g0.embed.iter().chain(&g0.head).all(|g| *g == 0.0));
    }

    #[test]
    fn encoder_checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.renc");
        let enc = randomized(21, 10, 3, 4);
        enc.save(&path).unwrap();
        let back = ToyEncoder::load(&path).unwrap();
        assert_eq!(back.vocab_size(), 10);
        assert_eq!(back.word_count(), 3);
        assert_eq!(back.dim(), 4);
        // Parameters survive up to the f32 rounding the format commits to.
        for (a, b) in enc.params().iter().zip(back.params()) {
            assert_eq!(*a as f32, b as f32);
            assert_eq!(b, (*a as f32) as f64);
        }
        // A second save of the loaded encoder is byte-identical.
        let path2 = dir.path().join("enc2.renc");
        back.save(&path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn encoder_checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.renc");
        randomized(3, 6, 2, 3).save(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            ToyEncoder::load(&path),
            Err(Error::CorruptCheckpoint(_))
        ));
        fs::write(&path, b"XXXX").unwrap();
        assert!(matches!(
            ToyEncoder::load(&path),
            Err(Error::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn prototype_prefers_the_aligned_class() {
        let pc = PrototypeClassifier::new(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            0.5,
        )
        .unwrap();
        // cos = (1, 0): logits (2, 0) after tau scaling.
        let dist = pc
            .predict(&Embedding::new(vec![2.0, 0.0]).unwrap())
            .unwrap();
        let expect = 2.0f64.exp() / (2.0f64.exp() + 1.0);
        assert!((dist.get(0) - expect).abs() < 1e-12);
        // Cosine ignores feature magnitude entirely.
        let scaled = pc
            .predict(&Embedding::new(vec![200.0, 0.0]).unwrap())
            .unwrap();
        assert!((dist.get(0) - scaled.get(0)).abs() < 1e-12);
    }

    #[test]
    fn prototype_validates_inputs() {
        assert!(PrototypeClassifier::new(vec![vec![1.0]], 0.1).is_err());
        assert!(PrototypeClassifier::new(vec![vec![1.0], vec![0.0]], 0.1).is_err());
        assert!(PrototypeClassifier::new(vec![vec![1.0], vec![1.0]], 0.0).is_err());
        let pc = PrototypeClassifier::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 0.1).unwrap();
        assert!(matches!(
            pc.predict(&Embedding::new(vec![0.0, 0.0]).unwrap()),
            Err(Error::ZeroNorm)
        ));
        assert!(pc.predict(&Embedding::new(vec![1.0]).unwrap()).is_err());
    }

    #[test]
    fn prototype_pooling_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("proto.rpro");
        let pc = PrototypeClassifier::from_pooled(
            &[vec![0.1, 0.1], vec![0.3, -0.1]],
            &[vec![2.0, 0.0], vec![0.0, 2.0]],
            0.07,
        )
        .unwrap();
        // Hand-pooled: (0.1 + 0.3 + 2.0) / 3 etc.
        assert!((pc.weight(0)[0] - 0.8).abs() < 1e-12);
        assert!((pc.weight(1)[1] - 2.0 / 3.0).abs() < 1e-12);
        pc.save(&path).unwrap();
        let back = PrototypeClassifier::load(&path).unwrap();
        assert_eq!(back.class_count(), 2);
        assert_eq!(back.dim(), 2);
        assert_eq!(back.tau(), 0.07f32 as f64);
        let feat = Embedding::new(vec![0.5, 0.25]).unwrap();
        let a = pc.predict(&feat).unwrap();
        let b = back.predict(&feat).unwrap();
        for (x, y) in a.probs().iter().zip(b.probs()) {
            assert!((x - y).abs() < 1e-6, "f32 round trip stays close");
        }
    }
}
