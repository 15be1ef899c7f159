//! Seeded synthetic benchmarks, small enough to train on in seconds.
//!
//! Text mode draws token-mixture "sentences": each class owns a signature
//! token pool, every class shares a noise pool, and the `signal` knob sets
//! how often a signature token appears. Feature mode scatters Gaussian
//! blobs around random class centers and derives a noisy prototype
//! classifier standing in for an off-the-shelf zero-shot scorer.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution as _, Normal};

use crate::encoder::PrototypeClassifier;
use crate::error::{Error, Result};
use crate::types::{
    Aggregation, ClassId, Embedding, Example, ExampleId, LabelSpace, Template, Vocab,
};

const DEV_ID_BASE: ExampleId = 10_000;
const TEST_ID_BASE: ExampleId = 20_000;

// ---------------------------------------------------------------------------
// Text mode

#[derive(Debug, Clone)]
pub struct TextSynthConfig {
    pub classes: usize,
    /// Labeled training examples per class.
    pub shots: usize,
    pub dev_per_class: usize,
    pub test_per_class: usize,
    /// Signature tokens owned by each class.
    pub sig_tokens_per_class: usize,
    /// Noise tokens shared by all classes.
    pub shared_tokens: usize,
    /// Sentence length range, inclusive.
    pub len_range: (usize, usize),
    /// Probability that a drawn token comes from the class signature pool.
    pub signal: f64,
    pub seed: u64,
}

impl Default for TextSynthConfig {
    fn default() -> Self {
        TextSynthConfig {
            classes: 2,
            shots: 16,
            dev_per_class: 16,
            test_per_class: 64,
            sig_tokens_per_class: 6,
            shared_tokens: 20,
            len_range: (4, 8),
            signal: 0.5,
            seed: 0,
        }
    }
}

/// A complete text benchmark plus the exact file contents that reproduce it
/// through the normal parsing path.
#[derive(Debug, Clone)]
pub struct TextSynth {
    pub vocab: Vocab,
    pub template: Template,
    pub labels: LabelSpace,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    pub vocab_text: String,
    pub template_text: String,
    pub verbalizer_text: String,
}

pub fn gen_text(cfg: &TextSynthConfig) -> Result<TextSynth> {
    if !(2..=5).contains(&cfg.classes) {
        return Err(Error::InvalidConfig(format!(
            "classes must be 2..=5, got {}",
            cfg.classes
        )));
    }
    if cfg.shots == 0
        || cfg.sig_tokens_per_class == 0
        || cfg.shared_tokens == 0
        || cfg.len_range.0 == 0
        || cfg.len_range.0 > cfg.len_range.1
    {
        return Err(Error::InvalidConfig("degenerate text-synth sizes".into()));
    }
    if !(0.0..=1.0).contains(&cfg.signal) {
        return Err(Error::InvalidConfig(format!(
            "signal must lie in [0, 1], got {}",
            cfg.signal
        )));
    }

    // Vocabulary: template scaffolding, label words, per-class signature
    // pools, shared noise pool.
    let mut tokens: Vec<String> = ["[CLS]", "[MASK]", ".", "it", "was"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let label_words: Vec<String> = (0..cfg.classes).map(|c| format!("lab{c}")).collect();
    tokens.extend(label_words.iter().cloned());
    let mut sig_pools: Vec<Vec<u32>> = Vec::with_capacity(cfg.classes);
    for c in 0..cfg.classes {
        let mut pool = Vec::with_capacity(cfg.sig_tokens_per_class);
        for j in 0..cfg.sig_tokens_per_class {
            pool.push(tokens.len() as u32);
            tokens.push(format!("sig{c}x{j}"));
        }
        sig_pools.push(pool);
    }
    let mut shared_pool = Vec::with_capacity(cfg.shared_tokens);
    for j in 0..cfg.shared_tokens {
        shared_pool.push(tokens.len() as u32);
        tokens.push(format!("sh{j}"));
    }

    let vocab_text = tokens.join("\n") + "\n";
    let vocab = Vocab::from_tokens(tokens)?;
    let template_text = "[CLS] | it was [MASK] . |".to_string();
    let template = Template::parse(&template_text, &vocab)?;
    let verbalizer_text: String = (0..cfg.classes)
        .map(|c| format!("class{c}\tlab{c}\n"))
        .collect();
    let labels = LabelSpace::parse(&verbalizer_text, Some(&vocab), Aggregation::Sum)?;

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let sample = |class: usize, rng: &mut ChaCha20Rng| -> Vec<u32> {
        let len = rng.random_range(cfg.len_range.0..=cfg.len_range.1);
        (0..len)
            .map(|_| {
                if rng.random::<f64>() < cfg.signal {
                    sig_pools[class][rng.random_range(0..cfg.sig_tokens_per_class)]
                } else {
                    shared_pool[rng.random_range(0..cfg.shared_tokens)]
                }
            })
            .collect()
    };
    let split = |base: ExampleId, per_class: usize, rng: &mut ChaCha20Rng| -> Vec<Example> {
        let mut out = Vec::with_capacity(per_class * cfg.classes);
        for i in 0..per_class {
            for class in 0..cfg.classes {
                let id = base + (i * cfg.classes + class) as ExampleId;
                out.push(Example::text(
                    id,
                    sample(class, rng),
                    Some(class as ClassId),
                ));
            }
        }
        out
    };

    let train = split(0, cfg.shots, &mut rng);
    let dev = split(DEV_ID_BASE, cfg.dev_per_class, &mut rng);
    let test = split(TEST_ID_BASE, cfg.test_per_class, &mut rng);

    Ok(TextSynth {
        vocab,
        template,
        labels,
        train,
        dev,
        test,
        vocab_text,
        template_text,
        verbalizer_text,
    })
}

// ---------------------------------------------------------------------------
// Feature mode

#[derive(Debug, Clone)]
pub struct FeatureSynthConfig {
    pub classes: usize,
    pub dim: usize,
    /// Labeled examples per class (few-shot experiments).
    pub labeled_per_class: usize,
    /// Unlabeled examples per class (the zero-shot store pool).
    pub unlabeled_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of samples around their class center.
    pub noise: f64,
    /// Norm of each class center.
    pub center_radius: f64,
    /// Standard deviation of the prototype's perturbation off the true
    /// centers; larger means a weaker base classifier.
    pub proto_noise: f64,
    pub tau: f64,
    pub seed: u64,
}

impl Default for FeatureSynthConfig {
    fn default() -> Self {
        FeatureSynthConfig {
            classes: 3,
            dim: 8,
            labeled_per_class: 16,
            unlabeled_per_class: 128,
            test_per_class: 64,
            noise: 0.45,
            center_radius: 1.0,
            proto_noise: 0.55,
            tau: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeatureSynth {
    pub labels: LabelSpace,
    pub verbalizer_text: String,
    pub train: Vec<Example>,
    pub unlabeled: Vec<Example>,
    pub test: Vec<Example>,
    pub centers: Vec<Vec<f64>>,
    pub prototype: PrototypeClassifier,
}

pub fn gen_feature(cfg: &FeatureSynthConfig) -> Result<FeatureSynth> {
    if !(2..=5).contains(&cfg.classes) {
        return Err(Error::InvalidConfig(format!(
            "classes must be 2..=5, got {}",
            cfg.classes
        )));
    }
    if cfg.dim < 2 || cfg.unlabeled_per_class == 0 || cfg.test_per_class == 0 {
        return Err(Error::InvalidConfig("degenerate feature-synth sizes".into()));
    }
    for (name, v) in [
        ("noise", cfg.noise),
        ("center_radius", cfg.center_radius),
        ("proto_noise", cfg.proto_noise),
    ] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::InvalidConfig(format!("{name} must be >= 0, got {v}")));
        }
    }

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");

    // Class centers: random directions scaled to the radius, re-drawn when
    // two land too close together (cos > 0.5).
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(cfg.classes);
    let mut attempts = 0;
    while centers.len() < cfg.classes {
        attempts += 1;
        if attempts > 1000 {
            return Err(Error::InvalidConfig(
                "could not place well-separated class centers; raise dim".into(),
            ));
        }
        let raw: Vec<f64> = (0..cfg.dim).map(|_| normal.sample(&mut rng)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let candidate: Vec<f64> = raw
            .iter()
            .map(|v| v / norm * cfg.center_radius)
            .collect();
        let too_close = centers.iter().any(|c| {
            let dot: f64 = c.iter().zip(&candidate).map(|(a, b)| a * b).sum();
            dot / (cfg.center_radius * cfg.center_radius) > 0.5
        });
        if !too_close {
            centers.push(candidate);
        }
    }

    let verbalizer_text: String = (0..cfg.classes)
        .map(|c| format!("class{c}\tlab{c}\n"))
        .collect();
    let labels = LabelSpace::parse(&verbalizer_text, None, Aggregation::Sum)?;

    let draw = |class: usize, rng: &mut ChaCha20Rng| -> Embedding {
        let values: Vec<f32> = centers[class]
            .iter()
            .map(|c| (c + cfg.noise * normal.sample(rng)) as f32)
            .collect();
        Embedding::new(values).expect("finite by construction")
    };

    let split = |base: ExampleId,
                     per_class: usize,
                     labeled: bool,
                     rng: &mut ChaCha20Rng|
     -> Vec<Example> {
        let mut out = Vec::with_capacity(per_class * cfg.classes);
        for i in 0..per_class {
            for class in 0..cfg.classes {
                let id = base + (i * cfg.classes + class) as ExampleId;
                let label = labeled.then_some(class as ClassId);
                out.push(Example::feature(id, draw(class, rng), label));
            }
        }
        out
    };

    let train = split(0, cfg.labeled_per_class, true, &mut rng);
    let unlabeled = split(DEV_ID_BASE, cfg.unlabeled_per_class, false, &mut rng);
    let test = split(TEST_ID_BASE, cfg.test_per_class, true, &mut rng);

    let proto_weights: Vec<Vec<f64>> = centers
        .iter()
        .map(|c| {
            c.iter()
                .map(|v| v + cfg.proto_noise * normal.sample(&mut rng))
                .collect()
        })
        .collect();
    let prototype = PrototypeClassifier::new(proto_weights, cfg.tau)?;

    Ok(FeatureSynth {
        labels,
        verbalizer_text,
        train,
        unlabeled,
        test,
        centers,
        prototype,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_synth_is_deterministic_and_well_formed() {
        let cfg = TextSynthConfig::default();
        let a = gen_text(&cfg).unwrap();
        let b = gen_text(&cfg).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.vocab_text, b.vocab_text);

        assert_eq!(a.train.len(), 32);
        assert_eq!(a.labels.class_count(), 2);
        for ex in a.train.iter().chain(&a.dev).chain(&a.test) {
            let tokens = ex.tokens().unwrap();
            assert!(tokens.len() >= 4 && tokens.len() <= 8);
            assert!(ex.label.is_some());
            for t in tokens {
                assert!(a.vocab.token(*t).is_some());
            }
        }
        // The emitted file contents parse back into the same structures.
        let vocab = Vocab::from_tokens(a.vocab_text.lines()).unwrap();
        assert_eq!(vocab.len(), a.vocab.len());
        let template = Template::parse(&a.template_text, &vocab).unwrap();
        assert_eq!(template, a.template);
    }

    #[test]
    fn text_synth_distinct_seeds_differ() {
        let a = gen_text(&TextSynthConfig::default()).unwrap();
        let b = gen_text(&TextSynthConfig {
            seed: 1,
            ..TextSynthConfig::default()
        })
        .unwrap();
        assert_ne!(a.train, b.train);
    }

    #[test]
    fn text_synth_validates() {
        assert!(gen_text(&TextSynthConfig {
            classes: 1,
            ..TextSynthConfig::default()
        })
        .is_err());
        assert!(gen_text(&TextSynthConfig {
            signal: 1.5,
            ..TextSynthConfig::default()
        })
        .is_err());
        assert!(gen_text(&TextSynthConfig {
            len_range: (5, 3),
            ..TextSynthConfig::default()
        })
        .is_err());
    }

    #[test]
    fn feature_synth_shapes_and_determinism() {
        let cfg = FeatureSynthConfig::default();
        let a = gen_feature(&cfg).unwrap();
        let b = gen_feature(&cfg).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.centers, b.centers);

        assert_eq!(a.unlabeled.len(), 3 * 128);
        assert!(a.unlabeled.iter().all(|e| e.label.is_none()));
        assert!(a.test.iter().all(|e| e.label.is_some()));
        assert_eq!(a.prototype.class_count(), 3);
        assert_eq!(a.prototype.dim(), 8);
        for c in &a.centers {
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    /// With mild noise the blobs are linearly separable enough that a
    /// nearest-center rule gets nearly everything right — the benchmark is
    /// learnable by design.
    #[test]
    fn feature_synth_blobs_are_separable() {
        let synth = gen_feature(&FeatureSynthConfig {
            noise: 0.3,
            ..FeatureSynthConfig::default()
        })
        .unwrap();
        let mut correct = 0;
        for ex in &synth.test {
            let f = ex.feature_vec().unwrap();
            let mut best = 0;
            let mut best_dot = f64::NEG_INFINITY;
            for (c, center) in synth.centers.iter().enumerate() {
                let dot: f64 = center
                    .iter()
                    .zip(f.values())
                    .map(|(a, b)| a * *b as f64)
                    .sum();
                if dot > best_dot {
                    best_dot = dot;
                    best = c;
                }
            }
            if best as ClassId == ex.label.unwrap() {
                correct += 1;
            }
        }
        let acc = correct as f64 / synth.test.len() as f64;
        assert!(acc > 0.9, "nearest-center accuracy {acc} too low");
    }
}
