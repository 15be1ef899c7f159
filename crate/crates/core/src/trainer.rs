//! Training and evaluation: the kNN-guided loss loop, interpolated
//! prediction, multi-seed orchestration, and the pseudo-labeled zero-shot
//! protocol.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::encoder::{DemoSlot, FusedInput, Gradient, PrototypeClassifier, ToyEncoder};
use crate::error::{Error, Result};
use crate::index::Similarity;
use crate::par::par_map;
use crate::retro::{
    demo_weights, guidance_factor, interpolate, KnnResult, RetroHyper,
};
use crate::store::{KnowledgeStore, PromptEncoder, StoreConfig, StoreEncoder};
use crate::types::{ClassId, Distribution, Embedding, Example, LabelSpace, Template};

// ---------------------------------------------------------------------------
// Configuration

/// Ablation switches. All on by default; each can be cut independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ModeFlags {
    /// Weight training losses by neighbor coverage of the gold class.
    pub knn_train: bool,
    /// Interpolate neighbor votes into predictions.
    pub knn_test: bool,
    /// Fuse retrieved demonstrations into the input.
    pub demo: bool,
    /// Re-encode store keys at epoch boundaries.
    pub refresh: bool,
}

impl Default for ModeFlags {
    fn default() -> Self {
        ModeFlags {
            knn_train: true,
            knn_test: true,
            demo: true,
            refresh: true,
        }
    }
}

impl ModeFlags {
    pub fn all_off() -> Self {
        ModeFlags {
            knn_train: false,
            knn_test: false,
            demo: false,
            refresh: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adamw" => Ok(OptimizerKind::AdamW),
            other => Err(Error::InvalidConfig(format!(
                "unknown optimizer {other:?} (expected sgd or adamw)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Evaluate on dev every this many steps; the best checkpoint wins.
    pub eval_every: usize,
    /// Refresh the store at the end of every j-th epoch.
    pub refresh_every_epochs: usize,
    pub seeds: Vec<u64>,
    pub hyper: RetroHyper,
    pub flags: ModeFlags,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub similarity: Similarity,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 16,
            lr: 0.5,
            batch_size: 4,
            max_steps: 200,
            eval_every: 50,
            refresh_every_epochs: 1,
            seeds: vec![1, 2, 3, 4, 5],
            hyper: RetroHyper {
                k: 8,
                beta: 0.1,
                lambda: 0.2,
                m: 1,
                tau: 0.07,
            },
            flags: ModeFlags::default(),
            optimizer: OptimizerKind::Sgd,
            weight_decay: 0.0,
            similarity: Similarity::Dot,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        RetroHyper::new(
            self.hyper.k,
            self.hyper.beta,
            self.hyper.lambda,
            self.hyper.m,
            self.hyper.tau,
        )?;
        if self.dim == 0 {
            return Err(Error::InvalidConfig("dim must be at least 1".into()));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.max_steps == 0 {
            return Err(Error::InvalidConfig(
                "batch_size and max_steps must be at least 1".into(),
            ));
        }
        if self.eval_every == 0 || self.eval_every > self.max_steps {
            return Err(Error::InvalidConfig(
                "eval_every must lie in 1..=max_steps".into(),
            ));
        }
        if self.refresh_every_epochs == 0 {
            return Err(Error::InvalidConfig(
                "refresh_every_epochs must be at least 1".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must not be empty".into()));
        }
        if self.flags.demo && self.hyper.m == 0 {
            return Err(Error::InvalidConfig(
                "demonstration fusion needs m >= 1".into(),
            ));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }

    /// Overlay `key = value` lines from a config file onto this config.
    /// Blank lines and `#` comments are skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_str(&text)
    }

    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or(Error::Parse {
                line,
                msg: "expected key = value".into(),
            })?;
            self.apply_kv(key.trim(), value.trim())
                .map_err(|e| Error::Parse {
                    line,
                    msg: e.to_string(),
                })?;
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::InvalidConfig(format!("cannot parse {value:?} for {key}"))
            })
        }
        match key {
            "dim" => self.dim = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "refresh_every_epochs" => self.refresh_every_epochs = num(key, value)?,
            "seeds" => {
                let seeds: Result<Vec<u64>> = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| num::<u64>("seeds", s))
                    .collect();
                self.seeds = seeds?;
            }
            "k" => self.hyper.k = num(key, value)?,
            "beta" => self.hyper.beta = num(key, value)?,
            "lambda" => self.hyper.lambda = num(key, value)?,
            "m" => self.hyper.m = num(key, value)?,
            "tau" => self.hyper.tau = num(key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "similarity" => self.similarity = value.parse()?,
            "use_knn_train" => self.flags.knn_train = num(key, value)?,
            "use_knn_test" => self.flags.knn_test = num(key, value)?,
            "use_demo" => self.flags.demo = num(key, value)?,
            "use_refresh" => self.flags.refresh = num(key, value)?,
            other => {
                return Err(Error::InvalidConfig(format!("unknown config key {other:?}")))
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Models

/// A classifier that can also embed inputs into the store's key space.
pub trait ClassModel: Sync {
    fn dim(&self) -> usize;
    fn class_count(&self) -> usize;
    /// The retrieval query for an example (always demonstration-free, so
    /// queries and store keys share one space).
    fn query_embedding(&self, example: &Example) -> Result<Embedding>;
    fn class_distribution(&self, example: &Example) -> Result<Distribution>;
}

/// Where a prompt model draws its fused demonstrations from.
#[derive(Clone, Copy)]
pub struct DemoSource<'a> {
    pub store: &'a KnowledgeStore,
    pub m: usize,
}

/// Text-mode model: template + toy encoder + verbalizer, with optional
/// demonstration fusion at prediction time.
pub struct PromptModel<'a> {
    pub encoder: &'a ToyEncoder,
    pub template: &'a Template,
    pub labels: &'a LabelSpace,
    pub demos: Option<DemoSource<'a>>,
}

impl ClassModel for PromptModel<'_> {
    fn dim(&self) -> usize {
        self.encoder.dim()
    }

    fn class_count(&self) -> usize {
        self.labels.class_count()
    }

    fn query_embedding(&self, example: &Example) -> Result<Embedding> {
        let tokens = example.tokens().ok_or(Error::MixedModes(0))?;
        self.encoder.encode(&self.template.apply(tokens), None)
    }

    fn class_distribution(&self, example: &Example) -> Result<Distribution> {
        let tokens = example.tokens().ok_or(Error::MixedModes(0))?;
        let input = self.template.apply(tokens);
        let fused = match self.demos {
            Some(src) => {
                let query = self.encoder.encode(&input, None)?;
                Some(build_fused(src.store, &query, src.m, self.labels, None)?)
            }
            None => None,
        };
        self.encoder
            .class_distribution(&input, fused.as_ref(), self.labels)
    }
}

/// Feature-mode model: a frozen prototype classifier; the feature vector is
/// its own embedding.
pub struct ProtoModel<'a> {
    pub prototype: &'a PrototypeClassifier,
}

impl ClassModel for ProtoModel<'_> {
    fn dim(&self) -> usize {
        self.prototype.dim()
    }

    fn class_count(&self) -> usize {
        self.prototype.class_count()
    }

    fn query_embedding(&self, example: &Example) -> Result<Embedding> {
        example
            .feature_vec()
            .cloned()
            .ok_or(Error::MixedModes(0))
    }

    fn class_distribution(&self, example: &Example) -> Result<Distribution> {
        let feat = example.feature_vec().ok_or(Error::MixedModes(0))?;
        self.prototype.predict(feat)
    }
}

/// Adapter: any class model can encode store keys.
struct ModelEncoder<'a>(&'a dyn ClassModel);

impl StoreEncoder for ModelEncoder<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn encode_example(&self, example: &Example) -> Result<Embedding> {
        self.0.query_embedding(example)
    }
}

/// Retrieve each class's top-`m` neighbors for a query and fold them into
/// demonstration slots (attention aggregate + label word). Every class must
/// have at least one entry in the store.
pub fn build_fused(
    store: &KnowledgeStore,
    query: &Embedding,
    m: usize,
    labels: &LabelSpace,
    exclude: Option<u64>,
) -> Result<FusedInput> {
    let mut slots = Vec::with_capacity(labels.class_count());
    for class in 0..labels.class_count() as ClassId {
        let got = store.search_class(query, m, class, exclude)?;
        if got.hits.is_empty() {
            return Err(Error::EmptyNeighborhood);
        }
        let demos: Vec<&Embedding> = got
            .hits
            .iter()
            .map(|h| &store.entry(h.entry).key)
            .collect();
        let weights = demo_weights(query, &demos)?;
        slots.push(DemoSlot {
            aggregate: weights.aggregate,
            label_token: labels.token_of_word(labels.canonical_word(class)),
        });
    }
    Ok(FusedInput { slots })
}

// ---------------------------------------------------------------------------
// Evaluation

/// Outcome of scoring one labeled split.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Generation of the store that served the queries (0 without a store).
    pub generation: u64,
    pub predictions: Vec<ClassId>,
}

/// Score a labeled split. With a store, each prediction mixes the model
/// distribution with the neighbor vote at weight `lambda`; without one, the
/// model predicts alone.
pub fn evaluate(
    model: &dyn ClassModel,
    store: Option<&KnowledgeStore>,
    data: &[Example],
    lambda: f64,
    k: usize,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if store.is_some() && k == 0 {
        return Err(Error::InvalidK);
    }
    let outcomes: Result<Vec<(ClassId, ClassId)>> = par_map(data, |ex| {
        let gold = ex.gold()?;
        let p_model = model.class_distribution(ex)?;
        let p = match store {
            Some(store) => {
                let query = model.query_embedding(ex)?;
                let got = store.search(&query, k, None)?;
                let classes = store.hit_classes(&got.hits);
                let knn =
                    KnnResult::from_hits(&got.hits, &classes, model.class_count(), None)?;
                interpolate(&p_model, &knn.p_knn, lambda)?
            }
            None => p_model,
        };
        Ok((p.argmax(), gold))
    })
    .into_iter()
    .collect();
    let outcomes = outcomes?;

    let n = outcomes.len();
    let correct = outcomes.iter().filter(|(p, g)| p == g).count();
    let preds: Vec<ClassId> = outcomes.iter().map(|(p, _)| *p).collect();
    let golds: Vec<ClassId> = outcomes.iter().map(|(_, g)| *g).collect();
    Ok(Evaluation {
        accuracy: correct as f64 / n as f64,
        macro_f1: macro_f1(&golds, &preds, model.class_count()),
        generation: store.map_or(0, KnowledgeStore::generation),
        predictions: preds,
    })
}

/// Macro-averaged F1. A class with no gold and no predicted occurrences
/// contributes zero, which keeps the metric pessimistic rather than
/// inflated.
pub fn macro_f1(golds: &[ClassId], preds: &[ClassId], classes: usize) -> f64 {
    assert_eq!(golds.len(), preds.len());
    let mut f1_sum = 0.0;
    for c in 0..classes as ClassId {
        let tp = golds
            .iter()
            .zip(preds)
            .filter(|(g, p)| **g == c && **p == c)
            .count() as f64;
        let fp = golds
            .iter()
            .zip(preds)
            .filter(|(g, p)| **g != c && **p == c)
            .count() as f64;
        let fn_ = golds
            .iter()
            .zip(preds)
            .filter(|(g, p)| **g == c && **p != c)
            .count() as f64;
        let denom = 2.0 * tp + fp + fn_;
        if denom > 0.0 {
            f1_sum += 2.0 * tp / denom;
        }
    }
    f1_sum / classes as f64
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, Serialize)]
pub struct SeedReport {
    pub seed: u64,
    pub dev_accuracy: f64,
    pub dev_macro_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_macro_f1: Option<f64>,
    pub best_step: usize,
    pub store_generation: u64,
    pub final_loss: f64,
}

/// Diagnostics from the pseudo-labeling pass.
#[derive(Debug, Clone, Serialize)]
pub struct ZeroShotDiag {
    pub pseudo_labeled: usize,
    /// Mean and min of the base model's confidence in its own pseudo-label.
    /// Low-confidence labels are kept, not filtered, so these are the only
    /// trace of a shaky store.
    pub mean_confidence: f64,
    pub min_confidence: f64,
    pub class_counts: Vec<usize>,
    /// Every pseudo-label landed on one class: retrieval can no longer
    /// separate anything.
    pub collapsed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    /// Which split the headline numbers describe.
    pub split: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub accuracy_std: f64,
    pub lambda: f64,
    pub k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub store_generation: u64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub per_seed: Vec<SeedReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zero_shot: Option<ZeroShotDiag>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl EvalReport {
    /// Report for a single evaluation with no seed sweep.
    pub fn single(split: &str, ev: &Evaluation, lambda: f64, k: usize) -> Self {
        EvalReport {
            split: split.to_string(),
            accuracy: ev.accuracy,
            macro_f1: ev.macro_f1,
            accuracy_std: 0.0,
            lambda,
            k,
            beta: None,
            store_generation: ev.generation,
            per_seed: Vec::new(),
            zero_shot: None,
            notes: Vec::new(),
        }
    }
}

// ---------------------------------------------------------------------------
// Training

/// Everything a training run reads.
pub struct TrainInputs<'a> {
    pub train: &'a [Example],
    pub dev: &'a [Example],
    pub test: Option<&'a [Example]>,
    pub vocab_size: usize,
    pub template: &'a Template,
    pub labels: &'a LabelSpace,
}

/// Artifacts of the winning seed plus the cross-seed report.
pub struct TrainOutcome {
    pub encoder: ToyEncoder,
    pub store: KnowledgeStore,
    pub report: EvalReport,
    pub selected_seed: u64,
    /// Per-step mean batch losses of the selected seed.
    pub step_losses: Vec<f64>,
}

/// The deterministic batch order for a run: epochs of shuffled indices,
/// chopped into `batch_size` chunks (the last chunk of an epoch may be
/// short), truncated to `steps` batches.
pub fn batch_schedule(n: usize, batch_size: usize, steps: usize, seed: u64) -> Vec<Vec<usize>> {
    assert!(n > 0 && batch_size > 0);
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x517c_c1b7_2722_0a95);
    let mut schedule = Vec::with_capacity(steps);
    let mut order: Vec<usize> = (0..n).collect();
    let mut pos = n;
    while schedule.len() < steps {
        if pos >= n {
            order.shuffle(&mut rng);
            pos = 0;
        }
        let end = (pos + batch_size).min(n);
        schedule.push(order[pos..end].to_vec());
        pos = end;
    }
    schedule
}

struct SeedRun {
    seed: u64,
    encoder: ToyEncoder,
    store: KnowledgeStore,
    dev: Evaluation,
    test: Option<Evaluation>,
    best_step: usize,
    step_losses: Vec<f64>,
}

/// Train once per seed, select the best dev checkpoint within each run and
/// the best seed across runs (ties to the earlier seed in the list).
pub fn train(inputs: &TrainInputs, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if inputs.train.is_empty() || inputs.dev.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    for ex in inputs.train.iter().chain(inputs.dev) {
        ex.gold()?;
    }

    let mut runs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        runs.push(run_seed(inputs, config, seed)?);
    }

    let mut best = 0usize;
    for (i, run) in runs.iter().enumerate().skip(1) {
        if run.dev.accuracy > runs[best].dev.accuracy {
            best = i;
        }
    }

    let headline: Vec<f64> = runs
        .iter()
        .map(|r| r.test.as_ref().unwrap_or(&r.dev).accuracy)
        .collect();
    let headline_f1: Vec<f64> = runs
        .iter()
        .map(|r| r.test.as_ref().unwrap_or(&r.dev).macro_f1)
        .collect();
    let mean = headline.iter().sum::<f64>() / headline.len() as f64;
    let var = headline
        .iter()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / headline.len() as f64;
    let mean_f1 = headline_f1.iter().sum::<f64>() / headline_f1.len() as f64;

    let per_seed: Vec<SeedReport> = runs
        .iter()
        .map(|r| SeedReport {
            seed: r.seed,
            dev_accuracy: r.dev.accuracy,
            dev_macro_f1: r.dev.macro_f1,
            test_accuracy: r.test.as_ref().map(|t| t.accuracy),
            test_macro_f1: r.test.as_ref().map(|t| t.macro_f1),
            best_step: r.best_step,
            store_generation: r.store.generation(),
            final_loss: *r.step_losses.last().expect("at least one step"),
        })
        .collect();

    let report = EvalReport {
        split: if inputs.test.is_some() { "test" } else { "dev" }.into(),
        accuracy: mean,
        macro_f1: mean_f1,
        accuracy_std: var.sqrt(),
        lambda: if config.flags.knn_test {
            config.hyper.lambda
        } else {
            0.0
        },
        k: config.hyper.k,
        beta: Some(if config.flags.knn_train {
            config.hyper.beta
        } else {
            0.0
        }),
        store_generation: runs[best].store.generation(),
        per_seed,
        zero_shot: None,
        notes: Vec::new(),
    };

    let chosen = runs.swap_remove(best);
    Ok(TrainOutcome {
        encoder: chosen.encoder,
        store: chosen.store,
        report,
        selected_seed: chosen.seed,
        step_losses: chosen.step_losses,
    })
}

fn run_seed(inputs: &TrainInputs, config: &TrainConfig, seed: u64) -> Result<SeedRun> {
    let labels = inputs.labels;
    let hyper = config.hyper;
    let flags = config.flags;

    let mut encoder = ToyEncoder::new(inputs.vocab_size, labels.word_count(), config.dim, seed);
    let store_config = StoreConfig {
        similarity: config.similarity,
        index: crate::store::IndexChoice::Flat,
    };
    let mut store = KnowledgeStore::build(
        inputs.train,
        &PromptEncoder {
            encoder: &encoder,
            template: inputs.template,
        },
        labels,
        store_config,
    )?;

    let n = inputs.train.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let schedule = batch_schedule(n, config.batch_size, config.max_steps, seed);

    let mut adam = AdamW::new(encoder.param_count());
    let mut step_losses = Vec::with_capacity(config.max_steps);
    let mut best: Option<(Evaluation, usize, Vec<f64>, KnowledgeStore)> = None;
    let mut epoch = 0usize;

    for (step, batch) in schedule.iter().enumerate() {
        let results: Result<Vec<(f64, Gradient)>> = par_map(batch, |&i| {
            example_grad(&encoder, &store, &inputs.train[i], inputs.template, labels, &hyper, flags)
        })
        .into_iter()
        .collect();
        let results = results?;

        let inv = 1.0 / batch.len() as f64;
        let mut total = Gradient::zeros(inputs.vocab_size, labels.word_count(), config.dim);
        let mut loss_sum = 0.0;
        for (loss, grad) in &results {
            loss_sum += loss;
            total.add_scaled(grad, inv);
        }
        let batch_loss = loss_sum * inv;
        if !batch_loss.is_finite() {
            return Err(Error::DivergedTraining(step));
        }
        step_losses.push(batch_loss);

        match config.optimizer {
            OptimizerKind::Sgd => encoder.apply_gradient(&total, config.lr),
            OptimizerKind::AdamW => {
                adam.step(&mut encoder, &total, config.lr, config.weight_decay)
            }
        }
        store.mark_stale();

        if (step + 1) % steps_per_epoch == 0 {
            epoch += 1;
            if flags.refresh && epoch % config.refresh_every_epochs == 0 {
                store.refresh(&PromptEncoder {
                    encoder: &encoder,
                    template: inputs.template,
                })?;
            }
        }

        if (step + 1) % config.eval_every == 0 {
            let ev = eval_with_flags(&encoder, &store, inputs.dev, inputs.template, labels, &hyper, flags)?;
            let improved = best
                .as_ref()
                .map_or(true, |(cur, _, _, _)| ev.accuracy > cur.accuracy);
            if improved {
                best = Some((ev, step + 1, encoder.params(), store.clone()));
            }
        }
    }

    let (dev, best_step, params, best_store) =
        best.expect("eval_every <= max_steps guarantees at least one evaluation");
    encoder.set_params(&params)?;
    let store = best_store;

    let test = match inputs.test {
        Some(data) => Some(eval_with_flags(
            &encoder,
            &store,
            data,
            inputs.template,
            labels,
            &hyper,
            flags,
        )?),
        None => None,
    };

    Ok(SeedRun {
        seed,
        encoder,
        store,
        dev,
        test,
        best_step,
        step_losses,
    })
}

/// One example's contribution: loss weight from leave-one-out retrieval
/// when kNN-guided training is on, demonstration fusion when that is on.
fn example_grad(
    encoder: &ToyEncoder,
    store: &KnowledgeStore,
    example: &Example,
    template: &Template,
    labels: &LabelSpace,
    hyper: &RetroHyper,
    flags: ModeFlags,
) -> Result<(f64, Gradient)> {
    let tokens = example.tokens().ok_or(Error::MixedModes(0))?;
    let gold = example.gold()?;
    let input = template.apply(tokens);

    let query = if flags.knn_train || flags.demo {
        Some(encoder.encode(&input, None)?)
    } else {
        None
    };

    let fused = match (&query, flags.demo) {
        (Some(q), true) => Some(build_fused(store, q, hyper.m, labels, Some(example.id))?),
        _ => None,
    };

    let weight = if flags.knn_train {
        let q = query.as_ref().expect("query computed when knn_train is on");
        let got = store.search(q, hyper.k, Some(example.id))?;
        let p_ref = if got.hits.is_empty() {
            // Nothing left after excluding the example itself (singleton
            // corpus): treat coverage as zero and let the floor cap F.
            0.0
        } else {
            let classes = store.hit_classes(&got.hits);
            KnnResult::from_hits(&got.hits, &classes, labels.class_count(), Some(gold))?
                .p_ref
                .expect("reference class supplied")
        };
        1.0 + hyper.beta * guidance_factor(p_ref)
    } else {
        1.0
    };

    encoder.backward(&input, fused.as_ref(), gold, labels, weight)
}

/// Dev/test evaluation honoring the ablation flags: the store only enters
/// prediction through interpolation (knn_test) or demonstrations (demo).
fn eval_with_flags(
    encoder: &ToyEncoder,
    store: &KnowledgeStore,
    data: &[Example],
    template: &Template,
    labels: &LabelSpace,
    hyper: &RetroHyper,
    flags: ModeFlags,
) -> Result<Evaluation> {
    let model = PromptModel {
        encoder,
        template,
        labels,
        demos: flags.demo.then_some(DemoSource {
            store,
            m: hyper.m,
        }),
    };
    let knn_store = flags.knn_test.then_some(store);
    evaluate(&model, knn_store, data, hyper.lambda, hyper.k)
}

// ---------------------------------------------------------------------------
// Zero-shot protocol

/// Pseudo-label a pool with the base model. Confidences are recorded, never
/// thresholded; existing labels are ignored and overwritten.
pub fn pseudo_label(
    model: &dyn ClassModel,
    pool: &[Example],
) -> Result<(Vec<Example>, ZeroShotDiag)> {
    if pool.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let labeled: Result<Vec<(Example, f64)>> = par_map(pool, |ex| {
        let dist = model.class_distribution(ex)?;
        let pred = dist.argmax();
        let mut out = ex.clone();
        out.label = Some(pred);
        Ok((out, dist.get(pred)))
    })
    .into_iter()
    .collect();
    let labeled = labeled?;

    let mut class_counts = vec![0usize; model.class_count()];
    let mut conf_sum = 0.0;
    let mut conf_min = f64::INFINITY;
    for (ex, conf) in &labeled {
        class_counts[ex.label.unwrap() as usize] += 1;
        conf_sum += conf;
        conf_min = conf_min.min(*conf);
    }
    let collapsed = class_counts.iter().filter(|c| **c > 0).count() <= 1;
    let diag = ZeroShotDiag {
        pseudo_labeled: labeled.len(),
        mean_confidence: conf_sum / labeled.len() as f64,
        min_confidence: conf_min,
        class_counts,
        collapsed,
    };
    Ok((labeled.into_iter().map(|(ex, _)| ex).collect(), diag))
}

/// The open-book zero-shot protocol: pseudo-label an unlabeled pool with
/// the frozen base model, build a store over it, and predict on the test
/// split by interpolating the base model with the neighbor vote. No
/// parameter is updated anywhere.
pub fn zero_shot(
    model: &dyn ClassModel,
    labels: &LabelSpace,
    pool: &[Example],
    test: &[Example],
    lambda: f64,
    k: usize,
    store_config: StoreConfig,
) -> Result<(EvalReport, KnowledgeStore)> {
    let (pseudo, diag) = pseudo_label(model, pool)?;
    let store = KnowledgeStore::build(&pseudo, &ModelEncoder(model), labels, store_config)?;
    let ev = evaluate(model, Some(&store), test, lambda, k)?;

    let mut report = EvalReport::single("test", &ev, lambda, k);
    if diag.collapsed {
        report.notes.push(
            "pseudo-labeling collapsed to a single class; the neighbor vote is uninformative"
                .into(),
        );
    }
    report.zero_shot = Some(diag);
    Ok((report, store))
}

// ---------------------------------------------------------------------------
// AdamW

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    fn new(params: usize) -> Self {
        AdamW {
            m: vec![0.0; params],
            v: vec![0.0; params],
            t: 0,
        }
    }

    fn step(&mut self, encoder: &mut ToyEncoder, grad: &Gradient, lr: f64, weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let mut params = encoder.params();
        let flat = grad.embed.iter().chain(&grad.head);
        for ((i, g), p) in flat.enumerate().zip(params.iter_mut()) {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            *p -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * *p);
        }
        encoder
            .set_params(&params)
            .expect("parameter count unchanged");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::FeatureEncoder;
    use crate::synth::{gen_feature, gen_text, FeatureSynthConfig, TextSynthConfig};

    fn tiny_text() -> crate::synth::TextSynth {
        gen_text(&TextSynthConfig {
            shots: 4,
            dev_per_class: 4,
            test_per_class: 8,
            seed: 3,
            ..TextSynthConfig::default()
        })
        .unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            dim: 8,
            lr: 0.5,
            batch_size: 4,
            max_steps: 20,
            eval_every: 10,
            seeds: vec![1, 2],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_file_overlays_defaults() {
        let mut cfg = TrainConfig::default();
        cfg.apply_str(
            "# comment\n\nlr = 0.25\nbatch_size = 2\nseeds = 7, 8,9\nlambda = 0.7\n\
             use_demo = false\noptimizer = adamw\nsimilarity = cosine\nk = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.lr, 0.25);
        assert_eq!(cfg.batch_size, 2);
        assert_eq!(cfg.seeds, vec![7, 8, 9]);
        assert_eq!(cfg.hyper.lambda, 0.7);
        assert!(!cfg.flags.demo);
        assert_eq!(cfg.optimizer, OptimizerKind::AdamW);
        assert_eq!(cfg.similarity, Similarity::Cosine);
        assert_eq!(cfg.hyper.k, 3);
        cfg.validate().unwrap();
    }

    #[test]
    fn config_rejects_junk() {
        let mut cfg = TrainConfig::default();
        assert!(matches!(
            cfg.apply_str("nonsense = 1\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            cfg.apply_str("lr\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            cfg.apply_str("lr = fast\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        let mut bad = TrainConfig {
            eval_every: 500,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        bad = TrainConfig::default();
        bad.hyper.lambda = 2.0;
        assert!(bad.validate().is_err());
        bad = TrainConfig::default();
        bad.hyper.m = 0;
        assert!(bad.validate().is_err(), "demo flag on with m = 0");
    }

    #[test]
    fn batch_schedule_covers_every_example_each_epoch() {
        let schedule = batch_schedule(10, 3, 8, 42);
        assert_eq!(schedule.len(), 8);
        // First epoch = first 4 batches (3+3+3+1) covering 0..10 exactly.
        let mut first: Vec<usize> = schedule[..4].iter().flatten().copied().collect();
        first.sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        assert_eq!(schedule[3].len(), 1, "tail batch is short");
        // Deterministic.
        assert_eq!(schedule, batch_schedule(10, 3, 8, 42));
        assert_ne!(schedule, batch_schedule(10, 3, 8, 43));
    }

    #[test]
    fn macro_f1_hand_case() {
        // gold: 0 0 1 1, pred: 0 1 1 1 -> class0 P=1 R=.5 F1=2/3;
        // class1 P=2/3 R=1 F1=0.8 -> macro 0.7333...
        let f1 = macro_f1(&[0, 0, 1, 1], &[0, 1, 1, 1], 2);
        assert!((f1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
        // Unseen class drags the average down.
        let f1 = macro_f1(&[0, 0], &[0, 0], 2);
        assert!((f1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn evaluate_lambda_zero_matches_model_alone() {
        let synth = gen_feature(&FeatureSynthConfig {
            seed: 5,
            ..FeatureSynthConfig::default()
        })
        .unwrap();
        let model = ProtoModel {
            prototype: &synth.prototype,
        };
        let store = KnowledgeStore::build(
            &synth.train,
            &FeatureEncoder { d: 8 },
            &synth.labels,
            StoreConfig::default(),
        )
        .unwrap();
        let with = evaluate(&model, Some(&store), &synth.test, 0.0, 8).unwrap();
        let without = evaluate(&model, None, &synth.test, 0.0, 8).unwrap();
        assert_eq!(with.predictions, without.predictions);
        assert_eq!(with.accuracy, without.accuracy);
    }

    #[test]
    fn evaluate_requires_labels() {
        let synth = gen_feature(&FeatureSynthConfig::default()).unwrap();
        let model = ProtoModel {
            prototype: &synth.prototype,
        };
        assert!(matches!(
            evaluate(&model, None, &synth.unlabeled[..4], 0.0, 1),
            Err(Error::MissingLabel(_))
        ));
        assert!(matches!(
            evaluate(&model, None, &[], 0.0, 1),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn train_smoke_and_reports() {
        let synth = tiny_text();
        let inputs = TrainInputs {
            train: &synth.train,
            dev: &synth.dev,
            test: Some(&synth.test),
            vocab_size: synth.vocab.len(),
            template: &synth.template,
            labels: &synth.labels,
        };
        let out = train(&inputs, &tiny_config()).unwrap();
        assert_eq!(out.step_losses.len(), 20);
        assert!(out.step_losses.iter().all(|l| l.is_finite()));
        assert_eq!(out.report.per_seed.len(), 2);
        assert_eq!(out.report.split, "test");
        assert!(out.report.accuracy >= 0.0 && out.report.accuracy <= 1.0);
        assert!(out.report.per_seed.iter().all(|s| s.best_step > 0));
        // The returned store reflects the winning checkpoint's generation.
        assert_eq!(
            out.report.store_generation,
            out.store.generation()
        );
    }

    #[test]
    fn train_is_deterministic() {
        let synth = tiny_text();
        let inputs = TrainInputs {
            train: &synth.train,
            dev: &synth.dev,
            test: Some(&synth.test),
            vocab_size: synth.vocab.len(),
            template: &synth.template,
            labels: &synth.labels,
        };
        let a = train(&inputs, &tiny_config()).unwrap();
        let b = train(&inputs, &tiny_config()).unwrap();
        assert_eq!(a.step_losses, b.step_losses);
        assert_eq!(a.selected_seed, b.selected_seed);
        assert_eq!(
            serde_json::to_string(&a.report).unwrap(),
            serde_json::to_string(&b.report).unwrap()
        );
        assert_eq!(a.encoder.params(), b.encoder.params());
    }

    /// With every flag off the loop must collapse to a bare cross-entropy
    /// SGD loop: same schedule, plain weights, no fusion, no refresh.
    #[test]
    fn flags_off_equals_bare_sgd() {
        let synth = tiny_text();
        let mut config = tiny_config();
        config.flags = ModeFlags::all_off();
        config.seeds = vec![9];
        let inputs = TrainInputs {
            train: &synth.train,
            dev: &synth.dev,
            test: None,
            vocab_size: synth.vocab.len(),
            template: &synth.template,
            labels: &synth.labels,
        };
        let out = train(&inputs, &config).unwrap();

        // Hand-rolled reference loop.
        let mut enc = ToyEncoder::new(synth.vocab.len(), synth.labels.word_count(), config.dim, 9);
        let schedule = batch_schedule(synth.train.len(), config.batch_size, config.max_steps, 9);
        let mut losses = Vec::new();
        for batch in &schedule {
            let mut total = Gradient::zeros(synth.vocab.len(), synth.labels.word_count(), config.dim);
            let mut loss_sum = 0.0;
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let ex = &synth.train[i];
                let input = synth.template.apply(ex.tokens().unwrap());
                let (loss, grad) = enc
                    .backward(&input, None, ex.gold().unwrap(), &synth.labels, 1.0)
                    .unwrap();
                loss_sum += loss;
                total.add_scaled(&grad, inv);
            }
            losses.push(loss_sum * inv);
            enc.apply_gradient(&total, config.lr);
        }
        assert_eq!(out.step_losses, losses, "ablated loop must be the plain loop");
    }

    /// A singleton corpus with k = 1 trains: after self-exclusion the
    /// neighborhood is empty and the guidance factor caps at the floor.
    #[test]
    fn singleton_corpus_trains_via_floor() {
        let synth = tiny_text();
        let train_set = vec![synth.train[0].clone()];
        let config = TrainConfig {
            dim: 8,
            max_steps: 4,
            eval_every: 4,
            batch_size: 1,
            seeds: vec![1],
            hyper: RetroHyper {
                k: 1,
                ..TrainConfig::default().hyper
            },
            flags: ModeFlags {
                demo: false, // a single class cannot fill every slot
                ..ModeFlags::default()
            },
            ..TrainConfig::default()
        };
        let inputs = TrainInputs {
            train: &train_set,
            dev: &train_set,
            test: None,
            vocab_size: synth.vocab.len(),
            template: &synth.template,
            labels: &synth.labels,
        };
        let out = train(&inputs, &config).unwrap();
        // Every step carries the floored guidance weight: 1 + beta * -ln(1e-8).
        let w = 1.0 + 0.1 * crate::retro::guidance_factor(0.0);
        assert!(out.step_losses[0] > 0.0);
        let bare = {
            let enc = ToyEncoder::new(synth.vocab.len(), synth.labels.word_count(), 8, 1);
            let ex = &train_set[0];
            let input = synth.template.apply(ex.tokens().unwrap());
            enc.loss(&input, None, ex.gold().unwrap(), &synth.labels, 1.0)
                .unwrap()
        };
        assert!((out.step_losses[0] - w * bare).abs() < 1e-12);
    }

    #[test]
    fn pseudo_labeling_diagnostics() {
        let synth = gen_feature(&FeatureSynthConfig {
            seed: 11,
            ..FeatureSynthConfig::default()
        })
        .unwrap();
        let model = ProtoModel {
            prototype: &synth.prototype,
        };
        let (pseudo, diag) = pseudo_label(&model, &synth.unlabeled).unwrap();
        assert_eq!(pseudo.len(), synth.unlabeled.len());
        assert!(pseudo.iter().all(|e| e.label.is_some()));
        assert_eq!(diag.pseudo_labeled, pseudo.len());
        assert!(diag.mean_confidence > 1.0 / 3.0);
        assert!(diag.min_confidence <= diag.mean_confidence);
        assert_eq!(diag.class_counts.iter().sum::<usize>(), pseudo.len());
        assert!(!diag.collapsed, "a healthy prototype uses every class");
    }

    #[test]
    fn pseudo_label_collapse_is_flagged() {
        // A prototype whose first weight dwarfs the rest pushes every
        // cosine toward class 0.
        let proto = PrototypeClassifier::new(
            vec![vec![1.0, 0.0], vec![-1.0, -0.001]],
            1.0,
        )
        .unwrap();
        let model = ProtoModel { prototype: &proto };
        let pool: Vec<Example> = (0..10)
            .map(|i| {
                Example::feature(
                    i,
                    Embedding::new(vec![1.0, i as f32 * 0.01]).unwrap(),
                    None,
                )
            })
            .collect();
        let (_, diag) = pseudo_label(&model, &pool).unwrap();
        assert!(diag.collapsed);
        assert_eq!(diag.class_counts[0], 10);
    }

    /// The full protocol never touches the model and reports through the
    /// same interpolation path as normal evaluation.
    #[test]
    fn zero_shot_protocol_runs_frozen() {
        let synth = gen_feature(&FeatureSynthConfig {
            seed: 21,
            ..FeatureSynthConfig::default()
        })
        .unwrap();
        let model = ProtoModel {
            prototype: &synth.prototype,
        };
        let (report, store) = zero_shot(
            &model,
            &synth.labels,
            &synth.unlabeled,
            &synth.test,
            0.7,
            16,
            StoreConfig::default(),
        )
        .unwrap();
        assert_eq!(store.len(), synth.unlabeled.len());
        assert_eq!(report.split, "test");
        assert_eq!(report.lambda, 0.7);
        let diag = report.zero_shot.as_ref().unwrap();
        assert_eq!(diag.pseudo_labeled, synth.unlabeled.len());
        assert!(report.accuracy > 0.0);
    }

    /// Demonstration slots come from the right classes and respect
    /// leave-one-out exclusion.
    #[test]
    fn build_fused_layout() {
        let synth = tiny_text();
        let enc = ToyEncoder::new(synth.vocab.len(), synth.labels.word_count(), 8, 2);
        let store = KnowledgeStore::build(
            &synth.train,
            &PromptEncoder {
                encoder: &enc,
                template: &synth.template,
            },
            &synth.labels,
            StoreConfig::default(),
        )
        .unwrap();
        let q = enc
            .encode(&synth.template.apply(synth.train[0].tokens().unwrap()), None)
            .unwrap();
        let fused = build_fused(&store, &q, 2, &synth.labels, Some(synth.train[0].id)).unwrap();
        assert_eq!(fused.slots.len(), 2);
        for (class, slot) in fused.slots.iter().enumerate() {
            let word = synth.labels.canonical_word(class as ClassId);
            assert_eq!(slot.label_token, synth.labels.token_of_word(word));
            assert_eq!(slot.aggregate.len(), 8);
        }
    }
}
