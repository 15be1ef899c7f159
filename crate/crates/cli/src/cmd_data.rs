//! Dataset-facing commands: synthetic benchmark generation, ingestion
//! validation, and store construction.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context};
use serde::Serialize;

use retroknn::dataset::{load_examples, write_jsonl, DataMode};
use retroknn::encoder::ToyEncoder;
use retroknn::store::{FeatureEncoder, KnowledgeStore, PromptEncoder};
use retroknn::synth::{gen_feature, gen_text, FeatureSynthConfig, TextSynthConfig};
use retroknn::types::Template;

use crate::common::{
    self, emit, load_feature_labels, load_text_bundle, resolve_seed, LabelArgs, ModelFiles,
    StoreArgs, TextFiles,
};

// ---------------------------------------------------------------------------
// gen-synth

#[derive(Debug, clap::Args)]
pub struct GenSynthArgs {
    /// Benchmark mode: text (token mixtures) or feature (Gaussian blobs).
    #[arg(long)]
    pub mode: String,
    /// Directory to write the benchmark files into (created if missing).
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Number of classes (2..=5).
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Labeled training examples per class (text mode).
    #[arg(long, default_value_t = 16)]
    pub shots: usize,
    /// Dev examples per class (text mode).
    #[arg(long, default_value_t = 16)]
    pub dev: usize,
    /// Test examples per class.
    #[arg(long, default_value_t = 64)]
    pub test: usize,
    /// Feature dimension (feature mode).
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    /// Labeled examples per class (feature mode).
    #[arg(long, default_value_t = 16)]
    pub labeled: usize,
    /// Unlabeled pool examples per class (feature mode).
    #[arg(long, default_value_t = 128)]
    pub unlabeled: usize,
    /// Sample noise around class centers (feature mode).
    #[arg(long, default_value_t = 0.45)]
    pub noise: f64,
    /// Prototype perturbation off the true centers (feature mode).
    #[arg(long, default_value_t = 0.55)]
    pub proto_noise: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Mirror the JSON manifest to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct GenSynthReport {
    mode: String,
    seed: u64,
    classes: usize,
    counts: serde_json::Value,
    files: Vec<String>,
}

pub fn gen_synth(args: GenSynthArgs) -> anyhow::Result<()> {
    let seed = resolve_seed(args.seed);
    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let dir = &args.out_dir;

    let report = match args.mode.as_str() {
        "text" => {
            let cfg = TextSynthConfig {
                seed,
                classes: args.classes,
                shots: args.shots,
                dev_per_class: args.dev,
                test_per_class: args.test,
                ..TextSynthConfig::default()
            };
            let synth = gen_text(&cfg)?;
            fs::write(dir.join("vocab.txt"), &synth.vocab_text)?;
            fs::write(dir.join("template.txt"), &synth.template_text)?;
            fs::write(dir.join("verbalizer.tsv"), &synth.verbalizer_text)?;
            write_jsonl(&dir.join("train.jsonl"), &synth.train, &synth.labels, Some(&synth.vocab))?;
            write_jsonl(&dir.join("dev.jsonl"), &synth.dev, &synth.labels, Some(&synth.vocab))?;
            write_jsonl(&dir.join("test.jsonl"), &synth.test, &synth.labels, Some(&synth.vocab))?;
            GenSynthReport {
                mode: "text".into(),
                seed,
                classes: cfg.classes,
                counts: serde_json::json!({
                    "train": synth.train.len(),
                    "dev": synth.dev.len(),
                    "test": synth.test.len(),
                    "vocab": synth.vocab.len(),
                }),
                files: vec![
                    "vocab.txt".into(),
                    "template.txt".into(),
                    "verbalizer.tsv".into(),
                    "train.jsonl".into(),
                    "dev.jsonl".into(),
                    "test.jsonl".into(),
                ],
            }
        }
        "feature" => {
            let cfg = FeatureSynthConfig {
                seed,
                classes: args.classes,
                dim: args.dim,
                labeled_per_class: args.labeled,
                unlabeled_per_class: args.unlabeled,
                test_per_class: args.test,
                noise: args.noise,
                proto_noise: args.proto_noise,
                ..FeatureSynthConfig::default()
            };
            let synth = gen_feature(&cfg)?;
            fs::write(dir.join("verbalizer.tsv"), &synth.verbalizer_text)?;
            write_jsonl(&dir.join("train.jsonl"), &synth.train, &synth.labels, None)?;
            write_jsonl(&dir.join("unlabeled.jsonl"), &synth.unlabeled, &synth.labels, None)?;
            write_jsonl(&dir.join("test.jsonl"), &synth.test, &synth.labels, None)?;
            synth.prototype.save(&dir.join("prototype.rpro"))?;
            GenSynthReport {
                mode: "feature".into(),
                seed,
                classes: cfg.classes,
                counts: serde_json::json!({
                    "train": synth.train.len(),
                    "unlabeled": synth.unlabeled.len(),
                    "test": synth.test.len(),
                    "dim": cfg.dim,
                }),
                files: vec![
                    "verbalizer.tsv".into(),
                    "train.jsonl".into(),
                    "unlabeled.jsonl".into(),
                    "test.jsonl".into(),
                    "prototype.rpro".into(),
                ],
            }
        }
        other => bail!("unknown mode {other:?} (expected text or feature)"),
    };
    emit(&report, args.out.as_deref())
}

// ---------------------------------------------------------------------------
// ingest

#[derive(Debug, clap::Args)]
pub struct IngestArgs {
    /// JSONL dataset to validate.
    #[arg(long)]
    pub data: PathBuf,
    /// Vocabulary file; presence selects text mode.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Template file to validate against the vocabulary (text mode).
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[command(flatten)]
    pub labels: LabelArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct IngestReport {
    mode: String,
    examples: usize,
    labeled: usize,
    unlabeled: usize,
    classes: usize,
    class_counts: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    feature_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    vocab_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    template_tokens: Option<usize>,
}

pub fn ingest(args: IngestArgs) -> anyhow::Result<()> {
    let vocab = args
        .vocab
        .as_deref()
        .map(retroknn::types::Vocab::from_path)
        .transpose()?;
    let labels = retroknn::types::LabelSpace::from_path(
        &args.labels.verbalizer,
        vocab.as_ref(),
        args.labels.aggregation,
    )?;
    let template = match (&args.template, &vocab) {
        (Some(path), Some(vocab)) => Some(Template::from_path(path, vocab)?),
        (Some(_), None) => bail!("--template needs --vocab (text mode)"),
        _ => None,
    };

    let (examples, mode) = load_examples(&args.data, vocab.as_ref(), &labels)?;
    if vocab.is_some() && !matches!(mode, DataMode::Text) {
        bail!("--vocab given but {} holds feature records", args.data.display());
    }

    let mut class_counts = vec![0usize; labels.class_count()];
    let mut labeled = 0;
    for ex in &examples {
        if let Some(c) = ex.label {
            class_counts[c as usize] += 1;
            labeled += 1;
        }
    }
    let report = IngestReport {
        mode: match mode {
            DataMode::Text => "text".into(),
            DataMode::Feature(_) => "feature".into(),
        },
        examples: examples.len(),
        labeled,
        unlabeled: examples.len() - labeled,
        classes: labels.class_count(),
        class_counts,
        feature_dim: match mode {
            DataMode::Feature(d) => Some(d),
            DataMode::Text => None,
        },
        vocab_size: vocab.as_ref().map(retroknn::types::Vocab::len),
        template_tokens: template.map(|t| t.apply(&[]).tokens.len()),
    };
    emit(&report, args.out.as_deref())
}

// ---------------------------------------------------------------------------
// build-store

#[derive(Debug, clap::Args)]
pub struct BuildStoreArgs {
    /// Labeled JSONL dataset to encode.
    #[arg(long)]
    pub data: PathBuf,
    /// Text-mode sidecars; omit both for feature mode.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[command(flatten)]
    pub labels: LabelArgs,
    #[command(flatten)]
    pub model: ModelFiles,
    #[command(flatten)]
    pub store: StoreArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Where to write the store file.
    #[arg(long, default_value = "store.rknn")]
    pub store_out: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct BuildStoreReport {
    entries: usize,
    dim: usize,
    classes: usize,
    generation: u64,
    similarity: retroknn::index::Similarity,
    index: String,
    path: String,
}

pub fn build_store(args: BuildStoreArgs) -> anyhow::Result<()> {
    let seed = resolve_seed(args.seed);
    let config = args.store.config(seed)?;

    let store = match common::load_model(&args.model)? {
        common::LoadedModel::Encoder(encoder) => {
            let (vocab_path, template_path) = match (&args.vocab, &args.template) {
                (Some(v), Some(t)) => (v.clone(), t.clone()),
                _ => bail!("text mode needs --vocab and --template"),
            };
            let bundle = load_text_bundle(
                &TextFiles {
                    vocab: vocab_path,
                    template: template_path,
                },
                &args.labels,
            )?;
            let (examples, mode) = load_examples(&args.data, Some(&bundle.vocab), &bundle.labels)?;
            if !matches!(mode, DataMode::Text) {
                bail!("encoder mode expects text records");
            }
            check_encoder_fits(&encoder, &bundle)?;
            KnowledgeStore::build(
                &examples,
                &PromptEncoder {
                    encoder: &encoder,
                    template: &bundle.template,
                },
                &bundle.labels,
                config,
            )?
        }
        common::LoadedModel::Prototype(proto) => {
            let labels = load_feature_labels(&args.labels)?;
            let (examples, mode) = load_examples(&args.data, None, &labels)?;
            let DataMode::Feature(d) = mode else {
                bail!("prototype mode expects feature records");
            };
            if d != proto.dim() {
                bail!("prototype dimension {} != data dimension {d}", proto.dim());
            }
            KnowledgeStore::build(&examples, &FeatureEncoder { d }, &labels, config)?
        }
    };

    store.save(&args.store_out)?;
    let report = BuildStoreReport {
        entries: store.len(),
        dim: store.dim(),
        classes: store.class_count(),
        generation: store.generation(),
        similarity: store.config().similarity,
        index: args.store.index.clone(),
        path: args.store_out.display().to_string(),
    };
    emit(&report, args.out.as_deref())
}

pub(crate) fn check_encoder_fits(
    encoder: &ToyEncoder,
    bundle: &common::TextBundle,
) -> anyhow::Result<()> {
    if encoder.vocab_size() != bundle.vocab.len() {
        bail!(
            "encoder was trained over {} tokens but the vocabulary has {}",
            encoder.vocab_size(),
            bundle.vocab.len()
        );
    }
    if encoder.word_count() != bundle.labels.word_count() {
        bail!(
            "encoder head covers {} label words but the verbalizer defines {}",
            encoder.word_count(),
            bundle.labels.word_count()
        );
    }
    Ok(())
}
