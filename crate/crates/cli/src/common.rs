//! Shared plumbing: seed resolution, report/error emission, model loading.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Serialize;
use serde_json::json;

use retroknn::encoder::{PrototypeClassifier, ToyEncoder};
use retroknn::store::{IndexChoice, StoreConfig};
use retroknn::types::{Aggregation, LabelSpace, Template, Vocab};

/// `--seed` flag beats the RETRO_SEED environment variable beats 42.
pub fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| {
        std::env::var("RETRO_SEED")
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .unwrap_or(42)
}

/// Print the report as pretty JSON to stdout; mirror it to `out` if given.
pub fn emit<T: Serialize>(report: &T, out: Option<&Path>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    println!("{text}");
    if let Some(path) = out {
        fs::write(path, format!("{text}\n"))
            .with_context(|| format!("writing report to {}", path.display()))?;
    }
    Ok(())
}

/// Print an error record to stdout. The caller exits nonzero afterwards,
/// keeping the contract "exit 0 iff the emitted report has no error".
pub fn emit_error(err: &anyhow::Error) {
    // Library errors already fold their source into Display; walking the
    // anyhow chain on top of that would print the cause twice.
    let (kind, message) = match err.downcast_ref::<retroknn::Error>() {
        Some(lib) => (lib.kind(), format!("{lib}")),
        None => ("other", format!("{err:#}")),
    };
    let record = json!({
        "error": { "kind": kind, "message": message }
    });
    println!("{}", serde_json::to_string_pretty(&record).expect("static shape"));
}

/// The three text-mode sidecar files every text command needs.
#[derive(Debug, Clone, clap::Args)]
pub struct TextFiles {
    /// Vocabulary file, one token per line (line number = token id).
    #[arg(long)]
    pub vocab: PathBuf,
    /// Template file: `prefix | infix | suffix` with one [MASK].
    #[arg(long)]
    pub template: PathBuf,
}

/// Verbalizer + aggregation, shared by both modes.
#[derive(Debug, Clone, clap::Args)]
pub struct LabelArgs {
    /// Verbalizer TSV: class name, tab, label words.
    #[arg(long)]
    pub verbalizer: PathBuf,
    /// How multi-word classes combine word probabilities: sum or max.
    #[arg(long, default_value = "sum")]
    pub aggregation: Aggregation,
}

pub struct TextBundle {
    pub vocab: Vocab,
    pub template: Template,
    pub labels: LabelSpace,
}

pub fn load_text_bundle(files: &TextFiles, labels: &LabelArgs) -> anyhow::Result<TextBundle> {
    let vocab = Vocab::from_path(&files.vocab)?;
    let template = Template::from_path(&files.template, &vocab)?;
    let label_space =
        LabelSpace::from_path(&labels.verbalizer, Some(&vocab), labels.aggregation)?;
    Ok(TextBundle {
        vocab,
        template,
        labels: label_space,
    })
}

pub fn load_feature_labels(labels: &LabelArgs) -> anyhow::Result<LabelSpace> {
    Ok(LabelSpace::from_path(
        &labels.verbalizer,
        None,
        labels.aggregation,
    )?)
}

/// One classifier artifact: a trained encoder checkpoint (text mode) or a
/// frozen prototype matrix (feature mode). Exactly one must be given.
#[derive(Debug, Clone, clap::Args)]
pub struct ModelFiles {
    /// Encoder checkpoint (text mode).
    #[arg(long, conflicts_with = "prototype")]
    pub encoder: Option<PathBuf>,
    /// Prototype classifier file (feature mode).
    #[arg(long)]
    pub prototype: Option<PathBuf>,
}

pub enum LoadedModel {
    Encoder(ToyEncoder),
    Prototype(PrototypeClassifier),
}

pub fn load_model(files: &ModelFiles) -> anyhow::Result<LoadedModel> {
    match (&files.encoder, &files.prototype) {
        (Some(path), None) => Ok(LoadedModel::Encoder(ToyEncoder::load(path)?)),
        (None, Some(path)) => Ok(LoadedModel::Prototype(PrototypeClassifier::load(path)?)),
        _ => bail!("give exactly one of --encoder (text mode) or --prototype (feature mode)"),
    }
}

/// Store construction knobs shared by every command that builds one.
#[derive(Debug, Clone, clap::Args)]
pub struct StoreArgs {
    /// Key scoring: dot or cosine.
    #[arg(long, default_value = "dot")]
    pub similarity: retroknn::index::Similarity,
    /// Index structure: flat (exact) or ivf (clustered).
    #[arg(long, default_value = "flat")]
    pub index: String,
    /// IVF cluster count; defaults to ceil(sqrt(n)).
    #[arg(long)]
    pub n_list: Option<usize>,
    /// IVF clusters probed per query; defaults to max(1, n_list / 8).
    #[arg(long)]
    pub n_probe: Option<usize>,
    /// Lloyd iterations for IVF training.
    #[arg(long, default_value_t = 10)]
    pub kmeans_iters: usize,
}

impl StoreArgs {
    pub fn config(&self, seed: u64) -> anyhow::Result<StoreConfig> {
        let index = match self.index.as_str() {
            "flat" => IndexChoice::Flat,
            "ivf" => IndexChoice::Ivf {
                n_list: self.n_list,
                n_probe: self.n_probe,
                iters: self.kmeans_iters,
                seed,
            },
            other => bail!("unknown index {other:?} (expected flat or ivf)"),
        };
        Ok(StoreConfig {
            similarity: self.similarity,
            index,
        })
    }
}

/// Parse a comma-separated numeric grid.
pub fn parse_grid(text: &str) -> anyhow::Result<Vec<f64>> {
    let values: Vec<f64> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .with_context(|| format!("bad grid value {s:?}"))
        })
        .collect::<anyhow::Result<_>>()?;
    if values.is_empty() {
        bail!("grid must contain at least one value");
    }
    if values.iter().any(|v| !v.is_finite()) {
        bail!("grid values must be finite");
    }
    Ok(values)
}
