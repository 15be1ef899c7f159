//! Training, evaluation, the zero-shot protocol, and hyperparameter sweeps.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context};
use serde::Serialize;

use retroknn::dataset::{load_examples, DataMode};
use retroknn::store::KnowledgeStore;
use retroknn::trainer::{
    self, evaluate, DemoSource, EvalReport, ProtoModel, PromptModel, TrainConfig, TrainInputs,
};
use retroknn::types::Example;

use crate::common::{
    self, emit, load_feature_labels, load_text_bundle, resolve_seed, LabelArgs, ModelFiles,
    StoreArgs, TextFiles,
};

// ---------------------------------------------------------------------------
// Shared config assembly

#[derive(Debug, Clone, clap::Args)]
pub struct ConfigArgs {
    /// `key = value` config file overlaying the built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Inline overrides applied after --config, e.g. --set lr=0.3.
    #[arg(long = "set", value_name = "KEY=VAL")]
    pub set: Vec<String>,
    /// Train with this single seed (overrides the config's seed list;
    /// RETRO_SEED plays the same role when no seeds were configured).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Drop the retrieval-weighted training loss.
    #[arg(long)]
    pub no_knn_train: bool,
    /// Drop neighbor interpolation at prediction time.
    #[arg(long)]
    pub no_knn_test: bool,
    /// Drop demonstration fusion.
    #[arg(long)]
    pub no_demo: bool,
    /// Never re-encode store keys during training.
    #[arg(long)]
    pub no_refresh: bool,
}

impl ConfigArgs {
    pub fn build(&self) -> anyhow::Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for kv in &self.set {
            let (key, value) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VAL, got {kv:?}"))?;
            cfg.apply_kv(key.trim(), value.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        } else if cfg.seeds == TrainConfig::default().seeds {
            if let Ok(env) = std::env::var("RETRO_SEED") {
                let seed: u64 = env
                    .parse()
                    .with_context(|| format!("RETRO_SEED must be an integer, got {env:?}"))?;
                cfg.seeds = vec![seed];
            }
        }
        if self.no_knn_train {
            cfg.flags.knn_train = false;
        }
        if self.no_knn_test {
            cfg.flags.knn_test = false;
        }
        if self.no_demo {
            cfg.flags.demo = false;
        }
        if self.no_refresh {
            cfg.flags.refresh = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_text_split(
    path: &PathBuf,
    bundle: &common::TextBundle,
) -> anyhow::Result<Vec<Example>> {
    let (examples, mode) = load_examples(path, Some(&bundle.vocab), &bundle.labels)?;
    if !matches!(mode, DataMode::Text) {
        bail!("{} holds feature records; this command trains the text encoder", path.display());
    }
    Ok(examples)
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Labeled training JSONL.
    #[arg(long)]
    pub train: PathBuf,
    /// Labeled dev JSONL (checkpoint selection).
    #[arg(long)]
    pub dev: PathBuf,
    /// Labeled test JSONL (headline numbers when given).
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[command(flatten)]
    pub text: TextFiles,
    #[command(flatten)]
    pub labels: LabelArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Write encoder.renc and store.rknn into this directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Mirror the JSON report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct TrainCliReport {
    selected_seed: u64,
    config: TrainConfig,
    eval: EvalReport,
}

pub fn train(args: TrainArgs) -> anyhow::Result<()> {
    let cfg = args.config.build()?;
    let bundle = load_text_bundle(&args.text, &args.labels)?;
    let train_set = load_text_split(&args.train, &bundle)?;
    let dev_set = load_text_split(&args.dev, &bundle)?;
    let test_set = args
        .test
        .as_ref()
        .map(|p| load_text_split(p, &bundle))
        .transpose()?;

    let outcome = trainer::train(
        &TrainInputs {
            train: &train_set,
            dev: &dev_set,
            test: test_set.as_deref(),
            vocab_size: bundle.vocab.len(),
            template: &bundle.template,
            labels: &bundle.labels,
        },
        &cfg,
    )?;

    if let Some(dir) = &args.out_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        outcome.encoder.save(&dir.join("encoder.renc"))?;
        outcome.store.save(&dir.join("store.rknn"))?;
    }

    let report = TrainCliReport {
        selected_seed: outcome.selected_seed,
        config: cfg,
        eval: outcome.report,
    };
    emit(&report, args.out.as_deref())
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    /// Labeled JSONL split to score.
    #[arg(long)]
    pub data: PathBuf,
    /// Store file backing retrieval.
    #[arg(long)]
    pub store: PathBuf,
    /// Text-mode sidecars (with --encoder).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[command(flatten)]
    pub labels: LabelArgs,
    #[command(flatten)]
    pub model: ModelFiles,
    #[command(flatten)]
    pub store_cfg: StoreArgs,
    /// Weight on the neighbor vote.
    #[arg(long, default_value_t = 0.2)]
    pub lambda: f64,
    /// Neighbors per query.
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    /// Demonstrations fused per class (text mode).
    #[arg(long, default_value_t = 1)]
    pub m: usize,
    /// Score the model alone, ignoring the neighbor vote.
    #[arg(long)]
    pub no_knn_test: bool,
    /// Skip demonstration fusion.
    #[arg(long)]
    pub no_demo: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let seed = resolve_seed(args.seed);
    let store = KnowledgeStore::load_with(&args.store, args.store_cfg.config(seed)?)?;
    let lambda = if args.no_knn_test { 0.0 } else { args.lambda };
    let knn_store = (!args.no_knn_test).then_some(&store);

    let report = match common::load_model(&args.model)? {
        common::LoadedModel::Encoder(encoder) => {
            let (Some(vocab), Some(template)) = (&args.vocab, &args.template) else {
                bail!("--encoder needs --vocab and --template");
            };
            let bundle = load_text_bundle(
                &TextFiles {
                    vocab: vocab.clone(),
                    template: template.clone(),
                },
                &args.labels,
            )?;
            crate::cmd_data::check_encoder_fits(&encoder, &bundle)?;
            let data = load_text_split(&args.data, &bundle)?;
            let model = PromptModel {
                encoder: &encoder,
                template: &bundle.template,
                labels: &bundle.labels,
                demos: (!args.no_demo && args.m > 0).then_some(DemoSource {
                    store: &store,
                    m: args.m,
                }),
            };
            let ev = evaluate(&model, knn_store, &data, lambda, args.k)?;
            EvalReport::single("eval", &ev, lambda, args.k)
        }
        common::LoadedModel::Prototype(proto) => {
            let labels = load_feature_labels(&args.labels)?;
            let (data, mode) = load_examples(&args.data, None, &labels)?;
            if !matches!(mode, DataMode::Feature(_)) {
                bail!("prototype mode expects feature records");
            }
            let model = ProtoModel { prototype: &proto };
            let ev = evaluate(&model, knn_store, &data, lambda, args.k)?;
            EvalReport::single("eval", &ev, lambda, args.k)
        }
    };
    emit(&report, args.out.as_deref())
}

// ---------------------------------------------------------------------------
// pseudo-zero-shot

#[derive(Debug, clap::Args)]
pub struct PseudoZeroShotArgs {
    /// Unlabeled JSONL pool; any labels present are ignored and replaced
    /// with the frozen model's own predictions.
    #[arg(long)]
    pub pool: PathBuf,
    /// Labeled JSONL test split.
    #[arg(long)]
    pub test: PathBuf,
    /// Text-mode sidecars (with --encoder).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[command(flatten)]
    pub labels: LabelArgs,
    #[command(flatten)]
    pub model: ModelFiles,
    #[command(flatten)]
    pub store_cfg: StoreArgs,
    #[arg(long, default_value_t = 0.7)]
    pub lambda: f64,
    #[arg(long, default_value_t = 256)]
    pub k: usize,
    /// Persist the pseudo-labeled store here.
    #[arg(long)]
    pub save_store: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn pseudo_zero_shot(args: PseudoZeroShotArgs) -> anyhow::Result<()> {
    let seed = resolve_seed(args.seed);
    let store_config = args.store_cfg.config(seed)?;

    let (report, store) = match common::load_model(&args.model)? {
        common::LoadedModel::Encoder(encoder) => {
            let (Some(vocab), Some(template)) = (&args.vocab, &args.template) else {
                bail!("--encoder needs --vocab and --template");
            };
            let bundle = load_text_bundle(
                &TextFiles {
                    vocab: vocab.clone(),
                    template: template.clone(),
                },
                &args.labels,
            )?;
            crate::cmd_data::check_encoder_fits(&encoder, &bundle)?;
            let pool = load_text_split(&args.pool, &bundle)?;
            let test = load_text_split(&args.test, &bundle)?;
            let model = PromptModel {
                encoder: &encoder,
                template: &bundle.template,
                labels: &bundle.labels,
                demos: None,
            };
            trainer::zero_shot(
                &model,
                &bundle.labels,
                &pool,
                &test,
                args.lambda,
                args.k,
                store_config,
            )?
        }
        common::LoadedModel::Prototype(proto) => {
            let labels = load_feature_labels(&args.labels)?;
            let (pool, _) = load_examples(&args.pool, None, &labels)?;
            let (test, _) = load_examples(&args.test, None, &labels)?;
            let model = ProtoModel { prototype: &proto };
            trainer::zero_shot(
                &model,
                &labels,
                &pool,
                &test,
                args.lambda,
                args.k,
                store_config,
            )?
        }
    };

    if let Some(path) = &args.save_store {
        store.save(path)?;
    }
    emit(&report, args.out.as_deref())
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Debug, clap::Args)]
pub struct SweepArgs {
    /// Knob to sweep: beta, lambda, or k.
    #[arg(long)]
    pub param: String,
    /// Comma-separated grid values.
    #[arg(long)]
    pub grid: String,
    /// Few-shot inputs (beta/lambda/k sweeps over trained models).
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[command(flatten)]
    pub labels: LabelArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Zero-shot sweep: frozen prototype, pseudo-labeled pool.
    #[arg(long)]
    pub zero_shot: bool,
    #[arg(long)]
    pub prototype: Option<PathBuf>,
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Fixed lambda while sweeping k (zero-shot default 0.7).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Fixed k while sweeping lambda (zero-shot default 256).
    #[arg(long)]
    pub k: Option<usize>,
    /// Write the curve as CSV here (value,mean_accuracy,std_accuracy).
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct SweepRow {
    value: f64,
    mean_accuracy: f64,
    std_accuracy: f64,
}

#[derive(Serialize)]
struct SweepReport {
    param: String,
    mode: String,
    fixed_lambda: f64,
    fixed_k: usize,
    rows: Vec<SweepRow>,
    /// Curve-shape warnings, e.g. a k-curve that dips on its way up instead
    /// of rising to a plateau.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    notes: Vec<String>,
}

/// Expected k-curve shape: accuracy keeps rising (within a point) until it
/// converges. A drop of more than one point between consecutive grid values
/// before the peak breaks that trend and earns a warning note.
fn k_trend_notes(rows: &[SweepRow]) -> Vec<String> {
    let peak = rows
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.mean_accuracy.total_cmp(&b.1.mean_accuracy))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut notes = Vec::new();
    for i in 0..peak {
        let drop = rows[i].mean_accuracy - rows[i + 1].mean_accuracy;
        if drop > 0.01 {
            notes.push(format!(
                "k-curve drops {:.4} between k={} and k={} before its peak at k={}",
                drop, rows[i].value, rows[i + 1].value, rows[peak].value
            ));
        }
    }
    notes
}

pub fn sweep(args: SweepArgs) -> anyhow::Result<()> {
    let grid = common::parse_grid(&args.grid)?;
    match args.param.as_str() {
        "beta" | "lambda" | "k" => {}
        other => bail!("unknown sweep param {other:?} (expected beta, lambda, or k)"),
    }
    if args.param == "k" {
        for v in &grid {
            if v.fract() != 0.0 || *v < 1.0 {
                bail!("k grid values must be positive integers, got {v}");
            }
        }
    }
    if args.param == "lambda" {
        for v in &grid {
            if !(0.0..=1.0).contains(v) {
                bail!("lambda grid values must lie in [0, 1], got {v}");
            }
        }
    }

    let report = if args.zero_shot {
        zero_shot_sweep(&args, &grid)?
    } else {
        few_shot_sweep(&args, &grid)?
    };

    if let Some(path) = &args.csv {
        let mut text = String::from("value,mean_accuracy,std_accuracy\n");
        for row in &report.rows {
            text.push_str(&format!(
                "{},{},{}\n",
                row.value, row.mean_accuracy, row.std_accuracy
            ));
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    emit(&report, args.out.as_deref())
}

/// Beta retrains per grid point; lambda and k are inference knobs, so each
/// seed trains once and the grid reuses its model and store.
fn few_shot_sweep(args: &SweepArgs, grid: &[f64]) -> anyhow::Result<SweepReport> {
    let (Some(train), Some(dev), Some(vocab), Some(template)) =
        (&args.train, &args.dev, &args.vocab, &args.template)
    else {
        bail!("few-shot sweeps need --train, --dev, --vocab, and --template");
    };
    let cfg = args.config.build()?;
    let bundle = load_text_bundle(
        &TextFiles {
            vocab: vocab.clone(),
            template: template.clone(),
        },
        &args.labels,
    )?;
    let train_set = load_text_split(train, &bundle)?;
    let dev_set = load_text_split(dev, &bundle)?;
    let test_set = args
        .test
        .as_ref()
        .map(|p| load_text_split(p, &bundle))
        .transpose()?;
    let eval_set: &[Example] = test_set.as_deref().unwrap_or(&dev_set);
    let inputs = TrainInputs {
        train: &train_set,
        dev: &dev_set,
        test: test_set.as_deref(),
        vocab_size: bundle.vocab.len(),
        template: &bundle.template,
        labels: &bundle.labels,
    };

    let fixed_lambda = args.lambda.unwrap_or(cfg.hyper.lambda);
    let fixed_k = args.k.unwrap_or(cfg.hyper.k);
    let mut rows = Vec::with_capacity(grid.len());

    if args.param == "beta" {
        for &value in grid {
            let mut cfg_v = cfg.clone();
            cfg_v.hyper.beta = value;
            cfg_v.validate()?;
            let outcome = trainer::train(&inputs, &cfg_v)?;
            rows.push(SweepRow {
                value,
                mean_accuracy: outcome.report.accuracy,
                std_accuracy: outcome.report.accuracy_std,
            });
        }
    } else {
        // One trained model per seed, reused across the entire grid.
        let mut runs = Vec::with_capacity(cfg.seeds.len());
        for &seed in &cfg.seeds {
            let mut cfg_s = cfg.clone();
            cfg_s.seeds = vec![seed];
            runs.push(trainer::train(&inputs, &cfg_s)?);
        }
        for &value in grid {
            let (lambda, k) = match args.param.as_str() {
                "lambda" => (value, fixed_k),
                _ => (fixed_lambda, value as usize),
            };
            let mut accs = Vec::with_capacity(runs.len());
            for outcome in &runs {
                let model = PromptModel {
                    encoder: &outcome.encoder,
                    template: &bundle.template,
                    labels: &bundle.labels,
                    demos: cfg.flags.demo.then_some(DemoSource {
                        store: &outcome.store,
                        m: cfg.hyper.m,
                    }),
                };
                let ev = evaluate(&model, Some(&outcome.store), eval_set, lambda, k)?;
                accs.push(ev.accuracy);
            }
            rows.push(stat_row(value, &accs));
        }
    }

    let notes = if args.param == "k" { k_trend_notes(&rows) } else { Vec::new() };
    Ok(SweepReport {
        param: args.param.clone(),
        mode: "few-shot".into(),
        fixed_lambda,
        fixed_k,
        rows,
        notes,
    })
}

/// The pseudo-labeled store is built once; lambda and k only change how
/// its votes are mixed in, and nothing here retrains.
fn zero_shot_sweep(args: &SweepArgs, grid: &[f64]) -> anyhow::Result<SweepReport> {
    if args.param == "beta" {
        bail!("beta shapes the training loss; a zero-shot sweep never trains");
    }
    let (Some(proto_path), Some(pool), Some(test)) = (&args.prototype, &args.pool, &args.test)
    else {
        bail!("zero-shot sweeps need --prototype, --pool, and --test");
    };
    let proto = retroknn::encoder::PrototypeClassifier::load(proto_path)?;
    let labels = load_feature_labels(&args.labels)?;
    let (pool_set, _) = load_examples(pool, None, &labels)?;
    let (test_set, _) = load_examples(test, None, &labels)?;
    let model = ProtoModel { prototype: &proto };

    let seed = resolve_seed(args.config.seed);
    let fixed_lambda = args.lambda.unwrap_or(0.7);
    let fixed_k = args.k.unwrap_or(256);

    let (_, store) = trainer::zero_shot(
        &model,
        &labels,
        &pool_set,
        &test_set,
        fixed_lambda,
        fixed_k,
        common::StoreArgs {
            similarity: retroknn::index::Similarity::Dot,
            index: "flat".into(),
            n_list: None,
            n_probe: None,
            kmeans_iters: 10,
        }
        .config(seed)?,
    )?;

    let mut rows = Vec::with_capacity(grid.len());
    for &value in grid {
        let (lambda, k) = match args.param.as_str() {
            "lambda" => (value, fixed_k),
            _ => (fixed_lambda, value as usize),
        };
        let ev = evaluate(&model, Some(&store), &test_set, lambda, k)?;
        rows.push(SweepRow {
            value,
            mean_accuracy: ev.accuracy,
            std_accuracy: 0.0,
        });
    }

    let notes = if args.param == "k" { k_trend_notes(&rows) } else { Vec::new() };
    Ok(SweepReport {
        param: args.param.clone(),
        mode: "zero-shot".into(),
        fixed_lambda,
        fixed_k,
        rows,
        notes,
    })
}

fn stat_row(value: f64, accs: &[f64]) -> SweepRow {
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    SweepRow {
        value,
        mean_accuracy: mean,
        std_accuracy: var.sqrt(),
    }
}
