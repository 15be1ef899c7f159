//! Index benchmarking and memorization analysis.

use std::collections::HashSet;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use retroknn::dataset::{load_examples, DataMode};
use retroknn::index::{default_n_list, FlatIndex, IvfIndex, Similarity};
use retroknn::memorization::{
    decile_report, memorization_score, EncoderInfluence, HessianSource, InfluenceModel,
    InfluenceOptions, Target,
};
use retroknn::retro::{guidance_factor, KnnResult};
use retroknn::store::KnowledgeStore;
use retroknn::trainer::{self, ClassModel, ModeFlags, PromptModel, TrainInputs};
use retroknn::types::{Embedding, Example, Template};

use crate::cmd_run::ConfigArgs;
use crate::common::{self, emit, load_text_bundle, resolve_seed, LabelArgs, TextFiles};

// ---------------------------------------------------------------------------
// bench-index

#[derive(Debug, clap::Args)]
pub struct BenchIndexArgs {
    /// Benchmark the keys of an existing store instead of synthetic ones.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Synthetic entry count when no store is given.
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    /// Synthetic key dimension.
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    /// Clusters in the synthetic key distribution.
    #[arg(long, default_value_t = 32)]
    pub blobs: usize,
    /// Queries to run against each index.
    #[arg(long, default_value_t = 256)]
    pub queries: usize,
    /// Neighbors per query.
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    /// Posting lists (default ceil(sqrt(n))).
    #[arg(long)]
    pub n_list: Option<usize>,
    /// Comma-separated probe counts (default: powers of two up to n_list).
    #[arg(long)]
    pub probes: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub kmeans_iters: usize,
    /// Scoring rule for synthetic runs (stores carry their own).
    #[arg(long, default_value = "dot")]
    pub similarity: Similarity,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct ProbeRow {
    n_probe: usize,
    recall_at_k: f64,
    qps: f64,
}

#[derive(Serialize)]
struct BenchIndexReport {
    entries: usize,
    dim: usize,
    queries: usize,
    k: usize,
    similarity: Similarity,
    n_list: usize,
    /// Exhaustive-scan throughput; recall there is 1 by construction.
    flat_qps: f64,
    rows: Vec<ProbeRow>,
}

/// Clustered synthetic keys: `blobs` unit-norm centers with jitter scaled
/// by 1/sqrt(d). Equal-norm blobs keep inner-product ranking aligned with
/// blob membership, so the probe curve tells the real recall story instead
/// of a norm-mismatch one.
fn synth_keys(rng: &mut ChaCha20Rng, n: usize, dim: usize, blobs: usize) -> Vec<Embedding> {
    let centers: Vec<Vec<f32>> = (0..blobs)
        .map(|_| {
            let raw: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-6);
            raw.iter().map(|v| v / norm).collect()
        })
        .collect();
    let spread = 0.3 / (dim as f32).sqrt();
    (0..n)
        .map(|i| {
            let c = &centers[i % blobs];
            let values = c
                .iter()
                .map(|v| v + rng.random_range(-spread..spread))
                .collect();
            Embedding::new(values).expect("uniform draws are finite")
        })
        .collect()
}

pub fn bench_index(args: BenchIndexArgs) -> anyhow::Result<()> {
    let seed = resolve_seed(args.seed);
    if args.queries == 0 || args.k == 0 {
        bail!("--queries and --k must be at least 1");
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (keys, sim) = match &args.store {
        Some(path) => {
            let store = KnowledgeStore::load(path)?;
            let keys: Vec<Embedding> =
                store.entries().iter().map(|e| e.key.clone()).collect();
            (keys, store.config().similarity)
        }
        None => {
            if args.n < 2 || args.blobs == 0 {
                bail!("--n must be at least 2 and --blobs at least 1");
            }
            (
                synth_keys(&mut rng, args.n, args.dim, args.blobs),
                args.similarity,
            )
        }
    };
    let n = keys.len();
    let dim = keys.first().map_or(0, Embedding::dim);
    let queries = synth_keys(&mut rng, args.queries, dim, args.blobs);
    let k = args.k.min(n);

    let n_list = args.n_list.unwrap_or_else(|| default_n_list(n));
    if n_list > n {
        bail!("--n-list {} exceeds the {} available keys", n_list, n);
    }
    let probe_grid = match &args.probes {
        Some(text) => {
            let mut grid = Vec::new();
            for part in text.split(',') {
                let p: usize = part
                    .trim()
                    .parse()
                    .with_context(|| format!("bad probe count {part:?}"))?;
                if p == 0 || p > n_list {
                    bail!("probe counts must lie in 1..={n_list}, got {p}");
                }
                grid.push(p);
            }
            grid.sort_unstable();
            grid.dedup();
            if grid.is_empty() {
                bail!("--probes must name at least one probe count");
            }
            grid
        }
        None => {
            let mut grid = Vec::new();
            let mut p = 1;
            while p < n_list {
                grid.push(p);
                p *= 2;
            }
            grid.push(n_list);
            grid
        }
    };

    let flat = FlatIndex::build(&keys, sim)?;
    let ivf = IvfIndex::train(&keys, n_list, args.kmeans_iters, 1, seed, sim)?;

    // Exhaustive scan defines the ground truth and the latency baseline.
    let start = Instant::now();
    let truth: Vec<HashSet<usize>> = queries
        .iter()
        .map(|q| {
            flat.search(q, k, None)
                .map(|hits| hits.iter().map(|h| h.entry).collect())
        })
        .collect::<retroknn::Result<_>>()?;
    let flat_qps = queries.len() as f64 / start.elapsed().as_secs_f64().max(1e-9);

    let mut rows = Vec::with_capacity(probe_grid.len());
    for &n_probe in &probe_grid {
        let start = Instant::now();
        let mut overlap = 0usize;
        let mut total = 0usize;
        for (q, gold) in queries.iter().zip(&truth) {
            let hits = ivf.search_with_probe(q, k, None, n_probe)?;
            overlap += hits.iter().filter(|h| gold.contains(&h.entry)).count();
            total += gold.len();
        }
        let qps = queries.len() as f64 / start.elapsed().as_secs_f64().max(1e-9);
        rows.push(ProbeRow {
            n_probe,
            recall_at_k: overlap as f64 / total.max(1) as f64,
            qps,
        });
    }

    let report = BenchIndexReport {
        entries: n,
        dim,
        queries: queries.len(),
        k,
        similarity: sim,
        n_list,
        flat_qps,
        rows,
    };
    emit(&report, args.out.as_deref())
}

// ---------------------------------------------------------------------------
// memorize

#[derive(Debug, clap::Args)]
pub struct MemorizeArgs {
    /// Labeled training JSONL (the examples being scored).
    #[arg(long)]
    pub train: PathBuf,
    /// Dev split for checkpoint selection (defaults to the training file).
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[command(flatten)]
    pub text: TextFiles,
    #[command(flatten)]
    pub labels: LabelArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Training style to analyze: finetune, prompt, retro, or all.
    #[arg(long, default_value = "all")]
    pub variant: String,
    /// What each deletion score measures: the example's own prediction
    /// (self) or one fixed probe example (probe).
    #[arg(long, default_value = "self")]
    pub target: String,
    /// Labeled JSONL holding the probe example (with --target probe).
    #[arg(long)]
    pub probe_data: Option<PathBuf>,
    /// Record index of the probe inside --probe-data.
    #[arg(long, default_value_t = 0)]
    pub probe_id: usize,
    /// Hessian damping grid, ascending. Early-stopped checkpoints sit far
    /// from a minimum, so the grid reaches well past the library default.
    #[arg(long, default_value = "1e-4,1e-3,1e-2,1e-1,1")]
    pub damping: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct VariantReport {
    variant: String,
    selected_seed: u64,
    param_count: usize,
    train_accuracy: f64,
    prob_scale: f64,
    mean_score: f64,
    /// Deletion score per training example, in file order.
    scores: Vec<f64>,
    /// Per-example loss gradient norms at the fitted parameters.
    grad_norms: Vec<f64>,
    damping: f64,
    condition: f64,
    hessian: HessianSource,
    fallback: bool,
    /// Example ids in the highest- and lowest-scoring deciles (absent when
    /// the corpus has fewer than ten examples).
    top_decile_ids: Option<Vec<u64>>,
    bottom_decile_ids: Option<Vec<u64>>,
    top_decile_share: Option<f64>,
}

#[derive(Serialize)]
struct MemorizeReport {
    target: String,
    variants: Vec<VariantReport>,
}

/// Parameter ceiling for the explicit dense Hessian. Above this the
/// factorization cost and memory stop being desk-scale.
const MAX_INFLUENCE_PARAMS: usize = 2000;

pub fn memorize(args: MemorizeArgs) -> anyhow::Result<()> {
    let cfg = args.config.build()?;
    let bundle = load_text_bundle(&args.text, &args.labels)?;
    let (train_set, mode) = load_examples(&args.train, Some(&bundle.vocab), &bundle.labels)?;
    if !matches!(mode, DataMode::Text) {
        bail!("memorization analysis runs on text examples");
    }
    let dev_set = match &args.dev {
        Some(path) => {
            let (dev, _) = load_examples(path, Some(&bundle.vocab), &bundle.labels)?;
            dev
        }
        None => train_set.clone(),
    };

    let damping = common::parse_grid(&args.damping)?;
    let target = match args.target.as_str() {
        "self" => Target::SelfLabel,
        "probe" => {
            let path = args
                .probe_data
                .as_ref()
                .context("--target probe needs --probe-data")?;
            let (probes, _) = load_examples(path, Some(&bundle.vocab), &bundle.labels)?;
            let probe = probes
                .get(args.probe_id)
                .with_context(|| {
                    format!("--probe-id {} out of range ({} records)", args.probe_id, probes.len())
                })?
                .clone();
            probe.gold().context("the probe example must be labeled")?;
            Target::Probe(probe)
        }
        other => bail!("unknown target {other:?} (expected self or probe)"),
    };

    let variants: Vec<&str> = match args.variant.as_str() {
        "all" => vec!["finetune", "prompt", "retro"],
        v @ ("finetune" | "prompt" | "retro") => vec![v],
        other => bail!("unknown variant {other:?} (expected finetune, prompt, retro, or all)"),
    };

    let mut out = Vec::with_capacity(variants.len());
    for name in variants {
        out.push(run_variant(
            name, &cfg, &bundle, &train_set, &dev_set, &damping, &target,
        )?);
    }
    let report = MemorizeReport {
        target: args.target,
        variants: out,
    };
    emit(&report, args.out.as_deref())
}

fn run_variant(
    name: &str,
    base: &trainer::TrainConfig,
    bundle: &common::TextBundle,
    train_set: &[Example],
    dev_set: &[Example],
    damping: &[f64],
    target: &Target,
) -> anyhow::Result<VariantReport> {
    // Plain fine-tuning strips the engineered prompt down to the one token
    // the head reads; the prompt variant keeps the template but trains
    // without any retrieval; retro is the full method.
    let mut cfg = base.clone();
    let template;
    match name {
        "finetune" => {
            cfg.flags = ModeFlags::all_off();
            template = Template::parse("|[MASK]|", &bundle.vocab)?;
        }
        "prompt" => {
            cfg.flags = ModeFlags::all_off();
            template = bundle.template.clone();
        }
        _ => template = bundle.template.clone(),
    }
    cfg.validate()?;

    let outcome = trainer::train(
        &TrainInputs {
            train: train_set,
            dev: dev_set,
            test: None,
            vocab_size: bundle.vocab.len(),
            template: &template,
            labels: &bundle.labels,
        },
        &cfg,
    )?;
    let encoder = outcome.encoder;
    if encoder.param_count() > MAX_INFLUENCE_PARAMS {
        bail!(
            "{} parameters is past the {} ceiling for the explicit Hessian; \
             shrink dim or the vocabulary",
            encoder.param_count(),
            MAX_INFLUENCE_PARAMS
        );
    }

    // Freeze the retrieval-modulated loss weights at their end-of-training
    // values; the frozen neighbor vote also shrinks how much of the
    // predicted probability the encoder's parameters can move.
    let model = PromptModel {
        encoder: &encoder,
        template: &template,
        labels: &bundle.labels,
        demos: None,
    };
    let weights: Vec<f64> = if cfg.flags.knn_train {
        let mut w = Vec::with_capacity(train_set.len());
        for ex in train_set {
            let gold = ex.gold()?;
            let q = model.query_embedding(ex)?;
            let got = outcome.store.search(&q, cfg.hyper.k, Some(ex.id))?;
            let p_ref = if got.hits.is_empty() {
                0.0
            } else {
                let classes = outcome.store.hit_classes(&got.hits);
                KnnResult::from_hits(&got.hits, &classes, bundle.labels.class_count(), Some(gold))?
                    .p_ref
                    .expect("reference class supplied")
            };
            w.push(1.0 + cfg.hyper.beta * guidance_factor(p_ref));
        }
        w
    } else {
        vec![1.0; train_set.len()]
    };
    let prob_scale = if cfg.flags.knn_test {
        if cfg.hyper.lambda >= 1.0 {
            bail!(
                "lambda = 1 hands the whole prediction to the neighbor vote; \
                 parameter deletion scores would be identically zero"
            );
        }
        1.0 - cfg.hyper.lambda
    } else {
        1.0
    };

    let train_accuracy = trainer::evaluate(
        &model,
        cfg.flags.knn_test.then_some(&outcome.store),
        train_set,
        if cfg.flags.knn_test { cfg.hyper.lambda } else { 0.0 },
        cfg.hyper.k,
    )?
    .accuracy;

    let influence = EncoderInfluence::new(
        encoder,
        template,
        bundle.labels.clone(),
        train_set.to_vec(),
        weights,
        prob_scale,
    )?;
    let options = InfluenceOptions {
        damping: damping.to_vec(),
        target: target.clone(),
        ..InfluenceOptions::default()
    };
    let scored = memorization_score(&influence, &options)?;

    let params = influence.params();
    let grad_norms: Vec<f64> = (0..train_set.len())
        .map(|i| {
            influence
                .loss_grad(&params, i)
                .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
        })
        .collect::<retroknn::Result<_>>()?;

    let (top_ids, bottom_ids, top_share) = if train_set.len() >= 10 {
        let deciles = decile_report(&scored.scores)?;
        let ids = |members: &[usize]| members.iter().map(|&i| train_set[i].id).collect::<Vec<_>>();
        (
            Some(ids(&deciles.deciles[0].members)),
            Some(ids(&deciles.deciles[9].members)),
            Some(deciles.top_decile_share),
        )
    } else {
        (None, None, None)
    };

    let mean_score = scored.scores.iter().sum::<f64>() / scored.scores.len() as f64;
    Ok(VariantReport {
        variant: name.to_string(),
        selected_seed: outcome.selected_seed,
        param_count: influence.param_count(),
        train_accuracy,
        prob_scale,
        mean_score,
        scores: scored.scores,
        grad_norms,
        damping: scored.damping,
        condition: scored.condition,
        hessian: scored.hessian,
        fallback: scored.fallback,
        top_decile_ids: top_ids,
        bottom_decile_ids: bottom_ids,
        top_decile_share: top_share,
    })
}
