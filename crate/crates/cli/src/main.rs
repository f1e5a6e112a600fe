use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use bend_core::augment::{Augmenter, ExternalAugmenter, TemplateAugmenter, DEFAULT_AUGMENT_TIMEOUT};
use bend_core::client::{EmbeddingClient, EmbeddingEndpoint, DEFAULT_TIMEOUT_MS, ENDPOINT_ENV};
use bend_core::dataset::{
    make_folds, prepare_out_dir, read_dataset, read_queries, split_reference_target, synth_generate,
    synth_queries, write_dataset, write_queries, QueryRecord, SplitSpec, SynthSpec, MANIFEST_FILE,
};
use bend_core::equalize::DebiasMode;
use bend_core::index::{LabeledEmbeddingTable, ReferenceIndex};
use bend_core::metrics::AttributeDistribution;
use bend_core::pipeline::{
    parse_modes, parse_relevant_count, resolve_all, retrieve, uniform_prior, Debiaser, Evaluation,
    QueryResolver, RunConfig, SubsetAnchor, DEFAULT_K,
};
use bend_core::report::{to_canonical_json, SCHEMA};
use bend_core::subspace::GenericColumns;
use bend_core::{AttributeSpace, BendError, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bend", version, about = "Test-time debiasing of vision-language embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset and matching queries.
    Synth(SynthArgs),
    /// Debias one query against a reference dataset.
    Debias(DebiasArgs),
    /// Retrieve the top-k target records for one query.
    Retrieve(RetrieveArgs),
    /// Evaluate modes x queries x folds and write JSON and CSV reports.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON generator spec. Without it a two-value spec is built from the flags below.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 500)]
    per_cell: usize,
    #[arg(long, default_value_t = 0.8)]
    beta: f64,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Alternate the sign of beta between classes instead of favouring the first value everywhere.
    #[arg(long)]
    alternate: bool,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct QueryArgs {
    /// Query text (needs an embedding endpoint).
    #[arg(long, conflicts_with_all = ["query_vector", "query_file"])]
    query: Option<String>,
    /// Query embedding as comma-separated numbers.
    #[arg(long, conflicts_with = "query_file")]
    query_vector: Option<String>,
    /// Queries JSONL file; the first record is used unless --query-id is given.
    #[arg(long)]
    query_file: Option<PathBuf>,
    #[arg(long, requires = "query_file")]
    query_id: Option<String>,
}

#[derive(Args)]
struct CommonArgs {
    #[arg(long, default_value = "gender")]
    attribute: String,
    /// Relevant records per value: a count, `elbow` or `elbow:<max>`.
    #[arg(long, default_value = "100")]
    n: String,
    /// Comma-separated: baseline, step1-only, step2-only, full.
    #[arg(long)]
    modes: Option<String>,
    /// Generic prompt columns in the attribute matrix: diff, raw or none.
    #[arg(long, default_value = "diff")]
    generic_columns: String,
    /// Reference records for step 2 are chosen near the step-1 output
    /// (`projected`) or the raw query (`query`).
    #[arg(long, default_value = "projected")]
    subset_anchor: String,
    #[arg(long, env = ENDPOINT_ENV)]
    embed_endpoint: Option<String>,
    #[arg(long, default_value_t = DEFAULT_TIMEOUT_MS)]
    embed_timeout_ms: u64,
    /// Static bearer token for the embedding service.
    #[arg(long, env = "BEND_EMBED_TOKEN", hide_env_values = true)]
    embed_token: Option<String>,
    #[arg(long)]
    augment_endpoint: Option<String>,
    #[arg(long, default_value_t = DEFAULT_AUGMENT_TIMEOUT.as_millis() as u64)]
    augment_timeout_ms: u64,
    /// Fall back to templates when the augmenter fails.
    #[arg(long)]
    augment_fallback: bool,
    /// Debias queries even when they already name an attribute value.
    #[arg(long)]
    debias_explicit: bool,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct DebiasArgs {
    #[arg(long)]
    reference: PathBuf,
    #[command(flatten)]
    query: QueryArgs,
    #[command(flatten)]
    common: CommonArgs,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    target: PathBuf,
    /// Reference dataset; required for any mode other than baseline.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[command(flatten)]
    query: QueryArgs,
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    /// JSON object mapping each attribute value to its prior probability.
    #[arg(long)]
    prior: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Queries JSONL file.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    /// Target dataset. When omitted the reference is split in half by --seed.
    #[arg(long)]
    target: Option<PathBuf>,
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Uniform over the attribute's values when omitted.
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Output directory for report.json, aggregate.csv and queries.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Debias(a) => cmd_debias(a),
        Command::Retrieve(a) => cmd_retrieve(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    };
    match result {
        Ok(0) => ExitCode::SUCCESS,
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("bend: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn warn(msg: &str) {
    eprintln!("bend: warning: {msg}");
}

fn cmd_synth(a: SynthArgs) -> Result<i32> {
    let mut spec = match &a.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| BendError::io(path, e))?;
            serde_json::from_str::<SynthSpec>(&text)
                .map_err(|e| BendError::Spec(format!("{}: {e}", path.display())))?
        }
        None if a.alternate => SynthSpec::balanced(a.dim, 0, a.noise, a.beta, a.classes, a.per_cell),
        None => SynthSpec::aligned(a.dim, 0, a.noise, a.beta, a.classes, a.per_cell),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let table = synth_generate(&spec)?;
    let queries = synth_queries(&spec)?;
    write_dataset(&table, &a.out, a.force)?;
    if !queries.is_empty() {
        write_queries(a.out.join("queries.jsonl"), &queries)?;
    }
    println!("{}", a.out.join(MANIFEST_FILE).display());
    Ok(0)
}

fn run_config(c: &CommonArgs, k: usize, seed: u64, folds: usize, default_modes: &[DebiasMode]) -> Result<RunConfig> {
    let cfg = RunConfig {
        attribute: c.attribute.clone(),
        count: parse_relevant_count(&c.n)?,
        k,
        modes: match &c.modes {
            Some(m) => parse_modes(m)?,
            None => default_modes.to_vec(),
        },
        seed,
        fold_count: folds,
        generic_columns: c.generic_columns.parse::<GenericColumns>()?,
        subset_anchor: c.subset_anchor.parse::<SubsetAnchor>()?,
        jobs: c.jobs,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn embedder(c: &CommonArgs, dim: usize) -> Option<EmbeddingClient> {
    let url = c.embed_endpoint.as_deref().filter(|u| !u.trim().is_empty())?;
    let mut ep = EmbeddingEndpoint::new(url, dim);
    ep.timeout_ms = c.embed_timeout_ms;
    ep.bearer = c.embed_token.clone();
    Some(EmbeddingClient::new(&ep))
}

fn augmenter(c: &CommonArgs) -> Box<dyn Augmenter> {
    match &c.augment_endpoint {
        Some(url) => Box::new(ExternalAugmenter::new(
            url,
            Duration::from_millis(c.augment_timeout_ms),
            c.augment_fallback,
        )),
        None => Box::new(TemplateAugmenter),
    }
}

fn query_record(q: &QueryArgs) -> Result<QueryRecord> {
    let blank = |id: &str| QueryRecord {
        id: id.to_owned(),
        text: None,
        vector: None,
        augmented: None,
        generic: None,
        class: None,
    };
    if let Some(text) = &q.query {
        return Ok(QueryRecord {
            text: Some(text.clone()),
            ..blank("query")
        });
    }
    if let Some(v) = &q.query_vector {
        let vector = v
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| BendError::Config(format!("--query-vector: {e}")))?;
        return Ok(QueryRecord {
            vector: Some(vector),
            ..blank("query")
        });
    }
    let Some(path) = &q.query_file else {
        return Err(BendError::Config(
            "one of --query, --query-vector or --query-file is required".into(),
        ));
    };
    let records = read_queries(path)?;
    match &q.query_id {
        Some(id) => records
            .into_iter()
            .find(|r| &r.id == id)
            .ok_or_else(|| BendError::InvalidQuery(format!("no query with id {id:?} in {}", path.display()))),
        None => records
            .into_iter()
            .next()
            .ok_or_else(|| BendError::InvalidQuery(format!("{} has no queries", path.display()))),
    }
}

fn load_prior(path: Option<&Path>, space: &AttributeSpace) -> Result<AttributeDistribution> {
    let Some(path) = path else {
        return uniform_prior(space);
    };
    let text = std::fs::read_to_string(path).map_err(|e| BendError::io(path, e))?;
    let map: BTreeMap<String, f64> = serde_json::from_str(&text)
        .map_err(|e| BendError::Config(format!("prior {}: {e}", path.display())))?;
    AttributeDistribution::from_map(space, &map)
}

fn emit(out: Option<&Path>, force: bool, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            if path.exists() && !force {
                return Err(BendError::AlreadyExists(path.to_owned()));
            }
            std::fs::write(path, text).map_err(|e| BendError::io(path, e))
        }
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| BendError::io("<stdout>", e)),
    }
}

fn space_of(table: &LabeledEmbeddingTable, attribute: &str) -> Result<AttributeSpace> {
    Ok(table.attribute(attribute)?.1.clone())
}

fn cmd_debias(a: DebiasArgs) -> Result<i32> {
    let reference = read_dataset(&a.reference)?;
    let cfg = run_config(&a.common, DEFAULT_K, 0, 1, &[DebiasMode::Full])?;
    let space = space_of(&reference, &cfg.attribute)?;
    let aug = augmenter(&a.common);
    let resolver = QueryResolver::new(&space, reference.dim(), embedder(&a.common, reference.dim()), aug.as_ref())
        .passthrough_explicit(!a.common.debias_explicit);
    let q = resolver.resolve(&query_record(&a.query)?)?;
    if let Some(w) = q.augmented_texts.as_ref().and_then(|s| s.warning.as_deref()) {
        warn(w);
    }
    let index = ReferenceIndex::build(reference)?;
    let debiaser = Debiaser::new(&index, &cfg)?;
    let mut reports = BTreeMap::new();
    for mode in &cfg.modes {
        reports.insert(mode.as_str().to_owned(), debiaser.run(&q, *mode)?);
    }
    let doc = serde_json::json!({
        "schema": SCHEMA,
        "id": q.id,
        "explicit": q.explicit,
        "modes": reports,
    });
    emit(a.out.as_deref(), a.force, &to_canonical_json(&doc)?)?;
    Ok(0)
}

fn cmd_retrieve(a: RetrieveArgs) -> Result<i32> {
    let target = read_dataset(&a.target)?;
    let default_mode = if a.reference.is_some() { DebiasMode::Full } else { DebiasMode::Baseline };
    let cfg = run_config(&a.common, a.k, 0, 1, &[default_mode])?;
    let [mode] = cfg.modes[..] else {
        return Err(BendError::Config("retrieve takes a single mode".into()));
    };
    let space = space_of(&target, &cfg.attribute)?;
    let prior = a.prior.as_deref().map(|p| load_prior(Some(p), &space)).transpose()?;
    let aug = augmenter(&a.common);
    let record = query_record(&a.query)?;

    let query = match (&a.reference, mode) {
        (_, DebiasMode::Baseline) => {
            let resolver = QueryResolver::new(&space, target.dim(), embedder(&a.common, target.dim()), aug.as_ref());
            resolver.resolve(&record)?.embedding
        }
        (None, m) => {
            return Err(BendError::Config(format!("mode {m} needs --reference")));
        }
        (Some(path), m) => {
            let reference = read_dataset(path)?;
            let resolver =
                QueryResolver::new(&space, reference.dim(), embedder(&a.common, reference.dim()), aug.as_ref())
                    .passthrough_explicit(!a.common.debias_explicit);
            let q = resolver.resolve(&record)?;
            let index = ReferenceIndex::build(reference)?;
            Debiaser::new(&index, &cfg)?.run(&q, m)?.output
        }
    };
    let result = retrieve(&target, None, &query, &cfg.attribute, cfg.k, prior.as_ref())?;
    if let Some(w) = &result.warning {
        warn(w);
    }
    emit(a.out.as_deref(), a.force, &to_canonical_json(&result)?)?;
    Ok(0)
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<i32> {
    let cfg = run_config(&a.common, a.k, a.seed, a.folds, &DebiasMode::ALL)?;
    let records = read_queries(&a.queries)?;
    let loaded = read_dataset(&a.reference)?;
    let (reference, target, folds) = match &a.target {
        Some(path) => {
            let target = read_dataset(path)?;
            let folds = make_folds(&target, cfg.fold_count, cfg.seed, true)?;
            (loaded, target, folds)
        }
        None => {
            let split = split_reference_target(
                &loaded,
                &SplitSpec {
                    fold_count: cfg.fold_count,
                    seed: cfg.seed,
                    ..SplitSpec::default()
                },
            )?;
            (split.reference, split.target, split.folds)
        }
    };
    let space = space_of(&reference, &cfg.attribute)?;
    let prior = load_prior(a.prior.as_deref(), &space)?;
    prepare_out_dir(&a.out, a.force)?;

    let aug = augmenter(&a.common);
    let resolver = QueryResolver::new(&space, reference.dim(), embedder(&a.common, reference.dim()), aug.as_ref())
        .passthrough_explicit(!a.common.debias_explicit);
    let queries = resolve_all(&resolver, &records);
    for (id, q) in &queries {
        match q {
            Err(e) => warn(&format!("query {id:?}: {e}")),
            Ok(q) => {
                if let Some(w) = q.augmented_texts.as_ref().and_then(|s| s.warning.as_deref()) {
                    warn(&format!("query {id:?}: {w}"));
                }
            }
        }
    }
    let index = ReferenceIndex::build(reference)?;
    let report = Evaluation {
        index: &index,
        target: &target,
        folds: &folds,
        prior: &prior,
        config: &cfg,
    }
    .run(&queries)?;

    let report_path = a.out.join("report.json");
    std::fs::write(&report_path, to_canonical_json(&report)?).map_err(|e| BendError::io(&report_path, e))?;
    report.aggregate_csv().write(&a.out.join("aggregate.csv"))?;
    report.per_query_csv().write(&a.out.join("queries.csv"))?;
    for mode in &report.modes {
        if let Some(agg) = report.aggregate.get(mode.as_str()) {
            eprintln!(
                "{:<11} KL {:.4} +- {:.4}  MaxSkew {:.4} +- {:.4}{}",
                mode.as_str(),
                agg.kl.mean,
                agg.kl.std_dev,
                agg.max_skew.mean,
                agg.max_skew.std_dev,
                agg.worst_group_auc
                    .map(|s| format!("  WG-AUC {:.4} +- {:.4}", s.mean, s.std_dev))
                    .unwrap_or_default()
            );
        }
    }
    println!("{}", report_path.display());
    Ok(report.first_error_code().unwrap_or(0))
}
