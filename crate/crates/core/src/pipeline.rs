//! Orchestration: resolving queries, debiasing, retrieval and fold-level
//! evaluation. The CLI is a thin layer over this module.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::augment::{AttributeSpace, AugmentedQuerySet, Augmenter};
use crate::client::EmbeddingClient;
use crate::dataset::QueryRecord;
use crate::equalize::{debias, DebiasMode, DebiasReport};
use crate::error::{BendError, Result};
use crate::index::{
    retrieve_top_k_among, top_n_by_attribute, LabeledEmbeddingTable, ReferenceIndex, RelevantCount,
    Retrieved, DEFAULT_N,
};
use crate::metrics::{
    empirical_distribution, kl_divergence, max_skew, worst_group_auc, AttributeDistribution, Summary,
    LOG_BASE,
};
use crate::par;
use crate::report::SCHEMA;
use crate::subspace::{build_attribute_matrix, orthogonalize, GenericColumns};
use crate::vector::{check_dim, normalize, Embedding};

pub const DEFAULT_K: usize = 500;

/// Which embedding picks the relevant reference subsets used by step 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetAnchor {
    /// The step-1 output when step 1 runs, otherwise the query.
    #[default]
    Projected,
    /// Always the unmodified query.
    Query,
}

impl std::str::FromStr for SubsetAnchor {
    type Err = BendError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "projected" => Ok(SubsetAnchor::Projected),
            "query" => Ok(SubsetAnchor::Query),
            other => Err(BendError::Config(format!(
                "subset anchor must be projected or query, got {other:?}"
            ))),
        }
    }
}

/// Parses `100`, `elbow` or `elbow:200`.
pub fn parse_relevant_count(s: &str) -> Result<RelevantCount> {
    let bad = || BendError::Config(format!("n must be a positive integer, elbow or elbow:<max>, got {s:?}"));
    let count = match s.split_once(':') {
        None if s == "elbow" => RelevantCount::Elbow { max: DEFAULT_N },
        None => RelevantCount::Fixed(s.parse().map_err(|_| bad())?),
        Some(("elbow", max)) => RelevantCount::Elbow {
            max: max.parse().map_err(|_| bad())?,
        },
        Some(_) => return Err(bad()),
    };
    match count {
        RelevantCount::Fixed(0) | RelevantCount::Elbow { max: 0 } => Err(bad()),
        c => Ok(c),
    }
}

fn describe_count(c: RelevantCount) -> String {
    match c {
        RelevantCount::Fixed(n) => n.to_string(),
        RelevantCount::Elbow { max } => format!("elbow:{max}"),
    }
}

/// Settings shared by every command.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub attribute: String,
    pub count: RelevantCount,
    pub k: usize,
    pub modes: Vec<DebiasMode>,
    pub seed: u64,
    pub fold_count: usize,
    pub generic_columns: GenericColumns,
    pub subset_anchor: SubsetAnchor,
    /// Worker threads; `None` uses the default pool.
    pub jobs: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            attribute: "gender".into(),
            count: RelevantCount::default(),
            k: DEFAULT_K,
            modes: DebiasMode::ALL.to_vec(),
            seed: 0,
            fold_count: 5,
            generic_columns: GenericColumns::default(),
            subset_anchor: SubsetAnchor::default(),
            jobs: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if matches!(self.count, RelevantCount::Fixed(0) | RelevantCount::Elbow { max: 0 }) {
            return Err(BendError::Config("n must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(BendError::Config("k must be at least 1".into()));
        }
        if self.modes.is_empty() {
            return Err(BendError::Config("at least one mode is required".into()));
        }
        if self.fold_count == 0 {
            return Err(BendError::Config("fold count must be at least 1".into()));
        }
        if self.jobs == Some(0) {
            return Err(BendError::Config("jobs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Parses a comma-separated mode list, keeping order and dropping repeats.
pub fn parse_modes(s: &str) -> Result<Vec<DebiasMode>> {
    let mut modes = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let m: DebiasMode = part.parse()?;
        if !modes.contains(&m) {
            modes.push(m);
        }
    }
    if modes.is_empty() {
        return Err(BendError::Config("at least one mode is required".into()));
    }
    Ok(modes)
}

/// The uniform distribution over `space`.
pub fn uniform_prior(space: &AttributeSpace) -> Result<AttributeDistribution> {
    let p = 1.0 / space.len() as f64;
    AttributeDistribution::new(space.values().to_vec(), vec![p; space.len()])
}

/// A query with every embedding the pipeline may need, unit-normalized and
/// in attribute-value order.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedQuery {
    pub id: String,
    pub text: Option<String>,
    pub class: Option<String>,
    pub embedding: Embedding,
    pub augmented: Option<Vec<Embedding>>,
    pub generic: Vec<Embedding>,
    pub augmented_texts: Option<AugmentedQuerySet>,
    /// The text already names an attribute value; debiasing is skipped.
    pub explicit: bool,
}

/// Turns [`QueryRecord`]s into [`ResolvedQuery`]s, calling the embedding
/// service for anything not supplied inline.
pub struct QueryResolver<'a> {
    space: &'a AttributeSpace,
    dim: usize,
    embedder: Option<EmbeddingClient>,
    augmenter: &'a dyn Augmenter,
    passthrough_explicit: bool,
}

fn unit_vector(values: &[f64], dim: usize, what: &str) -> Result<Embedding> {
    check_dim(dim, values.len())?;
    let e = Embedding::new(values.to_vec())
        .map_err(|e| BendError::InvalidQuery(format!("{what}: {e}")))?;
    normalize(&e)
}

fn per_value(
    map: &BTreeMap<String, Vec<f64>>,
    space: &AttributeSpace,
    dim: usize,
    what: &str,
) -> Result<Vec<Embedding>> {
    if let Some(k) = map.keys().find(|k| space.index_of(k).is_none()) {
        return Err(BendError::InvalidQuery(format!(
            "{what} has unknown value {k:?} for attribute {:?}",
            space.name()
        )));
    }
    space
        .values()
        .iter()
        .map(|v| {
            let values = map
                .get(v)
                .ok_or_else(|| BendError::InvalidQuery(format!("{what} is missing value {v:?}")))?;
            unit_vector(values, dim, what)
        })
        .collect()
}

impl<'a> QueryResolver<'a> {
    pub fn new(
        space: &'a AttributeSpace,
        dim: usize,
        embedder: Option<EmbeddingClient>,
        augmenter: &'a dyn Augmenter,
    ) -> Self {
        QueryResolver {
            space,
            dim,
            embedder,
            augmenter,
            passthrough_explicit: true,
        }
    }

    /// Whether queries that already name an attribute value skip debiasing
    /// (the default).
    pub fn passthrough_explicit(mut self, yes: bool) -> Self {
        self.passthrough_explicit = yes;
        self
    }

    pub fn resolve(&self, rec: &QueryRecord) -> Result<ResolvedQuery> {
        if rec.id.trim().is_empty() {
            return Err(BendError::InvalidQuery("empty id".into()));
        }
        let text = rec.text.as_deref().filter(|t| !t.trim().is_empty());
        if rec.vector.is_none() && text.is_none() {
            return Err(BendError::InvalidQuery(format!(
                "query {:?} has neither text nor vector",
                rec.id
            )));
        }
        let explicit = self.passthrough_explicit && text.is_some_and(|t| self.space.mentions_attribute(t));

        let inline_augmented = rec
            .augmented
            .as_ref()
            .map(|m| per_value(m, self.space, self.dim, "augmented"))
            .transpose()?;
        let inline_generic = rec
            .generic
            .as_ref()
            .map(|m| per_value(m, self.space, self.dim, "generic"))
            .transpose()?;

        // Everything missing that can come from text goes out in one batch.
        let mut batch: Vec<String> = Vec::new();
        let want_query = rec.vector.is_none();
        if want_query {
            batch.push(text.unwrap_or_default().to_owned());
        }
        let mut augmented_texts = None;
        let want_augmented = inline_augmented.is_none() && !explicit && text.is_some() && self.embedder.is_some();
        if want_augmented {
            let set = self.augmenter.augment(text.unwrap_or_default(), self.space)?;
            batch.extend(set.texts.iter().cloned());
            augmented_texts = Some(set);
        }
        let want_generic = inline_generic.is_none() && want_augmented;
        if want_generic {
            batch.extend(self.space.generic_prompts().into_iter().map(|(_, p)| p.to_owned()));
        }

        let mut embedded = if batch.is_empty() {
            Vec::new().into_iter()
        } else {
            let client = self.embedder.as_ref().ok_or(BendError::MissingEmbedder)?;
            client.embed(&batch)?.into_iter()
        };
        let k = self.space.len();
        let embedding = match &rec.vector {
            Some(v) => unit_vector(v, self.dim, "vector")?,
            None => embedded.next().expect("batch holds the query"),
        };
        check_dim(self.dim, embedding.dim())?;
        let augmented = match inline_augmented {
            Some(a) => Some(a),
            None if want_augmented => Some(embedded.by_ref().take(k).collect()),
            None => None,
        };
        let generic = match inline_generic {
            Some(g) => g,
            None if want_generic => embedded.by_ref().take(k).collect(),
            None => Vec::new(),
        };
        Ok(ResolvedQuery {
            id: rec.id.clone(),
            text: text.map(str::to_owned),
            class: rec.class.clone(),
            embedding,
            augmented,
            generic,
            augmented_texts,
            explicit,
        })
    }
}

/// Result of debiasing one query in one mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryDebias {
    pub schema: &'static str,
    pub id: String,
    pub mode: DebiasMode,
    /// True for attribute-explicit queries, which pass through unchanged.
    pub skipped: bool,
    pub output: Embedding,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<DebiasReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub augmented_texts: Option<AugmentedQuerySet>,
}

/// Runs the two-step procedure against a shared reference index.
#[derive(Debug, Clone, Copy)]
pub struct Debiaser<'a> {
    index: &'a ReferenceIndex,
    attribute: &'a str,
    count: RelevantCount,
    generic_columns: GenericColumns,
    anchor: SubsetAnchor,
}

impl<'a> Debiaser<'a> {
    pub fn new(index: &'a ReferenceIndex, config: &'a RunConfig) -> Result<Self> {
        index.table().attribute(&config.attribute)?;
        Ok(Debiaser {
            index,
            attribute: &config.attribute,
            count: config.count,
            generic_columns: config.generic_columns,
            anchor: config.subset_anchor,
        })
    }

    pub fn run(&self, q: &ResolvedQuery, mode: DebiasMode) -> Result<QueryDebias> {
        let mut out = QueryDebias {
            schema: SCHEMA,
            id: q.id.clone(),
            mode,
            skipped: q.explicit,
            output: q.embedding.clone(),
            report: None,
            augmented_texts: q.augmented_texts.clone(),
        };
        if q.explicit {
            return Ok(out);
        }
        let matrix = if mode.uses_step1() {
            let augmented = q.augmented.as_deref().ok_or(BendError::MissingEmbedder)?;
            Some(build_attribute_matrix(
                &q.embedding,
                augmented,
                &q.generic,
                self.generic_columns,
            )?)
        } else {
            None
        };
        let anchor = match (&matrix, self.anchor) {
            (Some(m), SubsetAnchor::Projected) => orthogonalize(&q.embedding, m)?,
            _ => q.embedding.clone(),
        };
        let subsets = top_n_by_attribute(self.index, &anchor, self.attribute, self.count)?;
        let report = debias(&q.embedding, matrix.as_ref(), &subsets, self.index.table(), mode)?;
        out.output = report.output.clone();
        out.report = Some(report);
        Ok(out)
    }
}

/// Ranked retrieval with per-value counts and, given a prior, bias scores.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalResult {
    pub schema: &'static str,
    pub attribute: String,
    pub k: usize,
    pub rows: Vec<Retrieved>,
    pub counts: BTreeMap<String, usize>,
    pub distribution: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_skew: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Top-`k` retrieval over `pool` (all rows when `None`).
pub fn retrieve(
    table: &LabeledEmbeddingTable,
    pool: Option<&[usize]>,
    query: &Embedding,
    attribute: &str,
    k: usize,
    prior: Option<&AttributeDistribution>,
) -> Result<RetrievalResult> {
    let (a, space) = table.attribute(attribute)?;
    let all: Vec<usize>;
    let pool = match pool {
        Some(p) => p,
        None => {
            all = (0..table.len()).collect();
            &all
        }
    };
    let warning = (k > pool.len()).then(|| {
        format!(
            "k = {k} exceeds the {} searchable records; returning all of them",
            pool.len()
        )
    });
    let rows = retrieve_top_k_among(table, pool, query, k)?;
    let dist = empirical_distribution(rows.iter().map(|r| table.label_index(a, r.row)), space)?;
    let mut counts: BTreeMap<String, usize> = space.values().iter().map(|v| (v.clone(), 0)).collect();
    for r in &rows {
        *counts.entry(table.label(a, r.row).to_owned()).or_default() += 1;
    }
    let (kl, skew) = match prior {
        Some(p) => (Some(kl_divergence(&dist, p)?), Some(max_skew(&dist, p)?)),
        None => (None, None),
    };
    Ok(RetrievalResult {
        schema: SCHEMA,
        attribute: attribute.to_owned(),
        k,
        rows,
        counts,
        distribution: dist.to_map(),
        kl,
        max_skew: skew,
        warning,
    })
}

/// Worst-group AUC of `query` over `pool`: records whose class equals
/// `class` are positives, groups are the values of attribute `a`. `None`
/// when some group lacks positives or negatives.
fn pool_worst_group_auc(
    table: &LabeledEmbeddingTable,
    pool: &[usize],
    query: &Embedding,
    a: usize,
    space: &AttributeSpace,
    class: &str,
) -> Option<f64> {
    let sims = table.similarities(query.as_slice(), pool);
    let mut groups: Vec<(&str, Vec<(f64, bool)>)> =
        space.values().iter().map(|v| (v.as_str(), Vec::new())).collect();
    for (&row, s) in pool.iter().zip(sims) {
        groups[table.label_index(a, row)]
            .1
            .push((s, table.class(row) == Some(class)));
    }
    worst_group_auc(&groups).ok()
}

/// Failure recorded in a report instead of aborting the run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorEntry {
    pub exit_code: i32,
    pub message: String,
}

impl From<&BendError> for ErrorEntry {
    fn from(e: &BendError) -> Self {
        ErrorEntry {
            exit_code: e.exit_code(),
            message: e.to_string(),
        }
    }
}

/// Per-fold metric values, one entry per fold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldValues {
    pub kl: Vec<f64>,
    pub max_skew: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worst_group_auc: Option<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSummaries {
    pub kl: Summary,
    pub max_skew: Summary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worst_group_auc: Option<Summary>,
}

fn summarize(folds: &FoldValues) -> Option<MetricSummaries> {
    let auc = folds
        .worst_group_auc
        .as_ref()
        .map(|v| v.iter().flatten().copied().collect::<Vec<_>>());
    Some(MetricSummaries {
        kl: Summary::of(&folds.kl)?,
        max_skew: Summary::of(&folds.max_skew)?,
        worst_group_auc: auc.and_then(|v| Summary::of(&v)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeEntry {
    pub skipped: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub folds: Option<FoldValues>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<MetricSummaries>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ccf: Option<crate::equalize::StageCcf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropped_columns: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryEntry {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    pub explicit: bool,
    pub modes: BTreeMap<String, ModeEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorEntry>,
}

/// Per mode: each fold's metric averaged over the successful queries, then
/// summarized across folds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateEntry {
    pub queries: usize,
    pub kl: Summary,
    pub max_skew: Summary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worst_group_auc: Option<Summary>,
}

/// Settings echoed into the report. Thread count is left out on purpose so
/// reports do not depend on it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigEcho {
    pub attribute: String,
    pub n: String,
    pub k: usize,
    pub seed: u64,
    pub fold_count: usize,
    pub generic_columns: GenericColumns,
    pub subset_anchor: SubsetAnchor,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub schema: &'static str,
    pub log_base: &'static str,
    pub config: ConfigEcho,
    pub modes: Vec<DebiasMode>,
    pub prior: BTreeMap<String, f64>,
    pub fold_sizes: Vec<usize>,
    pub queries: Vec<QueryEntry>,
    pub aggregate: BTreeMap<String, AggregateEntry>,
}

impl MetricsReport {
    /// Exit code of the first recorded failure, if any.
    pub fn first_error_code(&self) -> Option<i32> {
        self.queries.iter().find_map(|q| {
            q.error
                .as_ref()
                .map(|e| e.exit_code)
                .or_else(|| q.modes.values().find_map(|m| m.error.as_ref().map(|e| e.exit_code)))
        })
    }

    /// Mean of `metric` for `mode` on query `id`.
    pub fn query_mean(&self, id: &str, mode: DebiasMode, metric: &str) -> Option<f64> {
        let m = self.queries.iter().find(|q| q.id == id)?.modes.get(mode.as_str())?;
        let s = m.summary.as_ref()?;
        match metric {
            "kl" => Some(s.kl.mean),
            "max_skew" => Some(s.max_skew.mean),
            "worst_group_auc" => s.worst_group_auc.map(|a| a.mean),
            _ => None,
        }
    }

    /// One row per (query, mode) with the fold summaries.
    pub fn per_query_csv(&self) -> crate::report::CsvTable {
        let f = crate::report::format_float;
        let mut header = vec!["query".to_owned(), "mode".to_owned(), "skipped".to_owned()];
        for metric in ["kl", "max_skew", "worst_group_auc"] {
            for stat in ["mean", "std_dev", "std_err"] {
                header.push(format!("{metric}_{stat}"));
            }
        }
        header.push("error".to_owned());
        let cells = |s: Option<&Summary>| match s {
            Some(s) => vec![f(s.mean), f(s.std_dev), f(s.std_err)],
            None => vec![String::new(); 3],
        };
        let mut rows = Vec::new();
        for q in &self.queries {
            for mode in &self.modes {
                let entry = q.modes.get(mode.as_str());
                let summary = entry.and_then(|e| e.summary.as_ref());
                let mut row = vec![
                    q.id.clone(),
                    mode.as_str().to_owned(),
                    entry.map(|e| e.skipped.to_string()).unwrap_or_default(),
                ];
                row.extend(cells(summary.map(|s| &s.kl)));
                row.extend(cells(summary.map(|s| &s.max_skew)));
                row.extend(cells(summary.and_then(|s| s.worst_group_auc.as_ref())));
                let error = q.error.as_ref().or_else(|| entry.and_then(|e| e.error.as_ref()));
                row.push(error.map(|e| e.message.clone()).unwrap_or_default());
                rows.push(row);
            }
        }
        crate::report::CsvTable { header, rows }
    }

    /// The aggregate table as CSV.
    pub fn aggregate_csv(&self) -> crate::report::CsvTable {
        let f = crate::report::format_float;
        let mut header = vec!["mode".to_owned(), "queries".to_owned()];
        for metric in ["kl", "max_skew", "worst_group_auc"] {
            for stat in ["mean", "std_dev", "std_err", "folds"] {
                header.push(format!("{metric}_{stat}"));
            }
        }
        let cells = |s: Option<&Summary>| match s {
            Some(s) => vec![f(s.mean), f(s.std_dev), f(s.std_err), s.n.to_string()],
            None => vec![String::new(); 4],
        };
        let rows = self
            .modes
            .iter()
            .filter_map(|m| self.aggregate.get(m.as_str()).map(|a| (m, a)))
            .map(|(m, a)| {
                let mut row = vec![m.as_str().to_owned(), a.queries.to_string()];
                row.extend(cells(Some(&a.kl)));
                row.extend(cells(Some(&a.max_skew)));
                row.extend(cells(a.worst_group_auc.as_ref()));
                row
            })
            .collect();
        crate::report::CsvTable { header, rows }
    }
}

/// Everything an evaluation needs, shared read-only across workers.
pub struct Evaluation<'a> {
    pub index: &'a ReferenceIndex,
    pub target: &'a LabeledEmbeddingTable,
    /// Row indices into `target`. Fold `i` is evaluated by retrieving from
    /// every target row outside it (all rows when there is one fold).
    pub folds: &'a [Vec<usize>],
    pub prior: &'a AttributeDistribution,
    pub config: &'a RunConfig,
}

fn fold_pools(n: usize, folds: &[Vec<usize>]) -> Vec<Vec<usize>> {
    if folds.len() <= 1 {
        return vec![(0..n).collect()];
    }
    folds
        .iter()
        .map(|fold| {
            let mut held = vec![false; n];
            for &r in fold {
                held[r] = true;
            }
            (0..n).filter(|&r| !held[r]).collect()
        })
        .collect()
}

impl Evaluation<'_> {
    /// Runs every mode on every query. Queries that failed to resolve are
    /// passed as errors and reported, not fatal.
    pub fn run(&self, queries: &[(String, Result<ResolvedQuery>)]) -> Result<MetricsReport> {
        let cfg = self.config;
        cfg.validate()?;
        let debiaser = Debiaser::new(self.index, cfg)?;
        let (a, space) = self.target.attribute(&cfg.attribute)?;
        if self.prior.values() != space.values() {
            return Err(BendError::InvalidDistribution(format!(
                "prior covers {:?}, attribute has {:?}",
                self.prior.values(),
                space.values()
            )));
        }
        check_dim(self.index.table().dim(), self.target.dim())?;
        if self.folds.iter().flatten().any(|&r| r >= self.target.len()) {
            return Err(BendError::Config("fold row outside the target table".into()));
        }
        let pools = fold_pools(self.target.len(), self.folds);

        let items: Vec<(usize, DebiasMode)> = (0..queries.len())
            .flat_map(|q| cfg.modes.iter().map(move |&m| (q, m)))
            .collect();
        let work = |&(qi, mode): &(usize, DebiasMode)| -> Option<ModeEntry> {
            let q = queries[qi].1.as_ref().ok()?;
            Some(self.one_mode(&debiaser, q, mode, &pools, a, space))
        };
        let results = par::with_jobs(cfg.jobs, || par::map_items(&items, work));

        let mut entries: Vec<QueryEntry> = queries
            .iter()
            .map(|(id, q)| QueryEntry {
                id: id.clone(),
                class: q.as_ref().ok().and_then(|q| q.class.clone()),
                explicit: q.as_ref().map(|q| q.explicit).unwrap_or(false),
                modes: BTreeMap::new(),
                error: q.as_ref().err().map(ErrorEntry::from),
            })
            .collect();
        for ((qi, mode), entry) in items.iter().zip(results) {
            if let Some(entry) = entry {
                entries[*qi].modes.insert(mode.as_str().to_owned(), entry);
            }
        }

        let aggregate = cfg
            .modes
            .iter()
            .filter_map(|m| aggregate_mode(&entries, *m, pools.len()).map(|a| (m.as_str().to_owned(), a)))
            .collect();
        Ok(MetricsReport {
            schema: SCHEMA,
            log_base: LOG_BASE,
            config: ConfigEcho {
                attribute: cfg.attribute.clone(),
                n: describe_count(cfg.count),
                k: cfg.k,
                seed: cfg.seed,
                fold_count: pools.len(),
                generic_columns: cfg.generic_columns,
                subset_anchor: cfg.subset_anchor,
            },
            modes: cfg.modes.clone(),
            prior: self.prior.to_map(),
            fold_sizes: pools.iter().map(Vec::len).collect(),
            queries: entries,
            aggregate,
        })
    }

    fn one_mode(
        &self,
        debiaser: &Debiaser<'_>,
        q: &ResolvedQuery,
        mode: DebiasMode,
        pools: &[Vec<usize>],
        a: usize,
        space: &AttributeSpace,
    ) -> ModeEntry {
        let mut entry = ModeEntry {
            skipped: q.explicit,
            folds: None,
            summary: None,
            lambda: None,
            ccf: None,
            dropped_columns: None,
            error: None,
        };
        let d = match debiaser.run(q, mode) {
            Ok(d) => d,
            Err(e) => {
                entry.error = Some(ErrorEntry::from(&e));
                return entry;
            }
        };
        if let Some(r) = &d.report {
            entry.lambda = r.lambda;
            entry.ccf = Some(r.ccf.clone());
            entry.dropped_columns = r.dropped_columns;
        }
        let class = q.class.as_deref().filter(|_| self.target.has_classes());
        let run = || -> Result<FoldValues> {
            let mut folds = FoldValues {
                kl: Vec::with_capacity(pools.len()),
                max_skew: Vec::with_capacity(pools.len()),
                worst_group_auc: None,
            };
            let mut auc = Vec::new();
            for pool in pools {
                let cfg = self.config;
                let r = retrieve(self.target, Some(pool), &d.output, &cfg.attribute, cfg.k, Some(self.prior))?;
                folds.kl.push(r.kl.unwrap_or(f64::NAN));
                folds.max_skew.push(r.max_skew.unwrap_or(f64::NAN));
                if let Some(c) = class {
                    auc.push(pool_worst_group_auc(self.target, pool, &d.output, a, space, c));
                }
            }
            if class.is_some() {
                folds.worst_group_auc = Some(auc);
            }
            Ok(folds)
        };
        match run() {
            Ok(folds) => {
                entry.summary = summarize(&folds);
                entry.folds = Some(folds);
            }
            Err(e) => entry.error = Some(ErrorEntry::from(&e)),
        }
        entry
    }
}

fn aggregate_mode(entries: &[QueryEntry], mode: DebiasMode, fold_count: usize) -> Option<AggregateEntry> {
    let folds: Vec<&FoldValues> = entries
        .iter()
        .filter_map(|e| e.modes.get(mode.as_str())?.folds.as_ref())
        .collect();
    if folds.is_empty() {
        return None;
    }
    let per_fold = |pick: &dyn Fn(&FoldValues, usize) -> Option<f64>| -> Vec<f64> {
        (0..fold_count)
            .filter_map(|f| {
                let xs: Vec<f64> = folds.iter().filter_map(|v| pick(v, f)).collect();
                (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
            })
            .collect()
    };
    let kl = per_fold(&|v, f| v.kl.get(f).copied());
    let skew = per_fold(&|v, f| v.max_skew.get(f).copied());
    let auc = per_fold(&|v, f| v.worst_group_auc.as_ref()?.get(f).copied().flatten());
    Some(AggregateEntry {
        queries: folds.len(),
        kl: Summary::of(&kl)?,
        max_skew: Summary::of(&skew)?,
        worst_group_auc: Summary::of(&auc),
    })
}

/// Resolves every record, keeping failures alongside their ids.
pub fn resolve_all(resolver: &QueryResolver<'_>, records: &[QueryRecord]) -> Vec<(String, Result<ResolvedQuery>)> {
    records
        .iter()
        .map(|r| (r.id.clone(), resolver.resolve(r)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::TemplateAugmenter;
    use crate::dataset::{split_reference_target, synth_generate, synth_queries, SplitSpec, SynthSpec};

    fn fixture() -> (SynthSpec, LabeledEmbeddingTable, Vec<QueryRecord>) {
        let spec = SynthSpec::balanced(16, 3, 0.05, 0.8, 2, 60);
        let table = synth_generate(&spec).unwrap();
        let queries = synth_queries(&spec).unwrap();
        (spec, table, queries)
    }

    #[test]
    fn relevant_count_parsing() {
        assert_eq!(parse_relevant_count("100").unwrap(), RelevantCount::Fixed(100));
        assert_eq!(parse_relevant_count("elbow").unwrap(), RelevantCount::Elbow { max: 100 });
        assert_eq!(parse_relevant_count("elbow:7").unwrap(), RelevantCount::Elbow { max: 7 });
        for bad in ["0", "x", "elbow:0", "knee:3", "-1"] {
            assert!(parse_relevant_count(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn mode_list_parsing() {
        assert_eq!(
            parse_modes("full, baseline,full").unwrap(),
            vec![DebiasMode::Full, DebiasMode::Baseline]
        );
        assert!(parse_modes(" , ").is_err());
        assert!(parse_modes("fast").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(RunConfig::default().validate().is_ok());
        for cfg in [
            RunConfig { k: 0, ..RunConfig::default() },
            RunConfig { count: RelevantCount::Fixed(0), ..RunConfig::default() },
            RunConfig { modes: vec![], ..RunConfig::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(BendError::Config(_))));
        }
    }

    #[test]
    fn text_query_without_embedder() {
        let space = AttributeSpace::gender();
        let r = QueryResolver::new(&space, 4, None, &TemplateAugmenter);
        let rec = QueryRecord {
            id: "q".into(),
            text: Some("a photo of a nurse".into()),
            vector: None,
            augmented: None,
            generic: None,
            class: None,
        };
        let err = r.resolve(&rec).unwrap_err();
        assert!(matches!(err, BendError::MissingEmbedder));
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn explicit_query_passes_through() {
        let (_, table, mut queries) = fixture();
        let space = table.attributes()[0].clone();
        let index = ReferenceIndex::build(table.clone()).unwrap();
        let cfg = RunConfig::default();
        let r = QueryResolver::new(&space, table.dim(), None, &TemplateAugmenter);
        queries[0].text = Some("a photo of a male nurse".into());
        queries[0].augmented = None;
        let q = r.resolve(&queries[0]).unwrap();
        assert!(q.explicit);
        let d = Debiaser::new(&index, &cfg).unwrap().run(&q, DebiasMode::Full).unwrap();
        assert!(d.skipped && d.report.is_none());
        assert_eq!(d.output, q.embedding);
    }

    #[test]
    fn vector_query_without_augmentations_needs_embedder_for_step1() {
        let (_, table, mut queries) = fixture();
        let space = table.attributes()[0].clone();
        let index = ReferenceIndex::build(table.clone()).unwrap();
        let cfg = RunConfig::default();
        queries[0].augmented = None;
        let r = QueryResolver::new(&space, table.dim(), None, &TemplateAugmenter);
        let q = r.resolve(&queries[0]).unwrap();
        let deb = Debiaser::new(&index, &cfg).unwrap();
        assert!(matches!(deb.run(&q, DebiasMode::Full), Err(BendError::MissingEmbedder)));
        assert!(deb.run(&q, DebiasMode::Step2Only).is_ok());
    }

    #[test]
    fn inline_embedding_errors() {
        let space = AttributeSpace::gender();
        let r = QueryResolver::new(&space, 3, None, &TemplateAugmenter);
        let mut rec = QueryRecord {
            id: "q".into(),
            text: None,
            vector: Some(vec![1.0, 0.0]),
            augmented: None,
            generic: None,
            class: None,
        };
        assert!(matches!(r.resolve(&rec), Err(BendError::DimensionMismatch { .. })));
        rec.vector = Some(vec![1.0, 0.0, 0.0]);
        rec.augmented = Some([("male".to_owned(), vec![0.0, 1.0, 0.0])].into());
        assert!(matches!(r.resolve(&rec), Err(BendError::InvalidQuery(_))));
        rec.vector = None;
        rec.augmented = None;
        assert!(matches!(r.resolve(&rec), Err(BendError::InvalidQuery(_))));
    }

    #[test]
    fn retrieval_counts_and_warning() {
        let (_, table, queries) = fixture();
        let q = Embedding::new(queries[0].vector.clone().unwrap()).unwrap();
        let space = table.attributes()[0].clone();
        let prior = uniform_prior(&space).unwrap();
        let r = retrieve(&table, None, &q, "gender", 50, Some(&prior)).unwrap();
        assert_eq!(r.rows.len(), 50);
        assert_eq!(r.counts.values().sum::<usize>(), 50);
        assert!(r.warning.is_none());
        let total: f64 = r.distribution.values().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(r.kl.unwrap() >= 0.0);

        let all = retrieve(&table, None, &q, "gender", table.len() + 5, None).unwrap();
        assert_eq!(all.rows.len(), table.len());
        assert!(all.warning.is_some());
        assert!(all.kl.is_none());

        let lopsided = AttributeDistribution::new(space.values().to_vec(), vec![1.0, 0.0]).unwrap();
        let err = retrieve(&table, None, &q, "gender", table.len(), Some(&lopsided)).unwrap_err();
        assert!(matches!(err, BendError::SupportViolation(_)));
    }

    #[test]
    fn fold_pools_exclude_their_fold() {
        let folds = vec![vec![0, 2], vec![1, 3]];
        assert_eq!(fold_pools(4, &folds), vec![vec![1, 3], vec![0, 2]]);
        assert_eq!(fold_pools(3, &[vec![0, 1, 2]]), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn evaluation_lists_one_value_per_fold() {
        let (_, table, queries) = fixture();
        let split = split_reference_target(&table, &SplitSpec::default()).unwrap();
        let space = table.attributes()[0].clone();
        let prior = uniform_prior(&space).unwrap();
        let index = ReferenceIndex::build(split.reference.clone()).unwrap();
        let cfg = RunConfig {
            k: 20,
            count: RelevantCount::Fixed(10),
            ..RunConfig::default()
        };
        let resolver = QueryResolver::new(&space, table.dim(), None, &TemplateAugmenter);
        let resolved = resolve_all(&resolver, &queries);
        let eval = Evaluation {
            index: &index,
            target: &split.target,
            folds: &split.folds,
            prior: &prior,
            config: &cfg,
        };
        let report = eval.run(&resolved).unwrap();
        assert_eq!(report.first_error_code(), None);
        assert_eq!(report.fold_sizes.len(), 5);
        for q in &report.queries {
            for m in DebiasMode::ALL {
                let entry = &q.modes[m.as_str()];
                let folds = entry.folds.as_ref().unwrap();
                assert_eq!(folds.kl.len(), 5);
                assert_eq!(folds.max_skew.len(), 5);
                assert_eq!(folds.worst_group_auc.as_ref().unwrap().len(), 5);
            }
        }
        assert_eq!(report.aggregate.len(), 4);
        let csv = report.aggregate_csv().render();
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn resolution_failures_become_entries() {
        let (_, table, mut queries) = fixture();
        let split = split_reference_target(&table, &SplitSpec::default()).unwrap();
        let space = table.attributes()[0].clone();
        let prior = uniform_prior(&space).unwrap();
        let index = ReferenceIndex::build(split.reference.clone()).unwrap();
        let cfg = RunConfig {
            k: 20,
            count: RelevantCount::Fixed(10),
            modes: vec![DebiasMode::Baseline],
            ..RunConfig::default()
        };
        queries[1].vector = None;
        let resolver = QueryResolver::new(&space, table.dim(), None, &TemplateAugmenter);
        let resolved = resolve_all(&resolver, &queries);
        let report = Evaluation {
            index: &index,
            target: &split.target,
            folds: &split.folds,
            prior: &prior,
            config: &cfg,
        }
        .run(&resolved)
        .unwrap();
        assert_eq!(report.first_error_code(), Some(4));
        assert!(report.queries[1].modes.is_empty());
        assert_eq!(report.aggregate["baseline"].queries, queries.len() - 1);
    }
}
