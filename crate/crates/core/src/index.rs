//! Attribute-labeled embedding tables, the reference index over them, and
//! exact similarity search.
//!
//! All stored vectors are unit norm, so cosine similarity is a dot product.
//! Ranking is by similarity descending, then record id ascending.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use serde::Serialize;

use crate::augment::AttributeSpace;
use crate::error::{BendError, Result};
use crate::par;
use crate::vector::{self, check_dim, normalize_vec, Embedding};

/// One input row for [`LabeledEmbeddingTable::from_records`].
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub vector: Vec<f64>,
    /// attribute name -> value label
    pub labels: BTreeMap<String, String>,
    pub class: Option<String>,
}

/// `N x d` normalized embeddings with ids, attribute labels and optional
/// class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbeddingTable {
    dim: usize,
    vectors: Vec<f64>,
    ids: Vec<String>,
    attributes: Vec<AttributeSpace>,
    /// `labels[a][row]` indexes into `attributes[a].values()`.
    labels: Vec<Vec<u32>>,
    classes: Vec<Option<String>>,
}

impl LabeledEmbeddingTable {
    /// Validates and normalizes `records`.
    pub fn from_records(attributes: Vec<AttributeSpace>, records: Vec<Record>) -> Result<Self> {
        let first = records.first().ok_or(BendError::EmptyTable)?;
        let dim = first.vector.len();
        if dim < 2 {
            return Err(BendError::InvalidEmbedding(format!(
                "dimension must be at least 2, got {dim}"
            )));
        }
        let mut names = HashSet::new();
        for a in &attributes {
            if !names.insert(a.name()) {
                return Err(BendError::Config(format!("attribute {:?} declared twice", a.name())));
            }
        }
        let n = records.len();
        let mut vectors = Vec::with_capacity(n * dim);
        let mut ids = Vec::with_capacity(n);
        let mut labels = vec![Vec::with_capacity(n); attributes.len()];
        let mut classes = Vec::with_capacity(n);
        let mut seen = HashSet::with_capacity(n);
        for rec in records {
            check_dim(dim, rec.vector.len())?;
            if !seen.insert(rec.id.clone()) {
                return Err(BendError::InvalidEmbedding(format!("duplicate record id {:?}", rec.id)));
            }
            if rec.vector.iter().any(|x| !x.is_finite()) {
                return Err(BendError::InvalidEmbedding(format!(
                    "record {:?} has a non-finite coordinate",
                    rec.id
                )));
            }
            let unit = normalize_vec(rec.vector)?;
            vectors.extend_from_slice(unit.as_slice());
            for (a, space) in attributes.iter().enumerate() {
                let label = rec.labels.get(space.name()).ok_or_else(|| BendError::UnknownLabel {
                    attribute: space.name().to_owned(),
                    label: format!("<missing on record {:?}>", rec.id),
                })?;
                let idx = space.index_of(label).ok_or_else(|| BendError::UnknownLabel {
                    attribute: space.name().to_owned(),
                    label: label.clone(),
                })?;
                labels[a].push(idx as u32);
            }
            ids.push(rec.id);
            classes.push(rec.class);
        }
        Ok(LabeledEmbeddingTable {
            dim,
            vectors,
            ids,
            attributes,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, row: usize) -> &str {
        &self.ids[row]
    }

    pub fn attributes(&self) -> &[AttributeSpace] {
        &self.attributes
    }

    pub fn attribute(&self, name: &str) -> Result<(usize, &AttributeSpace)> {
        self.attributes
            .iter()
            .enumerate()
            .find(|(_, a)| a.name() == name)
            .ok_or_else(|| BendError::UnknownAttribute(name.to_owned()))
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f64] {
        &self.vectors[row * self.dim..(row + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.vectors.chunks_exact(self.dim)
    }

    /// Value index of `row` under attribute number `attr`.
    #[inline]
    pub fn label_index(&self, attr: usize, row: usize) -> usize {
        self.labels[attr][row] as usize
    }

    pub fn label(&self, attr: usize, row: usize) -> &str {
        &self.attributes[attr].values()[self.label_index(attr, row)]
    }

    pub fn class(&self, row: usize) -> Option<&str> {
        self.classes[row].as_deref()
    }

    pub fn has_classes(&self) -> bool {
        self.classes.iter().any(Option::is_some)
    }

    /// Reconstructs the input record for `row` (vector already normalized).
    pub fn record(&self, row: usize) -> Record {
        Record {
            id: self.ids[row].clone(),
            vector: self.row(row).to_vec(),
            labels: self
                .attributes
                .iter()
                .enumerate()
                .map(|(a, s)| (s.name().to_owned(), self.label(a, row).to_owned()))
                .collect(),
            class: self.classes[row].clone(),
        }
    }

    /// New table holding `rows` in the given order.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(BendError::EmptyTable);
        }
        let mut vectors = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            vectors.extend_from_slice(self.row(r));
        }
        Ok(LabeledEmbeddingTable {
            dim: self.dim,
            vectors,
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
            attributes: self.attributes.clone(),
            labels: self
                .labels
                .iter()
                .map(|col| rows.iter().map(|&r| col[r]).collect())
                .collect(),
            classes: rows.iter().map(|&r| self.classes[r].clone()).collect(),
        })
    }

    /// Similarity of `query` to each row in `rows`.
    pub fn similarities(&self, query: &[f64], rows: &[usize]) -> Vec<f64> {
        par::map_range(rows.len(), |i| vector::dot(self.row(rows[i]), query))
    }

    /// Similarity of `query` to every row.
    pub fn all_similarities(&self, query: &[f64]) -> Vec<f64> {
        par::map_range(self.len(), |i| vector::dot(self.row(i), query))
    }

    fn rank_cmp(&self, a: (usize, f64), b: (usize, f64)) -> Ordering {
        b.1.total_cmp(&a.1).then_with(|| self.ids[a.0].cmp(&self.ids[b.0]))
    }

    /// The `k` best `(row, similarity)` pairs among `scored`, ranked.
    fn top_k_scored(&self, mut scored: Vec<(usize, f64)>, k: usize) -> Vec<(usize, f64)> {
        if k == 0 {
            return Vec::new();
        }
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, |a, b| self.rank_cmp(*a, *b));
            scored.truncate(k);
        }
        scored.sort_unstable_by(|a, b| self.rank_cmp(*a, *b));
        scored
    }
}

/// One row of a retrieval result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Retrieved {
    pub row: usize,
    pub id: String,
    pub similarity: f64,
    /// attribute name -> label
    pub labels: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
}

fn check_query(table: &LabeledEmbeddingTable, query: &Embedding) -> Result<()> {
    check_dim(table.dim(), query.dim())
}

/// The `k` most similar records (all of them when `k > N`), ranked.
pub fn retrieve_top_k(
    table: &LabeledEmbeddingTable,
    query: &Embedding,
    k: usize,
) -> Result<Vec<Retrieved>> {
    let all: Vec<usize> = (0..table.len()).collect();
    retrieve_top_k_among(table, &all, query, k)
}

/// [`retrieve_top_k`] restricted to the rows in `pool`.
pub fn retrieve_top_k_among(
    table: &LabeledEmbeddingTable,
    pool: &[usize],
    query: &Embedding,
    k: usize,
) -> Result<Vec<Retrieved>> {
    if table.is_empty() || pool.is_empty() {
        return Err(BendError::EmptyTable);
    }
    if k == 0 {
        return Err(BendError::Config("k must be at least 1".into()));
    }
    check_query(table, query)?;
    let sims = table.similarities(query.as_slice(), pool);
    let scored = pool.iter().copied().zip(sims).collect();
    Ok(table
        .top_k_scored(scored, k)
        .into_iter()
        .map(|(row, similarity)| {
            let rec = table.record(row);
            Retrieved {
                row,
                id: rec.id,
                similarity,
                labels: rec.labels,
                class: rec.class,
            }
        })
        .collect())
}

/// Exact-scan index over a reference table with per-value partitions.
#[derive(Debug, Clone)]
pub struct ReferenceIndex {
    table: LabeledEmbeddingTable,
    /// `partitions[attr][value]` lists rows carrying that value.
    partitions: Vec<Vec<Vec<usize>>>,
}

impl ReferenceIndex {
    pub fn build(table: LabeledEmbeddingTable) -> Result<Self> {
        if table.is_empty() {
            return Err(BendError::EmptyTable);
        }
        let partitions = table
            .attributes()
            .iter()
            .enumerate()
            .map(|(a, space)| {
                let mut parts = vec![Vec::new(); space.len()];
                for row in 0..table.len() {
                    parts[table.label_index(a, row)].push(row);
                }
                parts
            })
            .collect();
        Ok(ReferenceIndex { table, partitions })
    }

    pub fn table(&self) -> &LabeledEmbeddingTable {
        &self.table
    }

    /// Rows of each value of `attribute`, in value order.
    pub fn partitions(&self, attribute: &str) -> Result<&[Vec<usize>]> {
        let (a, _) = self.table.attribute(attribute)?;
        Ok(&self.partitions[a])
    }
}

/// How many records per value feed each group mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RelevantCount {
    Fixed(usize),
    /// Per value, cut the ranked similarity curve at its elbow, capped at `max`.
    Elbow { max: usize },
}

impl Default for RelevantCount {
    fn default() -> Self {
        RelevantCount::Fixed(DEFAULT_N)
    }
}

pub const DEFAULT_N: usize = 100;

/// The per-value relevant sets `D_ref(a_i, c)` and their mean embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevantSubsets {
    pub values: Vec<String>,
    /// Selected reference rows per value, ranked by similarity.
    pub indices: Vec<Vec<usize>>,
    /// Raw (unnormalized) mean of each selected set.
    pub means: Vec<Embedding>,
}

impl RelevantSubsets {
    pub fn n_used(&self) -> Vec<usize> {
        self.indices.iter().map(Vec::len).collect()
    }

    /// Vectors of each group, for CCF computation.
    pub fn groups<'a>(&'a self, table: &'a LabeledEmbeddingTable) -> Vec<Vec<&'a [f64]>> {
        self.indices
            .iter()
            .map(|rows| rows.iter().map(|&r| table.row(r)).collect())
            .collect()
    }
}

/// For each value of `attribute`, selects the reference records of that
/// value most similar to `query` and averages them.
pub fn top_n_by_attribute(
    index: &ReferenceIndex,
    query: &Embedding,
    attribute: &str,
    count: RelevantCount,
) -> Result<RelevantSubsets> {
    let table = index.table();
    check_query(table, query)?;
    let (_, space) = table.attribute(attribute)?;
    let parts = index.partitions(attribute)?;
    let limit = match count {
        RelevantCount::Fixed(n) | RelevantCount::Elbow { max: n } => n,
    };
    if limit == 0 {
        return Err(BendError::Config("n must be at least 1".into()));
    }
    let mut indices = Vec::with_capacity(parts.len());
    let mut means = Vec::with_capacity(parts.len());
    for (value, rows) in space.values().iter().zip(parts) {
        if rows.is_empty() {
            return Err(BendError::EmptyGroup(value.clone()));
        }
        let sims = table.similarities(query.as_slice(), rows);
        let scored: Vec<(usize, f64)> = rows.iter().copied().zip(sims).collect();
        let take = match count {
            RelevantCount::Fixed(n) => n,
            RelevantCount::Elbow { max } => {
                let ranked = table.top_k_scored(scored.clone(), scored.len());
                let curve: Vec<f64> = ranked.iter().map(|s| s.1).collect();
                match elbow_n(&curve) {
                    Ok(e) => e.min(max),
                    Err(_) => curve.len().min(max),
                }
            }
        };
        let chosen: Vec<usize> = table
            .top_k_scored(scored, take)
            .into_iter()
            .map(|(r, _)| r)
            .collect();
        means.push(vector::mean_embedding(chosen.iter().map(|&r| table.row(r)))?);
        indices.push(chosen);
    }
    Ok(RelevantSubsets {
        values: space.values().to_vec(),
        indices,
        means,
    })
}

/// Elbow of a descending similarity curve: the 1-based count of points up to
/// and including the one farthest below/above the chord joining the first and
/// last points. Ties go to the earliest point. Endpoints are not candidates.
pub fn elbow_n(similarities: &[f64]) -> Result<usize> {
    let len = similarities.len();
    if len < 3 {
        return Err(BendError::TooFewPoints { needed: 3, got: len });
    }
    let first = similarities[0];
    let last = similarities[len - 1];
    let slope = (last - first) / (len - 1) as f64;
    // The perpendicular distance is the vertical gap scaled by a constant, so
    // the vertical gap has the same maximizer.
    let mut best = (1, f64::NEG_INFINITY);
    for (i, &y) in similarities.iter().enumerate().take(len - 1).skip(1) {
        let gap = (y - (first + slope * i as f64)).abs();
        if gap > best.1 {
            best = (i, gap);
        }
    }
    Ok(best.0 + 1)
}
