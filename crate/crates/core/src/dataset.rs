//! On-disk dataset format, reference/target splitting, and the synthetic
//! generator.
//!
//! A dataset is three files next to each other:
//!
//! * `manifest.json`: `{"schema", "dim", "count", "dtype": "f32le",
//!   "vectors_file", "meta_file", "attributes": [..]}`
//! * the vector file: `count * dim` little-endian `f32`, row-major, no header
//! * the meta file: one JSON object per line,
//!   `{"id": .., "attributes": {name: value}, "class": ..}`
//!
//! Paths inside the manifest are relative to the manifest's directory.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::AttributeSpace;
use crate::error::{BendError, Result};
use crate::index::{LabeledEmbeddingTable, Record};
use crate::random::{gaussian_vec, seeded_rng};
use crate::subspace::gram_schmidt;
use crate::vector::{self, Embedding};

pub const SCHEMA: &str = "bend/1";
pub const DTYPE: &str = "f32le";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VECTORS_FILE: &str = "vectors.f32";
pub const META_FILE: &str = "meta.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default = "default_schema")]
    pub schema: String,
    pub dim: usize,
    pub count: usize,
    pub dtype: String,
    pub vectors_file: PathBuf,
    pub meta_file: PathBuf,
    pub attributes: Vec<AttributeSpace>,
}

fn default_schema() -> String {
    SCHEMA.to_owned()
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaLine {
    id: String,
    attributes: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class: Option<String>,
}

fn manifest_err(path: &Path, reason: impl Into<String>) -> BendError {
    BendError::Manifest {
        path: path.to_owned(),
        reason: reason.into(),
    }
}

/// Loads a dataset, normalizing every vector.
pub fn read_dataset(manifest_path: impl AsRef<Path>) -> Result<LabeledEmbeddingTable> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| BendError::io(manifest_path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| manifest_err(manifest_path, e.to_string()))?;
    if manifest.dtype != DTYPE {
        return Err(manifest_err(
            manifest_path,
            format!("dtype must be {DTYPE:?}, got {:?}", manifest.dtype),
        ));
    }
    if manifest.dim < 2 || manifest.count < 1 {
        return Err(manifest_err(manifest_path, "dim must be >= 2 and count >= 1"));
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let vectors = read_vectors(&base.join(&manifest.vectors_file), manifest.count, manifest.dim)?;
    let metas = read_meta(&base.join(&manifest.meta_file), &manifest)?;
    let records = metas
        .into_iter()
        .zip(vectors.chunks_exact(manifest.dim))
        .map(|(m, v)| Record {
            id: m.id,
            vector: v.to_vec(),
            labels: m.attributes,
            class: m.class,
        })
        .collect();
    LabeledEmbeddingTable::from_records(manifest.attributes, records)
}

fn read_vectors(path: &Path, count: usize, dim: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| BendError::io(path, e))?;
    let expected = (count * dim * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(BendError::SizeMismatch {
            path: path.to_owned(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect())
}

fn read_meta(path: &Path, manifest: &DatasetManifest) -> Result<Vec<MetaLine>> {
    let file = fs::File::open(path).map_err(|e| BendError::io(path, e))?;
    let meta_err = |line: usize, reason: String| BendError::Metadata {
        path: path.to_owned(),
        line,
        reason,
    };
    let mut out = Vec::with_capacity(manifest.count);
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| BendError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if out.len() == manifest.count {
            return Err(meta_err(lineno, format!("more than {} records", manifest.count)));
        }
        let meta: MetaLine =
            serde_json::from_str(&line).map_err(|e| meta_err(lineno, e.to_string()))?;
        for space in &manifest.attributes {
            match meta.attributes.get(space.name()) {
                None => {
                    return Err(meta_err(lineno, format!("missing attribute {:?}", space.name())))
                }
                Some(v) if space.index_of(v).is_none() => {
                    return Err(meta_err(
                        lineno,
                        format!("unknown label {v:?} for attribute {:?}", space.name()),
                    ))
                }
                Some(_) => {}
            }
        }
        out.push(meta);
    }
    if out.len() != manifest.count {
        return Err(meta_err(
            out.len() + 1,
            format!("expected {} records, found {}", manifest.count, out.len()),
        ));
    }
    Ok(out)
}

/// Writes `table` into `out_dir` (created if needed). An existing non-empty
/// directory is refused unless `force` is set.
pub fn write_dataset(
    table: &LabeledEmbeddingTable,
    out_dir: impl AsRef<Path>,
    force: bool,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    prepare_out_dir(out_dir, force)?;
    let manifest = DatasetManifest {
        schema: SCHEMA.to_owned(),
        dim: table.dim(),
        count: table.len(),
        dtype: DTYPE.to_owned(),
        vectors_file: VECTORS_FILE.into(),
        meta_file: META_FILE.into(),
        attributes: table.attributes().to_vec(),
    };

    let vec_path = out_dir.join(VECTORS_FILE);
    let mut w = BufWriter::new(fs::File::create(&vec_path).map_err(|e| BendError::io(&vec_path, e))?);
    for row in table.rows() {
        for &x in row {
            w.write_all(&(x as f32).to_le_bytes())
                .map_err(|e| BendError::io(&vec_path, e))?;
        }
    }
    w.flush().map_err(|e| BendError::io(&vec_path, e))?;

    let meta_path = out_dir.join(META_FILE);
    let mut w = BufWriter::new(fs::File::create(&meta_path).map_err(|e| BendError::io(&meta_path, e))?);
    for row in 0..table.len() {
        let rec = table.record(row);
        let line = MetaLine {
            id: rec.id,
            attributes: rec.labels,
            class: rec.class,
        };
        serde_json::to_writer(&mut w, &line)
            .map_err(|e| BendError::io(&meta_path, e.into()))?;
        w.write_all(b"\n").map_err(|e| BendError::io(&meta_path, e))?;
    }
    w.flush().map_err(|e| BendError::io(&meta_path, e))?;

    let man_path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&man_path, text + "\n").map_err(|e| BendError::io(&man_path, e))?;
    Ok(manifest)
}

/// Creates `dir`, or checks it may be written into.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| BendError::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(BendError::AlreadyExists(dir.to_owned()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| BendError::io(dir, e))
}

/// How to divide a dataset into reference and target parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub reference_fraction: f64,
    pub fold_count: usize,
    pub seed: u64,
    /// Shuffle within each label combination before dealing records out, so
    /// that every part keeps the dataset's label proportions (to within one
    /// record per combination).
    pub stratify: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            reference_fraction: 0.5,
            fold_count: 5,
            seed: 0,
            stratify: true,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.reference_fraction > 0.0 && self.reference_fraction < 1.0) {
            return Err(BendError::Config(format!(
                "reference fraction must be in (0, 1), got {}",
                self.reference_fraction
            )));
        }
        if self.fold_count < 1 {
            return Err(BendError::Config("fold count must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub reference: LabeledEmbeddingTable,
    pub target: LabeledEmbeddingTable,
    /// Row indices into `target`, one list per fold.
    pub folds: Vec<Vec<usize>>,
    /// Rows of the source table that went to each side.
    pub reference_rows: Vec<usize>,
    pub target_rows: Vec<usize>,
}

/// Seeded permutation of `0..table.len()`. With `stratify`, rows sharing all
/// labels (attributes and class) are contiguous and strata appear in a fixed
/// order, so systematic dealing keeps each stratum's share.
fn shuffled_rows(table: &LabeledEmbeddingTable, seed: u64, stratify: bool) -> Vec<usize> {
    let mut rng = seeded_rng(seed);
    if !stratify {
        let mut rows: Vec<usize> = (0..table.len()).collect();
        rows.shuffle(&mut rng);
        return rows;
    }
    let mut strata: BTreeMap<(Vec<usize>, Option<&str>), Vec<usize>> = BTreeMap::new();
    for row in 0..table.len() {
        let key: Vec<usize> = (0..table.attributes().len())
            .map(|a| table.label_index(a, row))
            .collect();
        strata.entry((key, table.class(row))).or_default().push(row);
    }
    let mut rows = Vec::with_capacity(table.len());
    for mut members in strata.into_values() {
        members.shuffle(&mut rng);
        rows.extend(members);
    }
    rows
}

/// Systematic assignment: position `p` of `len` goes to the first part when
/// `floor((p + 1) f) > floor(p f)`.
fn takes(p: usize, fraction: f64) -> bool {
    ((p + 1) as f64 * fraction).floor() > (p as f64 * fraction).floor()
}

pub fn split_reference_target(table: &LabeledEmbeddingTable, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    if table.len() < spec.fold_count * 2 {
        return Err(BendError::TooSmall(format!(
            "{} records cannot fill a reference set and {} target folds",
            table.len(),
            spec.fold_count
        )));
    }
    let order = shuffled_rows(table, spec.seed, spec.stratify);
    let (mut reference_rows, mut target_rows) = (Vec::new(), Vec::new());
    for (p, &row) in order.iter().enumerate() {
        if takes(p, spec.reference_fraction) {
            reference_rows.push(row);
        } else {
            target_rows.push(row);
        }
    }
    if reference_rows.is_empty() || target_rows.len() < spec.fold_count {
        return Err(BendError::TooSmall(format!(
            "split left {} reference and {} target records for {} folds",
            reference_rows.len(),
            target_rows.len(),
            spec.fold_count
        )));
    }
    let folds = deal_folds(target_rows.len(), spec.fold_count);
    Ok(Split {
        reference: table.subset(&reference_rows)?,
        target: table.subset(&target_rows)?,
        folds,
        reference_rows,
        target_rows,
    })
}

/// Round-robin fold assignment of positions `0..n`; sizes differ by at most one.
fn deal_folds(n: usize, fold_count: usize) -> Vec<Vec<usize>> {
    let mut folds = vec![Vec::with_capacity(n / fold_count + 1); fold_count];
    for i in 0..n {
        folds[i % fold_count].push(i);
    }
    folds
}

/// Folds over all rows of `table` (used when the target comes pre-split).
pub fn make_folds(
    table: &LabeledEmbeddingTable,
    fold_count: usize,
    seed: u64,
    stratify: bool,
) -> Result<Vec<Vec<usize>>> {
    if fold_count < 1 {
        return Err(BendError::Config("fold count must be at least 1".into()));
    }
    if table.len() < fold_count {
        return Err(BendError::TooSmall(format!(
            "{} target records for {fold_count} folds",
            table.len()
        )));
    }
    let order = shuffled_rows(table, seed, stratify);
    Ok(deal_folds(order.len(), fold_count)
        .into_iter()
        .map(|f| f.into_iter().map(|p| order[p]).collect())
        .collect())
}

/// Per-class settings of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthClass {
    pub name: String,
    /// Attribute-direction coefficient per value.
    #[serde(default)]
    pub bias: BTreeMap<String, f64>,
    /// Records per value.
    pub counts: BTreeMap<String, usize>,
    /// Seed for this class's direction; derived from the global seed if absent.
    #[serde(default)]
    pub direction_seed: Option<u64>,
}

/// Text-side settings used to emit one biased query per class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthQueries {
    /// Coefficient of the image attribute direction in each query.
    pub bias: f64,
    /// Cosine between the text attribute direction and the image one.
    pub alignment: f64,
    /// Size of the attribute offset in the augmented text embeddings.
    pub augment_step: f64,
    /// Per-coordinate noise added to each augmented text embedding.
    #[serde(default)]
    pub augment_noise: f64,
}

impl Default for SynthQueries {
    fn default() -> Self {
        SynthQueries {
            bias: 0.8,
            alignment: 0.7,
            augment_step: 0.3,
            augment_noise: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dim: usize,
    pub seed: u64,
    /// Per-coordinate standard deviation of the isotropic noise.
    pub noise: f64,
    pub attribute: AttributeSpace,
    pub classes: Vec<SynthClass>,
    #[serde(default)]
    pub queries: Option<SynthQueries>,
}

impl SynthSpec {
    /// `classes` classes, each with `per_cell` records per value; the sign of
    /// `beta` alternates between classes so both values get favoured.
    pub fn balanced(dim: usize, seed: u64, noise: f64, beta: f64, classes: usize, per_cell: usize) -> Self {
        Self::binary(dim, seed, noise, classes, per_cell, |c| if c % 2 == 0 { beta } else { -beta })
    }

    /// Like [`balanced`](Self::balanced) but every class favours the first
    /// value by `beta`.
    pub fn aligned(dim: usize, seed: u64, noise: f64, beta: f64, classes: usize, per_cell: usize) -> Self {
        Self::binary(dim, seed, noise, classes, per_cell, |_| beta)
    }

    fn binary(
        dim: usize,
        seed: u64,
        noise: f64,
        classes: usize,
        per_cell: usize,
        beta_of: impl Fn(usize) -> f64,
    ) -> Self {
        let attribute = AttributeSpace::gender();
        let classes = (0..classes)
            .map(|c| {
                let beta = beta_of(c);
                SynthClass {
                    name: format!("class{c}"),
                    bias: attribute
                        .values()
                        .iter()
                        .enumerate()
                        .map(|(i, v)| (v.clone(), if i == 0 { beta } else { -beta }))
                        .collect(),
                    counts: attribute.values().iter().map(|v| (v.clone(), per_cell)).collect(),
                    direction_seed: None,
                }
            })
            .collect();
        SynthSpec {
            dim,
            seed,
            noise,
            attribute,
            classes,
            queries: Some(SynthQueries::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let spec_err = |m: String| Err(BendError::Spec(m));
        if !self.noise.is_finite() || self.noise < 0.0 {
            return spec_err(format!("noise must be >= 0, got {}", self.noise));
        }
        if self.classes.is_empty() {
            return spec_err("no classes".into());
        }
        // attribute direction, text offset direction, person direction, classes
        if self.dim < self.classes.len() + 3 {
            return spec_err(format!(
                "dim {} is too small for {} classes (need classes + 3)",
                self.dim,
                self.classes.len()
            ));
        }
        let mut total = 0;
        for c in &self.classes {
            for key in c.bias.keys().chain(c.counts.keys()) {
                if self.attribute.index_of(key).is_none() {
                    return spec_err(format!("class {:?}: unknown value {key:?}", c.name));
                }
            }
            if c.bias.values().any(|b| !b.is_finite()) {
                return spec_err(format!("class {:?}: non-finite bias", c.name));
            }
            total += c.counts.values().sum::<usize>();
        }
        if total == 0 {
            return spec_err("every (class, value) cell is empty".into());
        }
        if let Some(q) = &self.queries {
            if !(0.0..=1.0).contains(&q.alignment) || q.augment_noise < 0.0 {
                return spec_err("query alignment must be in [0, 1] and noise >= 0".into());
            }
        }
        Ok(())
    }
}

/// Orthonormal directions drawn by the generator.
struct SynthDirections {
    attribute: Vec<f64>,
    text_offset: Vec<f64>,
    person: Vec<f64>,
    classes: Vec<Vec<f64>>,
}

fn synth_directions(spec: &SynthSpec) -> Result<SynthDirections> {
    let mut rng = seeded_rng(spec.seed);
    let mut raw: Vec<Vec<f64>> = (0..3).map(|_| gaussian_vec(&mut rng, spec.dim)).collect();
    for (i, c) in spec.classes.iter().enumerate() {
        let seed = c
            .direction_seed
            .unwrap_or_else(|| spec.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1)));
        raw.push(gaussian_vec(&mut seeded_rng(seed), spec.dim));
    }
    let (basis, kept) = gram_schmidt(&raw, 1e-6, 1e-12);
    if kept.len() != raw.len() {
        return Err(BendError::Spec("generator directions are not independent".into()));
    }
    let mut basis = basis.into_iter().map(Embedding::into_vec);
    let mut next = || basis.next().expect("one basis vector per direction");
    Ok(SynthDirections {
        attribute: next(),
        text_offset: next(),
        person: next(),
        classes: spec.classes.iter().map(|_| next()).collect(),
    })
}

/// Row `i` of cell (class, value) is `normalize(w_c + beta u + sigma g)`.
pub fn synth_generate(spec: &SynthSpec) -> Result<LabeledEmbeddingTable> {
    spec.validate()?;
    let dirs = synth_directions(spec)?;
    let mut noise_rng = seeded_rng(spec.seed.wrapping_add(1));
    let mut records = Vec::new();
    for (class, w) in spec.classes.iter().zip(&dirs.classes) {
        for value in spec.attribute.values() {
            let beta = class.bias.get(value).copied().unwrap_or(0.0);
            let count = class.counts.get(value).copied().unwrap_or(0);
            for i in 0..count {
                let g = gaussian_vec(&mut noise_rng, spec.dim);
                let v: Vec<f64> = (0..spec.dim)
                    .map(|k| w[k] + beta * dirs.attribute[k] + spec.noise * g[k])
                    .collect();
                records.push(Record {
                    id: format!("{}-{}-{i:05}", class.name, value),
                    vector: v,
                    labels: [(spec.attribute.name().to_owned(), value.clone())].into(),
                    class: Some(class.name.clone()),
                });
            }
        }
    }
    LabeledEmbeddingTable::from_records(vec![spec.attribute.clone()], records)
}

/// A query with the embeddings the pipeline needs, as stored in a queries
/// JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<Vec<f64>>,
    /// value -> embedding of the attribute-augmented query
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmented: Option<BTreeMap<String, Vec<f64>>>,
    /// value -> embedding of the generic attribute prompt
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generic: Option<BTreeMap<String, Vec<f64>>>,
    /// Class label used as the positive class for AUC.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
}

/// One query per class, leaning toward the value with the largest bias.
///
/// Text embeddings are built from a text attribute direction that is only
/// partly aligned with the image attribute direction, so projecting it out
/// removes part but not all of the query's attribute component.
pub fn synth_queries(spec: &SynthSpec) -> Result<Vec<QueryRecord>> {
    spec.validate()?;
    let Some(q) = spec.queries else {
        return Ok(Vec::new());
    };
    let dirs = synth_directions(spec)?;
    let dim = spec.dim;
    let ortho = (1.0 - q.alignment * q.alignment).max(0.0).sqrt();
    let text_dir: Vec<f64> = (0..dim)
        .map(|k| q.alignment * dirs.attribute[k] + ortho * dirs.text_offset[k])
        .collect();
    let k_values = spec.attribute.len();
    // +1 for the first value down to -1 for the last
    let sign = |i: usize| 1.0 - 2.0 * i as f64 / (k_values - 1) as f64;
    let unit = |v: Vec<f64>| vector::normalize_vec(v).map(Embedding::into_vec);
    let mut aug_rng = seeded_rng(spec.seed.wrapping_add(2));

    let generic: BTreeMap<String, Vec<f64>> = spec
        .attribute
        .values()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let g: Vec<f64> = (0..dim).map(|k| dirs.person[k] + sign(i) * text_dir[k]).collect();
            Ok((v.clone(), unit(g)?))
        })
        .collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(spec.classes.len());
    for (class, w) in spec.classes.iter().zip(&dirs.classes) {
        let lean = spec
            .attribute
            .values()
            .iter()
            .map(|v| class.bias.get(v).copied().unwrap_or(0.0))
            .fold(0.0f64, |best, b| if b.abs() > best.abs() { b } else { best });
        let lean = if lean == 0.0 { 0.0 } else { lean.signum() };
        let query: Vec<f64> = (0..dim)
            .map(|k| w[k] + q.bias * lean * dirs.attribute[k])
            .collect();
        let query = unit(query)?;
        let augmented = spec
            .attribute
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let jitter = gaussian_vec(&mut aug_rng, dim);
                let a: Vec<f64> = (0..dim)
                    .map(|k| query[k] + q.augment_step * sign(i) * text_dir[k] + q.augment_noise * jitter[k])
                    .collect();
                Ok((v.clone(), unit(a)?))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        out.push(QueryRecord {
            id: format!("q-{}", class.name),
            text: Some(format!("a photo of a {}", class.name)),
            vector: Some(query),
            augmented: Some(augmented),
            generic: Some(generic.clone()),
            class: Some(class.name.clone()),
        });
    }
    Ok(out)
}

/// Reads a queries JSONL file, rejecting duplicate ids.
pub fn read_queries(path: impl AsRef<Path>) -> Result<Vec<QueryRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| BendError::io(path, e))?;
    let mut seen = HashMap::new();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| BendError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let q: QueryRecord = serde_json::from_str(&line)
            .map_err(|e| BendError::InvalidQuery(format!("{} line {}: {e}", path.display(), i + 1)))?;
        if seen.insert(q.id.clone(), i).is_some() {
            return Err(BendError::DuplicateId(q.id));
        }
        out.push(q);
    }
    Ok(out)
}

pub fn write_queries(path: impl AsRef<Path>, queries: &[QueryRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(fs::File::create(path).map_err(|e| BendError::io(path, e))?);
    for q in queries {
        serde_json::to_writer(&mut w, q).map_err(|e| BendError::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| BendError::io(path, e))?;
    }
    w.flush().map_err(|e| BendError::io(path, e))
}
