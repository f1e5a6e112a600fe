//! Attribute spaces and query augmentation.
//!
//! A query such as `"a photo of a nurse"` is rewritten once per attribute
//! value (`"a photo of a male nurse"`, `"a photo of a female nurse"`). The
//! embeddings of those rewrites span the local attribute subspace for the
//! query. The default engine is a shallow template rewrite; an external
//! HTTP provider can be plugged in through [`Augmenter`].

use std::collections::HashSet;
use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{BendError, Result};
use crate::http::JsonPoster;

/// Prompt used for generic attribute directions when none is configured.
pub const GENERIC_PROMPT_TEMPLATE: &str = "A photo of a {ATTRIBUTE} person";

/// The seven FairFace race labels.
pub const FAIRFACE_RACES: [&str; 7] = [
    "White",
    "Black",
    "Latino_Hispanic",
    "East Asian",
    "Southeast Asian",
    "Indian",
    "Middle Eastern",
];

/// A protected attribute and its ordered set of values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AttributeSpaceDecl", into = "AttributeSpaceDecl")]
pub struct AttributeSpace {
    name: String,
    values: Vec<String>,
    insertion_terms: Vec<String>,
    generic_prompts: Vec<String>,
}

/// On-disk form. Terms and prompts are optional and default per value.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct AttributeSpaceDecl {
    name: String,
    values: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    insertion_terms: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generic_prompts: Option<Vec<String>>,
}

impl TryFrom<AttributeSpaceDecl> for AttributeSpace {
    type Error = BendError;

    fn try_from(d: AttributeSpaceDecl) -> Result<Self> {
        let terms = d
            .insertion_terms
            .unwrap_or_else(|| d.values.iter().map(|v| default_term(v)).collect());
        let prompts = d.generic_prompts.unwrap_or_else(|| {
            d.values
                .iter()
                .zip(&terms)
                .map(|(v, t)| default_generic_prompt(v, t))
                .collect()
        });
        AttributeSpace::new(d.name, d.values, terms, prompts)
    }
}

impl From<AttributeSpace> for AttributeSpaceDecl {
    fn from(s: AttributeSpace) -> Self {
        AttributeSpaceDecl {
            name: s.name,
            values: s.values,
            insertion_terms: Some(s.insertion_terms),
            generic_prompts: Some(s.generic_prompts),
        }
    }
}

fn default_term(value: &str) -> String {
    value.replace('_', " ").to_lowercase()
}

fn default_generic_prompt(value: &str, term: &str) -> String {
    match value.to_lowercase().as_str() {
        "male" | "man" => "a photo of a man".to_owned(),
        "female" | "woman" => "a photo of a woman".to_owned(),
        _ => GENERIC_PROMPT_TEMPLATE.replace("{ATTRIBUTE}", term),
    }
}

impl AttributeSpace {
    pub fn new(
        name: impl Into<String>,
        values: Vec<String>,
        insertion_terms: Vec<String>,
        generic_prompts: Vec<String>,
    ) -> Result<Self> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(BendError::Config("attribute name is empty".into()));
        }
        if values.len() < 2 {
            return Err(BendError::Config(format!(
                "attribute {name:?} needs at least 2 values, got {}",
                values.len()
            )));
        }
        let mut seen = HashSet::new();
        for v in &values {
            if v.is_empty() || !seen.insert(v.as_str()) {
                return Err(BendError::Config(format!(
                    "attribute {name:?} has an empty or duplicate value {v:?}"
                )));
            }
        }
        if insertion_terms.len() != values.len() || generic_prompts.len() != values.len() {
            return Err(BendError::Config(format!(
                "attribute {name:?}: every value needs exactly one insertion term and one generic prompt"
            )));
        }
        if insertion_terms.iter().any(|t| t.trim().is_empty()) {
            return Err(BendError::Config(format!(
                "attribute {name:?} has an empty insertion term"
            )));
        }
        Ok(AttributeSpace {
            name,
            values,
            insertion_terms,
            generic_prompts,
        })
    }

    /// Builds a space with default insertion terms and generic prompts.
    pub fn with_defaults<S: Into<String>>(
        name: impl Into<String>,
        values: impl IntoIterator<Item = S>,
    ) -> Result<Self> {
        AttributeSpaceDecl {
            name: name.into(),
            values: values.into_iter().map(Into::into).collect(),
            insertion_terms: None,
            generic_prompts: None,
        }
        .try_into()
    }

    /// `gender = {male, female}` with "a photo of a man" / "a photo of a woman".
    pub fn gender() -> Self {
        Self::with_defaults("gender", ["male", "female"]).expect("static preset")
    }

    pub fn race_fairface() -> Self {
        Self::with_defaults("race", FAIRFACE_RACES).expect("static preset")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn values(&self) -> &[String] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn insertion_terms(&self) -> &[String] {
        &self.insertion_terms
    }

    pub fn index_of(&self, value: &str) -> Option<usize> {
        self.values.iter().position(|v| v == value)
    }

    /// Configured generic prompts, in value order.
    pub fn generic_prompts(&self) -> Vec<(&str, &str)> {
        self.values
            .iter()
            .map(String::as_str)
            .zip(self.generic_prompts.iter().map(String::as_str))
            .collect()
    }

    /// Words whose presence marks a query as already naming the attribute:
    /// every insertion term, plus the last word of each generic prompt when
    /// that word differs between values ("man"/"woman", but not "person").
    fn explicit_terms(&self) -> Vec<String> {
        let mut terms: Vec<String> = self.insertion_terms.iter().map(|t| t.to_lowercase()).collect();
        let heads: Vec<String> = self
            .generic_prompts
            .iter()
            .filter_map(|p| p.split_whitespace().last())
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
            .collect();
        let distinct: HashSet<&String> = heads.iter().collect();
        if distinct.len() == heads.len() {
            terms.extend(heads.iter().filter(|h| !h.is_empty()).cloned());
        }
        terms.sort();
        terms.dedup();
        terms
    }

    /// True when `text` already names one of this attribute's values.
    pub fn mentions_attribute(&self, text: &str) -> bool {
        let alternation = self
            .explicit_terms()
            .iter()
            .map(|t| regex::escape(t))
            .collect::<Vec<_>>()
            .join("|");
        let re = Regex::new(&format!(r"(?i)\b(?:{alternation})\b")).expect("escaped terms");
        re.is_match(text)
    }
}

/// Where an [`AugmentedQuerySet`] came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentSource {
    Template,
    External,
    /// The external provider failed and the template engine was used.
    TemplateFallback,
}

/// One rewrite of the base query per attribute value, in value order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedQuerySet {
    pub base_text: String,
    pub values: Vec<String>,
    pub texts: Vec<String>,
    pub source: AugmentSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl AugmentedQuerySet {
    pub fn get(&self, value: &str) -> Option<&str> {
        self.values
            .iter()
            .position(|v| v == value)
            .map(|i| self.texts[i].as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values
            .iter()
            .map(String::as_str)
            .zip(self.texts.iter().map(String::as_str))
    }
}

fn photo_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^(\s*(?:a|an|the)\s+(?:photo|picture|image)\s+of\s+)(a|an|the)(\s+)(\S.*)$")
            .expect("static pattern")
    })
}

fn starts_with_vowel(s: &str) -> bool {
    s.chars()
        .next()
        .is_some_and(|c| matches!(c.to_ascii_lowercase(), 'a' | 'e' | 'i' | 'o' | 'u'))
}

/// Re-picks "a"/"an" for the word that now follows the article.
fn agree_article(article: &str, next_word: &str) -> String {
    let lower = article.to_lowercase();
    if lower != "a" && lower != "an" {
        return article.to_owned();
    }
    let fixed = if starts_with_vowel(next_word) { "an" } else { "a" };
    if article.starts_with(|c: char| c.is_uppercase()) {
        let mut s = fixed.to_owned();
        s[..1].make_ascii_uppercase();
        s
    } else {
        fixed.to_owned()
    }
}

/// Inserts one attribute term before the subject of `text`.
fn insert_term(text: &str, term: &str) -> String {
    match photo_pattern().captures(text) {
        Some(caps) => format!(
            "{}{}{}{} {}",
            &caps[1],
            agree_article(&caps[2], term),
            &caps[3],
            term,
            &caps[4]
        ),
        None => format!("{term} {}", text.trim()),
    }
}

/// Template rewrite of `text` for every value in `space`.
pub fn augment_query(text: &str, space: &AttributeSpace) -> Result<AugmentedQuerySet> {
    if text.trim().is_empty() {
        return Err(BendError::EmptyQuery);
    }
    Ok(AugmentedQuerySet {
        base_text: text.to_owned(),
        values: space.values.clone(),
        texts: space
            .insertion_terms
            .iter()
            .map(|t| insert_term(text, t))
            .collect(),
        source: AugmentSource::Template,
        warning: None,
    })
}

/// Configured generic prompt per value, in value order.
pub fn generic_prompts(space: &AttributeSpace) -> Vec<(String, String)> {
    space
        .generic_prompts()
        .into_iter()
        .map(|(v, p)| (v.to_owned(), p.to_owned()))
        .collect()
}

/// Source of attribute-specific query rewrites.
pub trait Augmenter: Send + Sync {
    fn augment(&self, text: &str, space: &AttributeSpace) -> Result<AugmentedQuerySet>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateAugmenter;

impl Augmenter for TemplateAugmenter {
    fn augment(&self, text: &str, space: &AttributeSpace) -> Result<AugmentedQuerySet> {
        augment_query(text, space)
    }
}

pub const DEFAULT_AUGMENT_TIMEOUT: Duration = Duration::from_secs(5);

/// Delegates rewrites to an HTTP service.
///
/// Request: `{"text": .., "attribute": .., "values": [..]}`.
/// Response: `{"augmented": {value: text, ..}}`, covering every value.
#[derive(Debug, Clone)]
pub struct ExternalAugmenter {
    poster: JsonPoster,
    fallback: bool,
}

#[derive(Deserialize)]
struct AugmentResponse {
    augmented: serde_json::Map<String, serde_json::Value>,
}

impl ExternalAugmenter {
    pub fn new(endpoint: &str, timeout: Duration, fallback: bool) -> Self {
        ExternalAugmenter {
            poster: JsonPoster::new(endpoint, timeout, None),
            fallback,
        }
    }

    fn request(&self, text: &str, space: &AttributeSpace) -> Result<AugmentedQuerySet> {
        let body = serde_json::json!({
            "text": text,
            "attribute": space.name(),
            "values": space.values(),
        });
        let raw = self.poster.post(&body)?;
        let parsed: AugmentResponse = serde_json::from_str(&raw)
            .map_err(|e| BendError::MalformedResponse(format!("augmenter: {e}")))?;
        let texts = space
            .values()
            .iter()
            .map(|v| match parsed.augmented.get(v) {
                Some(serde_json::Value::String(s)) if !s.trim().is_empty() => Ok(s.clone()),
                Some(_) => Err(BendError::MalformedResponse(format!(
                    "augmented text for {v:?} is not a non-empty string"
                ))),
                None => Err(BendError::MalformedResponse(format!(
                    "augmented text for {v:?} is missing"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AugmentedQuerySet {
            base_text: text.to_owned(),
            values: space.values().to_vec(),
            texts,
            source: AugmentSource::External,
            warning: None,
        })
    }
}

impl Augmenter for ExternalAugmenter {
    fn augment(&self, text: &str, space: &AttributeSpace) -> Result<AugmentedQuerySet> {
        if text.trim().is_empty() {
            return Err(BendError::EmptyQuery);
        }
        match self.request(text, space) {
            Ok(set) => Ok(set),
            Err(err) if self.fallback => {
                let mut set = augment_query(text, space)?;
                set.source = AugmentSource::TemplateFallback;
                set.warning = Some(format!("augmenter at {} failed: {err}", self.poster.url()));
                Ok(set)
            }
            Err(err) => Err(err),
        }
    }
}

/// One-shot form of [`ExternalAugmenter`] with the default timeout.
pub fn external_augmenter(
    text: &str,
    space: &AttributeSpace,
    endpoint: &str,
    fallback: bool,
) -> Result<AugmentedQuerySet> {
    ExternalAugmenter::new(endpoint, DEFAULT_AUGMENT_TIMEOUT, fallback).augment(text, space)
}
