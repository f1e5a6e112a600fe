//! HTTP client for an external text-embedding service.
//!
//! Wire contract: `POST {"texts": [..]}` answered by `{"embeddings": [[..], ..]}`.

use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;
use serde::Deserialize;
use serde_json::json;

use crate::error::{BendError, Result};
use crate::http::JsonPoster;
use crate::vector::{normalize_vec, Embedding};

/// Environment variable consulted when no endpoint flag is given.
pub const ENDPOINT_ENV: &str = "BEND_EMBED_ENDPOINT";

pub const DEFAULT_TIMEOUT_MS: u64 = 5000;

/// Delay before the single retry.
pub const RETRY_BACKOFF: Duration = Duration::from_millis(250);

/// Where to send texts and what dimension to expect back.
#[derive(Debug, Clone)]
pub struct EmbeddingEndpoint {
    pub url: String,
    pub timeout_ms: u64,
    pub expected_dim: usize,
    /// Sent as `Authorization: Bearer <token>` when set.
    pub bearer: Option<String>,
}

impl EmbeddingEndpoint {
    pub fn new(url: impl Into<String>, expected_dim: usize) -> Self {
        EmbeddingEndpoint {
            url: url.into(),
            timeout_ms: DEFAULT_TIMEOUT_MS,
            expected_dim,
            bearer: None,
        }
    }

    /// Picks the explicit URL if given, otherwise [`ENDPOINT_ENV`].
    pub fn resolve(flag: Option<&str>, expected_dim: usize) -> Option<Self> {
        let url = match flag {
            Some(u) => u.to_owned(),
            None => std::env::var(ENDPOINT_ENV).ok().filter(|u| !u.trim().is_empty())?,
        };
        Some(Self::new(url, expected_dim))
    }
}

/// A reusable client. Cloning shares the underlying connection pool.
#[derive(Debug, Clone)]
pub struct EmbeddingClient {
    poster: JsonPoster,
    expected_dim: usize,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<Option<f64>>>,
}

fn non_finite_tokens() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"-?\b(?:NaN|Infinity)\b"#).expect("static regex"))
}

impl EmbeddingClient {
    pub fn new(endpoint: &EmbeddingEndpoint) -> Self {
        EmbeddingClient {
            poster: JsonPoster::new(
                &endpoint.url,
                Duration::from_millis(endpoint.timeout_ms),
                endpoint.bearer.clone(),
            ),
            expected_dim: endpoint.expected_dim,
        }
    }

    pub fn url(&self) -> &str {
        self.poster.url()
    }

    /// Embeds `texts` in order and returns unit vectors.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        if texts.is_empty() {
            return Err(BendError::EmptySet("no texts to embed"));
        }
        let body = json!({ "texts": texts });
        let raw = match self.poster.post(&body) {
            Err(BendError::ProviderUnavailable { .. }) => {
                std::thread::sleep(RETRY_BACKOFF);
                self.poster.post(&body)?
            }
            other => other?,
        };
        self.parse(&raw, texts.len())
    }

    fn parse(&self, raw: &str, expected_count: usize) -> Result<Vec<Embedding>> {
        // Some services emit bare NaN/Infinity, which is not JSON. Map them to
        // null so they surface as NonFiniteValue rather than a parse error.
        let cleaned = non_finite_tokens().replace_all(raw, "null");
        let resp: EmbedResponse = serde_json::from_str(&cleaned)
            .map_err(|e| BendError::MalformedResponse(format!("embedding response: {e}")))?;
        if resp.embeddings.len() != expected_count {
            return Err(BendError::MalformedResponse(format!(
                "sent {expected_count} texts, received {} embeddings",
                resp.embeddings.len()
            )));
        }
        resp.embeddings
            .into_iter()
            .enumerate()
            .map(|(index, row)| {
                if row.len() != self.expected_dim {
                    return Err(BendError::DimMismatch {
                        expected: self.expected_dim,
                        actual: row.len(),
                    });
                }
                let values = row
                    .into_iter()
                    .map(|x| x.filter(|v| v.is_finite()))
                    .collect::<Option<Vec<f64>>>()
                    .ok_or(BendError::NonFiniteValue { index })?;
                normalize_vec(values)
            })
            .collect()
    }
}

/// One-shot convenience wrapper around [`EmbeddingClient::embed`].
pub fn embed_text(texts: &[String], endpoint: &EmbeddingEndpoint) -> Result<Vec<Embedding>> {
    EmbeddingClient::new(endpoint).embed(texts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn client(dim: usize) -> EmbeddingClient {
        EmbeddingClient::new(&EmbeddingEndpoint::new("http://127.0.0.1:9", dim))
    }

    #[test]
    fn parses_and_normalizes() {
        let out = client(2).parse(r#"{"embeddings":[[3,4],[0,2]]}"#, 2).unwrap();
        assert!((out[0].as_slice()[0] - 0.6).abs() < 1e-15);
        assert_eq!(out[1].as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn wrong_dim() {
        let err = client(3).parse(r#"{"embeddings":[[1,0]]}"#, 1).unwrap_err();
        assert!(matches!(err, BendError::DimMismatch { expected: 3, actual: 2 }));
    }

    #[test]
    fn nan_and_infinity_tokens() {
        for body in [
            r#"{"embeddings":[[1,0],[NaN,1]]}"#,
            r#"{"embeddings":[[1,0],[-Infinity,1]]}"#,
            r#"{"embeddings":[[1,0],[null,1]]}"#,
        ] {
            let err = client(2).parse(body, 2).unwrap_err();
            assert!(matches!(err, BendError::NonFiniteValue { index: 1 }), "{body}");
        }
    }

    #[test]
    fn count_mismatch_is_malformed() {
        let err = client(2).parse(r#"{"embeddings":[[1,0]]}"#, 2).unwrap_err();
        assert!(matches!(err, BendError::MalformedResponse(_)));
    }

    #[test]
    fn zero_vector_rejected() {
        let err = client(2).parse(r#"{"embeddings":[[0,0]]}"#, 1).unwrap_err();
        assert!(matches!(err, BendError::ZeroVector { .. }));
    }

    #[test]
    fn flag_overrides_env() {
        let ep = EmbeddingEndpoint::resolve(Some("http://flag"), 8).unwrap();
        assert_eq!(ep.url, "http://flag");
        assert_eq!(ep.timeout_ms, 5000);
    }
}
