//! Minimal blocking JSON-over-HTTP helper shared by the embedding client and
//! the external augmenter.

use std::time::Duration;

use crate::error::BendError;

#[derive(Debug, Clone)]
pub(crate) struct JsonPoster {
    agent: ureq::Agent,
    url: String,
    bearer: Option<String>,
}

impl JsonPoster {
    pub(crate) fn new(url: &str, timeout: Duration, bearer: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(true)
            .build()
            .into();
        JsonPoster {
            agent,
            url: url.to_owned(),
            bearer,
        }
    }

    pub(crate) fn url(&self) -> &str {
        &self.url
    }

    /// POSTs `body` and returns the raw response text.
    pub(crate) fn post(&self, body: &serde_json::Value) -> Result<String, BendError> {
        let payload = serde_json::to_string(body)
            .map_err(|e| BendError::Config(format!("cannot encode request: {e}")))?;
        let mut req = self
            .agent
            .post(&self.url)
            .header("Content-Type", "application/json");
        if let Some(token) = &self.bearer {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let unavailable = |reason: String| BendError::ProviderUnavailable {
            endpoint: self.url.clone(),
            reason,
        };
        let mut resp = req.send(payload).map_err(|e| unavailable(e.to_string()))?;
        resp.body_mut()
            .read_to_string()
            .map_err(|e| unavailable(e.to_string()))
    }
}
