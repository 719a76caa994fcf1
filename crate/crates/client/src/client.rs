// SPDX-License-Identifier: MIT OR Apache-2.0

use std::time::Duration;

use reqwest::blocking;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::api::{ErrorBody, GenerateRequest, GenerateResponse, ModelInfo, TraceRequest, TraceResponse};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request to {url} failed: {source}")]
    Transport {
        url: String,
        #[source]
        source: reqwest::Error,
    },
    #[error("service returned {status}: {}", .body.error)]
    Status { status: u16, body: ErrorBody },
}

/// Blocking client for one service instance. Do not use from inside an
/// async runtime.
#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: blocking::Client,
}

impl Client {
    /// `base` is e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Result<Self, ClientError> {
        let base = base.into().trim_end_matches('/').to_string();
        let http = blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|source| ClientError::Transport {
                url: base.clone(),
                source,
            })?;
        Ok(Self { base, http })
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    pub fn model_info(&self) -> Result<ModelInfo, ClientError> {
        let url = format!("{}/model/info", self.base);
        let resp = self.http.get(&url).send();
        decode(url, resp)
    }

    pub fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse, ClientError> {
        self.post("/generate", req)
    }

    pub fn trace(&self, req: &TraceRequest) -> Result<TraceResponse, ClientError> {
        self.post("/trace", req)
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        let url = format!("{}{path}", self.base);
        let resp = self.http.post(&url).json(body).send();
        decode(url, resp)
    }
}

fn decode<T: DeserializeOwned>(url: String, resp: reqwest::Result<blocking::Response>) -> Result<T, ClientError> {
    let resp = resp.map_err(|source| ClientError::Transport { url: url.clone(), source })?;
    let status = resp.status();
    if status.is_success() {
        return resp.json().map_err(|source| ClientError::Transport { url, source });
    }
    let text = resp.text().unwrap_or_default();
    let body = serde_json::from_str(&text).unwrap_or(ErrorBody {
        error: text,
        field: None,
    });
    Err(ClientError::Status {
        status: status.as_u16(),
        body,
    })
}
