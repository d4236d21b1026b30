//! Thin async client for the cmrorient HTTP service, plus the JSON types the
//! service speaks.

use cmrorient::orient::OrientCode;
use cmrorient::standardize::SlicePrediction;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Returned by `POST /volumes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeInfo {
    pub id: String,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub max_gray: f32,
}

/// Per-slice predictions and their consensus. `consensus` is absent when no
/// slice has image content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub id: String,
    pub slices: Vec<SlicePrediction>,
    pub consensus: Option<OrientCode>,
    pub confidence: Option<f64>,
    pub unanimous: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustRequest {
    pub code: OrientCode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("server returned {status}: {message}")]
    Status { status: u16, message: String },
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Status { status, .. } => Some(*status),
            ClientError::Transport(e) => e.status().map(|s| s.as_u16()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: &str) -> Self {
        Client { base: base.trim_end_matches('/').to_string(), http: reqwest::Client::new() }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn check(resp: reqwest::Response) -> Result<reqwest::Response, ClientError> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().await.unwrap_or_default();
        let message = serde_json::from_str::<ErrorBody>(&text).map(|b| b.error).unwrap_or(text);
        Err(ClientError::Status { status: status.as_u16(), message })
    }

    /// Uploads NIfTI bytes (optionally gzipped).
    pub async fn upload(&self, bytes: Vec<u8>) -> Result<VolumeInfo, ClientError> {
        let resp = self.http.post(self.url("/volumes")).body(bytes).send().await?;
        Ok(Self::check(resp).await?.json().await?)
    }

    pub async fn prediction(&self, id: &str) -> Result<Prediction, ClientError> {
        let resp = self.http.get(self.url(&format!("/volumes/{id}/prediction"))).send().await?;
        Ok(Self::check(resp).await?.json().await?)
    }

    /// Slice `k` as an 8-bit grayscale PNG.
    pub async fn slice_png(&self, id: &str, k: usize) -> Result<Vec<u8>, ClientError> {
        let resp = self.http.get(self.url(&format!("/volumes/{id}/slices/{k}"))).send().await?;
        Ok(Self::check(resp).await?.bytes().await?.to_vec())
    }

    /// Undoes orientation `code` on the stored volume and returns the new prediction.
    pub async fn adjust(&self, id: &str, code: OrientCode) -> Result<Prediction, ClientError> {
        let resp = self.http.post(self.url(&format!("/volumes/{id}/adjust"))).json(&AdjustRequest { code }).send().await?;
        Ok(Self::check(resp).await?.json().await?)
    }

    /// Current file bytes of the volume.
    pub async fn save(&self, id: &str) -> Result<Vec<u8>, ClientError> {
        let resp = self.http.post(self.url(&format!("/volumes/{id}/save"))).send().await?;
        Ok(Self::check(resp).await?.bytes().await?.to_vec())
    }
}
