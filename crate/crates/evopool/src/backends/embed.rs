//! Embedding providers. The default is deterministic feature hashing over
//! character 3-grams: integer hashing with fixed-order accumulation, so the
//! same text embeds to the same vector on every platform and run.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

use super::http::{post_json_with_retries, RetryPolicy};

/// Dimension of hashed embeddings.
pub const EMBED_DIM: usize = 256;

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Character 3-gram counts hashed into a fixed-width vector, L2-normalized.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder { dim: EMBED_DIM }
    }
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashingEmbedder { dim }
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

impl Embedder for HashingEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut vector = vec![0.0f64; self.dim];
        let chars: Vec<char> = text.chars().collect();
        if chars.is_empty() {
            return Ok(vector);
        }
        let mut buf = [0u8; 16];
        let mut add = |gram: &[char]| {
            let mut len = 0;
            for &c in gram {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            let idx = (fnv1a(&buf[..len]) % self.dim as u64) as usize;
            vector[idx] += 1.0;
        };
        if chars.len() < 3 {
            add(&chars);
        } else {
            for gram in chars.windows(3) {
                add(gram);
            }
        }
        let norm: f64 = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in vector.iter_mut() {
                *v /= norm;
            }
        }
        Ok(vector)
    }
}

/// Convenience wrapper: cosine of two texts under an embedder.
pub fn cosine_of(embedder: &dyn Embedder, a: &str, b: &str) -> Result<f64> {
    let va = embedder.embed(a)?;
    let vb = embedder.embed(b)?;
    Ok(crate::evolve::cosine(&va, &vb))
}

/// Remote embedding endpoint (OpenAI-compatible `/v1/embeddings` wire shape).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemoteEmbedderConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_key_env() -> String {
    "EVOPOOL_API_KEY".to_string()
}

pub struct RemoteEmbedder {
    config: RemoteEmbedderConfig,
    client: reqwest::blocking::Client,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteEmbedderConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(config.retry.timeout_secs))
            .build()
            .map_err(|e| Error::Backend(format!("embedding client: {e}")))?;
        Ok(RemoteEmbedder { config, client })
    }
}

impl Embedder for RemoteEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let body = serde_json::json!({
            "model": self.config.model,
            "input": text,
        });
        let api_key = std::env::var(&self.config.api_key_env).ok();
        let response = post_json_with_retries(
            &self.client,
            &self.config.endpoint,
            &body,
            api_key.as_deref(),
            &self.config.retry,
        )?;
        let vector = response["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| Error::Backend("embedding response missing data[0].embedding".into()))?
            .iter()
            .map(|v| v.as_f64().unwrap_or(0.0))
            .collect();
        Ok(vector)
    }
}
