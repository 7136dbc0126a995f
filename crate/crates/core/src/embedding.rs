//! Fixed-dimension text embeddings for queries, contexts and role descriptions.
//!
//! Two embedders are provided: a deterministic signed feature-hashing embedder
//! over character n-grams, and a client for OpenAI-compatible embedding
//! endpoints. Both return unit-norm vectors.

use std::num::NonZeroUsize;
use std::sync::Mutex;
use std::time::Duration;

use lru::LruCache;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// L2-normalizes `values`. An all-zero vector maps to the first basis vector.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Dimension("embedding must have dim >= 1".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Embedding("non-finite embedding value".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            values[0] = 1.0;
            return Ok(Self(values));
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Self(values))
    }

    pub fn basis(dim: usize, index: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[index] = 1.0;
        Self(v)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        crate::linalg::dot(&self.0, &other.0)
    }
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Embedding>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EmbedderConfig {
    Hash {
        #[serde(default = "default_hash_dim")]
        dim: usize,
    },
    Remote {
        base_url: String,
        /// Name of the environment variable holding the bearer token.
        auth_env: String,
        model: String,
        dim: usize,
        #[serde(default = "default_timeout")]
        timeout_s: f64,
    },
}

fn default_hash_dim() -> usize {
    256
}

fn default_timeout() -> f64 {
    30.0
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Hash {
            dim: default_hash_dim(),
        }
    }
}

impl EmbedderConfig {
    pub fn dim(&self) -> usize {
        match self {
            EmbedderConfig::Hash { dim } | EmbedderConfig::Remote { dim, .. } => *dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim() < 16 {
            return Err(Error::Config(format!(
                "embedder dim must be >= 16, got {}",
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn Embedder>> {
        self.validate()?;
        Ok(match self {
            EmbedderConfig::Hash { dim } => Box::new(HashEmbedder::new(*dim)?),
            EmbedderConfig::Remote {
                base_url,
                auth_env,
                model,
                dim,
                timeout_s,
            } => Box::new(RemoteEmbedder::new(
                base_url.clone(),
                auth_env.clone(),
                model.clone(),
                *dim,
                Duration::from_secs_f64(*timeout_s),
            )?),
        })
    }
}

/// Signed feature hashing of character 3-, 4- and 5-grams.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

const NGRAM_SIZES: [usize; 3] = [3, 4, 5];

impl HashEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 16 {
            return Err(Error::Config(format!("hash embedder dim must be >= 16, got {dim}")));
        }
        Ok(Self { dim })
    }

    fn accumulate(&self, feature: &[char], out: &mut [f64]) {
        let h = mix64(fnv1a(feature));
        let bucket = (h % self.dim as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        out[bucket] += sign;
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        if text.is_empty() {
            return Ok(Embedding::basis(self.dim, 0));
        }
        let chars: Vec<char> = text.chars().flat_map(char::to_lowercase).collect();
        let mut values = vec![0.0; self.dim];
        if chars.len() < NGRAM_SIZES[0] {
            self.accumulate(&chars, &mut values);
        } else {
            for n in NGRAM_SIZES {
                for gram in chars.windows(n) {
                    self.accumulate(gram, &mut values);
                }
            }
        }
        Embedding::normalized(values)
    }
}

fn fnv1a(chars: &[char]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut buf = [0u8; 4];
    for c in chars {
        for b in c.encode_utf8(&mut buf).as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

// splitmix64 finalizer
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Client for an OpenAI-compatible `/embeddings` endpoint.
pub struct RemoteEmbedder {
    client: reqwest::blocking::Client,
    url: String,
    auth_env: String,
    model: String,
    dim: usize,
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

impl RemoteEmbedder {
    pub fn new(
        base_url: String,
        auth_env: String,
        model: String,
        dim: usize,
        timeout: Duration,
    ) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        let url = format!("{}/embeddings", base_url.trim_end_matches('/'));
        Ok(Self {
            client,
            url,
            auth_env,
            model,
            dim,
        })
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        let mut out = self.embed_batch(&[text])?;
        Ok(out.remove(0))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let body = serde_json::json!({ "model": self.model, "input": texts });
        let mut req = self.client.post(&self.url).json(&body);
        if let Ok(token) = std::env::var(&self.auth_env) {
            req = req.bearer_auth(token);
        }
        let resp = req
            .send()
            .map_err(|e| Error::Embedding(format!("transport: {e}")))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Error::Embedding(format!("http status {status}")));
        }
        let parsed: EmbeddingsResponse = resp
            .json()
            .map_err(|e| Error::Embedding(format!("malformed response: {e}")))?;
        if parsed.data.len() != texts.len() {
            return Err(Error::Embedding(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                parsed.data.len()
            )));
        }
        let mut data = parsed.data;
        if data.iter().all(|d| d.index.is_some()) {
            data.sort_by_key(|d| d.index);
        }
        data.into_iter()
            .map(|d| {
                if d.embedding.len() != self.dim {
                    return Err(Error::Embedding(format!(
                        "expected dim {}, got {}",
                        self.dim,
                        d.embedding.len()
                    )));
                }
                Embedding::normalized(d.embedding).map_err(|e| Error::Embedding(e.to_string()))
            })
            .collect()
    }
}

pub const DEFAULT_CACHE_CAPACITY: usize = 10_000;

/// Embedder wrapper with a bounded LRU cache keyed by caller-supplied digests.
pub struct CachedEmbedder {
    inner: Box<dyn Embedder>,
    cache: Mutex<LruCache<String, Embedding>>,
}

impl CachedEmbedder {
    pub fn new(inner: Box<dyn Embedder>, capacity: usize) -> Self {
        let cap = NonZeroUsize::new(capacity.max(1)).expect("capacity >= 1");
        Self {
            inner,
            cache: Mutex::new(LruCache::new(cap)),
        }
    }

    pub fn dim(&self) -> usize {
        self.inner.dim()
    }

    pub fn inner(&self) -> &dyn Embedder {
        self.inner.as_ref()
    }

    /// Embeds `text`, reusing the cached vector stored under `key`.
    pub fn embed_keyed(&self, key: &str, text: &str) -> Result<Embedding> {
        if let Some(hit) = self.cache.lock().expect("cache lock").get(key) {
            return Ok(hit.clone());
        }
        let emb = self.inner.embed(text)?;
        self.cache
            .lock()
            .expect("cache lock")
            .put(key.to_string(), emb.clone());
        Ok(emb)
    }

    pub fn len(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_is_first_basis_vector() {
        let e = HashEmbedder::new(256).unwrap().embed("").unwrap();
        assert_eq!(e.dim(), 256);
        assert_eq!(e.values()[0], 1.0);
        assert!(e.values()[1..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hash_embedding_is_deterministic() {
        let h = HashEmbedder::new(256).unwrap();
        assert_eq!(h.embed("generator role").unwrap(), h.embed("generator role").unwrap());
    }

    #[test]
    fn shared_ngrams_raise_similarity() {
        let h = HashEmbedder::new(256).unwrap();
        let a = h.embed("generator role").unwrap();
        let b = h.embed("generator role drafts answers").unwrap();
        let c = h.embed("verify the code output").unwrap();
        assert!(a.dot(&b) > a.dot(&c));
    }

    #[test]
    fn batch_matches_single_calls() {
        let h = HashEmbedder::new(64).unwrap();
        assert!(h.embed_batch(&[]).unwrap().is_empty());
        let texts = ["alpha beta", "gamma", "delta epsilon zeta"];
        let batch = h.embed_batch(&texts).unwrap();
        for (t, e) in texts.iter().zip(&batch) {
            assert_eq!(e, &h.embed(t).unwrap());
        }
        let same = h.embed_batch(&["a", "a"]).unwrap();
        assert_eq!(same[0], same[1]);
    }

    #[test]
    fn dim_below_sixteen_is_rejected() {
        assert!(HashEmbedder::new(8).is_err());
        assert!(EmbedderConfig::Hash { dim: 15 }.validate().is_err());
    }

    #[test]
    fn cache_reuses_entries() {
        let c = CachedEmbedder::new(Box::new(HashEmbedder::new(32).unwrap()), 2);
        let a = c.embed_keyed("k1", "hello").unwrap();
        // Same key returns the cached vector even for different text.
        assert_eq!(c.embed_keyed("k1", "other").unwrap(), a);
        c.embed_keyed("k2", "x").unwrap();
        c.embed_keyed("k3", "y").unwrap();
        assert_eq!(c.len(), 2);
    }

    proptest! {
        #[test]
        fn embeddings_are_unit_norm(text in ".{0,200}") {
            let e = HashEmbedder::new(128).unwrap().embed(&text).unwrap();
            let norm = e.values().iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-6);
            prop_assert!(e.values().iter().all(|v| v.is_finite()));
        }
    }
}
