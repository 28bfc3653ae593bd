//! Text-embedding providers for road and POI descriptions.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::rng::Rng;
use crate::tensor::Tensor;

pub const URL_ENV: &str = "TRAJMAMBA_EMBED_URL";
pub const TOKEN_ENV: &str = "TRAJMAMBA_EMBED_TOKEN";
pub const STUB_DIM: usize = 64;

pub trait TextEmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, key: &str, text: &str) -> Result<Vec<f32>>;

    /// Embeds `(key, text)` pairs in order.
    fn embed_many(&self, items: &[(String, String)]) -> Result<Vec<Vec<f32>>> {
        items.iter().map(|(k, t)| self.embed(k, t)).collect()
    }
}

/// Pseudo-random unit vectors seeded by the text bytes.
#[derive(Clone, Debug)]
pub struct HashStub {
    pub dim: usize,
}

impl Default for HashStub {
    fn default() -> Self {
        Self { dim: STUB_DIM }
    }
}

impl TextEmbeddingProvider for HashStub {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, _key: &str, text: &str) -> Result<Vec<f32>> {
        let digest = Sha256::digest(text.as_bytes());
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = Rng::new(seed, "text-stub");
        let v: Vec<f64> = (0..self.dim).map(|_| rng.normal(0.0, 1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        Ok(v.iter().map(|x| (x / norm) as f32).collect())
    }
}

/// Vectors looked up by key from a checkpoint-format table whose entries are
/// named `text:<key>`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FileTable {
    dim: usize,
    table: BTreeMap<String, Vec<f32>>,
}

impl FileTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            table: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&[f32]> {
        self.table.get(key).map(|v| v.as_slice())
    }

    pub fn insert(&mut self, key: impl Into<String>, v: Vec<f32>) -> Result<()> {
        if self.table.is_empty() && self.dim == 0 {
            self.dim = v.len();
        }
        if v.len() != self.dim {
            return Err(Error::Format(format!(
                "text vector has {} values, table dim is {}",
                v.len(),
                self.dim
            )));
        }
        self.table.insert(key.into(), v);
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ck = Checkpoint::load(dir)?;
        let mut out = Self::new(0);
        for (name, t) in ck.iter() {
            let key = name
                .strip_prefix("text:")
                .ok_or_else(|| Error::Format(format!("embedding table entry `{name}` lacks the text: prefix")))?;
            out.insert(key, t.data().to_vec())?;
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut ck = Checkpoint::new();
        for (k, v) in &self.table {
            ck.push(format!("text:{k}"), &Tensor::new([v.len()], v.clone())?)?;
        }
        ck.save(dir)
    }
}

impl TextEmbeddingProvider for FileTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, key: &str, _text: &str) -> Result<Vec<f32>> {
        self.get(key)
            .map(|v| v.to_vec())
            .ok_or_else(|| Error::Input(format!("embedding table has no entry for `{key}`")))
    }
}

/// Client for a JSON embeddings endpoint: POST `{"input": [texts]}`,
/// response `{"data": [{"embedding": [..]}, ..]}`. Results are cached in a
/// [`FileTable`], persisted when a cache directory is set.
pub struct RemoteProvider {
    url: String,
    token: Option<String>,
    dim: usize,
    retries: usize,
    batch: usize,
    cache_dir: Option<PathBuf>,
    cache: Mutex<FileTable>,
}

impl RemoteProvider {
    pub fn new(url: impl Into<String>, token: Option<String>, dim: usize, cache_dir: Option<PathBuf>) -> Result<Self> {
        let cache = match &cache_dir {
            Some(dir) if dir.join(crate::tensor::checkpoint::MANIFEST).exists() => FileTable::load(dir)?,
            _ => FileTable::new(dim),
        };
        if !cache.is_empty() && cache.dim() != dim {
            return Err(Error::Format(format!("cached table dim {} differs from {dim}", cache.dim())));
        }
        Ok(Self {
            url: url.into(),
            token,
            dim,
            retries: 3,
            batch: 64,
            cache_dir,
            cache: Mutex::new(cache),
        })
    }

    /// Endpoint and token from the environment; `None` when no URL is set.
    pub fn from_env(dim: usize, cache_dir: Option<PathBuf>) -> Result<Option<Self>> {
        match std::env::var(URL_ENV) {
            Ok(url) if !url.is_empty() => Ok(Some(Self::new(url, std::env::var(TOKEN_ENV).ok(), dim, cache_dir)?)),
            _ => Ok(None),
        }
    }

    pub fn with_retries(mut self, retries: usize) -> Self {
        self.retries = retries.max(1);
        self
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        let body = serde_json::json!({ "input": texts });
        let mut last = String::new();
        for attempt in 0..self.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(50 << attempt));
            }
            let mut req = ureq::post(&self.url).timeout(Duration::from_secs(30));
            if let Some(tok) = &self.token {
                req = req.set("Authorization", &format!("Bearer {tok}"));
            }
            match req.send_json(body.clone()) {
                Ok(resp) => {
                    let v: serde_json::Value = resp.into_json().map_err(|e| Error::Network(e.to_string()))?;
                    return self.parse(&v, texts.len());
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(Error::Network(format!("{} failed after {} attempts: {last}", self.url, self.retries)))
    }

    fn parse(&self, v: &serde_json::Value, expect: usize) -> Result<Vec<Vec<f32>>> {
        let data = v["data"]
            .as_array()
            .ok_or_else(|| Error::Format("embeddings response lacks a data array".into()))?;
        if data.len() != expect {
            return Err(Error::Format(format!("expected {expect} embeddings, got {}", data.len())));
        }
        data.iter()
            .map(|item| {
                let emb = item["embedding"]
                    .as_array()
                    .ok_or_else(|| Error::Format("embedding entry is not an array".into()))?;
                if emb.len() != self.dim {
                    return Err(Error::Format(format!("embedding has {} values, expected {}", emb.len(), self.dim)));
                }
                emb.iter()
                    .map(|x| {
                        x.as_f64()
                            .map(|f| f as f32)
                            .ok_or_else(|| Error::Format("non-numeric embedding value".into()))
                    })
                    .collect()
            })
            .collect()
    }
}

impl TextEmbeddingProvider for RemoteProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, key: &str, text: &str) -> Result<Vec<f32>> {
        Ok(self.embed_many(&[(key.to_string(), text.to_string())])?.remove(0))
    }

    fn embed_many(&self, items: &[(String, String)]) -> Result<Vec<Vec<f32>>> {
        let mut cache = self.cache.lock().expect("cache lock");
        let missing: Vec<&(String, String)> = items.iter().filter(|(k, _)| cache.get(k).is_none()).collect();
        for chunk in missing.chunks(self.batch) {
            let texts: Vec<&str> = chunk.iter().map(|(_, t)| t.as_str()).collect();
            let vecs = self.request(&texts)?;
            for ((k, _), v) in chunk.iter().zip(vecs) {
                cache.insert(k.clone(), v)?;
            }
        }
        if !missing.is_empty() {
            if let Some(dir) = &self.cache_dir {
                cache.save(dir)?;
            }
        }
        items.iter().map(|(k, t)| cache.embed(k, t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn cosine(a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
        let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn hash_stub_is_deterministic_and_normalized() {
        let s = HashStub::default();
        let a = s.embed("k", "arterial road").unwrap();
        assert_eq!(a, s.embed("other", "arterial road").unwrap());
        let norm: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-6);
        assert_eq!(a.len(), STUB_DIM);
        assert!(cosine(&a, &s.embed("k", "shopping mall").unwrap()) < 0.99);
    }

    #[test]
    fn file_table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = FileTable::new(3);
        t.insert("road/0", vec![0.25, -1.5, 3.0]).unwrap();
        t.insert("poi/7", vec![1.0, 2.0, 3.0]).unwrap();
        assert!(t.insert("bad", vec![1.0]).is_err());
        t.save(dir.path()).unwrap();
        let back = FileTable::load(dir.path()).unwrap();
        assert_eq!(back.embed("road/0", "").unwrap(), vec![0.25, -1.5, 3.0]);
        assert!(matches!(back.embed("road/1", ""), Err(Error::Input(_))));
    }

    /// Answers `n` requests with a fixed two-dimensional vector per input.
    fn mock_server(n: usize) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/embeddings", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for _ in 0..n {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                let req: serde_json::Value = serde_json::from_slice(&body).unwrap();
                let data: Vec<_> = req["input"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|t| serde_json::json!({"embedding": [t.as_str().unwrap().len() as f64, 0.5]}))
                    .collect();
                let resp = serde_json::json!({ "data": data }).to_string();
                let mut out = stream;
                write!(
                    out,
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                    resp.len(),
                    resp
                )
                .unwrap();
                bodies.push(String::from_utf8(body).unwrap());
            }
            bodies
        });
        (url, handle)
    }

    #[test]
    fn remote_provider_requests_once_and_caches() {
        let (url, handle) = mock_server(1);
        let dir = tempfile::tempdir().unwrap();
        let p = RemoteProvider::new(url, Some("secret".into()), 2, Some(dir.path().to_path_buf())).unwrap();
        let items = vec![("poi/0".to_string(), "park".to_string()), ("poi/1".to_string(), "school".to_string())];
        let v = p.embed_many(&items).unwrap();
        assert_eq!(v, vec![vec![4.0, 0.5], vec![6.0, 0.5]]);
        // served from the cache, no second request
        assert_eq!(p.embed("poi/1", "school").unwrap(), vec![6.0, 0.5]);
        let bodies = handle.join().unwrap();
        assert_eq!(bodies.len(), 1);
        assert!(bodies[0].contains("\"input\""));
        assert_eq!(FileTable::load(dir.path()).unwrap().len(), 2);
    }

    #[test]
    fn remote_provider_reports_network_failure() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let p = RemoteProvider::new(format!("http://127.0.0.1:{port}/"), None, 2, None)
            .unwrap()
            .with_retries(2);
        assert!(matches!(p.embed("k", "t"), Err(Error::Network(_))));
    }

    #[test]
    fn remote_provider_rejects_wrong_dim() {
        let (url, handle) = mock_server(1);
        let p = RemoteProvider::new(url, None, 3, None).unwrap();
        assert!(matches!(p.embed("k", "t"), Err(Error::Format(_))));
        handle.join().unwrap();
    }
}
