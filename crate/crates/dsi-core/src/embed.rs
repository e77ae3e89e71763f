//! Contextual embedding providers and the on-disk embedding cache.
//!
//! The pretrained model itself is an external dependency: it is consumed
//! either through the [`ExternalProvider`] adapter or through a cache
//! file produced elsewhere. The [`HashProvider`] is a deterministic
//! stand-in for tests and synthetic corpora.

use std::collections::BTreeMap;
use std::io::{Read, Write as _};
use std::path::Path;
use std::process::{Command, Stdio};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::extract::TurnCandidates;
use crate::text::{tokenize, turn_text};

pub const CACHE_MAGIC: &[u8; 7] = b"DSIEMB1";
pub const DEFAULT_DIM: usize = 256;

/// A per-token embedding with the token's byte span in the turn text.
#[derive(Debug, Clone)]
pub struct TokenVector {
    pub span: (usize, usize),
    pub vector: Vec<f64>,
}

pub trait EmbeddingProvider {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    /// Embed one token of the turn text. Providers that need full context
    /// may override [`EmbeddingProvider::embed_text`] instead.
    fn embed_token(&self, token: &str) -> Result<Vec<f64>>;

    /// Embed a whole text, one vector per token.
    fn embed_text(&self, text: &str) -> Result<Vec<TokenVector>> {
        tokenize(text)
            .into_iter()
            .map(|t| {
                Ok(TokenVector {
                    span: (t.start, t.end),
                    vector: self.embed_token(&t.text)?,
                })
            })
            .collect()
    }
}

/// Embed a turn: the provider sees the system utterance followed by the
/// user utterance, in chronological order.
pub fn embed_turn(
    system_utterance: &str,
    user_utterance: &str,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<TokenVector>> {
    let text = turn_text(system_utterance, user_utterance);
    let vectors = provider.embed_text(&text)?;
    for tv in &vectors {
        if tv.vector.len() != provider.dim() {
            return Err(Error::Provider(format!(
                "provider '{}' returned dim {} != declared {}",
                provider.name(),
                tv.vector.len(),
                provider.dim()
            )));
        }
        if tv.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::Provider(format!(
                "provider '{}' returned a non-finite component",
                provider.name()
            )));
        }
    }
    Ok(vectors)
}

/// Mean-pool the token vectors whose spans overlap the candidate span.
pub fn candidate_embedding(
    char_span: (usize, usize),
    turn_ref: (&str, u32),
    token_vectors: &[TokenVector],
) -> Result<Vec<f64>> {
    let overlapping: Vec<&TokenVector> = token_vectors
        .iter()
        .filter(|tv| tv.span.0 < char_span.1 && char_span.0 < tv.span.1)
        .collect();
    if overlapping.is_empty() {
        return Err(Error::SpanAlignment {
            dialogue_id: turn_ref.0.to_string(),
            turn_index: turn_ref.1,
            start: char_span.0,
            end: char_span.1,
        });
    }
    let dim = overlapping[0].vector.len();
    let mut mean = vec![0.0; dim];
    for tv in &overlapping {
        for (m, x) in mean.iter_mut().zip(&tv.vector) {
            *m += x;
        }
    }
    let count = overlapping.len() as f64;
    mean.iter_mut().for_each(|m| *m /= count);
    Ok(mean)
}

// ---------------------------------------------------------------------------
// Deterministic hash provider
// ---------------------------------------------------------------------------

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Pure function of the token string: a seeded hash into `dim` dimensions
/// plus a small bag-of-characters signal, L2-normalized. The character
/// signal gives similar surfaces similar vectors, which makes synthetic
/// clustering meaningful without a pretrained model.
pub struct HashProvider {
    pub seed: u64,
    dim: usize,
    char_weight: f64,
}

impl HashProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        HashProvider {
            seed,
            dim,
            char_weight: 0.5,
        }
    }

    fn gaussian_for(&self, stream: u64, key: &[u8]) -> Vec<f64> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed ^ stream.wrapping_mul(0x9e3779b97f4a7c15) ^ fnv1a64(key));
        (0..self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }

    /// Unit vector for an arbitrary key; also used by the synthetic corpus
    /// generator to derive slot centroids.
    pub fn unit_vector(&self, key: &str) -> Vec<f64> {
        let mut v = self.gaussian_for(1, key.as_bytes());
        l2_normalize(&mut v);
        v
    }
}

fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

impl EmbeddingProvider for HashProvider {
    fn name(&self) -> &str {
        "hash"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_token(&self, token: &str) -> Result<Vec<f64>> {
        let lower = token.to_lowercase();
        let mut v = self.gaussian_for(1, lower.as_bytes());
        let chars: Vec<char> = lower.chars().collect();
        if !chars.is_empty() {
            let per_char = self.char_weight / chars.len() as f64;
            for ch in &chars {
                let mut buf = [0u8; 4];
                let cv = self.gaussian_for(2, ch.encode_utf8(&mut buf).as_bytes());
                for (x, c) in v.iter_mut().zip(cv) {
                    *x += per_char * c;
                }
            }
        }
        l2_normalize(&mut v);
        Ok(v)
    }
}

// ---------------------------------------------------------------------------
// External provider adapter
// ---------------------------------------------------------------------------

/// Adapter for a pretrained contextual model running as a subprocess.
///
/// Protocol: `{"text": ...}` on stdin; reply
/// `{"vectors": [[f, ...], ...], "spans": [[start, end], ...]}` on stdout.
/// The `layer_mix` string is passed through to the subprocess so the
/// layer-combination policy is pinned in run manifests.
pub struct ExternalProvider {
    pub command: String,
    pub args: Vec<String>,
    pub dim: usize,
    pub layer_mix: String,
}

impl ExternalProvider {
    pub fn new(command: &str, dim: usize) -> Self {
        ExternalProvider {
            command: command.to_string(),
            args: Vec::new(),
            dim,
            layer_mix: "mean".to_string(),
        }
    }
}

#[derive(serde::Serialize)]
struct ProviderRequest<'a> {
    text: &'a str,
    layer_mix: &'a str,
}

#[derive(serde::Deserialize)]
struct ProviderReply {
    vectors: Vec<Vec<f64>>,
    spans: Vec<(usize, usize)>,
}

impl EmbeddingProvider for ExternalProvider {
    fn name(&self) -> &str {
        "pretrained"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_token(&self, _token: &str) -> Result<Vec<f64>> {
        Err(Error::Provider(
            "external provider embeds whole texts, not single tokens".into(),
        ))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<TokenVector>> {
        let mut child = Command::new(&self.command)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| Error::Provider(format!("spawn '{}': {e}", self.command)))?;
        {
            let stdin = child.stdin.as_mut().expect("piped stdin");
            let req = serde_json::to_string(&ProviderRequest {
                text,
                layer_mix: &self.layer_mix,
            })
            .unwrap();
            stdin
                .write_all(req.as_bytes())
                .and_then(|_| stdin.write_all(b"\n"))
                .map_err(|e| Error::Provider(format!("write to '{}': {e}", self.command)))?;
        }
        let output = child
            .wait_with_output()
            .map_err(|e| Error::Provider(format!("wait for '{}': {e}", self.command)))?;
        if !output.status.success() {
            return Err(Error::Provider(format!(
                "'{}' exited with {}",
                self.command, output.status
            )));
        }
        let reply: ProviderReply = serde_json::from_str(String::from_utf8_lossy(&output.stdout).trim())
            .map_err(|e| Error::Provider(format!("bad reply from '{}': {e}", self.command)))?;
        if reply.vectors.len() != reply.spans.len() {
            return Err(Error::Provider(format!(
                "'{}' returned {} vectors for {} spans",
                self.command,
                reply.vectors.len(),
                reply.spans.len()
            )));
        }
        Ok(reply
            .vectors
            .into_iter()
            .zip(reply.spans)
            .map(|(vector, span)| TokenVector { span, vector })
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Cache
// ---------------------------------------------------------------------------

pub type CacheKey = (String, u32, u32); // dialogue_id, turn_index, candidate ordinal

/// In-memory embedding cache. Vectors are stored as f32, matching the disk
/// format exactly, and widened to f64 at feature-assembly time.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    pub dim: usize,
    pub entries: BTreeMap<CacheKey, Vec<f32>>,
}

impl EmbeddingCache {
    pub fn new(dim: usize) -> Self {
        EmbeddingCache {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: CacheKey, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Data(format!(
                "cache entry dim {} != cache dim {}",
                vector.len(),
                self.dim
            )));
        }
        if key.0.contains('|') {
            return Err(Error::Data(format!(
                "dialogue_id '{}' contains the cache key separator '|'",
                key.0
            )));
        }
        self.entries
            .insert(key, vector.iter().map(|&x| x as f32).collect());
        Ok(())
    }

    pub fn get(&self, key: &CacheKey) -> Option<Vec<f64>> {
        self.entries
            .get(key)
            .map(|v| v.iter().map(|&x| x as f64).collect())
    }

    /// Every candidate must have an entry; returns the missing keys.
    pub fn missing_for(&self, turns: &[TurnCandidates]) -> Vec<CacheKey> {
        let mut missing = Vec::new();
        for t in turns {
            for (ordinal, _) in t.candidates.iter().enumerate() {
                let key = (t.dialogue_id.clone(), t.turn_index, ordinal as u32);
                if !self.entries.contains_key(&key) {
                    missing.push(key);
                }
            }
        }
        missing
    }
}

/// Binary cache format: magic `DSIEMB1`, u32 LE dim, then per record a
/// u16 LE key length, the UTF-8 key `dialogue_id|turn_index|ordinal`,
/// and dim little-endian f32 components.
pub fn write_cache(cache: &EmbeddingCache, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(16 + cache.entries.len() * (cache.dim * 4 + 24));
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&(cache.dim as u32).to_le_bytes());
    for ((dialogue_id, turn_index, ordinal), vector) in &cache.entries {
        let key = format!("{dialogue_id}|{turn_index}|{ordinal}");
        let key_bytes = key.as_bytes();
        buf.extend_from_slice(&(key_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(key_bytes);
        for &x in vector {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: &Path) -> Result<EmbeddingCache> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 11 || &bytes[..7] != CACHE_MAGIC {
        return Err(Error::Incompatible {
            path: path.to_path_buf(),
            message: "bad magic; not a DSIEMB1 cache".into(),
        });
    }
    let dim = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
    let mut cache = EmbeddingCache::new(dim);
    let mut pos = 11usize;
    while pos < bytes.len() {
        if pos + 2 > bytes.len() {
            return Err(truncated(path, pos));
        }
        let key_len = u16::from_le_bytes(bytes[pos..pos + 2].try_into().unwrap()) as usize;
        pos += 2;
        if pos + key_len + dim * 4 > bytes.len() {
            return Err(truncated(path, pos));
        }
        let key_str = std::str::from_utf8(&bytes[pos..pos + key_len]).map_err(|_| Error::Incompatible {
            path: path.to_path_buf(),
            message: format!("non-UTF-8 key at byte {pos}"),
        })?;
        pos += key_len;
        let parts: Vec<&str> = key_str.split('|').collect();
        if parts.len() != 3 {
            return Err(Error::Incompatible {
                path: path.to_path_buf(),
                message: format!("malformed key '{key_str}'"),
            });
        }
        let turn_index: u32 = parts[1].parse().map_err(|_| Error::Incompatible {
            path: path.to_path_buf(),
            message: format!("bad turn index in key '{key_str}'"),
        })?;
        let ordinal: u32 = parts[2].parse().map_err(|_| Error::Incompatible {
            path: path.to_path_buf(),
            message: format!("bad ordinal in key '{key_str}'"),
        })?;
        let mut vector = Vec::with_capacity(dim);
        for i in 0..dim {
            let off = pos + i * 4;
            vector.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
        }
        pos += dim * 4;
        cache
            .entries
            .insert((parts[0].to_string(), turn_index, ordinal), vector);
    }
    Ok(cache)
}

fn truncated(path: &Path, pos: usize) -> Error {
    Error::Incompatible {
        path: path.to_path_buf(),
        message: format!("truncated record at byte {pos}"),
    }
}

/// Check that a cache read from disk matches the expected dimension.
pub fn check_dim(cache: &EmbeddingCache, expected: usize, path: &Path) -> Result<()> {
    if cache.dim != expected {
        return Err(Error::Incompatible {
            path: path.to_path_buf(),
            message: format!("cache dim {} != expected {expected}", cache.dim),
        });
    }
    Ok(())
}
