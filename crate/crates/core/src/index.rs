//! Text embedders and flat vector indexes with exact cosine retrieval.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::chat::{http_agent, post_json, RetryPolicy};
use crate::error::{BackendError, Error, Result};
use crate::knowledge::KnowledgeBase;
use crate::{par, util};

pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>>;

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(Error::Argument("cannot embed empty text".into()));
        }
        Ok(self.embed_batch(&[text])?.remove(0))
    }

    /// Stable description of the configuration, for manifests.
    fn fingerprint(&self) -> String;
}

/// Bag-of-words feature hashing: lowercase alphanumeric tokens, FNV-1a into
/// `dimension` buckets, counts, then L2 normalization. Text without tokens
/// maps to the zero vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    dimension: usize,
}

impl HashEmbedder {
    pub fn new(dimension: usize) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::Argument("embedding dimension must be positive".into()));
        }
        Ok(HashEmbedder { dimension })
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(token.as_bytes()) % self.dimension as u64) as usize
    }

    fn vectorize(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension];
        let lower = text.to_lowercase();
        for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            v[self.bucket(token)] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        }
        v
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder { dimension: 256 }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Embedder for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.vectorize(t)).collect())
    }

    fn fingerprint(&self) -> String {
        format!("offline-hash/fnv1a/{}", self.dimension)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedEndpoint {
    pub base_url: String,
    pub model: String,
    pub dimension: usize,
    pub api_key_env: String,
}

/// POSTs `{model, input: [texts]}` to `<base_url>/embeddings` and expects
/// `{embeddings: [[...]]}` back.
pub struct HttpEmbedder {
    endpoint: EmbedEndpoint,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(endpoint: EmbedEndpoint, retry: RetryPolicy) -> Self {
        HttpEmbedder {
            endpoint,
            retry,
            agent: http_agent(),
        }
    }
}

impl Embedder for HttpEmbedder {
    fn dimension(&self) -> usize {
        self.endpoint.dimension
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let url = format!("{}/embeddings", self.endpoint.base_url.trim_end_matches('/'));
        let body = json!({ "model": self.endpoint.model, "input": texts });
        let (value, _) = self
            .retry
            .run(|| post_json(&self.agent, &url, &self.endpoint.api_key_env, &body))?;
        #[derive(Deserialize)]
        struct Reply {
            embeddings: Vec<Vec<f64>>,
        }
        let reply: Reply = serde_json::from_value(value)
            .map_err(|e| BackendError::Fatal(format!("embedding reply: {e}")))?;
        if reply.embeddings.len() != texts.len() {
            return Err(BackendError::Fatal(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                reply.embeddings.len()
            ))
            .into());
        }
        if let Some(bad) = reply.embeddings.iter().find(|v| v.len() != self.endpoint.dimension) {
            return Err(BackendError::Fatal(format!(
                "embedding of dimension {}, expected {}",
                bad.len(),
                self.endpoint.dimension
            ))
            .into());
        }
        Ok(reply.embeddings)
    }

    fn fingerprint(&self) -> String {
        format!(
            "remote/{}/{}/{}",
            self.endpoint.base_url, self.endpoint.model, self.endpoint.dimension
        )
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Module,
    Method,
    Chunk,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [Granularity::Module, Granularity::Method, Granularity::Chunk];

    pub fn file_name(self) -> &'static str {
        match self {
            Granularity::Module => "modules.vec",
            Granularity::Method => "methods.vec",
            Granularity::Chunk => "chunks.vec",
        }
    }

    fn tag(self) -> u8 {
        match self {
            Granularity::Module => 0,
            Granularity::Method => 1,
            Granularity::Chunk => 2,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        Granularity::ALL.into_iter().find(|g| g.tag() == t)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    id: String,
    source_hash: [u8; 32],
    vector: Vec<f64>,
}

/// An ordered (element id, similarity) pair.
pub type Hit = (String, f64);

/// Flat store of id -> vector, sorted by id, searched exhaustively.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    granularity: Granularity,
    dimension: usize,
    entries: Vec<Entry>,
}

const MAGIC: &[u8; 8] = b"SEMFLVEC";
const FORMAT_VERSION: u32 = 1;
const BATCH: usize = 64;

impl EmbeddingIndex {
    /// Embeds `(id, text)` documents. Ids must be unique.
    pub fn build(
        granularity: Granularity,
        documents: Vec<(String, String)>,
        embedder: &dyn Embedder,
    ) -> Result<Self> {
        let mut documents = documents;
        documents.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = documents.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Integrity(format!("duplicate element id {}", w[0].0)));
        }
        if let Some((id, _)) = documents.iter().find(|(_, t)| t.trim().is_empty()) {
            return Err(Error::Argument(format!("element {id} has empty knowledge text")));
        }
        let batches: Vec<&[(String, String)]> = documents.chunks(BATCH).collect();
        let embedded = par::map(&batches, |batch| {
            let texts: Vec<&str> = batch.iter().map(|(_, t)| t.as_str()).collect();
            embedder.embed_batch(&texts).map_err(|e| match e {
                Error::Backend(b) => Error::Backend(BackendError::Fatal(format!(
                    "embedding batch starting at {}: {b}",
                    batch[0].0
                ))),
                other => other,
            })
        });
        let mut entries = Vec::with_capacity(documents.len());
        for (batch, vectors) in batches.iter().zip(embedded) {
            for ((id, text), vector) in batch.iter().zip(vectors?) {
                if vector.len() != embedder.dimension() {
                    return Err(Error::Integrity(format!("{id}: wrong embedding dimension")));
                }
                entries.push(Entry {
                    id: id.clone(),
                    source_hash: Sha256::digest(text.as_bytes()).into(),
                    vector,
                });
            }
        }
        Ok(EmbeddingIndex {
            granularity,
            dimension: embedder.dimension(),
            entries,
        })
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    pub fn vector(&self, id: &str) -> Option<&[f64]> {
        self.find(id).map(|e| e.vector.as_slice())
    }

    /// SHA-256 of the text the entry was embedded from.
    pub fn provenance(&self, id: &str) -> Option<String> {
        self.find(id).map(|e| hex::encode(e.source_hash))
    }

    fn find(&self, id: &str) -> Option<&Entry> {
        self.entries
            .binary_search_by(|e| e.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.entries[i])
    }

    /// Top `k` entries by cosine similarity to `query`, restricted to ids
    /// accepted by `keep`. Ties go to the smaller id.
    pub fn search_where(&self, query: &[f64], k: usize, keep: impl Fn(&str) -> bool + Sync) -> Vec<Hit> {
        let scored: Vec<Option<(usize, f64)>> = par::map(&self.entries, |e| {
            keep(&e.id).then(|| cosine(query, &e.vector))
        })
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.map(|s| (i, s)))
        .collect();
        let mut scored: Vec<(usize, f64)> = scored.into_iter().flatten().collect();
        let rank = |a: &(usize, f64), b: &(usize, f64)| -> Ordering {
            b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
        };
        if k < scored.len() {
            if k > 0 {
                scored.select_nth_unstable_by(k - 1, rank);
            }
            scored.truncate(k);
        }
        scored.sort_unstable_by(rank);
        scored
            .into_iter()
            .map(|(i, s)| (self.entries[i].id.clone(), s))
            .collect()
    }

    pub fn search(&self, query: &[f64], k: usize) -> Vec<Hit> {
        self.search_where(query, k, |_| true)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.entries.len() * (48 + 8 * self.dimension));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.granularity.tag());
        out.extend_from_slice(&[0; 3]);
        out.extend_from_slice(&(self.dimension as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.id.len() as u32).to_le_bytes());
            out.extend_from_slice(e.id.as_bytes());
            out.extend_from_slice(&e.source_hash);
            for x in &e.vector {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Parse("not a vector index file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Parse(format!("unsupported index version {version}")));
        }
        let granularity = Granularity::from_tag(r.take(4)?[0])
            .ok_or_else(|| Error::Parse("unknown granularity tag".into()))?;
        let dimension = r.u32()? as usize;
        let count = r.u64()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let id = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Parse("element id is not UTF-8".into()))?;
            let source_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
            let mut vector = Vec::with_capacity(dimension);
            for _ in 0..dimension {
                vector.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            entries.push(Entry {
                id,
                source_hash,
                vector,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse("trailing bytes after index records".into()));
        }
        if entries.windows(2).any(|w| w[0].id >= w[1].id) {
            return Err(Error::Parse("index records are not sorted by id".into()));
        }
        Ok(EmbeddingIndex {
            granularity,
            dimension,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::write_bytes(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Parse("truncated index file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Knowledge documents of one granularity: module title + summary +
/// findings, method functionality, or a single chunk description.
pub fn documents(kb: &KnowledgeBase, granularity: Granularity) -> Vec<(String, String)> {
    match granularity {
        Granularity::Module => kb
            .module_reports
            .values()
            .map(|r| (r.module_id.clone(), r.document()))
            .collect(),
        Granularity::Method => kb
            .method_reports
            .values()
            .map(|r| (r.method_id.clone(), r.functionality.clone()))
            .collect(),
        Granularity::Chunk => kb
            .maps
            .varphi
            .values()
            .flatten()
            .map(|c| (c.to_string(), kb.chunk_text(c).unwrap_or_default().to_owned()))
            .collect(),
    }
}

pub fn build_index(
    embedder: &dyn Embedder,
    kb: &KnowledgeBase,
    granularity: Granularity,
) -> Result<EmbeddingIndex> {
    EmbeddingIndex::build(granularity, documents(kb, granularity), embedder)
}

/// Top-`lambda` elements of `index` for a query text.
pub fn retrieve(
    index: &EmbeddingIndex,
    query: &str,
    lambda: usize,
    embedder: &dyn Embedder,
) -> Result<Vec<Hit>> {
    if index.is_empty() {
        return Err(Error::Argument("cannot retrieve from an empty index".into()));
    }
    if lambda == 0 {
        return Err(Error::Argument("lambda must be at least 1".into()));
    }
    check_dimension(index, embedder)?;
    let q = embedder.embed(query)?;
    Ok(index.search(&q, lambda))
}

pub(crate) fn check_dimension(index: &EmbeddingIndex, embedder: &dyn Embedder) -> Result<()> {
    if index.dimension() != embedder.dimension() {
        return Err(Error::Integrity(format!(
            "index dimension {} does not match embedder dimension {}",
            index.dimension(),
            embedder.dimension()
        )));
    }
    Ok(())
}
