use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{BackendError, ChatBackend, CompletionParams};
use crate::prompt::ChatMessage;

const MAGIC: &str = "convo-rewrite-cache 1";

/// SHA-256 over the canonical request: messages plus sampling parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CacheKey([u8; 32]);

#[derive(Serialize)]
struct CanonicalRequest<'a> {
    messages: &'a [ChatMessage],
    model: &'a str,
    temperature: f64,
    max_tokens: u32,
}

impl CacheKey {
    pub fn for_request(messages: &[ChatMessage], params: &CompletionParams) -> Self {
        let canonical = CanonicalRequest {
            messages,
            model: &params.model_name,
            temperature: params.temperature,
            max_tokens: params.max_output_tokens,
        };
        let bytes = serde_json::to_vec(&canonical).expect("request serializes");
        Self(Sha256::digest(&bytes).into())
    }

    pub fn hex(&self) -> String {
        hex::encode(self.0)
    }
}

/// On-disk response store: one file per key under a two-level hex fan-out,
/// `<dir>/ab/cd/abcd....txt`, holding a short header and the raw response.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        let hex = key.hex();
        self.dir
            .join(&hex[0..2])
            .join(&hex[2..4])
            .join(format!("{hex}.txt"))
    }

    /// Returns the stored response; unreadable or corrupt entries are misses.
    pub fn get(&self, key: &CacheKey) -> Option<String> {
        let path = self.path_for(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return None,
            Err(e) => {
                log::warn!("cache entry {} unreadable ({e}); treating as miss", path.display());
                return None;
            }
        };
        match decode_entry(&bytes, key) {
            Some(body) => Some(body),
            None => {
                log::warn!("cache entry {} is corrupt; treating as miss", path.display());
                None
            }
        }
    }

    pub fn put(&self, key: &CacheKey, params: &CompletionParams, body: &str) -> io::Result<()> {
        let path = self.path_for(key);
        let parent = path.parent().expect("fan-out parent");
        fs::create_dir_all(parent)?;
        let entry = format!(
            "{MAGIC}\nkey: {}\nmodel: {}\ntemperature: {}\nmax_tokens: {}\nlength: {}\n\n{body}",
            key.hex(),
            params.model_name,
            params.temperature,
            params.max_output_tokens,
            body.len()
        );
        // Unique temp name per writer; same-key writers store identical bytes.
        static COUNTER: AtomicUsize = AtomicUsize::new(0);
        let tmp = parent.join(format!(
            ".{}.{}.{}.tmp",
            key.hex(),
            std::process::id(),
            COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        fs::write(&tmp, entry)?;
        fs::rename(&tmp, &path)
    }

    pub fn len(&self) -> usize {
        fn walk(dir: &Path) -> usize {
            let Ok(entries) = fs::read_dir(dir) else {
                return 0;
            };
            entries
                .flatten()
                .map(|e| {
                    let p = e.path();
                    if p.is_dir() {
                        walk(&p)
                    } else {
                        usize::from(p.extension().is_some_and(|x| x == "txt"))
                    }
                })
                .sum()
        }
        walk(&self.dir)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn decode_entry(bytes: &[u8], key: &CacheKey) -> Option<String> {
    let text = std::str::from_utf8(bytes).ok()?;
    let (header, body) = text.split_once("\n\n")?;
    let mut lines = header.lines();
    if lines.next()? != MAGIC {
        return None;
    }
    let mut length = None;
    let mut stored_key = None;
    for line in lines {
        let (k, v) = line.split_once(": ")?;
        match k {
            "key" => stored_key = Some(v),
            "length" => length = v.parse::<usize>().ok(),
            _ => {}
        }
    }
    (stored_key? == key.hex() && length? == body.len()).then(|| body.to_string())
}

/// Looks the request up in `cache`, calling `backend` and storing the
/// response on a miss. Store failures are logged, not fatal.
pub fn complete_cached(
    backend: &dyn ChatBackend,
    messages: &[ChatMessage],
    params: &CompletionParams,
    cache: &ResponseCache,
) -> Result<String, BackendError> {
    let key = CacheKey::for_request(messages, params);
    if let Some(hit) = cache.get(&key) {
        return Ok(hit);
    }
    let body = backend.complete(messages, params)?;
    if let Err(e) = cache.put(&key, params, &body) {
        log::warn!("failed to store cache entry {}: {e}", key.hex());
    }
    Ok(body)
}

pub struct CachedBackend<B> {
    inner: B,
    cache: ResponseCache,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl<B: ChatBackend> CachedBackend<B> {
    pub fn new(inner: B, cache: ResponseCache) -> Self {
        Self {
            inner,
            cache,
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }
}

impl<B: ChatBackend> ChatBackend for CachedBackend<B> {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<String, BackendError> {
        let key = CacheKey::for_request(messages, params);
        if let Some(hit) = self.cache.get(&key) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(hit);
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let body = self.inner.complete(messages, params)?;
        if let Err(e) = self.cache.put(&key, params, &body) {
            log::warn!("failed to store cache entry {}: {e}", key.hex());
        }
        Ok(body)
    }
}
