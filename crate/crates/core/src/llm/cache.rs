//! Content-addressed response cache with single-flight misses.
//!
//! Entries live at `<cache_dir>/<hex digest>.json`. Callers racing on the
//! same key serialize on a per-key lock, so at most one of them reaches the
//! provider; the rest read the entry it wrote.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use super::{CacheKey, CompletionRequest, CompletionResponse, LlmError, Provider};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub request: CompletionRequest,
    pub response: CompletionResponse,
    pub timestamp: u64,
    pub attempts: u32,
}

/// One request/response pair as seen by a pipeline stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub digest: CacheKey,
    pub request: CompletionRequest,
    pub response: CompletionResponse,
}

struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self { permits: Mutex::new(permits.max(1)), freed: Condvar::new() }
    }

    fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut permits = self.permits.lock();
            while *permits == 0 {
                self.freed.wait(&mut permits);
            }
            *permits -= 1;
        }
        let out = f();
        *self.permits.lock() += 1;
        self.freed.notify_one();
        out
    }
}

/// Routes requests by `provider_id`, caches responses on disk and bounds
/// the number of concurrent upstream calls.
pub struct CachedClient {
    providers: HashMap<String, Arc<dyn Provider>>,
    cache_dir: PathBuf,
    key_locks: Mutex<HashMap<CacheKey, Arc<Mutex<()>>>>,
    in_flight: Semaphore,
}

impl CachedClient {
    pub fn new(cache_dir: impl Into<PathBuf>, max_in_flight: usize) -> Result<Self, LlmError> {
        let cache_dir = cache_dir.into();
        fs::create_dir_all(&cache_dir)?;
        Ok(Self {
            providers: HashMap::new(),
            cache_dir,
            key_locks: Mutex::new(HashMap::new()),
            in_flight: Semaphore::new(max_in_flight),
        })
    }

    pub fn with_provider(mut self, id: impl Into<String>, provider: Arc<dyn Provider>) -> Self {
        self.providers.insert(id.into(), provider);
        self
    }

    pub fn register(&mut self, id: impl Into<String>, provider: Arc<dyn Provider>) {
        self.providers.insert(id.into(), provider);
    }

    pub fn provider(&self, id: &str) -> Option<&Arc<dyn Provider>> {
        self.providers.get(id)
    }

    pub fn cache_dir(&self) -> &Path {
        &self.cache_dir
    }

    pub fn entry_path(&self, key: &CacheKey) -> PathBuf {
        self.cache_dir.join(format!("{}.json", key.as_str()))
    }

    /// Uncached call through the routed provider.
    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let provider = self
            .providers
            .get(&request.provider_id)
            .ok_or_else(|| LlmError::UnknownProvider(request.provider_id.clone()))?;
        Ok(self.in_flight.run(|| provider.complete(request))?.response)
    }

    pub fn cached_complete(&self, request: &CompletionRequest) -> Result<Exchange, LlmError> {
        request.validate()?;
        let key = request.cache_key();
        let lock = self.key_locks.lock().entry(key.clone()).or_default().clone();
        let _guard = lock.lock();

        let path = self.entry_path(&key);
        if let Some(entry) = self.read_entry(&path, request)? {
            return Ok(Exchange { digest: key, request: request.clone(), response: entry.response });
        }
        let provider = self
            .providers
            .get(&request.provider_id)
            .ok_or_else(|| LlmError::UnknownProvider(request.provider_id.clone()))?;
        let completion = self.in_flight.run(|| provider.complete(request))?;
        let entry = CacheEntry {
            request: request.clone(),
            response: completion.response,
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            attempts: completion.attempts,
        };
        write_atomic(&path, &serde_json::to_vec_pretty(&entry).expect("entry serializes"))?;
        Ok(Exchange { digest: key, request: entry.request, response: entry.response })
    }

    fn read_entry(&self, path: &Path, request: &CompletionRequest) -> Result<Option<CacheEntry>, LlmError> {
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let entry: CacheEntry =
            serde_json::from_slice(&bytes).map_err(|_| LlmError::CacheCorrupt(path.to_path_buf()))?;
        if entry.request != *request {
            return Err(LlmError::CacheCorrupt(path.to_path_buf()));
        }
        Ok(Some(entry))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}
