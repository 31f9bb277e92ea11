use std::collections::HashMap;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use super::{CacheKey, CompletionRequest, CompletionResponse, LlmError};

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    request: CompletionRequest,
    response: CompletionResponse,
}

/// One JSON file per cache key under a directory. Readers run concurrently;
/// writers are serialized and publish through an atomic rename.
#[derive(Debug)]
pub struct DiskCache {
    dir: PathBuf,
    lock: RwLock<()>,
    tmp_counter: AtomicU64,
}

impl DiskCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, LlmError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)
            .map_err(|e| LlmError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir,
            lock: RwLock::new(()),
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<CompletionResponse>, LlmError> {
        let _guard = self.lock.read().unwrap_or_else(|e| e.into_inner());
        let path = self.path_for(key);
        let text = match fs::read_to_string(&path) {
            Ok(text) => text,
            Err(e) if e.kind() == ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(LlmError::Cache(format!("{}: {e}", path.display()))),
        };
        let entry: CacheEntry = serde_json::from_str(&text)
            .map_err(|e| LlmError::Cache(format!("{}: {e}", path.display())))?;
        Ok(Some(entry.response))
    }

    pub fn put(
        &self,
        key: &CacheKey,
        request: &CompletionRequest,
        response: &CompletionResponse,
    ) -> Result<(), LlmError> {
        let _guard = self.lock.write().unwrap_or_else(|e| e.into_inner());
        let entry = CacheEntry {
            request: request.clone(),
            response: CompletionResponse {
                cached: false,
                ..response.clone()
            },
        };
        let body = serde_json::to_string_pretty(&entry)
            .map_err(|e| LlmError::Cache(e.to_string()))?;
        let tmp = self.dir.join(format!(
            ".{key}.{}.{}.tmp",
            std::process::id(),
            self.tmp_counter.fetch_add(1, Ordering::Relaxed)
        ));
        let target = self.path_for(key);
        fs::write(&tmp, body)
            .and_then(|_| fs::rename(&tmp, &target))
            .map_err(|e| LlmError::Cache(format!("{}: {e}", target.display())))
    }

    pub fn len(&self) -> usize {
        fs::read_dir(&self.dir)
            .map(|entries| {
                entries
                    .filter_map(Result::ok)
                    .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
                    .count()
            })
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Where the client keeps finished responses.
#[derive(Debug)]
pub enum ResponseCache {
    Memory(RwLock<HashMap<CacheKey, CompletionResponse>>),
    Disk(DiskCache),
}

impl ResponseCache {
    pub fn memory() -> Self {
        ResponseCache::Memory(RwLock::new(HashMap::new()))
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<CompletionResponse>, LlmError> {
        match self {
            ResponseCache::Memory(map) => Ok(map
                .read()
                .unwrap_or_else(|e| e.into_inner())
                .get(key)
                .cloned()),
            ResponseCache::Disk(disk) => disk.get(key),
        }
    }

    pub fn put(
        &self,
        key: &CacheKey,
        request: &CompletionRequest,
        response: &CompletionResponse,
    ) -> Result<(), LlmError> {
        match self {
            ResponseCache::Memory(map) => {
                map.write()
                    .unwrap_or_else(|e| e.into_inner())
                    .insert(key.clone(), response.clone());
                Ok(())
            }
            ResponseCache::Disk(disk) => disk.put(key, request, response),
        }
    }
}
