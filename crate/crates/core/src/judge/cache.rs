use std::collections::HashMap;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::backend::ChatRequest;

/// Content address of a judge call: backend, model, prompt and sampling parameters.
pub fn cache_key(backend_id: &str, request: &ChatRequest) -> String {
    let mut h = Sha256::new();
    let mut field = |bytes: &[u8]| {
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    };
    field(backend_id.as_bytes());
    field(request.model.as_bytes());
    field(&request.temperature.to_bits().to_le_bytes());
    field(&request.max_tokens.to_le_bytes());
    for m in &request.messages {
        field(m.role.as_bytes());
        field(m.content.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Serialize, Deserialize)]
struct Entry {
    response: String,
}

/// In-memory judge reply cache with an optional on-disk mirror (one file per key).
#[derive(Debug, Default)]
pub struct JudgeCache {
    memory: Mutex<HashMap<String, String>>,
    dir: Option<PathBuf>,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl JudgeCache {
    pub fn new(dir: Option<PathBuf>) -> io::Result<Self> {
        if let Some(d) = &dir {
            std::fs::create_dir_all(d)?;
        }
        Ok(Self { memory: Mutex::default(), dir })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn path_for(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{key}.json")))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        if let Some(hit) = self.memory.lock().unwrap_or_else(|e| e.into_inner()).get(key) {
            return Some(hit.clone());
        }
        let path = self.path_for(key)?;
        let text = std::fs::read_to_string(&path).ok()?;
        match serde_json::from_str::<Entry>(&text) {
            Ok(entry) => {
                self.memory.lock().unwrap_or_else(|e| e.into_inner()).insert(key.to_string(), entry.response.clone());
                Some(entry.response)
            }
            Err(e) => {
                log::warn!("ignoring corrupt judge cache entry {}: {e}", path.display());
                None
            }
        }
    }

    /// Stores a reply. Disk writes go through a temporary file and a rename so
    /// concurrent readers never see a partial entry; write failures are logged.
    pub fn put(&self, key: &str, response: &str) {
        self.memory.lock().unwrap_or_else(|e| e.into_inner()).insert(key.to_string(), response.to_string());
        let Some(path) = self.path_for(key) else { return };
        let tmp = path.with_extension(format!(
            "tmp.{}.{}",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let body = serde_json::to_string(&Entry { response: response.to_string() }).unwrap_or_default();
        if let Err(e) = std::fs::write(&tmp, body).and_then(|_| std::fs::rename(&tmp, &path)) {
            log::warn!("could not write judge cache entry {}: {e}", path.display());
            let _ = std::fs::remove_file(&tmp);
        }
    }

    pub fn len(&self) -> usize {
        self.memory.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
