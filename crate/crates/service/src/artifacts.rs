//! Content-addressed artifact files under `<data dir>/artifacts`.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct ArtifactStore {
    dir: PathBuf,
}

impl ArtifactStore {
    pub fn open(data_dir: &Path) -> std::io::Result<Self> {
        let dir = data_dir.join("artifacts");
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    /// Stores `bytes` and returns its reference `<sha256>.<ext>`. Storing the
    /// same bytes twice is a no-op.
    pub fn put(&self, bytes: &[u8], ext: &str) -> std::io::Result<String> {
        let reference = format!("{}.{ext}", hex::encode(Sha256::digest(bytes)));
        let path = self.dir.join(&reference);
        if !path.exists() {
            let tmp = self.dir.join(format!("{reference}.{}.tmp", uuid::Uuid::new_v4()));
            std::fs::write(&tmp, bytes)?;
            std::fs::rename(&tmp, &path)?;
        }
        Ok(reference)
    }

    /// Bytes and content type of a stored artifact. Malformed references
    /// are treated as missing.
    pub fn get(&self, reference: &str) -> Option<(Vec<u8>, &'static str)> {
        let content_type = content_type(reference)?;
        std::fs::read(self.dir.join(reference)).ok().map(|b| (b, content_type))
    }
}

fn content_type(reference: &str) -> Option<&'static str> {
    let (hash, ext) = reference.split_once('.')?;
    if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase()) {
        return None;
    }
    match ext {
        "png" => Some("image/png"),
        "json" => Some("application/json"),
        "jsonl" => Some("application/x-ndjson"),
        _ => None,
    }
}
