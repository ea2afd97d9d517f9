//! Flat-file persistence keyed by content hash.
//!
//! Layout under the data directory:
//! `images/<sha256>.json` holds uploaded documents byte for byte,
//! `artifacts/<sha256>.<ext>` holds job inputs and outputs and
//! `jobs/<job_id>.json` holds one job record each.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::jobs::JobRecord;

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn is_hash(s: &str) -> bool {
    s.len() == 64
        && s.bytes()
            .all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase())
}

/// Artifact names are `<hash>.<ext>` with a short alphanumeric extension.
fn is_artifact_name(s: &str) -> bool {
    s.split_once('.').is_some_and(|(h, ext)| {
        is_hash(h)
            && !ext.is_empty()
            && ext.len() <= 8
            && ext.bytes().all(|b| b.is_ascii_alphanumeric())
    })
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Store> {
        let root = root.into();
        for sub in ["images", "artifacts", "jobs"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Store { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)
    }

    fn read_optional(path: &Path) -> io::Result<Option<Vec<u8>>> {
        match fs::read(path) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn put_image(&self, bytes: &[u8]) -> io::Result<String> {
        let id = content_hash(bytes);
        let path = self.root.join("images").join(format!("{id}.json"));
        if !path.exists() {
            Self::write_atomic(&path, bytes)?;
        }
        Ok(id)
    }

    pub fn image(&self, id: &str) -> io::Result<Option<Vec<u8>>> {
        if !is_hash(id) {
            return Ok(None);
        }
        Self::read_optional(&self.root.join("images").join(format!("{id}.json")))
    }

    pub fn put_artifact(&self, bytes: &[u8], ext: &str) -> io::Result<String> {
        let name = format!("{}.{ext}", content_hash(bytes));
        debug_assert!(is_artifact_name(&name));
        let path = self.root.join("artifacts").join(&name);
        if !path.exists() {
            Self::write_atomic(&path, bytes)?;
        }
        Ok(name)
    }

    pub fn artifact(&self, name: &str) -> io::Result<Option<Vec<u8>>> {
        if !is_artifact_name(name) {
            return Ok(None);
        }
        Self::read_optional(&self.root.join("artifacts").join(name))
    }

    pub fn save_job(&self, record: &JobRecord) -> io::Result<()> {
        let bytes = serde_json::to_vec_pretty(record).map_err(io::Error::other)?;
        Self::write_atomic(
            &self
                .root
                .join("jobs")
                .join(format!("{}.json", record.job_id)),
            &bytes,
        )
    }

    /// Every stored job record, oldest first.
    pub fn load_jobs(&self) -> io::Result<Vec<JobRecord>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.root.join("jobs"))? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let rec: JobRecord =
                    serde_json::from_slice(&fs::read(&path)?).map_err(io::Error::other)?;
                out.push(rec);
            }
        }
        out.sort_by(|a, b| (a.created_at, &a.job_id).cmp(&(b.created_at, &b.job_id)));
        Ok(out)
    }
}
