use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

pub const VERSION: &str = concat!("sgfm ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub id: String,
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub dataset_hash: String,
    pub seed: u64,
    pub args: Vec<String>,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
}

impl RunManifest {
    /// The id depends only on the inputs, so reruns reference the same id.
    pub fn new(command: &str, config_hash: String, dataset_hash: String, seed: u64) -> Self {
        let id = sha256_hex(format!("{}\n{}\n{}\n{}\n{}", command, VERSION, config_hash, dataset_hash, seed).as_bytes())[..16].to_string();
        Self {
            id,
            command: command.to_string(),
            version: VERSION.to_string(),
            config_hash,
            dataset_hash,
            seed,
            args: std::env::args().skip(1).collect(),
            started_at: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), sgfm::io::IoError> {
        sgfm::io::write_json(&dir.join("manifest.json"), self)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a file, or of every file under a directory in path order.
pub fn hash_path(path: &Path) -> std::io::Result<String> {
    if path.is_file() {
        return Ok(sha256_hex(&std::fs::read(path)?));
    }
    let mut files = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(path).unwrap_or(&f).to_string_lossy().as_bytes());
        h.update(std::fs::read(&f)?);
    }
    Ok(hex::encode(h.finalize()))
}
