use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};
use tempfile::NamedTempFile;

use crate::CliError;

/// First 16 hex digits of the SHA-256 of the config's JSON form.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_vec(config).expect("config types serialize");
    hex::encode(&Sha256::digest(&json)[..8])
}

/// `# <command> seed=<seed> config_hash=<hash>` line that opens every CSV.
pub fn header_line(command: &str, seed: u64, hash: &str) -> String {
    format!("# mih-localmap {command} seed={seed} config_hash={hash}\n")
}

/// Writes via a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

/// CSV body produced by `fill`, prefixed with the metadata header.
pub fn csv_with_header<F>(header: &str, fill: F) -> Result<Vec<u8>, CliError>
where
    F: FnOnce(&mut Vec<u8>) -> csv::Result<()>,
{
    let mut buf = header.as_bytes().to_vec();
    fill(&mut buf).map_err(|e| CliError::Output(e.to_string()))?;
    Ok(buf)
}

pub fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("summary types serialize");
    v.push(b'\n');
    v
}
