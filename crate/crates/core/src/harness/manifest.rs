//! Content-hash manifest of a run directory.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.txt";

fn collect(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect(&path, root, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("walk stays under root").to_path_buf();
            if rel != Path::new(MANIFEST_NAME) {
                out.push(rel);
            }
        }
    }
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// `(relative path, sha256)` for every file under `dir` except the manifest, sorted by path.
pub fn hash_tree(dir: &Path) -> Result<Vec<(String, String)>> {
    let mut files = Vec::new();
    collect(dir, dir, &mut files)?;
    let mut out = files
        .into_iter()
        .map(|rel| {
            let name = rel.to_string_lossy().replace('\\', "/");
            sha256_file(&dir.join(&rel)).map(|h| (name, h))
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

/// Writes `manifest.txt` as `sha256  path` lines and returns its entries.
pub fn write_manifest(dir: &Path) -> Result<Vec<(String, String)>> {
    let entries = hash_tree(dir)?;
    let text: String = entries.iter().map(|(p, h)| format!("{h}  {p}\n")).collect();
    let path = dir.join(MANIFEST_NAME);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}
