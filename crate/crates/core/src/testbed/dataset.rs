use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use bytes::Bytes;
use rand::RngCore;

use super::TestbedError;
use crate::codec::HashId;
use crate::fragmentation::sha256;
use crate::transport::derive_rng;

pub const MANIFEST_FILE: &str = "MANIFEST";

/// File name of the `index`-th image (1-based).
pub fn image_file_name(index: u32) -> String {
    format!("img_{index:03}.bin")
}

/// Deterministic pseudo-random image bytes for (seed, label, index).
pub fn synth_image(seed: u64, label: &str, index: u32, size: u64) -> Bytes {
    let mut rng = derive_rng(seed, &format!("image/{label}/{index}"));
    let mut buf = vec![0u8; size as usize];
    rng.fill_bytes(&mut buf);
    Bytes::from(buf)
}

/// Writes `count` images of `size` bytes plus a `MANIFEST` in sha256sum
/// format. Returns the manifest path.
pub fn generate_dataset(
    seed: u64,
    count: u32,
    size: u64,
    out: &Path,
) -> Result<PathBuf, TestbedError> {
    if count == 0 || size == 0 {
        return Err(TestbedError::Config("count and size must be at least 1".into()));
    }
    fs::create_dir_all(out)?;
    let mut manifest = Vec::new();
    for i in 1..=count {
        let name = image_file_name(i);
        let bytes = synth_image(seed, "dataset", i, size);
        fs::write(out.join(&name), &bytes)?;
        writeln!(manifest, "{}  {name}", sha256(&bytes).to_hex())?;
    }
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, manifest)?;
    Ok(path)
}

/// Reads a sha256sum-style manifest into file name → hash.
pub fn read_manifest(path: &Path) -> Result<BTreeMap<String, HashId>, TestbedError> {
    let text = fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (hash, name) = line
            .split_once("  ")
            .ok_or_else(|| TestbedError::Config(format!("{}:{}: bad line", path.display(), n + 1)))?;
        let hash = HashId::from_hex(hash)
            .map_err(|e| TestbedError::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.insert(name.to_string(), hash);
    }
    Ok(out)
}

/// Image files of a dataset directory, sorted by name.
pub fn dataset_files(dir: &Path) -> Result<Vec<PathBuf>, TestbedError> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_file() && entry.file_name() != MANIFEST_FILE {
            files.push(entry.path());
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(TestbedError::Config(format!("{} holds no images", dir.display())));
    }
    Ok(files)
}
