use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{HashId, ImageHeader, SenderId};

const INDEX_FILE: &str = "index.jsonl";

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("storage full: {needed} bytes needed, {available} available")]
    Full { needed: u64, available: u64 },
    #[error("name {0:?} cannot be used as a path component")]
    InvalidName(String),
    #[error("storage i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageEntry {
    pub hash_file: HashId,
    pub sender: SenderId,
    pub package_name: String,
    pub file_name: String,
    /// Relative to the storage root.
    pub stored_path: PathBuf,
    pub size: u64,
}

/// Rejects names that could escape or confuse the directory layout.
pub fn validate_name(name: &str) -> Result<(), StorageError> {
    let bad = name.is_empty()
        || name == "."
        || name.contains("..")
        || name.contains(['/', '\\', '\0']);
    if bad {
        Err(StorageError::InvalidName(name.to_string()))
    } else {
        Ok(())
    }
}

/// Restored images under `root/<sender>/<package>/<file>`, at most one entry
/// per (sender, hash). A different image arriving under a taken path gets a
/// `~<hash12>` suffix; nothing is overwritten.
#[derive(Debug)]
pub struct Storage {
    root: PathBuf,
    capacity: Option<u64>,
    used: u64,
    entries: BTreeMap<(SenderId, HashId), StorageEntry>,
    paths: BTreeSet<PathBuf>,
    index: File,
}

impl Storage {
    /// Opens (or creates) a store, reloading its index.
    pub fn open(root: &Path, capacity: Option<u64>) -> Result<Self, StorageError> {
        fs::create_dir_all(root)?;
        let index_path = root.join(INDEX_FILE);
        let mut entries = BTreeMap::new();
        let mut paths = BTreeSet::new();
        let mut used = 0;
        if index_path.exists() {
            for line in BufReader::new(File::open(&index_path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let e: StorageEntry = serde_json::from_str(&line)
                    .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
                used += e.size;
                paths.insert(e.stored_path.clone());
                entries.insert((e.sender.clone(), e.hash_file), e);
            }
        }
        let index = OpenOptions::new().create(true).append(true).open(&index_path)?;
        Ok(Self {
            root: root.to_path_buf(),
            capacity,
            used,
            entries,
            paths,
            index,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn used_bytes(&self) -> u64 {
        self.used
    }

    pub fn contains(&self, sender: &SenderId, hash: &HashId) -> bool {
        self.entries.contains_key(&(sender.clone(), *hash))
    }

    pub fn get(&self, sender: &SenderId, hash: &HashId) -> Option<&StorageEntry> {
        self.entries.get(&(sender.clone(), *hash))
    }

    /// Entries in (sender, hash) order.
    pub fn entries(&self) -> impl Iterator<Item = &StorageEntry> {
        self.entries.values()
    }

    pub fn absolute_path(&self, entry: &StorageEntry) -> PathBuf {
        self.root.join(&entry.stored_path)
    }

    pub fn read(&self, entry: &StorageEntry) -> io::Result<Vec<u8>> {
        fs::read(self.absolute_path(entry))
    }

    /// Whether a header could be accepted: names usable, space available.
    pub fn admit(&self, header: &ImageHeader) -> Result<(), StorageError> {
        validate_name(&header.package_name)?;
        validate_name(&header.file_name)?;
        self.check_space(header.file_size)
    }

    fn check_space(&self, size: u64) -> Result<(), StorageError> {
        match self.capacity {
            Some(cap) if self.used + size > cap => Err(StorageError::Full {
                needed: size,
                available: cap.saturating_sub(self.used),
            }),
            _ => Ok(()),
        }
    }

    /// Stores a restored image. Returns the entry and whether it is new.
    pub fn store(
        &mut self,
        header: &ImageHeader,
        bytes: &[u8],
    ) -> Result<(StorageEntry, bool), StorageError> {
        if let Some(e) = self.get(&header.sender, &header.hash_file) {
            return Ok((e.clone(), false));
        }
        self.admit(header)?;
        let dir = Path::new(header.sender.as_str()).join(&header.package_name);
        let mut rel = dir.join(&header.file_name);
        if self.paths.contains(&rel) || self.root.join(&rel).exists() {
            rel = dir.join(format!("{}~{}", header.file_name, header.hash_file.short()));
        }
        let abs = self.root.join(&rel);
        fs::create_dir_all(abs.parent().expect("has a parent"))?;
        let tmp = abs.with_extension("partial");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, &abs)?;
        let entry = StorageEntry {
            hash_file: header.hash_file,
            sender: header.sender.clone(),
            package_name: header.package_name.clone(),
            file_name: header.file_name.clone(),
            stored_path: rel.clone(),
            size: bytes.len() as u64,
        };
        let mut line = serde_json::to_vec(&entry).expect("entry serializes");
        line.push(b'\n');
        self.index.write_all(&line)?;
        self.used += entry.size;
        self.paths.insert(rel);
        self.entries
            .insert((entry.sender.clone(), entry.hash_file), entry.clone());
        Ok((entry, true))
    }
}
