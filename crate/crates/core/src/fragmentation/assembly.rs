use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use bytes::Bytes;

use super::{sha256, FragmentError};
use crate::codec::{Fragment, ImageHeader};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestOutcome {
    New,
    /// Same index, same bytes. Buffer unchanged.
    Duplicate,
    /// Same index, different bytes. First write wins; buffer unchanged.
    Mismatch,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MissingReport {
    /// Absent part indices, ascending.
    pub missing: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Restored {
    Complete(Vec<u8>),
    Missing(MissingReport),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Part {
    Memory(Bytes),
    Spilled { len: u32, crc: u32 },
}

/// Receive-side state of one transfer: which parts arrived and their bytes.
///
/// Parts live in memory until [`AssemblyBuffer::spill`] moves them to a
/// directory; parts arriving after that are written straight to disk. The
/// spill directory is removed when the buffer is dropped.
#[derive(Debug)]
pub struct AssemblyBuffer {
    header: ImageHeader,
    received: Vec<u64>,
    parts: BTreeMap<u32, Part>,
    bytes_received: u64,
    memory_bytes: u64,
    spill_dir: Option<PathBuf>,
}

impl AssemblyBuffer {
    pub fn new(header: ImageHeader) -> Self {
        let words = (header.total_parts as usize).div_ceil(64);
        Self {
            header,
            received: vec![0; words],
            parts: BTreeMap::new(),
            bytes_received: 0,
            memory_bytes: 0,
            spill_dir: None,
        }
    }

    pub fn header(&self) -> &ImageHeader {
        &self.header
    }

    pub fn has(&self, index: u32) -> bool {
        let i = index as usize;
        self.received
            .get(i / 64)
            .is_some_and(|w| w & (1 << (i % 64)) != 0)
    }

    fn mark(&mut self, index: u32) {
        let i = index as usize;
        self.received[i / 64] |= 1 << (i % 64);
    }

    pub fn received_count(&self) -> u32 {
        self.received.iter().map(|w| w.count_ones()).sum()
    }

    pub fn bytes_received(&self) -> u64 {
        self.bytes_received
    }

    /// Bytes currently held in memory (not spilled).
    pub fn memory_bytes(&self) -> u64 {
        self.memory_bytes
    }

    pub fn is_spilled(&self) -> bool {
        self.spill_dir.is_some()
    }

    pub fn is_complete(&self) -> bool {
        self.received_count() == self.header.total_parts
    }

    pub fn missing(&self) -> Vec<u32> {
        (0..self.header.total_parts).filter(|&i| !self.has(i)).collect()
    }

    pub fn ingest(&mut self, f: &Fragment) -> Result<IngestOutcome, FragmentError> {
        if f.hash_file != self.header.hash_file {
            return Err(FragmentError::ForeignFragment {
                expected: self.header.hash_file,
                got: f.hash_file,
            });
        }
        if f.total_parts != self.header.total_parts {
            return Err(FragmentError::InvalidFragment(format!(
                "fragment says {} parts, header says {}",
                f.total_parts, self.header.total_parts
            )));
        }
        let expected_len = self.header.part_len(f.part_index).ok_or_else(|| {
            FragmentError::InvalidFragment(format!("part index {} out of range", f.part_index))
        })?;
        if f.payload.len() != expected_len as usize {
            return Err(FragmentError::InvalidFragment(format!(
                "part {} carries {} bytes, expected {expected_len}",
                f.part_index,
                f.payload.len()
            )));
        }
        if crc32fast::hash(&f.payload) != f.payload_crc {
            return Err(FragmentError::InvalidFragment(format!(
                "part {} fails its checksum",
                f.part_index
            )));
        }

        if self.has(f.part_index) {
            let same = match &self.parts[&f.part_index] {
                Part::Memory(stored) => stored == &f.payload,
                Part::Spilled { crc, .. } => {
                    *crc == f.payload_crc
                        && fs::read(self.part_path(f.part_index))? == f.payload.as_ref()
                }
            };
            return Ok(if same {
                IngestOutcome::Duplicate
            } else {
                IngestOutcome::Mismatch
            });
        }

        let part = match &self.spill_dir {
            Some(_) => {
                fs::write(self.part_path(f.part_index), &f.payload)?;
                Part::Spilled {
                    len: expected_len,
                    crc: f.payload_crc,
                }
            }
            None => {
                self.memory_bytes += u64::from(expected_len);
                Part::Memory(f.payload.clone())
            }
        };
        self.parts.insert(f.part_index, part);
        self.mark(f.part_index);
        self.bytes_received += u64::from(expected_len);
        Ok(IngestOutcome::New)
    }

    /// Concatenates all parts and checks the result against the header hash.
    pub fn restore(&self) -> Result<Restored, FragmentError> {
        if !self.is_complete() {
            return Ok(Restored::Missing(MissingReport {
                missing: self.missing(),
            }));
        }
        let mut image = Vec::with_capacity(self.header.file_size as usize);
        for (&index, part) in &self.parts {
            match part {
                Part::Memory(bytes) => image.extend_from_slice(bytes),
                Part::Spilled { .. } => image.extend_from_slice(&fs::read(self.part_path(index))?),
            }
        }
        let actual = sha256(&image);
        if actual != self.header.hash_file {
            return Err(FragmentError::HashMismatch {
                expected: self.header.hash_file,
                actual,
            });
        }
        Ok(Restored::Complete(image))
    }

    /// Moves all in-memory parts under `dir` and keeps later parts there too.
    /// Returns the number of bytes released from memory.
    pub fn spill(&mut self, dir: &Path) -> Result<u64, FragmentError> {
        if self.spill_dir.is_some() {
            return Ok(0);
        }
        fs::create_dir_all(dir)?;
        self.spill_dir = Some(dir.to_path_buf());
        let mut freed = 0;
        let indices: Vec<u32> = self.parts.keys().copied().collect();
        for index in indices {
            if let Some(Part::Memory(bytes)) = self.parts.get(&index) {
                let bytes = bytes.clone();
                fs::write(self.part_path(index), &bytes)?;
                freed += bytes.len() as u64;
                self.parts.insert(
                    index,
                    Part::Spilled {
                        len: bytes.len() as u32,
                        crc: crc32fast::hash(&bytes),
                    },
                );
            }
        }
        self.memory_bytes -= freed;
        Ok(freed)
    }

    /// Forgets every part, keeping the header.
    pub fn reset(&mut self) {
        self.remove_spill_dir();
        self.received.iter_mut().for_each(|w| *w = 0);
        self.parts.clear();
        self.bytes_received = 0;
        self.memory_bytes = 0;
    }

    fn part_path(&self, index: u32) -> PathBuf {
        self.spill_dir
            .as_ref()
            .expect("part path requires a spill dir")
            .join(format!("{index:08}.part"))
    }

    fn remove_spill_dir(&mut self) {
        if let Some(dir) = self.spill_dir.take() {
            if let Err(e) = fs::remove_dir_all(&dir) {
                log::warn!("could not remove spill dir {}: {e}", dir.display());
            }
        }
    }

    #[cfg(test)]
    fn check_invariants(&self) {
        assert_eq!(self.received_count() as usize, self.parts.len());
        let sum: u64 = self
            .parts
            .values()
            .map(|p| match p {
                Part::Memory(b) => b.len() as u64,
                Part::Spilled { len, .. } => u64::from(*len),
            })
            .sum();
        assert_eq!(sum, self.bytes_received);
    }
}

impl Drop for AssemblyBuffer {
    fn drop(&mut self) {
        self.remove_spill_dir();
    }
}

impl PartialEq for AssemblyBuffer {
    /// Compares header, bitmap and stored parts.
    fn eq(&self, other: &Self) -> bool {
        self.header == other.header
            && self.received == other.received
            && self.bytes_received == other.bytes_received
            && self.parts == other.parts
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::codec::SenderId;
    use crate::fragmentation::{split, TransferMeta};

    fn split_bytes(data: &[u8], chunk: u32) -> (ImageHeader, Vec<Fragment>) {
        split(
            &Bytes::copy_from_slice(data),
            chunk,
            TransferMeta {
                sender: SenderId::new("pc1").unwrap(),
                package_name: "p".into(),
                file_name: "f".into(),
                annotations: BTreeMap::new(),
            },
        )
        .unwrap()
    }

    #[test]
    fn all_parts_restore_original() {
        let data: Vec<u8> = (0..=255u8).cycle().take(1000).collect();
        let (header, frags) = split_bytes(&data, 64);
        let mut buf = AssemblyBuffer::new(header);
        for f in frags.iter().rev() {
            assert_eq!(buf.ingest(f).unwrap(), IngestOutcome::New);
        }
        buf.check_invariants();
        assert_eq!(buf.restore().unwrap(), Restored::Complete(data));
    }

    #[test]
    fn missing_middle_part_is_reported() {
        let (header, frags) = split_bytes(b"abcdef", 2);
        let mut buf = AssemblyBuffer::new(header);
        buf.ingest(&frags[0]).unwrap();
        buf.ingest(&frags[2]).unwrap();
        assert_eq!(
            buf.restore().unwrap(),
            Restored::Missing(MissingReport { missing: vec![1] })
        );
    }

    #[test]
    fn substituted_payload_is_hash_mismatch() {
        let (header, frags) = split_bytes(b"abcdef", 2);
        let mut buf = AssemblyBuffer::new(header);
        buf.ingest(&frags[0]).unwrap();
        buf.ingest(&frags[1]).unwrap();
        let forged = Fragment::new(frags[2].hash_file, 2, 3, Bytes::from_static(b"zz"));
        buf.ingest(&forged).unwrap();
        assert!(matches!(buf.restore(), Err(FragmentError::HashMismatch { .. })));
    }

    #[test]
    fn duplicates_and_mismatches_leave_buffer_unchanged() {
        let (header, frags) = split_bytes(b"abcdefgh", 2);
        let mut buf = AssemblyBuffer::new(header);
        assert_eq!(buf.ingest(&frags[3]).unwrap(), IngestOutcome::New);
        assert_eq!(buf.ingest(&frags[3]).unwrap(), IngestOutcome::Duplicate);
        assert_eq!(buf.received_count(), 1);
        let other = Fragment::new(frags[3].hash_file, 3, 4, Bytes::from_static(b"XX"));
        assert_eq!(buf.ingest(&other).unwrap(), IngestOutcome::Mismatch);
        assert_eq!(buf.received_count(), 1);
        assert_eq!(buf.bytes_received(), 2);
        buf.check_invariants();
    }

    #[test]
    fn single_part_image() {
        let (header, frags) = split_bytes(b"q", 16);
        let mut buf = AssemblyBuffer::new(header);
        buf.ingest(&frags[0]).unwrap();
        assert_eq!(buf.restore().unwrap(), Restored::Complete(b"q".to_vec()));
    }

    #[test]
    fn foreign_fragment_is_rejected() {
        let (header, _) = split_bytes(b"abcd", 2);
        let (_, other) = split_bytes(b"wxyz", 2);
        let mut buf = AssemblyBuffer::new(header);
        assert!(matches!(
            buf.ingest(&other[0]),
            Err(FragmentError::ForeignFragment { .. })
        ));
    }

    #[test]
    fn wrong_length_is_rejected() {
        let (header, frags) = split_bytes(b"abcde", 2);
        let mut buf = AssemblyBuffer::new(header);
        let short = Fragment::new(frags[0].hash_file, 0, 3, Bytes::from_static(b"a"));
        assert!(matches!(buf.ingest(&short), Err(FragmentError::InvalidFragment(_))));
        let bad_crc = Fragment {
            payload_crc: frags[1].payload_crc ^ 1,
            ..frags[1].clone()
        };
        assert!(matches!(buf.ingest(&bad_crc), Err(FragmentError::InvalidFragment(_))));
        let wrong_total = Fragment::new(frags[0].hash_file, 0, 4, frags[0].payload.clone());
        assert!(matches!(buf.ingest(&wrong_total), Err(FragmentError::InvalidFragment(_))));
    }

    #[test]
    fn spilled_buffer_behaves_like_memory_buffer() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<u8> = (0..5000u32).map(|i| (i * 7 % 251) as u8).collect();
        let (header, frags) = split_bytes(&data, 512);
        let mut buf = AssemblyBuffer::new(header);
        for f in &frags[..4] {
            buf.ingest(f).unwrap();
        }
        let spill = dir.path().join("spill");
        assert_eq!(buf.spill(&spill).unwrap(), 4 * 512);
        assert_eq!(buf.memory_bytes(), 0);
        assert_eq!(buf.ingest(&frags[1]).unwrap(), IngestOutcome::Duplicate);
        let forged = Fragment::new(frags[1].hash_file, 1, frags[1].total_parts, Bytes::from(vec![0u8; 512]));
        assert_eq!(buf.ingest(&forged).unwrap(), IngestOutcome::Mismatch);
        for f in &frags[4..] {
            buf.ingest(f).unwrap();
        }
        buf.check_invariants();
        assert_eq!(buf.memory_bytes(), 0);
        assert_eq!(buf.restore().unwrap(), Restored::Complete(data));
        drop(buf);
        assert!(!spill.exists());
    }

    #[test]
    fn reset_clears_parts() {
        let (header, frags) = split_bytes(b"abcd", 2);
        let mut buf = AssemblyBuffer::new(header);
        buf.ingest(&frags[0]).unwrap();
        buf.reset();
        assert_eq!(buf.received_count(), 0);
        assert_eq!(buf.missing(), vec![0, 1]);
        buf.check_invariants();
    }
}
