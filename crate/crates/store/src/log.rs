//! On-disk log.
//!
//! ```text
//! record  := len:u32be crc32:u32be payload[len]
//! payload := 0x01 kind:u8 body
//! kind 0  := term:u64 index:u64 ns:u8 op:u8 klen:u32 key vlen:u32 value
//! kind 1  := base_index:u64 base_term:u64   (compaction marker, first record)
//! ```
//!
//! All integers are big-endian. Recovery stops at the first record whose
//! length or checksum does not verify and truncates the file there.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tracing::warn;

use baton_core::wire::{LogEntry, LogOp, Namespace};

use crate::kv::KvState;

const FORMAT_VERSION: u8 = 1;
const KIND_ENTRY: u8 = 0;
const KIND_BASE: u8 = 1;
const HEADER: usize = 8;
const MAX_RECORD: u32 = 64 << 20;

pub fn encode_entry(e: &LogEntry) -> Vec<u8> {
    let mut payload = Vec::with_capacity(32 + e.key.len() + e.value.len());
    payload.push(FORMAT_VERSION);
    payload.push(KIND_ENTRY);
    payload.extend(e.term.to_be_bytes());
    payload.extend(e.index.to_be_bytes());
    payload.push(e.namespace.tag());
    payload.push(match e.op {
        LogOp::Put => 0,
        LogOp::Delete => 1,
    });
    payload.extend((e.key.len() as u32).to_be_bytes());
    payload.extend(e.key.as_bytes());
    payload.extend((e.value.len() as u32).to_be_bytes());
    payload.extend(&e.value);
    frame(payload)
}

fn encode_base(index: u64, term: u64) -> Vec<u8> {
    let mut payload = vec![FORMAT_VERSION, KIND_BASE];
    payload.extend(index.to_be_bytes());
    payload.extend(term.to_be_bytes());
    frame(payload)
}

fn frame(payload: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + payload.len());
    out.extend((payload.len() as u32).to_be_bytes());
    out.extend(crc32fast::hash(&payload).to_be_bytes());
    out.extend(payload);
    out
}

enum Record {
    Entry(LogEntry),
    Base { index: u64, term: u64 },
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        if self.0.len() < n {
            return None;
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Some(a)
    }
    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_be_bytes(b.try_into().unwrap()))
    }
}

fn decode_payload(payload: &[u8]) -> Option<Record> {
    let mut c = Cursor(payload);
    if c.u8()? != FORMAT_VERSION {
        return None;
    }
    match c.u8()? {
        KIND_ENTRY => {
            let term = c.u64()?;
            let index = c.u64()?;
            let namespace = Namespace::from_tag(c.u8()?)?;
            let op = match c.u8()? {
                0 => LogOp::Put,
                1 => LogOp::Delete,
                _ => return None,
            };
            let klen = c.u32()? as usize;
            let key = String::from_utf8(c.take(klen)?.to_vec()).ok()?;
            let vlen = c.u32()? as usize;
            let value = c.take(vlen)?.to_vec();
            c.0.is_empty().then_some(Record::Entry(LogEntry {
                term,
                index,
                namespace,
                op,
                key,
                value,
            }))
        }
        KIND_BASE => {
            let index = c.u64()?;
            let term = c.u64()?;
            c.0.is_empty().then_some(Record::Base { index, term })
        }
        _ => None,
    }
}

/// Splits `bytes` into verified records; returns them with the byte offset
/// of each and the length of the valid prefix.
fn scan_records(bytes: &[u8]) -> (Vec<(u64, Record)>, usize) {
    let mut out = Vec::new();
    let mut pos = 0usize;
    while bytes.len() - pos >= HEADER {
        let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().unwrap());
        let crc = u32::from_be_bytes(bytes[pos + 4..pos + 8].try_into().unwrap());
        if len > MAX_RECORD || bytes.len() - pos - HEADER < len as usize {
            break;
        }
        let payload = &bytes[pos + HEADER..pos + HEADER + len as usize];
        if crc32fast::hash(payload) != crc {
            break;
        }
        let Some(rec) = decode_payload(payload) else {
            break;
        };
        out.push((pos as u64, rec));
        pos += HEADER + len as usize;
    }
    (out, pos)
}

/// Append-only replica log with an in-memory copy of the live suffix.
pub struct LogFile {
    path: PathBuf,
    file: File,
    /// Entries with index > `base_index`, contiguous.
    entries: Vec<LogEntry>,
    offsets: Vec<u64>,
    /// Latest entry per key at or below `base_index`.
    folded: BTreeMap<(Namespace, String), LogEntry>,
    base_index: u64,
    base_term: u64,
    size: u64,
}

impl LogFile {
    pub fn open(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join("store.log");
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let (records, mut valid) = scan_records(&bytes);

        let mut log = Self {
            path,
            file,
            entries: Vec::new(),
            offsets: Vec::new(),
            folded: BTreeMap::new(),
            base_index: 0,
            base_term: 0,
            size: 0,
        };
        for (i, (offset, rec)) in records.into_iter().enumerate() {
            match rec {
                Record::Base { index, term } if i == 0 => {
                    log.base_index = index;
                    log.base_term = term;
                }
                Record::Entry(e) if e.index <= log.base_index && log.entries.is_empty() => {
                    log.folded.insert((e.namespace, e.key.clone()), e);
                }
                Record::Entry(e) if e.index == log.last_index() + 1 => {
                    log.entries.push(e);
                    log.offsets.push(offset);
                }
                _ => {
                    valid = offset as usize;
                    break;
                }
            }
        }
        if valid < bytes.len() {
            warn!(path = %log.path.display(), kept = valid, dropped = bytes.len() - valid, "truncating damaged log tail");
            log.file.set_len(valid as u64)?;
            log.file.sync_all()?;
        }
        log.size = valid as u64;
        Ok(log)
    }

    pub fn last_index(&self) -> u64 {
        self.entries.last().map_or(self.base_index, |e| e.index)
    }

    pub fn last_term(&self) -> u64 {
        self.entries.last().map_or(self.base_term, |e| e.term)
    }

    pub fn base_index(&self) -> u64 {
        self.base_index
    }

    pub fn size_bytes(&self) -> u64 {
        self.size
    }

    /// Term of the entry at `index`; `None` if beyond the log. Indices at or
    /// below the compaction base report the base term.
    pub fn term_at(&self, index: u64) -> Option<u64> {
        if index <= self.base_index {
            return Some(self.base_term);
        }
        self.entries
            .get((index - self.base_index - 1) as usize)
            .map(|e| e.term)
    }

    pub fn entries_from(&self, index: u64, max: usize) -> Vec<LogEntry> {
        let start = index.saturating_sub(self.base_index + 1) as usize;
        self.entries.iter().skip(start).take(max).cloned().collect()
    }

    /// Appends and fsyncs. Indices must continue the log.
    pub fn append(&mut self, entries: &[LogEntry]) -> io::Result<()> {
        if entries.is_empty() {
            return Ok(());
        }
        let mut buf = Vec::new();
        let mut offsets = Vec::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            assert_eq!(
                e.index,
                self.last_index() + 1 + i as u64,
                "log indices must be contiguous"
            );
            offsets.push(self.size + buf.len() as u64);
            buf.extend(encode_entry(e));
        }
        self.file.write_all(&buf)?;
        self.file.sync_data()?;
        self.size += buf.len() as u64;
        self.entries.extend_from_slice(entries);
        self.offsets.extend(offsets);
        Ok(())
    }

    /// Drops every entry with index >= `index`.
    pub fn truncate_from(&mut self, index: u64) -> io::Result<()> {
        if index > self.last_index() {
            return Ok(());
        }
        assert!(index > self.base_index, "cannot truncate compacted entries");
        let keep = (index - self.base_index - 1) as usize;
        let offset = self.offsets[keep];
        self.file.set_len(offset)?;
        self.file.sync_data()?;
        self.entries.truncate(keep);
        self.offsets.truncate(keep);
        self.size = offset;
        Ok(())
    }

    pub fn fold_into(&self, kv: &mut KvState) {
        for e in self.folded.values() {
            kv.apply(e);
        }
        for e in &self.entries {
            kv.apply(e);
        }
    }

    /// Rewrites the log keeping the latest value per key for entries up to
    /// `upto`; entries after `upto` are kept verbatim.
    pub fn compact(&mut self, upto: u64) -> io::Result<()> {
        let upto = upto.min(self.last_index());
        if upto <= self.base_index {
            return Ok(());
        }
        let base_term = self.term_at(upto).expect("index within log");
        let split = (upto - self.base_index) as usize;
        let mut folded = std::mem::take(&mut self.folded);
        for e in self.entries.drain(..split) {
            let key = (e.namespace, e.key.clone());
            match e.op {
                LogOp::Put => {
                    folded.insert(key, e);
                }
                LogOp::Delete => {
                    folded.remove(&key);
                }
            }
        }
        let tmp = self.path.with_extension("compact");
        let mut buf = encode_base(upto, base_term);
        for e in folded.values() {
            buf.extend(encode_entry(e));
        }
        let mut offsets = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            offsets.push(buf.len() as u64);
            buf.extend(encode_entry(e));
        }
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &self.path)?;
        if let Some(dir) = self.path.parent() {
            File::open(dir)?.sync_all()?;
        }
        self.file = OpenOptions::new()
            .read(true)
            .append(true)
            .open(&self.path)?;
        self.folded = folded;
        self.offsets = offsets;
        self.base_index = upto;
        self.base_term = base_term;
        self.size = buf.len() as u64;
        Ok(())
    }
}

/// Election state that must survive restarts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardState {
    pub term: u64,
    pub voted_for: Option<u64>,
}

impl HardState {
    pub fn load(dir: &Path) -> io::Result<Self> {
        match fs::read(dir.join("election.state")) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(e),
        }
    }

    pub fn save(&self, dir: &Path) -> io::Result<()> {
        let tmp = dir.join("election.state.tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&serde_json::to_vec(self).expect("serializable"))?;
            f.sync_all()?;
        }
        fs::rename(&tmp, dir.join("election.state"))?;
        File::open(dir)?.sync_all()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn put(term: u64, index: u64, key: &str, value: &[u8]) -> LogEntry {
        LogEntry {
            term,
            index,
            namespace: Namespace::Functions,
            op: LogOp::Put,
            key: key.into(),
            value: value.to_vec(),
        }
    }

    fn del(term: u64, index: u64, key: &str) -> LogEntry {
        LogEntry {
            term,
            index,
            namespace: Namespace::Functions,
            op: LogOp::Delete,
            key: key.into(),
            value: vec![],
        }
    }

    #[test]
    fn reopen_restores_entries() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut log = LogFile::open(dir.path()).unwrap();
            log.append(&[put(1, 1, "a", b"1"), put(1, 2, "b", b"2")])
                .unwrap();
            log.append(&[del(2, 3, "a")]).unwrap();
        }
        let log = LogFile::open(dir.path()).unwrap();
        assert_eq!(log.last_index(), 3);
        assert_eq!(log.last_term(), 2);
        let mut kv = KvState::default();
        log.fold_into(&mut kv);
        assert_eq!(
            kv.scan(Namespace::Functions),
            vec![("b".to_string(), b"2".to_vec())]
        );
    }

    #[test]
    fn torn_tail_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut log = LogFile::open(dir.path()).unwrap();
            log.append(&[put(1, 1, "a", b"1"), put(1, 2, "b", b"2")])
                .unwrap();
        }
        let path = dir.path().join("store.log");
        let len = fs::metadata(&path).unwrap().len();
        // Half-written third record.
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(&encode_entry(&put(1, 3, "c", b"3"))[..10])
            .unwrap();
        drop(f);
        let mut log = LogFile::open(dir.path()).unwrap();
        assert_eq!(log.last_index(), 2);
        assert_eq!(fs::metadata(&path).unwrap().len(), len);
        log.append(&[put(1, 3, "c", b"3")]).unwrap();
        assert_eq!(LogFile::open(dir.path()).unwrap().last_index(), 3);
    }

    #[test]
    fn checksum_failure_truncates_at_first_bad_record() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut log = LogFile::open(dir.path()).unwrap();
            log.append(&[
                put(1, 1, "a", b"1"),
                put(1, 2, "b", b"2"),
                put(1, 3, "c", b"3"),
            ])
            .unwrap();
        }
        let path = dir.path().join("store.log");
        let mut bytes = fs::read(&path).unwrap();
        let second = encode_entry(&put(1, 1, "a", b"1")).len();
        bytes[second + HEADER + 5] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        let log = LogFile::open(dir.path()).unwrap();
        assert_eq!(log.last_index(), 1);
        assert_eq!(fs::metadata(&path).unwrap().len() as usize, second);
    }

    #[test]
    fn truncate_and_compact() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = LogFile::open(dir.path()).unwrap();
        log.append(&[
            put(1, 1, "a", b"1"),
            put(1, 2, "a", b"2"),
            put(1, 3, "b", b"x"),
            del(1, 4, "b"),
        ])
        .unwrap();
        log.append(&[put(2, 5, "c", b"3")]).unwrap();
        log.truncate_from(5).unwrap();
        assert_eq!(log.last_index(), 4);
        log.append(&[put(3, 5, "d", b"4"), put(3, 6, "a", b"5")])
            .unwrap();
        let before = log.size_bytes();
        log.compact(5).unwrap();
        assert!(log.size_bytes() < before);
        assert_eq!(log.term_at(5), Some(3));
        assert_eq!(log.last_index(), 6);
        assert_eq!(log.entries_from(6, 10).len(), 1);

        let reopened = LogFile::open(dir.path()).unwrap();
        assert_eq!(reopened.base_index(), 5);
        assert_eq!(reopened.last_index(), 6);
        let mut kv = KvState::default();
        reopened.fold_into(&mut kv);
        assert_eq!(
            kv.scan(Namespace::Functions),
            vec![
                ("a".to_string(), b"5".to_vec()),
                ("d".to_string(), b"4".to_vec())
            ]
        );
    }

    #[test]
    fn hard_state_persists() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(HardState::load(dir.path()).unwrap(), HardState::default());
        let hs = HardState {
            term: 7,
            voted_for: Some(2),
        };
        hs.save(dir.path()).unwrap();
        assert_eq!(HardState::load(dir.path()).unwrap(), hs);
    }
}
