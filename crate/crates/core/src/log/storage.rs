//! On-disk layout of a log directory:
//!
//! - `entries.jsonl`: one canonical JSON record per line, append-only.
//! - `index.tsv`: `digest tree_id leaf_index offset length` per record;
//!   derived data, rebuilt from `entries.jsonl` whenever it disagrees.
//! - `log.key`: the log's signing key.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::entry::LogEntry;
use crate::canonical::canonical_bytes;
use crate::crypto::{KeyMaterial, SigningIdentity};
use crate::digest::Digest;

const ENTRIES: &str = "entries.jsonl";
const INDEX: &str = "index.tsv";
const KEY: &str = "log.key";

#[derive(Debug, thiserror::Error)]
pub enum StorageError {
    #[error("log storage I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt log record at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("log key: {0}")]
    Key(#[from] crate::crypto::CryptoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub tree_id: u64,
    pub leaf_index: u64,
    pub entry: LogEntry,
}

#[derive(Debug)]
pub struct LogStorage {
    dir: PathBuf,
    entries: File,
    index: File,
    offset: u64,
}

impl LogStorage {
    /// Opens (creating if needed) a log directory and returns every intact
    /// record. A torn final line from an interrupted append is discarded.
    pub fn open(dir: &Path) -> Result<(Self, Vec<Record>), StorageError> {
        fs::create_dir_all(dir)?;
        let entries_path = dir.join(ENTRIES);
        let mut entries = OpenOptions::new().create(true).read(true).append(true).open(&entries_path)?;

        let mut records = Vec::new();
        let mut index_lines = Vec::new();
        let mut offset = 0u64;
        {
            let mut reader = BufReader::new(&entries);
            let mut line = Vec::new();
            let mut lineno = 0;
            loop {
                line.clear();
                let n = reader.read_until(b'\n', &mut line)?;
                if n == 0 {
                    break;
                }
                lineno += 1;
                if line.last() != Some(&b'\n') {
                    log::warn!("discarding torn record at line {lineno} of {}", entries_path.display());
                    break;
                }
                let body = &line[..line.len() - 1];
                let rec: Record = serde_json::from_slice(body)
                    .map_err(|e| StorageError::Corrupt { line: lineno, reason: e.to_string() })?;
                index_lines.push(index_line(&rec.entry.digest(), &rec, offset, body.len() as u64));
                records.push(rec);
                offset += n as u64;
            }
        }
        if entries.metadata()?.len() != offset {
            entries.set_len(offset)?;
            entries.seek(SeekFrom::End(0))?;
        }

        let index_path = dir.join(INDEX);
        let expected: String = index_lines.concat();
        if fs::read_to_string(&index_path).unwrap_or_default() != expected {
            fs::write(&index_path, expected)?;
        }
        let index = OpenOptions::new().create(true).append(true).open(&index_path)?;
        Ok((LogStorage { dir: dir.to_owned(), entries, index, offset }, records))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Durably appends one record. Nothing is written to the index unless the
    /// entry line landed completely.
    pub fn append(&mut self, rec: &Record) -> Result<(), StorageError> {
        let mut line = canonical_bytes(rec).map_err(|e| StorageError::Corrupt { line: 0, reason: e.to_string() })?;
        let len = line.len() as u64;
        line.push(b'\n');
        if let Err(e) = self.entries.write_all(&line).and_then(|_| self.entries.sync_data()) {
            // roll back a partial write so the file stays a sequence of whole records
            let _ = self.entries.set_len(self.offset);
            return Err(e.into());
        }
        let idx = index_line(&rec.entry.digest(), rec, self.offset, len);
        self.offset += line.len() as u64;
        self.index.write_all(idx.as_bytes())?;
        Ok(())
    }

    /// Loads `log.key` from `dir`, generating and saving a fresh key if absent.
    pub fn load_or_create_key(dir: &Path) -> Result<SigningIdentity, StorageError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(KEY);
        if path.exists() {
            return Ok(KeyMaterial::load(&path)?.into_identity()?);
        }
        let key = crate::crypto::generate_identity()?;
        fs::write(&path, key.to_private_pem())?;
        Ok(key)
    }
}

fn index_line(digest: &Digest, rec: &Record, offset: u64, len: u64) -> String {
    format!("{digest}\t{}\t{}\t{offset}\t{len}\n", rec.tree_id, rec.leaf_index)
}
