//! On-disk teacher store: a stream of truncated distributions aligned with
//! training tokens.
//!
//! Layout: 32-byte header `[magic "TSTR", u16 version = 1, u16 reserved,
//! u32 V', u32 V, u64 T, u32 crc32, 4 pad bytes]`, then `T` records of
//! `V'` u32 little-endian indices followed by `V'` f32 little-endian
//! probabilities (8 bytes per kept entry). The crc32 covers the payload and
//! is written last, so an interrupted write leaves no valid header.

use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::TruncatedDistribution;
use crate::error::{Error, Result};

pub const STORE_MAGIC: &[u8; 4] = b"TSTR";
pub const STORE_VERSION: u16 = 1;
pub const HEADER_LEN: u64 = 32;

/// Parsed header of a teacher store file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherStoreHeader {
    pub version: u16,
    pub v_prime: usize,
    pub vocab_size: usize,
    pub token_count: u64,
    pub checksum: u32,
}

impl TeacherStoreHeader {
    pub fn record_bytes(&self) -> u64 {
        self.v_prime as u64 * 8
    }

    pub fn payload_bytes(&self) -> u64 {
        self.token_count * self.record_bytes()
    }

    fn to_bytes(self) -> [u8; HEADER_LEN as usize] {
        let mut buf = [0u8; HEADER_LEN as usize];
        buf[0..4].copy_from_slice(STORE_MAGIC);
        buf[4..6].copy_from_slice(&self.version.to_le_bytes());
        // bytes 6..8 reserved
        buf[8..12].copy_from_slice(&(self.v_prime as u32).to_le_bytes());
        buf[12..16].copy_from_slice(&(self.vocab_size as u32).to_le_bytes());
        buf[16..24].copy_from_slice(&self.token_count.to_le_bytes());
        buf[24..28].copy_from_slice(&self.checksum.to_le_bytes());
        // bytes 28..32 pad
        buf
    }

    fn from_bytes(buf: &[u8; HEADER_LEN as usize]) -> Result<Self> {
        if &buf[0..4] != STORE_MAGIC {
            return Err(Error::Corrupt("bad magic (incomplete or foreign file)".into()));
        }
        let version = u16::from_le_bytes(buf[4..6].try_into().unwrap());
        if version != STORE_VERSION {
            return Err(Error::Corrupt(format!("unsupported store version {version}")));
        }
        let v_prime = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let vocab_size = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
        let token_count = u64::from_le_bytes(buf[16..24].try_into().unwrap());
        let checksum = u32::from_le_bytes(buf[24..28].try_into().unwrap());
        if v_prime == 0 || v_prime > vocab_size {
            return Err(Error::Corrupt(format!(
                "header V' = {v_prime} out of range for V = {vocab_size}"
            )));
        }
        Ok(TeacherStoreHeader {
            version,
            v_prime,
            vocab_size,
            token_count,
            checksum,
        })
    }
}

/// Append-only writer; the header lands only in [`TeacherStoreWriter::finish`].
pub struct TeacherStoreWriter {
    file: BufWriter<std::fs::File>,
    path: std::path::PathBuf,
    v_prime: usize,
    vocab_size: usize,
    token_count: u64,
    hasher: crc32fast::Hasher,
}

impl TeacherStoreWriter {
    pub fn create(path: &Path, v_prime: usize, vocab_size: usize) -> Result<Self> {
        if v_prime == 0 || v_prime > vocab_size {
            return Err(Error::invalid(format!(
                "V' = {v_prime} must be in 1..=V ({vocab_size})"
            )));
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&[0u8; HEADER_LEN as usize])
            .map_err(|e| Error::io(path, e))?;
        Ok(TeacherStoreWriter {
            file: BufWriter::new(file),
            path: path.to_path_buf(),
            v_prime,
            vocab_size,
            token_count: 0,
            hasher: crc32fast::Hasher::new(),
        })
    }

    pub fn append(&mut self, record: &TruncatedDistribution) -> Result<()> {
        if record.len() != self.v_prime {
            return Err(Error::invalid(format!(
                "record has {} entries, store expects V' = {}",
                record.len(),
                self.v_prime
            )));
        }
        let mut buf = Vec::with_capacity(self.v_prime * 8);
        for &i in record.indices() {
            buf.extend_from_slice(&i.to_le_bytes());
        }
        for &p in record.probs() {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        self.hasher.update(&buf);
        self.file.write_all(&buf).map_err(|e| Error::io(&self.path, e))?;
        self.token_count += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<TeacherStoreHeader> {
        let header = TeacherStoreHeader {
            version: STORE_VERSION,
            v_prime: self.v_prime,
            vocab_size: self.vocab_size,
            token_count: self.token_count,
            checksum: self.hasher.finalize(),
        };
        self.file.flush().map_err(|e| Error::io(&self.path, e))?;
        let mut file = self.file.into_inner().map_err(|e| {
            Error::io(&self.path, std::io::Error::other(e.to_string()))
        })?;
        file.seek(SeekFrom::Start(0)).map_err(|e| Error::io(&self.path, e))?;
        file.write_all(&header.to_bytes())
            .map_err(|e| Error::io(&self.path, e))?;
        file.sync_all().map_err(|e| Error::io(&self.path, e))?;
        Ok(header)
    }
}

/// Validated reader over a teacher store.
pub struct TeacherStore {
    path: std::path::PathBuf,
    header: TeacherStoreHeader,
}

impl TeacherStore {
    /// Opens a store, checking magic, version, size arithmetic, and the
    /// payload crc32 in one streaming pass.
    pub fn open(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let actual_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        let mut reader = BufReader::new(file);

        let mut head = [0u8; HEADER_LEN as usize];
        reader
            .read_exact(&mut head)
            .map_err(|_| Error::Corrupt("file shorter than header".into()))?;
        let header = TeacherStoreHeader::from_bytes(&head)?;

        let expect_len = HEADER_LEN + header.payload_bytes();
        if actual_len != expect_len {
            return Err(Error::Corrupt(format!(
                "file is {actual_len} bytes, header implies {expect_len}"
            )));
        }

        let mut hasher = crc32fast::Hasher::new();
        let mut buf = [0u8; 8192];
        loop {
            let n = reader.read(&mut buf).map_err(|e| Error::io(path, e))?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
        }
        let crc = hasher.finalize();
        if crc != header.checksum {
            return Err(Error::Corrupt(format!(
                "payload crc32 {crc:#010x} does not match header {:#010x}",
                header.checksum
            )));
        }

        Ok(TeacherStore {
            path: path.to_path_buf(),
            header,
        })
    }

    pub fn header(&self) -> &TeacherStoreHeader {
        &self.header
    }

    /// Streams records in write order with constant memory.
    pub fn iter(&self) -> Result<TeacherStoreIter> {
        let file = std::fs::File::open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        let mut reader = BufReader::new(file);
        reader
            .seek(SeekFrom::Start(HEADER_LEN))
            .map_err(|e| Error::io(&self.path, e))?;
        Ok(TeacherStoreIter {
            reader,
            v_prime: self.header.v_prime,
            remaining: self.header.token_count,
            path: self.path.clone(),
        })
    }

    /// Loads every record into memory (used by student training at desk scale).
    pub fn read_all(&self) -> Result<Vec<TruncatedDistribution>> {
        let mut out = Vec::with_capacity(self.header.token_count as usize);
        for record in self.iter()? {
            out.push(record?);
        }
        Ok(out)
    }
}

pub struct TeacherStoreIter {
    reader: BufReader<std::fs::File>,
    v_prime: usize,
    remaining: u64,
    path: std::path::PathBuf,
}

impl Iterator for TeacherStoreIter {
    type Item = Result<TruncatedDistribution>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let mut buf = vec![0u8; self.v_prime * 8];
        if let Err(e) = self.reader.read_exact(&mut buf) {
            self.remaining = 0;
            return Some(Err(Error::io(&self.path, e)));
        }
        let indices: Vec<u32> = buf[..self.v_prime * 4]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let probs: Vec<f32> = buf[self.v_prime * 4..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Some(TruncatedDistribution::from_parts(indices, probs))
    }
}
