use std::collections::HashSet;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::feats::FeatureMatrix;

pub const EMBEDDING_MAGIC: [u8; 4] = *b"SVEB";
pub const FEATURE_MAGIC: [u8; 4] = *b"SVFM";
pub const ARCHIVE_VERSION: u16 = 1;

/// Bounds-checked little-endian cursor.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Truncated(format!("{what}: need {n} bytes at offset {}, file has {}", self.pos, self.buf.len()))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4, "magic")?.try_into().expect("4 bytes");
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Truncated(what.into()))?, what)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Truncated(what.into()))?, what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    /// u16-length-prefixed UTF-8 string.
    pub(crate) fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u16(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Parse(format!("{what}: invalid UTF-8")))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Parse(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub(crate) fn put_string(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len: u16 = s
        .len()
        .try_into()
        .map_err(|_| Error::InvalidLength(format!("string of {} bytes exceeds u16 length prefix", s.len())))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

/// Fixed-dimension f32 vectors keyed by unique utterance id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingArchive {
    pub dim: usize,
    pub records: Vec<(String, Vec<f32>)>,
}

impl EmbeddingArchive {
    pub fn new(dim: usize) -> Self {
        Self { dim, records: Vec::new() }
    }

    pub fn push(&mut self, id: impl Into<String>, vec: Vec<f32>) -> Result<()> {
        if vec.len() != self.dim {
            return Err(Error::DimMismatch { expected: self.dim, found: vec.len() });
        }
        self.records.push((id.into(), vec));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends all records of `other`; dims must agree and ids stay unique.
    pub fn concat(&mut self, other: &EmbeddingArchive) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::DimMismatch { expected: self.dim, found: other.dim });
        }
        let seen: HashSet<&str> = self.records.iter().map(|(id, _)| id.as_str()).collect();
        if let Some((id, _)) = other.records.iter().find(|(id, _)| seen.contains(id.as_str())) {
            return Err(Error::DuplicateId(id.clone()));
        }
        self.records.extend(other.records.iter().cloned());
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(18 + self.records.len() * (self.dim * 4 + 16));
        out.extend_from_slice(&EMBEDDING_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        let mut seen = HashSet::with_capacity(self.records.len());
        for (id, vec) in &self.records {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
            if vec.len() != self.dim {
                return Err(Error::DimMismatch { expected: self.dim, found: vec.len() });
            }
            put_string(&mut out, id)?;
            for v in vec {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(EMBEDDING_MAGIC)?;
        let version = r.u16("version")?;
        if version != ARCHIVE_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let dim = r.u32("dim")? as usize;
        let count = r.u64("count")?;
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for i in 0..count {
            let id = r.string(&format!("record {i} id"))?;
            if !seen.insert(id.clone()) {
                return Err(Error::DuplicateId(id));
            }
            let vec = r.f32s(dim, &format!("record {i} payload"))?;
            records.push((id, vec));
        }
        r.finish()?;
        Ok(Self { dim, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        super::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads and checks the stored dimension.
    pub fn load_with_dim(path: impl AsRef<Path>, dim: usize) -> Result<Self> {
        let a = Self::load(path)?;
        if a.dim != dim {
            return Err(Error::DimMismatch { expected: dim, found: a.dim });
        }
        Ok(a)
    }
}

/// Variable-length feature matrices (`frames x dim`, f32) keyed by utterance id.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureArchive {
    pub dim: usize,
    pub records: Vec<(String, FeatureMatrix)>,
}

impl FeatureArchive {
    pub fn new(dim: usize) -> Self {
        Self { dim, records: Vec::new() }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&FEATURE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for (id, m) in &self.records {
            if m.dim() != self.dim {
                return Err(Error::DimMismatch { expected: self.dim, found: m.dim() });
            }
            put_string(&mut out, id)?;
            out.extend_from_slice(&(m.n_frames() as u32).to_le_bytes());
            out.push(u8::from(m.cmn_applied));
            for &v in m.frames.iter() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(FEATURE_MAGIC)?;
        let version = r.u16("version")?;
        if version != ARCHIVE_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let dim = r.u32("dim")? as usize;
        let count = r.u64("count")?;
        let mut records = Vec::new();
        for i in 0..count {
            let id = r.string(&format!("record {i} id"))?;
            let frames = r.u32(&format!("record {i} frames"))? as usize;
            let cmn = r.take(1, "cmn flag")?[0] != 0;
            let data = r.f32s(frames * dim, &format!("record {i} payload"))?;
            let m = Array2::from_shape_vec((frames, dim), data.into_iter().map(f64::from).collect())
                .map_err(|e| Error::Internal(e.to_string()))?;
            records.push((id, FeatureMatrix { frames: m, cmn_applied: cmn }));
        }
        r.finish()?;
        Ok(Self { dim, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        super::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
