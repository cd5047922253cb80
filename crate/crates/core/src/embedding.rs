//! Fixed-dimension embedding sets and the `EMB1` file format.
//!
//! Layout: magic `EMB1`, `count: u32`, `dim: u32`, `modality: u8`
//! (0 audio-side, 1 text-side), `source: u8` (0 real, 1 generated), then
//! `count * dim` little-endian `f32` values row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    AudioSide,
    TextSide,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Real,
    Generated,
}

impl Modality {
    fn tag(self) -> u8 {
        match self {
            Modality::AudioSide => 0,
            Modality::TextSide => 1,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Modality::AudioSide),
            1 => Ok(Modality::TextSide),
            _ => Err(Error::Corruption(format!("unknown modality tag {t}"))),
        }
    }
}

impl Source {
    fn tag(self) -> u8 {
        match self {
            Source::Real => 0,
            Source::Generated => 1,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Source::Real),
            1 => Ok(Source::Generated),
            _ => Err(Error::Corruption(format!("unknown source tag {t}"))),
        }
    }
}

/// `N x D` embeddings from one modality; `N >= 1`, all entries finite.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet<T> {
    dim: usize,
    data: Vec<T>,
    pub modality: Modality,
    pub source: Source,
}

impl<T: Scalar> EmbeddingSet<T> {
    pub fn new(dim: usize, data: Vec<T>, modality: Modality, source: Source) -> Result<Self> {
        ensure(dim > 0 && !data.is_empty() && data.len().is_multiple_of(dim), || {
            format!("{} values do not form a non-empty set of {dim}-d rows", data.len())
        })?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput { set: format!("{modality:?}/{source:?}"), detail: format!("non-finite entry {i}") });
        }
        Ok(Self { dim, data, modality, source })
    }

    pub fn from_rows(rows: &[Vec<T>], modality: Modality, source: Source) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        ensure(rows.iter().all(|r| r.len() == dim), || "rows of unequal length".into())?;
        Self::new(dim, rows.concat(), modality, source)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks(self.dim)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Rows `[start, start + len)` as a new set.
    pub fn subset(&self, start: usize, len: usize) -> Result<Self> {
        ensure(len > 0 && start + len <= self.len(), || format!("rows {start}..{} of {}", start + len, self.len()))?;
        Self::new(self.dim, self.data[start * self.dim..(start + len) * self.dim].to_vec(), self.modality, self.source)
    }

    pub fn mean(&self) -> Vec<T> {
        let mut m = vec![T::zero(); self.dim];
        for r in self.rows() {
            m.iter_mut().zip(r).for_each(|(a, &b)| *a = *a + b);
        }
        let n = T::of(self.len() as f64);
        m.iter_mut().for_each(|a| *a = *a / n);
        m
    }

    pub fn cast<U: Scalar>(&self) -> EmbeddingSet<U> {
        EmbeddingSet {
            dim: self.dim,
            data: self.data.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
            modality: self.modality,
            source: self.source,
        }
    }
}

/// Contents of an `EMB1` file, which may hold zero rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Emb1 {
    pub dim: usize,
    pub count: usize,
    pub modality: Modality,
    pub source: Source,
    pub data: Vec<f32>,
}

impl Emb1 {
    pub fn from_set<T: Scalar>(set: &EmbeddingSet<T>) -> Self {
        Self {
            dim: set.dim(),
            count: set.len(),
            modality: set.modality,
            source: set.source,
            data: set.data().iter().map(|v| v.to_f64_lossy() as f32).collect(),
        }
    }

    pub fn empty(dim: usize, modality: Modality, source: Source) -> Self {
        Self { dim, count: 0, modality, source, data: Vec::new() }
    }

    pub fn into_set<T: Scalar>(self) -> Result<EmbeddingSet<T>> {
        EmbeddingSet::new(self.dim, self.data.into_iter().map(|v| T::of(v as f64)).collect(), self.modality, self.source)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        ensure(self.data.len() == self.count * self.dim, || "EMB1 payload size mismatch".into())?;
        w.write_all(EMB_MAGIC)?;
        w.write_all(&(self.count as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&[self.modality.tag(), self.source.tag()])?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let eof = |e: std::io::Error| {
            if e.kind() == ErrorKind::UnexpectedEof {
                Error::Corruption("truncated EMB1 file".into())
            } else {
                Error::Io(e)
            }
        };
        let mut head = [0u8; 14];
        r.read_exact(&mut head).map_err(eof)?;
        if &head[..4] != EMB_MAGIC {
            return Err(Error::Corruption("bad EMB1 magic".into()));
        }
        let count = u32::from_le_bytes([head[4], head[5], head[6], head[7]]) as usize;
        let dim = u32::from_le_bytes([head[8], head[9], head[10], head[11]]) as usize;
        let modality = Modality::from_tag(head[12])?;
        let source = Source::from_tag(head[13])?;
        let mut raw = vec![0u8; count * dim * 4];
        r.read_exact(&mut raw).map_err(eof)?;
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Corruption("trailing bytes after EMB1 payload".into()));
        }
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Self { dim, count, modality, source, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

/// Scales `v` to unit Euclidean norm.
pub fn l2_normalize<T: Scalar>(v: &mut [T]) -> Result<()> {
    let n = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    ensure(n > T::zero() && n.is_finite(), || "cannot normalize a zero or non-finite vector".into())?;
    v.iter_mut().for_each(|x| *x = *x / n);
    Ok(())
}
