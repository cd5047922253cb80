//! `LCL1` checkpoint container.
//!
//! Layout: the four magic bytes `LCL1`, then a sequence of records until end
//! of file. Each record is `name_len: u32`, the UTF-8 name, `rank: u32`,
//! `rank` dims as `u32`, then `prod(dims)` little-endian `f32` values in
//! row-major order. All integers are little-endian.
//!
//! Metadata rides along as zero-length records named `__meta/<key>=<value>`.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LCL1";
const META_PREFIX: &str = "__meta/";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Entry {
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        Self {
            name: name.into(),
            dims: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.to_f64_lossy() as f32).collect(),
        }
    }

    pub fn meta(key: &str, value: &str) -> Self {
        Self { name: format!("{META_PREFIX}{key}={value}"), dims: vec![0], data: Vec::new() }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::new(self.dims.clone(), self.data.iter().map(|&v| T::of(v as f64)).collect())
            .map_err(|e| Error::Corruption(format!("record {}: {e}", self.name)))
    }

    /// `(key, value)` when this is a metadata record.
    pub fn as_meta(&self) -> Option<(&str, &str)> {
        self.name.strip_prefix(META_PREFIX)?.split_once('=')
    }
}

pub fn write_entries<W: Write>(mut w: W, entries: &[Entry]) -> Result<()> {
    w.write_all(MAGIC)?;
    for e in entries {
        let numel: usize = e.dims.iter().product();
        if numel != e.data.len() {
            return Err(Error::Contract(format!("record {}: dims {:?} vs {} values", e.name, e.dims, e.data.len())));
        }
        w.write_all(&(e.name.len() as u32).to_le_bytes())?;
        w.write_all(e.name.as_bytes())?;
        w.write_all(&(e.dims.len() as u32).to_le_bytes())?;
        for &d in &e.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &e.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == ErrorKind::UnexpectedEof {
        Error::Corruption("truncated checkpoint record".into())
    } else {
        Error::Io(e)
    }
}

pub fn read_entries<R: Read>(mut r: R) -> Result<Vec<Entry>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Corruption(format!("bad checkpoint magic {magic:?}")));
    }
    let mut entries = Vec::new();
    loop {
        let mut first = [0u8; 4];
        match r.read(&mut first)? {
            0 => break,
            n if n < 4 => r.read_exact(&mut first[n..]).map_err(truncated)?,
            _ => {}
        }
        let name_len = u32::from_le_bytes(first) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| Error::Corruption("record name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let dims = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw).map_err(truncated)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        entries.push(Entry { name, dims, data });
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &[Entry]) -> Result<()> {
    write_entries(BufWriter::new(File::create(path)?), entries)
}

pub fn load(path: &Path) -> Result<Vec<Entry>> {
    read_entries(BufReader::new(File::open(path)?))
}

/// One record per parameter, names prefixed with `prefix`.
pub fn store_entries<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Vec<Entry> {
    store.names().iter().zip(store.tensors()).map(|(n, t)| Entry::from_tensor(format!("{prefix}{n}"), t)).collect()
}

/// Restores `store` from the records carrying `prefix`.
pub fn restore_store<T: Scalar>(store: &mut ParamStore<T>, entries: &[Entry], prefix: &str) -> Result<()> {
    let pairs = entries
        .iter()
        .filter(|e| e.as_meta().is_none())
        .filter_map(|e| e.name.strip_prefix(prefix).map(|n| e.to_tensor().map(|t| (n.to_string(), t))))
        .collect::<Result<Vec<_>>>()?;
    store.assign_from(&pairs)
}

pub fn meta_value<'a>(entries: &'a [Entry], key: &str) -> Option<&'a str> {
    entries.iter().filter_map(Entry::as_meta).find(|(k, _)| *k == key).map(|(_, v)| v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout_is_exact() {
        let e = Entry { name: "ab".into(), dims: vec![2], data: vec![1.0, -2.5] };
        let mut buf = Vec::new();
        write_entries(&mut buf, &[e]).unwrap();
        let mut want = b"LCL1".to_vec();
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn round_trip_with_meta() {
        let t = Tensor::<f32>::new(vec![2, 3], (0..6).map(|i| i as f32 * 0.1).collect()).unwrap();
        let entries = vec![Entry::meta("hash", "abc"), Entry::from_tensor("w", &t)];
        let mut buf = Vec::new();
        write_entries(&mut buf, &entries).unwrap();
        let back = read_entries(buf.as_slice()).unwrap();
        assert_eq!(back, entries);
        assert_eq!(meta_value(&back, "hash"), Some("abc"));
        assert_eq!(back[1].to_tensor::<f32>().unwrap(), t);
    }

    #[test]
    fn detects_corruption() {
        assert!(matches!(read_entries(&b"LCL2"[..]), Err(Error::Corruption(_))));
        let mut buf = Vec::new();
        write_entries(&mut buf, &[Entry { name: "x".into(), dims: vec![3], data: vec![0.0; 3] }]).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(matches!(read_entries(buf.as_slice()), Err(Error::Corruption(_))));
    }
}
