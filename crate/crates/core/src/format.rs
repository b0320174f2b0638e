//! Little-endian binary containers.
//!
//! * `UBEF` feature file: magic, version u32 = 1, L, P, C as u32, then
//!   `L·P·C` f32 values (level-major, then patch, then channel).
//! * `UBER` response file: magic, version u32 = 1, trials u32, voxels u32,
//!   then `trials·voxels` f32 values row-major.
//! * `UBEC` tensor archive (checkpoints, registries): magic, version u32 = 1,
//!   tensor count u32, then per tensor: name length u16, UTF-8 name, rank u8,
//!   dims as u32, f32 values; then a u32 length and a UTF-8 JSON metadata
//!   trailer.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const FEATURE_MAGIC: &[u8; 4] = b"UBEF";
pub const RESPONSE_MAGIC: &[u8; 4] = b"UBER";
pub const ARCHIVE_MAGIC: &[u8; 4] = b"UBEC";

/// Upper bound on the element count a header may declare.
const MAX_ELEMENTS: u64 = 1 << 34;

#[derive(Debug, Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s<T: Scalar>(&mut self, xs: &[T]) {
        self.buf.reserve(xs.len() * 4);
        for &x in xs {
            self.buf.extend_from_slice(&(x.to_f64_lossy() as f32).to_le_bytes());
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8], what: &'a str) -> Self {
        ByteReader { buf, pos: 0, what }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "{}: needed {} bytes at offset {}, {} left",
                self.what,
                n,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4).map_err(|_| Error::Format(format!("{}: missing magic", self.what)))?;
        if got != expected {
            return Err(Error::Format(format!(
                "{}: bad magic {:?}, expected {:?}",
                self.what,
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    pub fn version(&mut self) -> Result<()> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported version {}, expected {}",
                self.what, v, FORMAT_VERSION
            )));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32s<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect())
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Product of header dimensions, rejecting overflow and absurd sizes.
pub fn checked_count(dims: &[u32], what: &str) -> Result<usize> {
    let mut n: u64 = 1;
    for &d in dims {
        if d == 0 {
            return Err(Error::Format(format!("{what}: zero dimension in {dims:?}")));
        }
        n = n
            .checked_mul(d as u64)
            .filter(|&n| n <= MAX_ELEMENTS)
            .ok_or_else(|| Error::Format(format!("{what}: dimensions {dims:?} overflow")))?;
    }
    Ok(n as usize)
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Named tensors plus a JSON metadata trailer.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive<T> {
    pub tensors: Vec<(String, Tensor<T>)>,
    pub metadata: serde_json::Value,
}

impl<T: Scalar> Archive<T> {
    pub fn new(metadata: serde_json::Value) -> Self {
        Archive { tensors: Vec::new(), metadata }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("archive has no tensor named {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.bytes(ARCHIVE_MAGIC);
        w.u32(FORMAT_VERSION);
        w.u32(self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize || t.shape().len() > u8::MAX as usize {
                return Err(Error::Format(format!("tensor {name:?} cannot be encoded")));
            }
            w.u16(nb.len() as u16);
            w.bytes(nb);
            w.u8(t.shape().len() as u8);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            w.f32s(t.data());
        }
        let json = serde_json::to_vec(&self.metadata)?;
        w.u32(json.len() as u32);
        w.bytes(&json);
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "tensor archive");
        r.magic(ARCHIVE_MAGIC)?;
        r.version()?;
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let dims: Vec<u32> = (0..rank).map(|_| r.u32()).collect::<Result<_>>()?;
            let n = checked_count(&dims, &name)?;
            let data = r.f32s(n)?;
            let t = Tensor::new(dims.iter().map(|&d| d as usize).collect(), data)?;
            tensors.push((name, t));
        }
        let len = r.u32()? as usize;
        let metadata = serde_json::from_slice(r.take(len)?)?;
        Ok(Archive { tensors, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}
