//! SASN tensor snapshots.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic      b"SASN"
//! version    u32 = 1
//! step       u64
//! count      u32
//! count × {
//!     name_len  u16, then name_len bytes of UTF-8
//!     dtype     u8   (0 = f32, 1 = f64)
//!     ndim      u8   (1..=4)
//!     dims      ndim × u64
//!     payload   product(dims) × dtype size, row-major
//! }
//! crc32      u32 over every preceding byte (IEEE polynomial)
//! ```

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::sa::ActivationBatch;

pub const MAGIC: [u8; 4] = *b"SASN";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;
pub const MAX_NDIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    /// Values widened to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    fn count_non_finite(&self) -> usize {
        match self {
            TensorData::F32(v) => v.iter().filter(|x| !x.is_finite()).count(),
            TensorData::F64(v) => v.iter().filter(|x| !x.is_finite()).count(),
        }
    }

    /// Bitwise comparison, so that NaN payloads round-trip as equal.
    pub fn bits_eq(&self, other: &TensorData) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let t = Self { name: name.into(), dims, data };
        t.validate()?;
        Ok(t)
    }

    pub fn from_matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Self { name: name.into(), dims: vec![m.rows(), m.cols()], data: TensorData::F64(m.data().to_vec()) }
    }

    pub fn from_batch(name: impl Into<String>, b: &ActivationBatch) -> Self {
        Self { name: name.into(), dims: vec![b.n_samples(), b.n_features()], data: TensorData::F64(b.data().to_vec()) }
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    fn validate(&self) -> Result<()> {
        if self.name.len() > u16::MAX as usize {
            return Err(Error::NameTooLong(self.name.len()));
        }
        if self.dims.is_empty() || self.dims.len() > MAX_NDIM {
            return Err(Error::Malformed(format!(
                "tensor '{}' has {} dims, expected 1..={MAX_NDIM}",
                self.name,
                self.dims.len()
            )));
        }
        if self.dims.contains(&0) {
            return Err(Error::Malformed(format!("tensor '{}' has a zero dimension {:?}", self.name, self.dims)));
        }
        if self.numel() != self.data.len() {
            return Err(Error::Malformed(format!(
                "tensor '{}' has dims {:?} but {} values",
                self.name,
                self.dims,
                self.data.len()
            )));
        }
        Ok(())
    }

    /// The tensor as a matrix. 2-D tensors map directly; higher-rank tensors
    /// are flattened to `(product of leading dims, last dim)`, so a
    /// `(batch, seq, dim)` activation dump becomes one row per token.
    pub fn to_matrix(&self) -> Result<Matrix> {
        let cols = *self.dims.last().unwrap();
        let rows = self.numel() / cols;
        Matrix::new(rows, cols, self.data.to_f64()).map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("tensor '{}': {msg}", self.name)),
            other => other,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Snapshot {
    pub step: u64,
    pub entries: Vec<NamedTensor>,
}

impl Snapshot {
    pub fn new(step: u64) -> Self {
        Self { step, entries: Vec::new() }
    }

    pub fn with(mut self, tensor: NamedTensor) -> Self {
        self.entries.push(tensor);
        self
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.entries.iter().find(|t| t.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for t in &self.entries {
            t.validate()?;
            if !seen.insert(t.name.as_str()) {
                return Err(Error::Malformed(format!("duplicate tensor name '{}'", t.name)));
            }
        }
        if self.entries.len() > u32::MAX as usize {
            return Err(Error::Malformed("too many entries".into()));
        }
        Ok(())
    }

    /// Structural equality with bitwise payload comparison.
    pub fn bits_eq(&self, other: &Snapshot) -> bool {
        self.step == other.step
            && self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.dims == b.dims && a.data.bits_eq(&b.data))
    }
}

pub fn encode_snapshot(snapshot: &Snapshot) -> Result<Vec<u8>> {
    snapshot.validate()?;
    let payload: usize =
        snapshot.entries.iter().map(|t| 2 + t.name.len() + 2 + 8 * t.dims.len() + t.numel() * t.dtype().size()).sum();
    let mut buf = Vec::with_capacity(HEADER_LEN + payload + 4);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&snapshot.step.to_le_bytes());
    buf.extend_from_slice(&(snapshot.entries.len() as u32).to_le_bytes());
    for t in &snapshot.entries {
        buf.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.push(t.dtype().code());
        buf.push(t.dims.len() as u8);
        for &d in &t.dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &t.data {
            TensorData::F32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

/// Writes via a temporary sibling file and an atomic rename, so a partial
/// file never carries the final name.
pub fn write_snapshot(path: impl AsRef<Path>, snapshot: &Snapshot) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_snapshot(snapshot)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FiniteCheck {
    /// Any NaN or infinity is an error.
    Strict,
    /// Non-finite values are counted and reported.
    Lenient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotRead {
    pub snapshot: Snapshot,
    pub non_finite: usize,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(Error::Truncated { offset: self.pos, needed: n, available });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_snapshot(buf: &[u8], check: FiniteCheck) -> Result<SnapshotRead> {
    let mut c = Cursor { buf, pos: 0 };
    let magic: [u8; 4] = c.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::BadVersion(version));
    }
    let step = c.u64()?;
    let count = c.u32()? as usize;

    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|e| Error::Malformed(format!("tensor name is not UTF-8: {e}")))?
            .to_owned();
        let dtype = match c.u8()? {
            0 => DType::F32,
            1 => DType::F64,
            other => return Err(Error::Malformed(format!("unknown dtype code {other} for '{name}'"))),
        };
        let ndim = c.u8()? as usize;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(Error::Malformed(format!("tensor '{name}' has ndim {ndim}")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d = c.u64()?;
            if d == 0 {
                return Err(Error::Malformed(format!("tensor '{name}' has a zero dimension")));
            }
            dims.push(usize::try_from(d).map_err(|_| Error::Malformed(format!("dimension {d} too large")))?);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size()).map(|_| n))
            .ok_or_else(|| Error::Malformed(format!("tensor '{name}' is too large: {dims:?}")))?;
        let raw = c.take(numel * dtype.size())?;
        let data = match dtype {
            DType::F32 => {
                TensorData::F32(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
            }
            DType::F64 => {
                TensorData::F64(raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
            }
        };
        entries.push(NamedTensor { name, dims, data });
    }

    let body_end = c.pos;
    let stored = c.u32()?;
    if c.pos != buf.len() {
        return Err(Error::Malformed(format!("{} trailing bytes after checksum", buf.len() - c.pos)));
    }
    let computed = crc32fast::hash(&buf[..body_end]);
    if stored != computed {
        return Err(Error::CrcMismatch { stored, computed });
    }

    let snapshot = Snapshot { step, entries };
    snapshot.validate()?;
    let non_finite: usize = snapshot.entries.iter().map(|t| t.data.count_non_finite()).sum();
    if check == FiniteCheck::Strict && non_finite > 0 {
        let bad =
            snapshot.entries.iter().find(|t| t.data.count_non_finite() > 0).map(|t| t.name.clone()).unwrap_or_default();
        return Err(Error::NonFinite(format!("{non_finite} non-finite values (first in tensor '{bad}')")));
    }
    Ok(SnapshotRead { snapshot, non_finite })
}

pub fn read_snapshot(path: impl AsRef<Path>, check: FiniteCheck) -> Result<SnapshotRead> {
    let bytes = fs::read(path)?;
    decode_snapshot(&bytes, check)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w_2x2() -> Snapshot {
        Snapshot::new(7).with(NamedTensor::new("w", vec![2, 2], TensorData::F64(vec![1.0, 2.0, 3.0, 4.0])).unwrap())
    }

    #[test]
    fn empty_snapshot_layout() {
        let bytes = encode_snapshot(&Snapshot::new(0)).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 4);
        assert_eq!(&bytes[..4], b"SASN");
        let back = decode_snapshot(&bytes, FiniteCheck::Strict).unwrap();
        assert_eq!(back.snapshot, Snapshot::new(0));
    }

    #[test]
    fn single_tensor_size() {
        // header + (name_len + name) + dtype + ndim + dims + payload + crc
        let bytes = encode_snapshot(&w_2x2()).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + (2 + 1) + 1 + 1 + 16 + 32 + 4);
    }

    #[test]
    fn corrupt_and_truncated() {
        let mut bytes = encode_snapshot(&w_2x2()).unwrap();
        let n = bytes.len();
        assert!(matches!(decode_snapshot(&bytes[..n - 20], FiniteCheck::Strict), Err(Error::Truncated { .. })));
        bytes[n - 1] ^= 0x01;
        assert!(matches!(decode_snapshot(&bytes, FiniteCheck::Strict), Err(Error::CrcMismatch { .. })));
        bytes[n - 1] ^= 0x01;
        bytes[0] = b'X';
        assert!(matches!(decode_snapshot(&bytes, FiniteCheck::Strict), Err(Error::BadMagic(_))));
        bytes[0] = b'S';
        bytes[4] = 2;
        assert!(matches!(decode_snapshot(&bytes, FiniteCheck::Strict), Err(Error::BadVersion(2))));
        bytes[4] = 1;
        bytes.push(0);
        assert!(matches!(decode_snapshot(&bytes, FiniteCheck::Strict), Err(Error::Malformed(_))));
    }

    #[test]
    fn non_finite_policy() {
        let s = Snapshot::new(1)
            .with(NamedTensor::new("a", vec![3], TensorData::F32(vec![1.0, f32::NAN, f32::INFINITY])).unwrap());
        let bytes = encode_snapshot(&s).unwrap();
        assert!(matches!(decode_snapshot(&bytes, FiniteCheck::Strict), Err(Error::NonFinite(_))));
        let r = decode_snapshot(&bytes, FiniteCheck::Lenient).unwrap();
        assert_eq!(r.non_finite, 2);
        assert!(r.snapshot.bits_eq(&s));
    }

    #[test]
    fn f32_widens_exactly() {
        let vals = vec![0.1f32, -3.25, 1e-30, f32::MAX];
        let s = Snapshot::new(0).with(NamedTensor::new("x", vec![4], TensorData::F32(vals.clone())).unwrap());
        let back = decode_snapshot(&encode_snapshot(&s).unwrap(), FiniteCheck::Strict).unwrap();
        let wide = back.snapshot.entries[0].data.to_f64();
        for (w, v) in wide.iter().zip(&vals) {
            assert_eq!(*w, f64::from(*v));
            assert_eq!(*w as f32, *v);
        }
    }

    #[test]
    fn writer_rejects_invalid_snapshots() {
        let long = "n".repeat(70_000);
        let s = Snapshot::new(0).with(NamedTensor { name: long, dims: vec![1], data: TensorData::F64(vec![0.0]) });
        assert!(matches!(encode_snapshot(&s), Err(Error::NameTooLong(70_000))));

        let t = NamedTensor::new("a", vec![1], TensorData::F64(vec![0.0])).unwrap();
        let dup = Snapshot::new(0).with(t.clone()).with(t);
        assert!(matches!(encode_snapshot(&dup), Err(Error::Malformed(_))));

        assert!(NamedTensor::new("a", vec![2, 2], TensorData::F64(vec![0.0; 3])).is_err());
        assert!(NamedTensor::new("a", vec![1, 1, 1, 1, 1], TensorData::F64(vec![0.0])).is_err());
    }

    #[test]
    fn three_d_tensor_flattens_to_token_rows() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let t = NamedTensor::new("act", vec![2, 3, 4], TensorData::F64(data)).unwrap();
        let m = t.to_matrix().unwrap();
        assert_eq!(m.shape(), (6, 4));
        assert_eq!(m.row(5), &[20.0, 21.0, 22.0, 23.0]);
    }
}
