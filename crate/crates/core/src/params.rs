//! Named parameter storage and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "BWSCKPT\0"
//! version  u32      1
//! count    u32      number of entries
//! entry*   name_len u32, name (UTF-8), ndim u32, dims u64 × ndim,
//!          values f64 × product(dims)
//! crc32    u32      CRC-32 (IEEE) of every preceding byte
//! ```

use std::ops::Index;
use std::path::Path;
use std::sync::Arc;

use bws_tensor::{Real, Rng, Tape, Tensor, Var};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BWSCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered table of named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real = f64> {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor<T>>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(Arc::new(value));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter().map(|t| t.as_ref()))
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }

    /// Register every parameter on `tape` as a gradient-collecting leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound { vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect() }
    }

    /// Register every parameter on `tape` as a constant.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound { vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect() }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(|t| Arc::new(t.cast())).collect() }
    }

    /// Overwrite every tensor from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let src = other
                .by_name(name)
                .ok_or_else(|| Error::contract(format!("checkpoint is missing parameter {name}")))?;
            if src.shape() != self.tensors[i].shape() {
                return Err(Error::contract(format!(
                    "parameter {name}: checkpoint shape {:?} differs from expected {:?}",
                    src.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = Arc::new(src.clone());
        }
        if other.len() != self.len() {
            return Err(Error::contract(format!(
                "checkpoint has {} parameters, expected {}",
                other.len(),
                self.len()
            )));
        }
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.numel() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (name, t) in self.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if bytes.len() < 4 {
            return Err(r.fail("file shorter than checksum"));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Parse { path: path.into(), offset: body.len(), reason: "CRC-32 mismatch".into() });
        }
        r.bytes = body;
        if r.take(8)? != CHECKPOINT_MAGIC {
            r.pos = 0;
            return Err(r.fail("bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            r.pos -= 4;
            return Err(r.fail(&format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let start = r.pos;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Parse { path: path.into(), offset: start, reason: "name is not UTF-8".into() })?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| r.fail("tensor too large"))?)?;
            let data = raw.chunks_exact(8).map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes")))).collect();
            store.add(name, Tensor::new(shape, data)?);
        }
        if r.pos != r.bytes.len() {
            return Err(r.fail("trailing bytes before checksum"));
        }
        Ok(store)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: &str) -> Error {
        Error::Parse { path: self.path.into(), offset: self.pos, reason: reason.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.fail("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parameters of a [`ParamStore`] registered on one tape.
pub struct Bound<'t, T: Real = f64> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }
}

impl<'t, T: Real> Index<ParamId> for Bound<'t, T> {
    type Output = Var<'t, T>;

    fn index(&self, id: ParamId) -> &Self::Output {
        &self.vars[id.0]
    }
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(gain / fan_in)`.
    FanIn { gain: f64 },
    Zeros,
}

pub fn init_tensor<T: Real>(shape: &[usize], fan_in: usize, init: Init, rng: &mut Rng) -> Tensor<T> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::FanIn { gain } => {
            let std = (gain / fan_in.max(1) as f64).sqrt();
            rng.normal_tensor::<f64>(shape).map(|v| v * std).cast()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut rng = Rng::new(4);
        let mut s = ParamStore::new();
        s.add("a.weight", rng.normal_tensor(&[2, 3, 3, 3]));
        s.add("a.bias", Tensor::zeros(&[2]));
        s.add("odd", Tensor::from_f64(vec![3], &[f64::MIN_POSITIVE, -0.0, 1e300]).unwrap());
        s
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let s = sample_store();
        let bytes = s.to_checkpoint_bytes();
        let back = ParamStore::<f64>::from_checkpoint_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.len(), s.len());
        for ((na, a), (nb, b)) in s.iter().zip(back.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.shape(), b.shape());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.to_checkpoint_bytes(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample_store().to_checkpoint_bytes();
        bytes[20] ^= 1;
        let err = ParamStore::<f64>::from_checkpoint_bytes(&bytes, Path::new("mem")).unwrap_err();
        assert!(err.to_string().contains("CRC"), "{err}");
        let truncated = &sample_store().to_checkpoint_bytes()[..30];
        assert!(ParamStore::<f64>::from_checkpoint_bytes(truncated, Path::new("mem")).is_err());
    }

    #[test]
    fn header_fields_are_little_endian() {
        let bytes = sample_store().to_checkpoint_bytes();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
    }
}
