//! Binary checkpoint format.
//!
//! ```text
//! "AFCK" | u32 version | u32 count | count x entry
//! entry: u16 name_len | name (UTF-8) | u8 dtype | u8 rank | rank x u32 dim | values (LE)
//! ```
//!
//! All integers are little-endian. dtype 0 is f32, 1 is f64.

use std::io::{Read, Write};
use std::path::Path;

use crate::element::{DType, Element};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AFCK";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected \"AFCK\"")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("unknown dtype code {0}")]
    DType(u8),
    #[error("tensor name is not valid UTF-8")]
    Name,
    #[error("tensor name longer than 65535 bytes: {0}")]
    NameTooLong(String),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("tensor {name} has dtype {found:?}, expected {expected:?}")]
    WrongDType {
        name: String,
        found: DType,
        expected: DType,
    },
    #[error("tensor {0} not found")]
    Missing(String),
}

/// A tensor of either precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }
}

/// Converts between `Tensor<T>` and [`AnyTensor`] without copying precision.
pub trait CheckpointElement: Element {
    fn wrap(t: Tensor<Self>) -> AnyTensor;
    fn unwrap(t: &AnyTensor) -> Option<&Tensor<Self>>;
}

impl CheckpointElement for f32 {
    fn wrap(t: Tensor<f32>) -> AnyTensor {
        AnyTensor::F32(t)
    }
    fn unwrap(t: &AnyTensor) -> Option<&Tensor<f32>> {
        match t {
            AnyTensor::F32(t) => Some(t),
            AnyTensor::F64(_) => None,
        }
    }
}

impl CheckpointElement for f64 {
    fn wrap(t: Tensor<f64>) -> AnyTensor {
        AnyTensor::F64(t)
    }
    fn unwrap(t: &AnyTensor) -> Option<&Tensor<f64>> {
        match t {
            AnyTensor::F64(t) => Some(t),
            AnyTensor::F32(_) => None,
        }
    }
}

/// Ordered list of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, AnyTensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<T: CheckpointElement>(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.push((name.into(), T::wrap(t)));
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_as<T: CheckpointElement>(&self, name: &str) -> Result<&Tensor<T>, CheckpointError> {
        let t = self
            .get(name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
        T::unwrap(t).ok_or_else(|| CheckpointError::WrongDType {
            name: name.to_string(),
            found: t.dtype(),
            expected: T::DTYPE,
        })
    }

    /// Entries of precision `T` whose names start with `prefix`, prefix stripped.
    pub fn with_prefix<'a, T: CheckpointElement>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (&'a str, &'a Tensor<T>)> + 'a {
        self.tensors.iter().filter_map(move |(n, t)| {
            let rest = n.strip_prefix(prefix)?;
            T::unwrap(t).map(|t| (rest, t))
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let len: u16 = name
                .len()
                .try_into()
                .map_err(|_| CheckpointError::NameTooLong(name.clone()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().code());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match t {
                AnyTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                AnyTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = ByteReader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::Name)?
                .to_string();
            let code = r.take(1)?[0];
            let dtype = DType::from_code(code).ok_or(CheckpointError::DType(code))?;
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * dtype.size_of())?;
            let t = match dtype {
                DType::F32 => AnyTensor::F32(decode(&shape, raw)),
                DType::F64 => AnyTensor::F64(decode(&shape, raw)),
            };
            tensors.push((name, t));
        }
        Ok(Checkpoint { tensors })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), CheckpointError> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn decode<T: Element>(shape: &[usize], raw: &[u8]) -> Tensor<T> {
    let size = T::DTYPE.size_of();
    let data = raw.chunks_exact(size).map(T::read_le).collect();
    Tensor::from_vec(shape, data).expect("length computed from shape")
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
