//! The `.fjla` tensor container.
//!
//! ```text
//! "FJLA" | u32 version | u32 count |
//!   count × ( u16 name_len | name | u8 dtype | u8 ndim | ndim × u64 dim | payload ) |
//! u32 crc32(everything after the magic)
//! ```
//! All integers and payload values are little-endian.

use crate::error::{DecodeError, Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FJLA";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "fjla";

/// One named tensor in wire form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTensor {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<u64>,
    pub payload: Vec<u8>,
}

impl RawTensor {
    pub fn from_tensor<S: Scalar>(name: impl Into<String>, t: &Tensor<S>) -> Self {
        let mut payload = Vec::with_capacity(t.len() * S::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        RawTensor {
            name: name.into(),
            dtype: S::DTYPE,
            dims: t.shape().iter().map(|&d| d as u64).collect(),
            payload,
        }
    }

    /// Decodes the payload, converting between element types if needed.
    pub fn to_tensor<S: Scalar>(&self) -> Result<Tensor<S>> {
        let width = self.dtype.size();
        let values: Vec<S> = match self.dtype {
            DType::F64 => self
                .payload
                .chunks_exact(width)
                .map(|c| S::lit(f64::read_le(c)))
                .collect(),
            DType::F32 => self
                .payload
                .chunks_exact(width)
                .map(|c| S::lit(f32::read_le(c) as f64))
                .collect(),
        };
        let shape: Vec<usize> = self.dims.iter().map(|&d| d as usize).collect();
        Tensor::new(shape, values).map_err(|e| match e {
            Error::NonFinite(_) => {
                DecodeError::Malformed(format!("non-finite value in `{}`", self.name)).into()
            }
            other => other,
        })
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product::<u64>() as usize
    }
}

pub fn encode(tensors: &[RawTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| Error::contract("too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for t in tensors {
        let name_len = u16::try_from(t.name.len())
            .map_err(|_| Error::contract(format!("tensor name `{}` too long", t.name)))?;
        let ndim = u8::try_from(t.dims.len()).map_err(|_| Error::contract("too many dimensions"))?;
        if t.payload.len() != t.numel() * t.dtype.size() {
            return Err(Error::contract(format!("payload of `{}` does not match dims", t.name)));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dtype as u8);
        out.push(ndim);
        for d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&t.payload);
    }
    let crc = crc32fast::hash(&out[MAGIC.len()..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).ok_or(DecodeError::Truncated(what))?;
        let s = self.buf.get(self.pos..end).ok_or(DecodeError::Truncated(what))?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, DecodeError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<RawTensor>, DecodeError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(DecodeError::BadMagic(magic.try_into().unwrap()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(DecodeError::Version(version));
    }
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| DecodeError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let code = r.u8("dtype")?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| DecodeError::Malformed(format!("unknown dtype {code} for `{name}`")))?;
        let ndim = r.u8("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u64("dims")?);
        }
        let numel = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size() as u64))
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| DecodeError::Malformed(format!("dims of `{name}` overflow")))?;
        let payload = r.take(numel, "payload")?.to_vec();
        tensors.push(RawTensor {
            name,
            dtype,
            dims,
            payload,
        });
    }
    let body_end = r.pos;
    let stored = r.u32("checksum")?;
    if r.pos != bytes.len() {
        return Err(DecodeError::Malformed(format!(
            "{} trailing bytes after checksum",
            bytes.len() - r.pos
        )));
    }
    let computed = crc32fast::hash(&bytes[MAGIC.len()..body_end]);
    if stored != computed {
        return Err(DecodeError::Checksum { stored, computed });
    }
    Ok(tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<RawTensor> {
        vec![
            RawTensor::from_tensor("a", &Tensor::<f64>::from_fn([2, 3], |i| i as f64 * 0.5)),
            RawTensor::from_tensor("b", &Tensor::<f32>::from_fn([4], |i| -(i as f32))),
        ]
    }

    #[test]
    fn layout_of_empty_container() {
        let bytes = encode(&[]).unwrap();
        assert_eq!(&bytes[..4], b"FJLA");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &0u32.to_le_bytes());
        assert_eq!(bytes.len(), 16);
        let crc = crc32fast::hash(&bytes[4..12]);
        assert_eq!(&bytes[12..], &crc.to_le_bytes());
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn header_of_one_tensor() {
        let t = Tensor::<f64>::new([1], vec![2.0]).unwrap();
        let bytes = encode(&[RawTensor::from_tensor("w", &t)]).unwrap();
        // u16 len, "w", dtype, ndim, u64 dim, 8-byte payload
        assert_eq!(&bytes[12..14], &1u16.to_le_bytes());
        assert_eq!(bytes[14], b'w');
        assert_eq!(bytes[15], 0);
        assert_eq!(bytes[16], 1);
        assert_eq!(&bytes[17..25], &1u64.to_le_bytes());
        assert_eq!(&bytes[25..33], &2.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 37);
    }

    #[test]
    fn roundtrip_mixed_dtypes() {
        let raw = sample();
        let bytes = encode(&raw).unwrap();
        assert_eq!(decode(&bytes).unwrap(), raw);
        let back: Tensor<f32> = raw[1].to_tensor().unwrap();
        assert_eq!(back.data(), &[0.0, -1.0, -2.0, -3.0]);
    }

    #[test]
    fn distinct_errors() {
        let bytes = encode(&sample()).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(DecodeError::BadMagic(_))));

        let mut bad = bytes.clone();
        bad[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert_eq!(decode(&bad), Err(DecodeError::Version(2)));

        assert!(matches!(
            decode(&bytes[..bytes.len() - 10]),
            Err(DecodeError::Truncated(_))
        ));

        let mut bad = bytes.clone();
        let mid = bytes.len() - 8;
        bad[mid] ^= 0x01;
        assert!(matches!(decode(&bad), Err(DecodeError::Checksum { .. })));
    }

    #[test]
    fn every_single_byte_flip_is_detected() {
        let bytes = encode(&sample()).unwrap();
        for i in 0..bytes.len() {
            for mask in [0x01u8, 0x80, 0xff] {
                let mut bad = bytes.clone();
                bad[i] ^= mask;
                assert!(decode(&bad).is_err(), "flip {mask:#x} at {i} went unnoticed");
            }
        }
    }
}
