//! Binary container of named `f32` tensors plus a UTF-8 metadata string.
//!
//! Layout (little-endian): `b"RPTA"`, `u32` version, `u32` metadata length,
//! metadata bytes, `u32` tensor count, then per tensor: `u16` name length,
//! name bytes, `u8` rank, `rank × u32` dims, `f32` payload.

use std::collections::BTreeMap;

use crate::{Tensor, TensorError};

pub const ARCHIVE_MAGIC: [u8; 4] = *b"RPTA";
pub const ARCHIVE_VERSION: u32 = 1;
const MAX_RANK: usize = 8;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub metadata: String,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Archive {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != ARCHIVE_MAGIC {
            return Err(TensorError::Decode("bad archive magic".into()));
        }
        let version = r.u32()?;
        if version != ARCHIVE_VERSION {
            return Err(TensorError::Decode(format!("unsupported archive version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let metadata = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| TensorError::Decode("metadata is not UTF-8".into()))?
            .to_string();
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| TensorError::Decode("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            if rank > MAX_RANK {
                return Err(TensorError::Decode(format!("rank {rank} too large")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut len: usize = 1;
            for _ in 0..rank {
                let d = r.u32()? as usize;
                len = len.checked_mul(d).ok_or_else(|| TensorError::Decode("tensor size overflow".into()))?;
                shape.push(d);
            }
            let payload = r.take(len.checked_mul(4).ok_or_else(|| TensorError::Decode("tensor size overflow".into()))?)?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if tensors.insert(name.clone(), Tensor::from_vec(&shape, data)?).is_some() {
                return Err(TensorError::Decode(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(TensorError::Decode("trailing bytes after archive".into()));
        }
        Ok(Self { metadata, tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| TensorError::Decode("archive truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, TensorError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, TensorError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, TensorError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            meta in ".{0,40}",
            entries in prop::collection::btree_map("[a-z.]{1,12}", prop::collection::vec(any::<f32>(), 0..20), 0..5)
        ) {
            let tensors = entries
                .into_iter()
                .map(|(k, v)| { let n = v.len(); (k, Tensor::from_vec(&[n], v).unwrap()) })
                .collect::<BTreeMap<_, _>>();
            let archive = Archive { metadata: meta, tensors };
            let decoded = Archive::from_bytes(&archive.to_bytes()).unwrap();
            prop_assert_eq!(decoded.metadata, archive.metadata.clone());
            for (k, t) in &archive.tensors {
                let d = &decoded.tensors[k];
                prop_assert_eq!(d.shape(), t.shape());
                let same = d.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                prop_assert!(same);
            }
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
            let _ = Archive::from_bytes(&bytes);
        }
    }

    #[test]
    fn truncation_is_rejected() {
        let mut a = Archive::default();
        a.tensors.insert("w".into(), Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let bytes = a.to_bytes();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Archive::from_bytes(&extra).is_err());
    }
}
