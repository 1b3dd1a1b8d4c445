//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "VIA1"
//! repeated until EOF:
//!   name_len  name bytes (UTF-8)  rank  dims[rank]  f32 payload[product(dims)]
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::numkit::graph::ParamStore;
use crate::numkit::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VIA1";

/// Named tensors in file order.
pub type Records = Vec<(String, Tensor)>;

pub fn encode_records<'a>(records: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_records(bytes: &[u8], origin: &Path) -> Result<Records> {
    let bad = |m: &str| Error::format(origin, m.to_string());
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(bad("missing VIA1 magic"));
    }
    let mut pos = 4;
    let take = |n: usize, pos: &mut usize| -> Result<&[u8]> {
        let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated record"))?;
        let s = &bytes[*pos..end];
        *pos = end;
        Ok(s)
    };
    let mut records = Vec::new();
    while pos < bytes.len() {
        let u32_at = |s: &[u8]| u32::from_le_bytes([s[0], s[1], s[2], s[3]]) as usize;
        let name_len = u32_at(take(4, &mut pos)?);
        let name = std::str::from_utf8(take(name_len, &mut pos)?)
            .map_err(|_| bad("parameter name is not UTF-8"))?
            .to_string();
        let rank = u32_at(take(4, &mut pos)?);
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_at(take(4, &mut pos)?));
        }
        let n: usize = shape.iter().product();
        let payload = take(n.checked_mul(4).ok_or_else(|| bad("payload overflow"))?, &mut pos)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| bad(&format!("{name}: {e}")))?;
        records.push((name, tensor));
    }
    Ok(records)
}

pub fn write_records<'a>(path: &Path, records: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, encode_records(records)).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Records> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_records(&bytes, path)
}

impl ParamStore {
    pub fn to_bytes(&self) -> Vec<u8> {
        encode_records(self.iter().map(|(_, n, t)| (n, t)))
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut store = ParamStore::new();
        for (name, t) in decode_records(bytes, origin)? {
            store.insert(name, t)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_records(path, self.iter().map(|(_, n, t)| (n, t)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            tensors in prop::collection::vec(
                (prop::collection::vec(1usize..4, 0..4), any::<u64>()),
                0..5,
            )
        ) {
            let mut store = ParamStore::new();
            for (i, (shape, seed)) in tensors.iter().enumerate() {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|j| ((seed.wrapping_add(j as u64) % 2001) as f32 - 1000.0) * 1.37e-3).collect();
                store.insert(format!("p{i}.weight"), Tensor::new(shape.clone(), data).unwrap()).unwrap();
            }
            let bytes = store.to_bytes();
            prop_assert_eq!(&bytes[..4], b"VIA1");
            let back = ParamStore::from_bytes(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert_eq!(back, store);
        }
    }

    #[test]
    fn record_layout_is_little_endian() {
        let t = Tensor::new([2], vec![1.0, -2.0]).unwrap();
        let bytes = encode_records([("ab", &t)]);
        let mut expected = b"VIA1".to_vec();
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn truncated_and_bad_magic_rejected() {
        let t = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = encode_records([("x", &t)]);
        assert!(decode_records(&bytes[..bytes.len() - 1], Path::new("m")).is_err());
        assert!(decode_records(b"VIA0", Path::new("m")).is_err());
    }
}
