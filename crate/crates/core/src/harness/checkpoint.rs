//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `ARFN`, version `u32 = 1`, tensor count
//! `u32`, then per tensor its name (`u32` length + UTF-8 bytes), rank
//! `u32`, dims `u64[rank]` and row-major `f32` data. A CRC32 of every
//! preceding byte closes the file. Values are stored at 32-bit precision,
//! so `load(save(x)) == x` holds exactly for f32-representable tensors.

use std::path::Path;

use crate::denoiser::{ParamSet, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"ARFN";
const VERSION: u32 = 1;

pub fn encode(params: &ParamSet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(params.tensors.len()).map_err(|_| Error::Checkpoint("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in &params.tensors {
        let n: usize = t.shape.iter().product();
        if n != t.data.len() {
            return Err(Error::Checkpoint(format!("{name}: shape {:?} holds {} values", t.shape, t.data.len())));
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for d in &t.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &t.data {
            let f = *v as f32;
            if !f.is_finite() {
                return Err(Error::NonFinite(format!("checkpoint tensor {name}")));
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamSet> {
    if bytes.len() < 16 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(payload) != stored {
        return Err(Error::Checkpoint("CRC mismatch".into()));
    }
    let mut r = Reader { buf: payload, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut params = ParamSet::default();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("dimension overflow".into()))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or_else(|| Error::Checkpoint("size overflow".into()))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        if params.tensors.insert(name.clone(), Tensor { shape, data }).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    if r.at != payload.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(params)
}

pub fn save(path: &Path, params: &ParamSet) -> Result<()> {
    std::fs::write(path, encode(params)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamSet> {
    decode(&std::fs::read(path)?)
}

/// Rounds every value to f32, i.e. what a save/load cycle yields.
pub fn round_f32(params: &ParamSet) -> ParamSet {
    let mut p = params.clone();
    for t in p.tensors.values_mut() {
        t.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::default();
        p.insert("a.w", Tensor { shape: vec![2, 3], data: vec![0.5, -1.25, 3.0, 1e-3, 7.0, -0.0] });
        p.insert("b", Tensor { shape: vec![1], data: vec![2.0] });
        p.insert("scalar", Tensor { shape: vec![], data: vec![4.0] });
        round_f32(&p)
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = encode(&sample()).unwrap();
        assert_eq!(&bytes[..4], b"ARFN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        // First tensor in name order is "a.w".
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(&bytes[16..19], b"a.w");
    }

    #[test]
    fn every_single_bit_flip_is_detected() {
        let bytes = encode(&sample()).unwrap();
        for i in 0..bytes.len() {
            for bit in 0..8 {
                let mut b = bytes.clone();
                b[i] ^= 1 << bit;
                assert!(decode(&b).is_err(), "byte {i} bit {bit}");
            }
        }
    }

    #[test]
    fn truncation_and_bad_magic_are_rejected() {
        let bytes = encode(&sample()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut b = bytes.clone();
        b[0] = b'X';
        let n = b.len() - 4;
        let crc = crc32fast::hash(&b[..n]);
        b[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode(&b), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn non_finite_values_are_refused() {
        let mut p = sample();
        p.get_mut("b").unwrap().data[0] = f64::NAN;
        assert!(encode(&p).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save(&path, &sample()).unwrap();
        assert_eq!(load(&path).unwrap(), sample());
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(
            tensors in proptest::collection::btree_map(
                "[a-z.]{1,12}",
                (proptest::collection::vec(1usize..4, 0..3), any::<u64>()),
                0..6,
            )
        ) {
            let mut p = ParamSet::default();
            for (name, (shape, seed)) in tensors {
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|i| {
                        let bits = (seed.wrapping_mul(i as u64 + 1) >> 40) as u32;
                        let f = f32::from_bits(bits & 0xbf7f_ffff);
                        f as f64
                    })
                    .collect();
                p.insert(name, Tensor { shape, data });
            }
            let back = decode(&encode(&p).unwrap()).unwrap();
            prop_assert_eq!(back.tensors.len(), p.tensors.len());
            for (k, t) in &p.tensors {
                let b = &back.tensors[k];
                prop_assert_eq!(&b.shape, &t.shape);
                let same = b.data.iter().zip(&t.data).all(|(x, y)| x.to_bits() == y.to_bits());
                prop_assert!(same);
            }
        }
    }
}
