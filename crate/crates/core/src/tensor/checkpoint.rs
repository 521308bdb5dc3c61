//! Named-tensor checkpoint container.
//!
//! Layout (all integers little-endian): magic `DVCCCKPT`, version byte,
//! `u32` entry count, then per entry: `u32` name length, UTF-8 name,
//! `u32` rank, `u32` extents, `f64` payload.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"DVCCCKPT";
const VERSION: u8 = 1;

pub fn encode_checkpoint(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format("checkpoint", "truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::format("checkpoint", e.to_string()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }
    Ok(entries)
}

pub fn save_checkpoint(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    crate::fsio::write_atomic(path, &encode_checkpoint(entries))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let bytes = encode_checkpoint(&[("a".into(), Tensor::scalar(1.5))]);
        assert_eq!(&bytes[..8], b"DVCCCKPT");
        assert_eq!(bytes[8], 1);
        assert_eq!(&bytes[9..13], &1u32.to_le_bytes());
        assert_eq!(&bytes[13..17], &1u32.to_le_bytes());
        assert_eq!(bytes[17], b'a');
        assert_eq!(&bytes[18..22], &0u32.to_le_bytes());
        assert_eq!(&bytes[22..30], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 30);
    }

    #[test]
    fn corrupt_input_rejected() {
        let bytes = encode_checkpoint(&[("w".into(), Tensor::zeros(&[2, 2]))]);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut bad = bytes;
        bad[8] = 9;
        assert!(decode_checkpoint(&bad).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(rows in 0usize..4, cols in 0usize..5, seed in any::<u32>(), name in "[a-z.]{1,12}") {
            let data: Vec<f64> = (0..rows * cols).map(|i| (i as f64 + seed as f64).sin()).collect();
            let entries = vec![(name, Tensor::new(vec![rows, cols], data).unwrap())];
            prop_assert_eq!(decode_checkpoint(&encode_checkpoint(&entries)).unwrap(), entries);
        }
    }
}
