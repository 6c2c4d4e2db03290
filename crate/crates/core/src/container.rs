//! Binary container shared by checkpoints and cached datasets.
//!
//! Layout, all integers little-endian `u32`:
//! magic `UPQC`, version, header length + UTF-8 JSON header, tensor count,
//! then per tensor: name length + UTF-8 name, rank, dims, `f32` LE data.

use crate::error::{Result, UpqError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"UPQC";
pub const VERSION: u32 = 1;

/// A tensor read back from a container, with the byte offset of its record.
#[derive(Debug, Clone)]
pub struct Entry {
    pub name: String,
    pub offset: u64,
    pub tensor: Tensor,
}

pub fn encode(header: &str, tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_len(&mut out, header.len())?;
    out.extend_from_slice(header.as_bytes());
    put_len(&mut out, tensors.len())?;
    for (name, t) in tensors {
        put_len(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_len(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_len(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| UpqError::contract(format!("{n} does not fit in u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(UpqError::Format {
            offset: self.pos as u64,
            reason: reason.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let at = self.pos;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| UpqError::Format {
            offset: at as u64,
            reason: format!("{what} is not UTF-8"),
        })
    }
}

/// Parses a container into its JSON header text and tensors in file order.
pub fn decode(bytes: &[u8]) -> Result<(String, Vec<Entry>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return r.fail("bad magic, expected UPQC");
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return r.fail(format!("unsupported version {version}"));
    }
    let header = r.string("header")?;
    let count = r.u32("tensor count")?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let offset = r.pos as u64;
        let name = r.string("tensor name")?;
        let rank = r.u32("tensor rank")? as usize;
        if rank == 0 || rank > 8 {
            return r.fail(format!("tensor {name} has unsupported rank {rank}"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("tensor dim")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n > 0 && n <= (bytes.len() - r.pos) / 4);
        let Some(numel) = numel else {
            return r.fail(format!("tensor {name} shape {shape:?} exceeds remaining data"));
        };
        let raw = r.take(numel * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| UpqError::Format {
            offset,
            reason: e.to_string(),
        })?;
        entries.push(Entry { name, offset, tensor });
    }
    if r.pos != bytes.len() {
        return r.fail(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok((header, entries))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let a = Tensor::new(vec![2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap();
        let b = Tensor::new(vec![3], vec![7.0, 8.0, 9.0]).unwrap();
        encode("{\"k\":1}", &[("a".into(), &a), ("b".into(), &b)]).unwrap()
    }

    #[test]
    fn round_trip_preserves_bits() {
        let bytes = sample();
        let (h, e) = decode(&bytes).unwrap();
        assert_eq!(h, "{\"k\":1}");
        assert_eq!(e[0].tensor.data()[1].to_bits(), (-0.0f32).to_bits());
        let again = encode(&h, &e.iter().map(|x| (x.name.clone(), &x.tensor)).collect::<Vec<_>>()).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn wrong_magic_reports_offset_zero() {
        let mut bytes = sample();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(UpqError::Format { offset: 0, .. })));
    }

    #[test]
    fn wrong_version_reports_its_offset() {
        let mut bytes = sample();
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(UpqError::Format { offset: 4, .. })));
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let bytes = sample();
        for n in 0..bytes.len() {
            assert!(matches!(decode(&bytes[..n]), Err(UpqError::Format { .. })), "len {n}");
        }
    }

    #[test]
    fn trailing_garbage_rejected() {
        let mut bytes = sample();
        bytes.push(0);
        assert!(decode(&bytes).is_err());
    }
}
