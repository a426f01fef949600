//! Compact binary container for path and adjoint arrays.
//!
//! Layout (little-endian): magic `b"RSMP"`, format version `u32`, section
//! tag `u32`, number of dims `u32`, the dims as `u64`, then the data as `f64`.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RSMP";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum SectionTag {
    Paths = 1,
    Adjoint = 2,
}

impl SectionTag {
    fn from_u32(v: u32) -> Result<Self> {
        match v {
            1 => Ok(SectionTag::Paths),
            2 => Ok(SectionTag::Adjoint),
            other => Err(Error::Format(format!("unknown section tag {other}"))),
        }
    }
}

/// A decoded container section.
#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub tag: SectionTag,
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

pub fn write_section<W: Write>(mut w: W, tag: SectionTag, dims: &[u64], data: &[f64]) -> Result<()> {
    let expected: u64 = dims.iter().product();
    if expected != data.len() as u64 {
        return Err(Error::ShapeMismatch(format!(
            "dims {dims:?} describe {expected} values, got {}",
            data.len()
        )));
    }
    let mut buf = Vec::with_capacity(16 + 8 * dims.len() + 8 * data.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tag as u32).to_le_bytes());
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_section<R: Read>(mut r: R) -> Result<Section> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let tag = SectionTag::from_u32(word(8))?;
    let ndims = word(12) as usize;
    let mut dims = Vec::with_capacity(ndims);
    let mut b8 = [0u8; 8];
    for _ in 0..ndims {
        r.read_exact(&mut b8)?;
        dims.push(u64::from_le_bytes(b8));
    }
    let len = dims.iter().product::<u64>() as usize;
    let mut raw = vec![0u8; len * 8];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Section { tag, dims, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let data = vec![0.1, -2.5e-300, f64::MAX, 3.0, -0.0, 1.0 / 3.0];
        let mut buf = Vec::new();
        write_section(&mut buf, SectionTag::Adjoint, &[2, 3], &data).unwrap();
        assert_eq!(&buf[..4], b"RSMP");
        let s = read_section(buf.as_slice()).unwrap();
        assert_eq!(s.tag, SectionTag::Adjoint);
        assert_eq!(s.dims, vec![2, 3]);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&s.data), bits(&data));
    }

    #[test]
    fn rejects_wrong_magic_and_shape() {
        assert!(read_section(&b"XXXX\x01\0\0\0\x01\0\0\0\0\0\0\0"[..]).is_err());
        assert!(write_section(Vec::new(), SectionTag::Paths, &[2, 2], &[1.0]).is_err());
    }
}
