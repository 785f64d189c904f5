//! Flat binary parameter container.
//!
//! Layout (little-endian): `b"CTXF"`, format version `u32`, record count
//! `u32`, then per parameter: name length `u32`, UTF-8 name bytes, ndim `u32`,
//! each dim `u32`, and the `f32` payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{AutodiffError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CTXF";
pub const VERSION: u32 = 1;

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_f32s<W: Write>(w: &mut W, values: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_f32s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_string<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

pub fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(AutodiffError::Checkpoint(format!("name length {len} too large")));
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| AutodiffError::Checkpoint(e.to_string()))
}

pub fn write_params<W: Write>(w: &mut W, params: &ParamSet) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, VERSION)?;
    write_u32(w, params.len() as u32)?;
    for (name, t) in params.iter() {
        write_string(w, name)?;
        write_u32(w, t.ndim() as u32)?;
        for &d in t.shape() {
            write_u32(w, d as u32)?;
        }
        write_f32s(w, t.data())?;
    }
    Ok(())
}

pub fn read_params<R: Read>(r: &mut R) -> Result<ParamSet> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(AutodiffError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(AutodiffError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(r)?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name = read_string(r)?;
        let ndim = read_u32(r)? as usize;
        if ndim > 8 {
            return Err(AutodiffError::Checkpoint(format!("{name}: ndim {ndim}")));
        }
        let shape = (0..ndim)
            .map(|_| read_u32(r).map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let n = shape.iter().product();
        let data = read_f32s(r, n)?;
        params.insert(name, Tensor::new(&shape, data)?);
    }
    Ok(params)
}

pub fn save(path: impl AsRef<Path>, params: &ParamSet) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_params(&mut f, params)?;
    f.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamSet> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_params(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(&[1.5]));
        let mut buf = Vec::new();
        write_params(&mut buf, &p).unwrap();
        assert_eq!(&buf[..4], b"CTXF");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        assert_eq!(&buf[16..17], b"w");
        assert_eq!(&buf[17..21], &1u32.to_le_bytes());
        assert_eq!(&buf[21..25], &1u32.to_le_bytes());
        assert_eq!(&buf[25..29], &1.5f32.to_le_bytes());
        assert_eq!(buf.len(), 29);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_params(&mut &b"XXXX\x01\0\0\0\0\0\0\0"[..]).is_err());
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(&[1.0, 2.0]));
        let mut buf = Vec::new();
        write_params(&mut buf, &p).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(read_params(&mut buf.as_slice()).is_err());
    }
}
