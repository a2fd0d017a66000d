//! Binary parameter checkpoints.
//!
//! Layout (little endian):
//! `magic[8] version:u32 meta_len:u32 meta[meta_len] count:u32` followed by
//! `count` entries of `name_len:u32 name ndim:u32 dims:u64[ndim] values:f64[]`.
//! Values are stored as raw IEEE-754 bits, so a round trip is exact.

use std::io::{Read, Write};

use super::{Result, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"THINKACT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn io_err(e: std::io::Error) -> TensorError {
    TensorError::Checkpoint(e.to_string())
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(io_err)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u32::from_le_bytes(b))
}

fn get_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(io_err)?;
    Ok(buf)
}

/// Writes named tensors plus a free-form metadata string.
pub fn write_checkpoint<'a>(
    w: &mut impl Write,
    metadata: &str,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    put_u32(w, CHECKPOINT_VERSION)?;
    put_u32(w, metadata.len() as u32)?;
    w.write_all(metadata.as_bytes()).map_err(io_err)?;
    put_u32(w, tensors.len() as u32)?;
    for (name, t) in tensors {
        put_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes()).map_err(io_err)?;
        put_u32(w, t.shape().len() as u32)?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
        }
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.values() {
            buf.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        w.write_all(&buf).map_err(io_err)?;
    }
    Ok(())
}

/// Reads a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint(r: &mut impl Read) -> Result<(String, Vec<(String, Tensor)>)> {
    let magic = get_bytes(r, 8)?;
    if magic.as_slice() != CHECKPOINT_MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported format version {version}")));
    }
    let meta_len = get_u32(r)? as usize;
    let metadata = String::from_utf8(get_bytes(r, meta_len)?)
        .map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    let count = get_u32(r)?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = get_u32(r)? as usize;
        let name = String::from_utf8(get_bytes(r, name_len)?)
            .map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        let ndim = get_u32(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let b = get_bytes(r, 8)?;
            shape.push(u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize);
        }
        let len: usize = shape.iter().product();
        let raw = get_bytes(r, len * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        tensors.push((name, Tensor::new(shape, values)?));
    }
    Ok((metadata, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let a = Tensor::matrix(2, 2, vec![1.0 / 3.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap();
        let b = Tensor::vector(vec![std::f64::consts::PI]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "{\"k\":1}", [("a", &a), ("b", &b)]).unwrap();
        let (meta, back) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(meta, "{\"k\":1}");
        assert_eq!(back[0].0, "a");
        let bits = |t: &Tensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back[0].1), bits(&a));
        assert_eq!(bits(&back[1].1), bits(&b));
    }

    #[test]
    fn rejects_wrong_version() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "", std::iter::empty()).unwrap();
        buf[8] = 9;
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }
}
