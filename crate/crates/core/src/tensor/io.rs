//! VSFT binary dump: `"VSFT"`, `u32` rank, `rank × u32` extents, then the
//! payload as `f32`, all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const VSFT_MAGIC: &[u8; 4] = b"VSFT";

/// Ranks above this are rejected on read to bound allocations from corrupt
/// headers.
const MAX_RANK: u32 = 16;

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stream>", e)
}

pub fn write_vsft<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    w.write_all(VSFT_MAGIC).map_err(io_err)?;
    w.write_all(&(t.rank() as u32).to_le_bytes()).map_err(io_err)?;
    for &e in t.shape() {
        let e = u32::try_from(e)
            .map_err(|_| Error::InvalidArgument(format!("extent {e} exceeds u32")))?;
        w.write_all(&e.to_le_bytes()).map_err(io_err)?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for &v in t.data() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::NonFinite(format!("vsft export of value {v}")));
        }
        buf.extend_from_slice(&f.to_le_bytes());
    }
    w.write_all(&buf).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn read_vsft<R: Read>(mut r: R) -> Result<Tensor> {
    let mut word = [0u8; 4];
    r.read_exact(&mut word)
        .map_err(|e| Error::format("vsft", format!("missing header: {e}")))?;
    if &word != VSFT_MAGIC {
        return Err(Error::format("vsft", "bad magic"));
    }
    let mut read_u32 = |r: &mut R, what: &str| -> Result<u32> {
        r.read_exact(&mut word)
            .map_err(|e| Error::format("vsft", format!("truncated {what}: {e}")))?;
        Ok(u32::from_le_bytes(word))
    };
    let rank = read_u32(&mut r, "rank")?;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::format("vsft", format!("rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        shape.push(read_u32(&mut r, "extent")? as usize);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::format("vsft", "element count overflows"))?;
    let mut payload = Vec::new();
    r.take(count as u64 * 4)
        .read_to_end(&mut payload)
        .map_err(|e| Error::format("vsft", format!("payload: {e}")))?;
    if payload.len() != count * 4 {
        return Err(Error::format(
            "vsft",
            format!("payload has {} bytes, expected {}", payload.len(), count * 4),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(&shape, data).map_err(|e| Error::format("vsft", e.to_string()))
}

pub fn write_vsft_file(path: &Path, t: &Tensor) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_vsft(BufWriter::new(f), t).map_err(|e| relabel(e, path))
}

pub fn read_vsft_file(path: &Path) -> Result<Tensor> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_vsft(BufReader::new(f)).map_err(|e| relabel(e, path))
}

fn relabel(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        Error::Format { what, detail } => Error::Format {
            what: format!("{what} file {}", path.display()),
            detail,
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout_is_fixed() {
        let t = Tensor::new(&[2, 1], vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_vsft(&mut buf, &t).unwrap();
        let mut expected = b"VSFT".to_vec();
        expected.extend_from_slice(&[2, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0]);
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-0.5f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn round_trip_through_f32() {
        let t = Tensor::from_fn(&[3, 2, 2], |i| i as f64 * 0.25 - 1.0);
        let mut buf = Vec::new();
        write_vsft(&mut buf, &t).unwrap();
        assert_eq!(read_vsft(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::zeros(&[4]);
        let mut buf = Vec::new();
        write_vsft(&mut buf, &t).unwrap();
        assert!(read_vsft(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_vsft(bad.as_slice()).is_err());
        let mut zero_rank = buf.clone();
        zero_rank[4] = 0;
        assert!(read_vsft(zero_rank.as_slice()).is_err());
    }
}
