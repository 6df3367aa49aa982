//! Binary tensor records (`UFT1`).
//!
//! Layout: 4-byte magic `UFT1`, then rank as u32 little-endian, then one u64
//! little-endian per dimension, then the row-major payload as f64
//! little-endian. Several container formats embed these records back to back.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const UFT1_MAGIC: [u8; 4] = *b"UFT1";

/// Largest rank we ever serialize; guards against garbage headers.
const MAX_RANK: u32 = 8;

pub fn write_uft1<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(&UFT1_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_uft1<R: Read>(r: &mut R, context: &'static str) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    fill(r, &mut magic, context)?;
    if magic != UFT1_MAGIC {
        return Err(Error::BadMagic { context, expected: UFT1_MAGIC, got: magic });
    }
    let mut b4 = [0u8; 4];
    fill(r, &mut b4, context)?;
    let rank = u32::from_le_bytes(b4);
    if rank > MAX_RANK {
        return Err(Error::Truncated { context });
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        fill(r, &mut b8, context)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let numel: usize = shape.iter().product();
    // Grow as we read so a corrupt header cannot trigger a huge allocation.
    let mut data = Vec::with_capacity(numel.min(1 << 16));
    for _ in 0..numel {
        fill(r, &mut b8, context)?;
        data.push(f64::from_le_bytes(b8));
    }
    Tensor::from_vec(shape, data)
}

fn fill<R: Read>(r: &mut R, buf: &mut [u8], context: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated { context }
        } else {
            Error::Io(e)
        }
    })
}
