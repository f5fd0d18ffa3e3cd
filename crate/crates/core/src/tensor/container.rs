//! Binary container: `b"HCFM"`, three little-endian `u32` dims
//! (height, width, channels), then `f64` little-endian values row-major.

use std::io::{Read, Write};

use super::FeatureMap;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HCFM";

pub fn write_map<W: Write>(out: &mut W, map: &FeatureMap) -> Result<()> {
    out.write_all(MAGIC)?;
    for d in [map.height(), map.width(), map.channels()] {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        out.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(map.data().len() * 8);
    for v in map.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_map<R: Read>(input: &mut R) -> Result<FeatureMap> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad feature map magic {magic:?}")));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let mut b = [0u8; 4];
        input.read_exact(&mut b)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .filter(|&n| n > 0 && n <= 1 << 31)
        .ok_or_else(|| Error::Format(format!("implausible feature map dims {dims:?}")))?;
    let mut raw = vec![0u8; n * 8];
    input.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    FeatureMap::new(dims[0], dims[1], dims[2], data)
}
