//! Shared binary encoding for named f32 tensors.
//!
//! One record = name length (u32 LE) + UTF-8 name + rank (u32 LE) + dims
//! (u32 LE each) + raw little-endian f32 payload. Both the weight file and
//! the dataset container are sequences of these records behind their own
//! magic/header, and round-trips are bit-exact.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) fn write_u16(w: &mut impl Write, v: u16) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn read_u16(r: &mut impl Read) -> std::io::Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

pub(crate) fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> std::io::Result<()> {
    write_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    write_u32(w, t.rank() as u32)?;
    for &d in t.shape() {
        debug_assert!(d <= u32::MAX as usize);
        write_u32(w, d as u32)?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Read one record. `context` describes the position (e.g. "tensor 3 of 7")
/// so truncation errors can name what was being read.
pub(crate) fn read_tensor(r: &mut impl Read, context: &str) -> Result<(String, Tensor)> {
    let fail = |what: &str| Error::Validation(format!("truncated or invalid {what} ({context})"));

    let name_len = read_u32(r).map_err(|_| fail("tensor name length"))? as usize;
    if name_len > 4096 {
        return Err(Error::Validation(format!(
            "implausible tensor name length {name_len} ({context})"
        )));
    }
    let mut name_buf = vec![0u8; name_len];
    r.read_exact(&mut name_buf)
        .map_err(|_| fail("tensor name"))?;
    let name = String::from_utf8(name_buf)
        .map_err(|_| Error::Validation(format!("tensor name is not UTF-8 ({context})")))?;

    let fail_named = |what: &str| {
        Error::Validation(format!(
            "truncated or invalid {what} of tensor '{name}' ({context})"
        ))
    };
    let rank = read_u32(r).map_err(|_| fail_named("rank"))? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Validation(format!(
            "tensor '{name}' has unsupported rank {rank} ({context})"
        )));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let d = read_u32(r).map_err(|_| fail_named("dimensions"))? as usize;
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| fail_named("dimensions"))?;
        shape.push(d);
    }
    let mut payload = vec![0u8; numel * 4];
    r.read_exact(&mut payload)
        .map_err(|_| fail_named("payload"))?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let tensor = Tensor::new(shape, data)
        .map_err(|e| Error::Validation(format!("tensor '{name}' malformed ({context}): {e}")))?;
    Ok((name, tensor))
}
