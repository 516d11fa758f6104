//! Binary checkpoint format.
//!
//! ```text
//! magic        8 bytes  "AFOPTCKP"
//! version      u32
//! size tag     u8       'S' | 'M' | 'L' | '-' (custom width)
//! hidden H     u32
//! taps B       u32
//! bins K       u32
//! group G      u32
//! block count  u32
//! per block:   name length u8, name, rows u32, cols u32, offset u64, floats u64
//! data         little-endian f32, interleaved (re, im)
//! ```
//!
//! Offsets count f32 values from the start of the data section. Parameters are
//! stored in single precision, so a save/load round trip is exact for values
//! that are representable as `f32`, and any checkpoint re-saves bit-identically.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelSize, NetShape, OptimizerParams, GROUP};
use crate::error::{Error, Result};
use crate::signal::C64;

const MAGIC: &[u8; 8] = b"AFOPTCKP";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, size: Option<ModelSize>, params: &OptimizerParams) -> Result<()> {
    let shape = params.shape();
    if let Some(s) = size {
        if s.hidden() != shape.hidden {
            return Err(Error::Checkpoint(format!(
                "size {s} does not match hidden width {}",
                shape.hidden
            )));
        }
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[size.map_or(b'-', |s| s.tag() as u8)])?;
    for v in [shape.hidden, shape.taps, shape.bins, GROUP] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    let blocks = shape.blocks();
    w.write_all(&(blocks.len() as u32).to_le_bytes())?;
    let mut offset = 0u64;
    for b in &blocks {
        w.write_all(&[b.name.len() as u8])?;
        w.write_all(b.name.as_bytes())?;
        w.write_all(&(b.rows as u32).to_le_bytes())?;
        w.write_all(&(b.cols as u32).to_le_bytes())?;
        let floats = 2 * b.len() as u64;
        w.write_all(&offset.to_le_bytes())?;
        w.write_all(&floats.to_le_bytes())?;
        offset += floats;
    }
    let mut buf = Vec::with_capacity(8 * params.len());
    for c in params.values() {
        buf.extend_from_slice(&(c.re as f32).to_le_bytes());
        buf.extend_from_slice(&(c.im as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    Ok(b)
}

fn u32_of<R: Read>(r: &mut R) -> Result<usize> {
    Ok(u32::from_le_bytes(take::<4, _>(r)?) as usize)
}

fn u64_of<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(take::<8, _>(r)?))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Option<ModelSize>, OptimizerParams)> {
    if &take::<8, _>(&mut r)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32_of(&mut r)? as u32;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let tag = take::<1, _>(&mut r)?[0];
    let (hidden, taps, bins, group) = (u32_of(&mut r)?, u32_of(&mut r)?, u32_of(&mut r)?, u32_of(&mut r)?);
    if group != GROUP {
        return Err(Error::Checkpoint(format!("group size {group}, expected {GROUP}")));
    }
    let shape = NetShape::new(hidden, taps, bins).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let size = match tag {
        b'-' => None,
        t => {
            let s: ModelSize = (t as char).to_string().parse()?;
            if s.hidden() != hidden {
                return Err(Error::Checkpoint(format!("size tag {s} with hidden width {hidden}")));
            }
            Some(s)
        }
    };
    let expected = shape.blocks();
    let count = u32_of(&mut r)?;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!("{count} blocks, expected {}", expected.len())));
    }
    let mut offset = 0u64;
    for want in &expected {
        let len = take::<1, _>(&mut r)?[0] as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("block name is not utf-8".into()))?;
        let (rows, cols) = (u32_of(&mut r)?, u32_of(&mut r)?);
        let (off, floats) = (u64_of(&mut r)?, u64_of(&mut r)?);
        if name != want.name || rows != want.rows || cols != want.cols || off != offset || floats != 2 * want.len() as u64 {
            return Err(Error::Checkpoint(format!(
                "block {name:?} ({rows}x{cols} at {off}) does not match {:?} ({}x{} at {offset})",
                want.name, want.rows, want.cols
            )));
        }
        offset += floats;
    }
    let mut data = vec![0u8; 4 * offset as usize];
    r.read_exact(&mut data)
        .map_err(|e| Error::Checkpoint(format!("truncated data: {e}")))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after data".into()));
    }
    let values = data
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes(c[..4].try_into().unwrap());
            let im = f32::from_le_bytes(c[4..].try_into().unwrap());
            C64::new(re as f64, im as f64)
        })
        .collect();
    let params = OptimizerParams::new(shape, values).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((size, params))
}

pub fn save_checkpoint(path: impl AsRef<Path>, size: Option<ModelSize>, params: &OptimizerParams) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), size, params)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Option<ModelSize>, OptimizerParams)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
