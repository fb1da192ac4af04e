//! Flat binary tensor files.
//!
//! Layout, all little-endian: the magic bytes `OVSG`, a `u32` format
//! version, a `u32` rank, `rank` `u32` dimensions, then the elements as
//! `f32` in row-major order.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ovseg_core::Tensor;

use crate::error::{CliError, CliResult};

pub const MAGIC: [u8; 4] = *b"OVSG";
pub const VERSION: u32 = 1;

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "dimension exceeds u32"))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one tensor; `Ok(None)` at a clean end of input.
pub fn read_tensor(r: &mut impl Read) -> Result<Option<Tensor>, String> {
    let mut magic = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut magic[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err("truncated header".into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.to_string()),
        }
    }
    if magic != MAGIC {
        return Err(format!("bad magic {magic:?}"));
    }
    let short = |e: io::Error| format!("truncated tensor: {e}");
    let version = read_u32(r).map_err(short)?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let rank = read_u32(r).map_err(short)? as usize;
    if rank > 8 {
        return Err(format!("implausible rank {rank}"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r).map_err(short)? as usize);
    }
    let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("element count overflows")?;
    let mut bytes = vec![0u8; numel.checked_mul(4).ok_or("element count overflows")?];
    r.read_exact(&mut bytes).map_err(short)?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Tensor::new(&shape, data).map(Some).map_err(|e| e.to_string())
}

pub fn save_tensors(path: &Path, tensors: &[&Tensor]) -> CliResult<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in tensors {
        write_tensor(&mut w, t).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> CliResult<()> {
    save_tensors(path, &[t])
}

/// Every tensor stored back to back in `path`.
pub fn load_tensors(path: &Path) -> CliResult<Vec<Tensor>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut out = Vec::new();
    while let Some(t) = read_tensor(&mut r).map_err(|m| CliError::format(path, m))? {
        out.push(t);
    }
    Ok(out)
}

/// The single tensor stored in `path`.
pub fn load_tensor(path: &Path) -> CliResult<Tensor> {
    let mut all = load_tensors(path)?;
    match all.len() {
        1 => Ok(all.remove(0)),
        n => Err(CliError::format(path, format!("expected one tensor, found {n}"))),
    }
}
