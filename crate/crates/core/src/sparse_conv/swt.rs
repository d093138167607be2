//! `.swt` weight checkpoints.
//!
//! Little-endian: magic `"SWT1"`, `u32` layer count, then per layer
//! `u32 num_offsets, u32 c_in, u32 c_out` followed by
//! `num_offsets * c_in * c_out` `f32` weights in `(offset, c_in, c_out)`
//! row-major order. Kernel extents are not stored; a cubic offset count
//! `n^3` is read back as an `n x n x n` kernel.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ConvError, KernelWeights};

pub const MAGIC: &[u8; 4] = b"SWT1";

pub fn write_swt<W: Write>(layers: &[KernelWeights], mut w: W) -> Result<(), ConvError> {
    w.write_all(MAGIC)?;
    w.write_all(&(layers.len() as u32).to_le_bytes())?;
    for (n, l) in layers.iter().enumerate() {
        if l.bias().is_some() {
            return Err(ConvError::Format(format!("layer {n} carries a bias, which .swt cannot store")));
        }
        for v in [l.num_offsets(), l.c_in(), l.c_out()] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for v in l.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ConvError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            ConvError::Format("unexpected end of file".into())
        } else {
            ConvError::Io(e)
        }
    })?;
    Ok(u32::from_le_bytes(b))
}

fn kernel_for(num_offsets: usize) -> [usize; 3] {
    let n = (num_offsets as f64).cbrt().round() as usize;
    if n * n * n == num_offsets {
        [n, n, n]
    } else {
        [num_offsets, 1, 1]
    }
}

pub fn read_swt<R: Read>(mut r: R) -> Result<Vec<KernelWeights>, ConvError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| ConvError::Format("missing magic".into()))?;
    if &magic != MAGIC {
        return Err(ConvError::Format(format!("bad magic {magic:?}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut layers = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let ko = read_u32(&mut r)? as usize;
        let c_in = read_u32(&mut r)? as usize;
        let c_out = read_u32(&mut r)? as usize;
        let n = ko * c_in * c_out;
        let mut data = Vec::with_capacity(n.min(1 << 26));
        for _ in 0..n {
            data.push(f32::from_bits(read_u32(&mut r)?));
        }
        layers.push(KernelWeights::from_vec(kernel_for(ko), c_in, c_out, data)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(ConvError::Format("trailing bytes after last layer".into()));
    }
    Ok(layers)
}

pub fn save_swt(layers: &[KernelWeights], path: impl AsRef<Path>) -> Result<(), ConvError> {
    write_swt(layers, BufWriter::new(File::create(path)?))
}

pub fn load_swt(path: impl AsRef<Path>) -> Result<Vec<KernelWeights>, ConvError> {
    read_swt(BufReader::new(File::open(path)?))
}
