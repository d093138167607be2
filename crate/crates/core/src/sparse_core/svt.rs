//! `.svt` sparse tensor interchange files.
//!
//! Little-endian layout:
//!
//! ```text
//! "SVT1"                      4 bytes
//! num_active                  u32
//! channels                    u32
//! spatial shape X, Y, Z       3 x u32
//! num_active x (batch u32, x i32, y i32, z i32)
//! num_active x channels       f32, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{SparseError, SparseVoxelTensor, VoxelCoord};
use crate::matrix::Matrix;

pub const MAGIC: &[u8; 4] = b"SVT1";

pub fn write_svt<W: Write>(tensor: &SparseVoxelTensor, mut w: W) -> Result<(), SparseError> {
    w.write_all(MAGIC)?;
    w.write_all(&(tensor.num_active() as u32).to_le_bytes())?;
    w.write_all(&(tensor.channels() as u32).to_le_bytes())?;
    for s in tensor.spatial_shape() {
        w.write_all(&s.to_le_bytes())?;
    }
    for c in tensor.coords() {
        w.write_all(&c.batch.to_le_bytes())?;
        w.write_all(&c.x.to_le_bytes())?;
        w.write_all(&c.y.to_le_bytes())?;
        w.write_all(&c.z.to_le_bytes())?;
    }
    for v in tensor.features().as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, SparseError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> SparseError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        SparseError::Format("unexpected end of file".into())
    } else {
        SparseError::Io(e)
    }
}

pub fn read_svt<R: Read>(mut r: R) -> Result<SparseVoxelTensor, SparseError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(SparseError::Format(format!("bad magic {magic:?}")));
    }
    let n = read_u32(&mut r)? as usize;
    let channels = read_u32(&mut r)? as usize;
    let shape = [read_u32(&mut r)?, read_u32(&mut r)?, read_u32(&mut r)?];
    let mut coords = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let batch = read_u32(&mut r)?;
        let x = read_u32(&mut r)? as i32;
        let y = read_u32(&mut r)? as i32;
        let z = read_u32(&mut r)? as i32;
        coords.push(VoxelCoord::new(batch, x, y, z));
    }
    let mut data = Vec::with_capacity((n * channels).min(1 << 24));
    for _ in 0..n * channels {
        data.push(f32::from_bits(read_u32(&mut r)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(SparseError::Format("trailing bytes after feature block".into()));
    }
    let features = Matrix::from_vec(n, channels, data).expect("sized above");
    SparseVoxelTensor::new(coords, features, shape)
}

pub fn save_svt(tensor: &SparseVoxelTensor, path: impl AsRef<Path>) -> Result<(), SparseError> {
    write_svt(tensor, BufWriter::new(File::create(path)?))
}

pub fn load_svt(path: impl AsRef<Path>) -> Result<SparseVoxelTensor, SparseError> {
    read_svt(BufReader::new(File::open(path)?))
}
