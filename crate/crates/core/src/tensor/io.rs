//! Binary tensor file format.
//!
//! ```text
//! "TNSR"        4 bytes magic
//! version  u8   = 1
//! dtype    u8   = 1 (f32)
//! rank     u8
//! dims     rank × u32 little-endian
//! payload  product(dims) × f32 little-endian
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;

/// Number of bytes [`write_tensor`] emits for `t`.
pub fn encoded_len(t: &Tensor) -> usize {
    4 + 3 + 4 * t.rank() + 4 * t.len()
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, "rank exceeds 255"))?;
    let mut buf = Vec::with_capacity(encoded_len(t));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&[VERSION, DTYPE_F32, rank]);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| {
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "dimension exceeds u32")
        })?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated {what}: {e}")))
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut head = [0u8; 7];
    read_exact(r, &mut head, "header")?;
    if &head[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &head[..4])));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", head[4])));
    }
    if head[5] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {}", head[5])));
    }
    let rank = head[6] as usize;
    let mut dims = vec![0u8; 4 * rank];
    read_exact(r, &mut dims, "dims")?;
    let shape: Vec<usize> = dims
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let len: usize = shape.iter().product();
    let mut payload = vec![0u8; 4 * len];
    read_exact(r, &mut payload, "payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensor(&mut w, t).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor(&mut BufReader::new(file))
}
