//! Binary tensor blob format: magic "MVTF", version u32 LE, rank u32,
//! dims u32 each, dtype tag u8 (0 = f32, 1 = f64), raw LE values row-major.

use std::io::{Read, Write};

use crate::error::{Error, Result};

use super::{Elem, Tensor};

const MAGIC: &[u8; 4] = b"MVTF";
const VERSION: u32 = 1;

pub fn write_tensor_to<T: Elem, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    let err = |e| Error::io("<writer>", e);
    w.write_all(MAGIC).map_err(err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(err)?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes()).map_err(err)?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes()).map_err(err)?;
    }
    w.write_all(&[T::DTYPE_TAG]).map_err(err)?;
    match T::DTYPE_TAG {
        0 => {
            for &v in t.data() {
                w.write_all(&(v.to_f64() as f32).to_le_bytes()).map_err(err)?;
            }
        }
        _ => {
            for &v in t.data() {
                w.write_all(&v.to_f64().to_le_bytes()).map_err(err)?;
            }
        }
    }
    Ok(())
}

/// Reads a blob, converting the stored dtype to `T` if they differ.
pub fn read_tensor_from<T: Elem, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    let err = |e| Error::io("<reader>", e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(err)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad tensor magic {:?}", magic)));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(err)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    r.read_exact(&mut b4).map_err(err)?;
    let rank = u32::from_le_bytes(b4) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut b4).map_err(err)?;
        shape.push(u32::from_le_bytes(b4) as usize);
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag).map_err(err)?;
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    match tag[0] {
        0 => {
            for _ in 0..numel {
                r.read_exact(&mut b4).map_err(err)?;
                data.push(T::from_f64(f32::from_le_bytes(b4) as f64));
            }
        }
        1 => {
            let mut b8 = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut b8).map_err(err)?;
                data.push(T::from_f64(f64::from_le_bytes(b8)));
            }
        }
        t => return Err(Error::Format(format!("unknown dtype tag {t}"))),
    }
    Tensor::new(shape, data)
}

pub fn write_tensor<T: Elem>(path: &std::path::Path, t: &Tensor<T>) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    write_tensor_to(&mut f, t)
}

pub fn read_tensor<T: Elem>(path: &std::path::Path) -> Result<Tensor<T>> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_tensor_from(&mut f)
}
