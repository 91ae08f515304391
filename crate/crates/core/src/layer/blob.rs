//! Flat named-tensor container for [`LayerParams`].
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic      4 bytes  "IDAT"
//! version    u32      1
//! count      u32      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims (u64 each)
//!   data     f64 × product(dims)
//! ```
//!
//! Complex tensors carry a trailing dimension of 2 holding `(re, im)`.
//! Tensors appear in the order of [`LayerParams::visit`]; a reader rebuilds
//! the layout from the config and requires every name and shape to match.

use std::io::{Read, Write};

use num_complex::Complex64;

use super::{LayerParams, TensorMut, TensorRef};
use crate::config::ModelConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"IDAT";
const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_bits(get_u64(r)?))
}

pub fn write_blob(params: &LayerParams, w: &mut impl Write) -> Result<()> {
    let infos = params.infos();
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    put_u32(w, infos.len() as u32)?;
    let mut result = Ok(());
    params.visit(&mut |name, shape, t| {
        if result.is_err() {
            return;
        }
        result = (|| -> Result<()> {
            put_u32(w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            let complex = matches!(t, TensorRef::Complex(_));
            put_u32(w, (shape.len() + complex as usize) as u32)?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            if complex {
                w.write_all(&2u64.to_le_bytes())?;
            }
            match t {
                TensorRef::Real(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
                TensorRef::Complex(v) => v.iter().try_for_each(|c| {
                    w.write_all(&c.re.to_le_bytes())?;
                    w.write_all(&c.im.to_le_bytes())
                })?,
            }
            Ok(())
        })();
    });
    result
}

pub fn read_blob(r: &mut impl Read, cfg: &ModelConfig) -> Result<LayerParams> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Blob("bad magic".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(Error::Blob(format!("unsupported version {version}")));
    }
    let mut params = LayerParams::zeros(cfg);
    let expected = params.infos();
    let count = get_u32(r)? as usize;
    if count != expected.len() {
        return Err(Error::Blob(format!("expected {} tensors, found {count}", expected.len())));
    }
    let mut result = Ok(());
    params.visit_mut(&mut |name, shape, t| {
        if result.is_err() {
            return;
        }
        result = (|| -> Result<()> {
            let len = get_u32(r)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            let found = String::from_utf8(buf).map_err(|_| Error::Blob("tensor name is not UTF-8".into()))?;
            if found != name {
                return Err(Error::Blob(format!("expected tensor {name}, found {found}")));
            }
            let ndim = get_u32(r)? as usize;
            let dims = (0..ndim).map(|_| get_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let mut want = shape.to_vec();
            if matches!(t, TensorMut::Complex(_)) {
                want.push(2);
            }
            if dims != want {
                return Err(Error::Blob(format!("{name}: expected shape {want:?}, found {dims:?}")));
            }
            match t {
                TensorMut::Real(v) => v.iter_mut().try_for_each(|x| get_f64(r).map(|f| *x = f))?,
                TensorMut::Complex(v) => v.iter_mut().try_for_each(|c| -> Result<()> {
                    *c = Complex64::new(get_f64(r)?, get_f64(r)?);
                    Ok(())
                })?,
            }
            Ok(())
        })();
    });
    result?;
    Ok(params)
}

pub fn save(params: &LayerParams, path: impl AsRef<std::path::Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_blob(params, &mut f)?;
    Ok(f.flush()?)
}

pub fn load(path: impl AsRef<std::path::Path>, cfg: &ModelConfig) -> Result<LayerParams> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_blob(&mut f, cfg)
}
