//! Binary model files.
//!
//! Layout, little-endian throughout: the magic `MDMA1`, a `u32` format version, the dimensions
//! `d, m, l, r, pool_size` as `u64`, the leaf order as `d` `u64`s, then every raw parameter as
//! an `f64` in [`MdmaModel::for_each_param`] order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{MdmaError, Result};
use crate::ht::HtTensor;
use crate::model::MdmaModel;
use crate::scalar::Scalar;
use crate::univariate::UnivariateCdfNet;

pub const MAGIC: &[u8; 5] = b"MDMA1";
pub const FORMAT_VERSION: u32 = 1;

const MAX_DIM: u64 = 1 << 32;

pub fn write_model<T: Scalar, W: Write>(model: &MdmaModel<T>, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let dims = [
        model.d(),
        model.m(),
        model.net_depth(),
        model.net_width(),
        model.ht().pool_size(),
    ];
    for v in dims {
        out.write_all(&(v as u64).to_le_bytes())?;
    }
    for &s in model.ht().leaf_order() {
        out.write_all(&(s as u64).to_le_bytes())?;
    }
    let mut err = None;
    model.for_each_param(|s| {
        for v in s {
            if err.is_none() {
                if let Err(e) = out.write_all(&v.f64().to_le_bytes()) {
                    err = Some(e);
                }
            }
        }
    });
    if let Some(e) = err {
        return Err(e.into());
    }
    out.flush()?;
    Ok(())
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    input
        .read_exact(&mut b)
        .map_err(|_| MdmaError::Archive("truncated file".into()))?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_model<T: Scalar, R: Read>(mut input: R) -> Result<MdmaModel<T>> {
    let mut magic = [0u8; 5];
    input
        .read_exact(&mut magic)
        .map_err(|_| MdmaError::Archive("truncated file".into()))?;
    if &magic != MAGIC {
        return Err(MdmaError::Archive("not a model file".into()));
    }
    let mut v = [0u8; 4];
    input
        .read_exact(&mut v)
        .map_err(|_| MdmaError::Archive("truncated file".into()))?;
    let version = u32::from_le_bytes(v);
    if version != FORMAT_VERSION {
        return Err(MdmaError::Archive(format!("unsupported format version {version}")));
    }
    let mut dims = [0usize; 5];
    for slot in &mut dims {
        let x = read_u64(&mut input)?;
        if x >= MAX_DIM {
            return Err(MdmaError::Archive("dimension out of range".into()));
        }
        *slot = x as usize;
    }
    let [d, m, depth, width, pool] = dims;
    let leaf_order = (0..d)
        .map(|_| read_u64(&mut input).map(|s| s as usize))
        .collect::<Result<Vec<_>>>()?;
    let bank = (0..d * m)
        .map(|_| UnivariateCdfNet::zeros(depth, width))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| MdmaError::Archive(e.to_string()))?;
    let mut ht = HtTensor::zeros(d, m, pool).map_err(|e| MdmaError::Archive(e.to_string()))?;
    ht.set_leaf_order(leaf_order)
        .map_err(|e| MdmaError::Archive(e.to_string()))?;
    let mut model = MdmaModel::new(bank, ht)?;
    let mut err = None;
    model.for_each_param_mut(|s| {
        for p in s.iter_mut() {
            if err.is_some() {
                return;
            }
            match read_u64(&mut input) {
                Ok(bits) => *p = T::c(f64::from_bits(bits)),
                Err(e) => err = Some(e),
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(MdmaError::Archive("trailing bytes".into()));
    }
    Ok(model)
}

pub fn save_model<T: Scalar>(model: &MdmaModel<T>, path: impl AsRef<Path>) -> Result<()> {
    write_model(model, BufWriter::new(File::create(path)?))
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<MdmaModel<T>> {
    read_model(BufReader::new(File::open(path)?))
}
