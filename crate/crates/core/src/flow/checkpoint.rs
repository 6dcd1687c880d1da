//! Binary checkpoint: little-endian header followed by the raw parameters.
//!
//! ```text
//! magic        8 bytes  "FRFTCKPT"
//! version      u32      1
//! data_dim     u32
//! n_conditions u32
//! cond_dim     u32
//! time_freqs   u32
//! activation   u8       1 = silu, 2 = tanh
//! n_hidden     u32
//! hidden       u32 × n_hidden
//! seed         u64
//! n_params     u64
//! params       f64 × n_params
//! ```

use std::io::{Read, Write};

use super::model::{Activation, Arch, VelocityModel};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"FRFTCKPT";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, model: &VelocityModel, seed: u64) -> Result<()> {
    let a = model.arch();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in [a.data_dim, a.n_conditions, a.cond_dim, a.time_freqs] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&[a.activation.code()])?;
    w.write_all(&(a.hidden.len() as u32).to_le_bytes())?;
    for &h in &a.hidden {
        w.write_all(&(h as u32).to_le_bytes())?;
    }
    w.write_all(&seed.to_le_bytes())?;
    w.write_all(&(model.num_params() as u64).to_le_bytes())?;
    for p in model.params() {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Returns the model and the seed recorded in the header.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(VelocityModel, u64)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let data_dim = read_u32(&mut r)? as usize;
    let n_conditions = read_u32(&mut r)? as usize;
    let cond_dim = read_u32(&mut r)? as usize;
    let time_freqs = read_u32(&mut r)? as usize;
    let mut code = [0u8; 1];
    r.read_exact(&mut code)?;
    let activation = Activation::from_code(code[0])
        .ok_or_else(|| Error::Format(format!("unknown activation code {}", code[0])))?;
    let n_hidden = read_u32(&mut r)? as usize;
    let hidden = (0..n_hidden)
        .map(|_| read_u32(&mut r).map(|h| h as usize))
        .collect::<Result<Vec<_>>>()?;
    let seed = read_u64(&mut r)?;
    let n_params = read_u64(&mut r)? as usize;
    let arch = Arch {
        data_dim,
        n_conditions,
        cond_dim,
        time_freqs,
        hidden,
        activation,
    };
    if n_params != arch.param_count() {
        return Err(Error::Format(format!(
            "parameter count {n_params} does not match architecture ({})",
            arch.param_count()
        )));
    }
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        params.push(f64::from_le_bytes(b));
    }
    Ok((VelocityModel::from_params(arch, params)?, seed))
}

pub fn save(path: &std::path::Path, model: &VelocityModel, seed: u64) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(&mut w, model, seed)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &std::path::Path) -> Result<(VelocityModel, u64)> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}
