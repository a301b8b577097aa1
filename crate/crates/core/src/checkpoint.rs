//! Binary checkpoints: magic, version, the run configuration as text, then
//! every parameter as a name, a shape and little-endian `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"MSMATCH\0";
pub const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_str(w: &mut impl Write, s: &str) -> Result<()> {
    put_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())?;
    Ok(())
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

fn get_len(r: &mut impl Read, limit: u64, what: &str) -> Result<usize> {
    let n = get_u64(r)?;
    if n > limit {
        return Err(Error::Checkpoint(format!("{what} length {n} is implausible")));
    }
    Ok(n as usize)
}

fn get_str(r: &mut impl Read) -> Result<String> {
    let n = get_len(r, 1 << 24, "string")?;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
}

pub fn write_checkpoint(w: &mut impl Write, config: &RunConfig, model: &Model) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    put_str(w, &config.emit())?;
    put_u64(w, model.store.len() as u64)?;
    for (_, p) in model.store.iter() {
        put_str(w, &p.name)?;
        put_u64(w, p.value.rows() as u64)?;
        put_u64(w, p.value.cols() as u64)?;
        for v in p.value.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Returns the stored configuration and parameter list.
pub fn read_checkpoint(r: &mut impl Read) -> Result<(RunConfig, Vec<(String, Matrix)>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config = RunConfig::parse(&get_str(r)?)?;
    let n = get_len(r, 1 << 20, "parameter count")?;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        let name = get_str(r)?;
        let rows = get_len(r, 1 << 32, "rows")?;
        let cols = get_len(r, 1 << 32, "cols")?;
        let len = rows
            .checked_mul(cols)
            .filter(|&l| l <= 1 << 31)
            .ok_or_else(|| Error::Checkpoint(format!("parameter {name} is too large")))?;
        let mut bytes = vec![0u8; len * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.push((name, Matrix::from_vec(rows, cols, data)));
    }
    Ok((config, params))
}

pub fn save(path: &Path, config: &RunConfig, model: &Model) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut f, config, model)?;
    f.flush()?;
    Ok(())
}

/// Rebuilds the model described by the stored configuration and loads its
/// parameters.
pub fn load(path: &Path) -> Result<(RunConfig, Model)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let (config, params) = read_checkpoint(&mut f)?;
    let mut model_cfg = config.model.clone();
    if let Some((_, table)) = params.iter().find(|(n, _)| n == "embedding.table") {
        model_cfg.vocab_size = table.rows();
    }
    let mut model = Model::new(model_cfg, 0)?;
    model.load_values(&params)?;
    Ok((config, model))
}
