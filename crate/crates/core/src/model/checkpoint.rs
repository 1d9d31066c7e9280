//! Binary model checkpoint.
//!
//! Layout (all integers little-endian):
//!   bytes 0..4   magic `OWLM`
//!   byte  4      format version (1)
//!   bytes 5..    7 × u32 config: layers, width, heads, ffn_width,
//!                feat_dim, window, classes
//!   then         u64 seed, u64 parameter scalar count
//!   then         parameters as f64, in `ModelParams::tensors()` order

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{init_model, ModelConfig, ModelParams};
use crate::scalar::Real;

const MAGIC: &[u8; 4] = b"OWLM";
const VERSION: u8 = 1;

pub fn save_checkpoint<F: Real>(params: &ModelParams<F>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&[VERSION]).map_err(io_err)?;
    let c = &params.config;
    for v in [
        c.layers, c.width, c.heads, c.ffn_width, c.feat_dim, c.window, c.classes,
    ] {
        w.write_all(&(v as u32).to_le_bytes()).map_err(io_err)?;
    }
    w.write_all(&c.seed.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(params.num_scalars() as u64).to_le_bytes())
        .map_err(io_err)?;
    for t in params.tensors() {
        for &v in t.data() {
            w.write_all(&v.to_f64_lossy().to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<ModelParams<F>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: not a model checkpoint",
            path.display()
        )));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version).map_err(io_err)?;
    if version[0] != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint version {}",
            path.display(),
            version[0]
        )));
    }
    let mut u32_buf = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<usize> {
        r.read_exact(&mut u32_buf)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(u32::from_le_bytes(u32_buf) as usize)
    };
    let config = ModelConfig {
        layers: read_u32(&mut r)?,
        width: read_u32(&mut r)?,
        heads: read_u32(&mut r)?,
        ffn_width: read_u32(&mut r)?,
        feat_dim: read_u32(&mut r)?,
        window: read_u32(&mut r)?,
        classes: read_u32(&mut r)?,
        seed: {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(io_err)?;
            u64::from_le_bytes(b)
        },
    };
    let mut count_buf = [0u8; 8];
    r.read_exact(&mut count_buf).map_err(io_err)?;
    let count = u64::from_le_bytes(count_buf) as usize;
    let mut params: ModelParams<F> = init_model(&config)?;
    if params.num_scalars() != count {
        return Err(Error::Format(format!(
            "{}: payload of {count} scalars for a {}-parameter model",
            path.display(),
            params.num_scalars()
        )));
    }
    let mut flat = Vec::with_capacity(count);
    let mut val_buf = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut val_buf).map_err(io_err)?;
        flat.push(F::from_f64_lossy(f64::from_le_bytes(val_buf)));
    }
    params.set_from_flat(&flat)?;
    Ok(params)
}
