//! Binary checkpoint format.
//!
//! ```text
//! magic        8 bytes  "TINYLM01"
//! vocab_size   u32 LE
//! d_model      u32 LE
//! n_layers     u32 LE
//! n_heads      u32 LE
//! context_len  u32 LE
//! n_params     u64 LE
//! params       n_params x f64 LE
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelState};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TINYLM01";

pub fn write_checkpoint<W: Write>(model: &ModelState, w: &mut W) -> Result<()> {
    let c = model.config();
    w.write_all(MAGIC)?;
    for v in [
        c.vocab_size,
        c.d_model,
        c.n_layers,
        c.n_heads,
        c.context_len,
    ] {
        let v =
            u32::try_from(v).map_err(|_| Error::BadCheckpoint("dimension overflows u32".into()))?;
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(model.params().len() as u64).to_le_bytes())?;
    for p in model.params() {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<ModelState> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::BadCheckpoint("wrong magic".into()));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let config = ModelConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        n_layers: dims[2],
        n_heads: dims[3],
        context_len: dims[4],
    };
    config
        .validate()
        .map_err(|e| Error::BadCheckpoint(e.to_string()))?;
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    let n = u64::from_le_bytes(b) as usize;
    if n != config.param_count() {
        return Err(Error::BadCheckpoint(format!(
            "header declares {n} parameters, configuration needs {}",
            config.param_count()
        )));
    }
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b)?;
        params.push(f64::from_le_bytes(b));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::BadCheckpoint(
            "trailing bytes after parameters".into(),
        ));
    }
    ModelState::from_params(config, params).map_err(|e| Error::BadCheckpoint(e.to_string()))
}

pub fn save_checkpoint(model: &ModelState, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
