//! Binary checkpoint format.
//!
//! ```text
//! magic       7 bytes   "CHOPPY1"
//! n, d, heads, layers, flags            u64 LE each (flags bit 0: standardize scores)
//! array count                           u64 LE
//! per array, in ModelParams declaration order:
//!     ndim    u64 LE
//!     dims    ndim × u64 LE
//!     values  product(dims) × f64 LE
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{expected_shapes, LayerParams, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"CHOPPY1";
const FLAG_STANDARDIZE: u64 = 1;

pub fn write_checkpoint<W: Write>(
    mut w: W,
    config: &ModelConfig,
    params: &ModelParams,
) -> Result<()> {
    params.check_shapes(config)?;
    w.write_all(MAGIC)?;
    let flags = if config.standardize_scores {
        FLAG_STANDARDIZE
    } else {
        0
    };
    for v in [
        config.n as u64,
        config.d as u64,
        config.heads as u64,
        config.layers as u64,
        flags,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    let tensors = params.tensors();
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated while reading {what}: {e}")))?;
    Ok(u64::from_le_bytes(buf))
}

/// Reads a checkpoint. The returned config has `seed = 0`; seeds only
/// matter for initialization and are not stored.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ModelConfig, ModelParams)> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(
            "bad magic; not a CHOPPY1 checkpoint".into(),
        ));
    }
    let mut header = [0usize; 5];
    for (slot, name) in header
        .iter_mut()
        .zip(["n", "d", "heads", "layers", "flags"])
    {
        *slot = read_u64(&mut r, name)? as usize;
    }
    let [n, d, heads, layers, flags] = header;
    if flags as u64 & !FLAG_STANDARDIZE != 0 {
        return Err(Error::Checkpoint(format!("unknown flags {flags:#x}")));
    }
    let config = ModelConfig {
        n,
        d,
        heads,
        layers,
        seed: 0,
        standardize_scores: flags as u64 & FLAG_STANDARDIZE != 0,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("stored config invalid: {e}")))?;

    let expected = expected_shapes(&config);
    let count = read_u64(&mut r, "array count")? as usize;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "{count} arrays stored, config implies {}",
            expected.len()
        )));
    }
    let mut arrays = Vec::with_capacity(count);
    for (i, shape) in expected.iter().enumerate() {
        let ndim = read_u64(&mut r, "array rank")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim.min(8) {
            dims.push(read_u64(&mut r, "array extent")? as usize);
        }
        if &dims != shape {
            return Err(Error::Checkpoint(format!(
                "array {i} has shape {dims:?}, config implies {shape:?}"
            )));
        }
        let len: usize = dims.iter().product();
        let mut bytes = vec![0u8; len * 8];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::Checkpoint(format!("truncated in array {i}: {e}")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        arrays.push(Tensor::new(dims, data)?);
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last array".into()));
    }

    let mut it = arrays.into_iter();
    let mut next = || it.next().expect("count checked");
    let positional = next();
    let layers = (0..layers)
        .map(|_| LayerParams {
            w_query: next(),
            w_key: next(),
            w_value: next(),
            w_ff: next(),
            b_ff: next(),
            norm1_gain: next(),
            norm1_bias: next(),
            norm2_gain: next(),
            norm2_bias: next(),
        })
        .collect();
    let output = next();
    Ok((
        config,
        ModelParams {
            positional,
            layers,
            output,
        },
    ))
}

pub fn save(path: &Path, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io_at(path, e))?;
    write_checkpoint(BufWriter::new(file), config, params).map_err(|e| match e {
        Error::Io(e) => Error::io_at(path, e),
        other => other,
    })
}

pub fn load(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let file = File::open(path).map_err(|e| Error::io_at(path, e))?;
    read_checkpoint(BufReader::new(file)).map_err(|e| match e {
        Error::Io(e) => Error::io_at(path, e),
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
