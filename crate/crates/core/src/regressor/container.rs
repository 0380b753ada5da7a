//! Model container.
//!
//! ```text
//! "UBBR1"
//! u64 pool_size, u64 channels, u64 layer count L
//! u64 widths[L + 1]            input width first, 4 last
//! per layer: weights (out x in, row-major) then biases, f64
//! ```
//!
//! Integers and floats are little-endian.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::head::{Dense, RegressorModel};
use crate::error::{Error, Result};
use crate::io::{atomic_write, put_f64, put_u64, read_all, ByteReader};

pub const MODEL_MAGIC: &[u8; 5] = b"UBBR1";

pub fn write_model(model: &RegressorModel, w: &mut dyn Write) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    put_u64(w, model.pool_size() as u64)?;
    put_u64(w, model.channels() as u64)?;
    put_u64(w, model.layers().len() as u64)?;
    for width in model.widths() {
        put_u64(w, width as u64)?;
    }
    for layer in model.layers() {
        for &v in layer.weights.iter() {
            put_f64(w, v)?;
        }
        for &v in layer.bias.iter() {
            put_f64(w, v)?;
        }
    }
    Ok(())
}

pub fn model_to_bytes(model: &RegressorModel) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + 8 * model.parameter_count());
    write_model(model, &mut buf).expect("writing to memory");
    buf
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<RegressorModel> {
    let mut r = ByteReader::new(bytes);
    if r.take(MODEL_MAGIC.len())? != MODEL_MAGIC {
        return Err(Error::Format("not a model container (bad magic)".into()));
    }
    let pool_size = r.u64()? as usize;
    let channels = r.u64()? as usize;
    let n_layers = r.len(8)?;
    let widths = (0..=n_layers).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let expected_in = channels
        .checked_mul(pool_size)
        .and_then(|v| v.checked_mul(pool_size))
        .ok_or_else(|| Error::Format("header overflow".into()))?;
    if widths.first() != Some(&expected_in) {
        return Err(Error::Format(format!(
            "input width {:?} does not match channels {channels} x pool {pool_size}^2",
            widths.first()
        )));
    }
    if widths.last() != Some(&4) {
        return Err(Error::Format(format!("output width {:?}, expected 4", widths.last())));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for pair in widths.windows(2) {
        let (inputs, outputs) = (pair[0], pair[1]);
        let n = inputs
            .checked_mul(outputs)
            .ok_or_else(|| Error::Format("layer size overflow".into()))?;
        let mut read_vec = |n: usize| -> Result<Vec<f64>> {
            let bytes = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("layer size overflow".into()))?)?;
            Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let weights = Array2::from_shape_vec((outputs, inputs), read_vec(n)?).expect("sized above");
        let bias = Array1::from_vec(read_vec(outputs)?);
        layers.push(Dense { weights, bias });
    }
    r.finish()?;
    RegressorModel::from_layers(pool_size, channels, layers)
}

pub fn save_model(model: &RegressorModel, path: &Path) -> Result<()> {
    atomic_write(path, |w| write_model(model, w))
}

pub fn load_model(path: &Path) -> Result<RegressorModel> {
    model_from_bytes(&read_all(path)?)
}
