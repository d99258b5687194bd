//! Checkpoint files.
//!
//! Layout: magic `IRN1`, version u32, then one record per parameter:
//! name length (u32), name bytes, 4 shape integers (u32), raw little-endian
//! f32 values. Integers are little-endian. Loading validates every
//! name/shape against the built model and faults on any mismatch, leftover
//! or missing parameter.
//!
//! Optimizer state (`IRNO`) reuses the record encoding with `.adam_m` /
//! `.adam_v` suffixes plus the step counter, so a resumed run continues the
//! exact moment estimates.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::AdamState;
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MODEL_MAGIC: &[u8; 4] = b"IRN1";
const OPT_MAGIC: &[u8; 4] = b"IRNO";
const VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32, path: &Path) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}

fn write_record<S: Scalar>(
    w: &mut impl Write,
    name: &str,
    tensor: &Tensor<S>,
    path: &Path,
) -> Result<()> {
    write_u32(w, name.len() as u32, path)?;
    w.write_all(name.as_bytes()).map_err(|e| Error::io(path, e))?;
    for d in tensor.shape() {
        write_u32(w, d as u32, path)?;
    }
    let mut bytes = Vec::with_capacity(tensor.numel() * 4);
    for &v in tensor.data() {
        bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&bytes).map_err(|e| Error::io(path, e))
}

fn read_record<S: Scalar>(
    r: &mut impl Read,
    path: &Path,
) -> Result<Option<(String, Tensor<S>)>> {
    let mut len_buf = [0u8; 4];
    match r.read_exact(&mut len_buf) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(Error::io(path, e)),
    }
    let name_len = u32::from_le_bytes(len_buf) as usize;
    if name_len == 0 || name_len > 4096 {
        return Err(Error::format(path, format!("implausible name length {name_len}")));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name).map_err(|e| Error::io(path, e))?;
    let name = String::from_utf8(name)
        .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?;
    let mut shape = [0usize; 4];
    for d in &mut shape {
        *d = read_u32(r, path)? as usize;
    }
    let numel: usize = shape.iter().product();
    let mut bytes = vec![0u8; numel * 4];
    r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
    let data: Vec<S> = bytes
        .chunks_exact(4)
        .map(|c| S::of_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Ok(Some((name, Tensor::new(shape, data)?)))
}

fn read_all_records<S: Scalar>(
    path: &Path,
    magic: &[u8; 4],
) -> Result<(u32, HashMap<String, Tensor<S>>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut got = [0u8; 4];
    r.read_exact(&mut got).map_err(|e| Error::io(path, e))?;
    if &got != magic {
        return Err(Error::format(
            path,
            format!("bad magic {got:?}, expected {magic:?}"),
        ));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let mut records = HashMap::new();
    while let Some((name, tensor)) = read_record::<S>(&mut r, path)? {
        if records.insert(name.clone(), tensor).is_some() {
            return Err(Error::format(path, format!("duplicate record `{name}`")));
        }
    }
    Ok((version, records))
}

pub fn save_model<S: Scalar>(model: &Model<S>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(MODEL_MAGIC).map_err(|e| Error::io(path, e))?;
    write_u32(&mut w, VERSION, path)?;
    for p in model.params.iter() {
        write_record(&mut w, &p.name, &p.value, path)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Load weights into an already-built model. Every stored record must match
/// a parameter by name and shape, and every parameter must be present.
pub fn load_model<S: Scalar>(model: &mut Model<S>, path: &Path) -> Result<()> {
    let (_, mut records) = read_all_records::<S>(path, MODEL_MAGIC)?;
    for id in 0..model.params.len() {
        let name = model.params.get(id).name.clone();
        let tensor = records.remove(&name).ok_or_else(|| {
            Error::format(path, format!("checkpoint is missing parameter `{name}`"))
        })?;
        let expect = model.params.get(id).value.shape();
        if tensor.shape() != expect {
            return Err(Error::format(
                path,
                format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    tensor.shape(),
                    expect
                ),
            ));
        }
        model.params.get_mut(id).value = tensor;
    }
    if let Some(name) = records.keys().next() {
        return Err(Error::format(
            path,
            format!("checkpoint has extra parameter `{name}` not present in the model"),
        ));
    }
    Ok(())
}

pub fn save_optimizer<S: Scalar>(
    state: &AdamState<S>,
    params: &ParamSet<S>,
    path: &Path,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(OPT_MAGIC).map_err(|e| Error::io(path, e))?;
    write_u32(&mut w, VERSION, path)?;
    w.write_all(&state.step.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    for id in 0..params.len() {
        let name = &params.get(id).name;
        let (m, v) = state.moments(id);
        write_record(&mut w, &format!("{name}.adam_m"), m, path)?;
        write_record(&mut w, &format!("{name}.adam_v"), v, path)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_optimizer<S: Scalar>(
    state: &mut AdamState<S>,
    params: &ParamSet<S>,
    path: &Path,
) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut got = [0u8; 4];
    r.read_exact(&mut got).map_err(|e| Error::io(path, e))?;
    if &got != OPT_MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic {got:?}, expected {OPT_MAGIC:?}"),
        ));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let mut step_buf = [0u8; 8];
    r.read_exact(&mut step_buf).map_err(|e| Error::io(path, e))?;
    let mut records = HashMap::new();
    while let Some((name, tensor)) = read_record::<S>(&mut r, path)? {
        records.insert(name, tensor);
    }
    for id in 0..params.len() {
        let name = &params.get(id).name;
        let m = records
            .remove(&format!("{name}.adam_m"))
            .ok_or_else(|| Error::format(path, format!("missing moment for `{name}`")))?;
        let v = records
            .remove(&format!("{name}.adam_v"))
            .ok_or_else(|| Error::format(path, format!("missing moment for `{name}`")))?;
        state.set_moments(id, m, v)?;
    }
    state.step = u64::from_le_bytes(step_buf);
    Ok(())
}
