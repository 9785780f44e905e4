//! The TMILCKPT model checkpoint: a versioned binary container with named
//! parameter tensors, giving bit-exact save/load round trips.
//!
//! Layout (little-endian after the magic):
//!
//! ```text
//! magic       8 bytes  "TMILCKPT"
//! version     u32      (currently 1)
//! model_kind  u32      (0 = TargetedMIL, 1 = max-pooling baseline)
//! m           u32
//! d           u32      (0 for the baseline)
//! alpha       f64      (0 for the baseline)
//! noise_var   f64      (0 for the baseline)
//! n_tensors   u32
//! per tensor: name_len u16, name bytes, ndim u8, dims u32 × ndim,
//!             data f64 × product(dims)
//! ```

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{BaselineModel, TrainError};
use crate::model::{ModelHyper, TargetedMILModel};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"TMILCKPT";
const VERSION: u32 = 1;
const KIND_TARGETED: u32 = 0;
const KIND_BASELINE: u32 = 1;

/// Either trainable model, as stored in a checkpoint.
// A process holds at most a couple of these at once, so the size gap
// between the variants is irrelevant and boxing would only add noise.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
pub enum CheckpointModel {
    Targeted(TargetedMILModel),
    Baseline(BaselineModel),
}

impl CheckpointModel {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Targeted(_) => "targeted",
            Self::Baseline(_) => "baseline",
        }
    }

    pub fn into_targeted(self) -> Result<TargetedMILModel, TrainError> {
        match self {
            Self::Targeted(m) => Ok(m),
            Self::Baseline(_) => Err(TrainError::Checkpoint(
                "checkpoint holds a baseline model, expected TargetedMIL".into(),
            )),
        }
    }

    pub fn into_baseline(self) -> Result<BaselineModel, TrainError> {
        match self {
            Self::Baseline(m) => Ok(m),
            Self::Targeted(_) => Err(TrainError::Checkpoint(
                "checkpoint holds a TargetedMIL model, expected the baseline".into(),
            )),
        }
    }

    /// Unwraps a TargetedMIL model and enforces the caller's latent
    /// dimension.
    pub fn into_targeted_with_d(self, d: usize) -> Result<TargetedMILModel, TrainError> {
        let model = self.into_targeted()?;
        if model.hyper().d != d {
            return Err(TrainError::Checkpoint(format!(
                "latent dimension mismatch: checkpoint has d={}, expected d={}",
                model.hyper().d,
                d
            )));
        }
        Ok(model)
    }
}

fn bad(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

fn len_u32(n: usize) -> Result<u32, TrainError> {
    u32::try_from(n).map_err(|_| bad(format!("count {n} exceeds u32")))
}

fn write_tensor(
    w: &mut impl Write,
    name: &str,
    tensor: &Tensor,
) -> Result<(), TrainError> {
    let name_len = u16::try_from(name.len()).map_err(|_| bad("tensor name too long"))?;
    w.write_u16::<LittleEndian>(name_len)?;
    w.write_all(name.as_bytes())?;
    let ndim = u8::try_from(tensor.shape().len()).map_err(|_| bad("rank exceeds u8"))?;
    w.write_u8(ndim)?;
    for &dim in tensor.shape() {
        w.write_u32::<LittleEndian>(len_u32(dim)?)?;
    }
    for &v in tensor.data() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

/// Saves either model to `path` in the TMILCKPT format.
pub fn save_checkpoint(model: &CheckpointModel, path: &Path) -> Result<(), TrainError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    match model {
        CheckpointModel::Targeted(m) => {
            let h = m.hyper();
            w.write_u32::<LittleEndian>(KIND_TARGETED)?;
            w.write_u32::<LittleEndian>(len_u32(h.m)?)?;
            w.write_u32::<LittleEndian>(len_u32(h.d)?)?;
            w.write_f64::<LittleEndian>(h.alpha)?;
            w.write_f64::<LittleEndian>(h.decoder_noise_var)?;
            let params = m.params();
            w.write_u32::<LittleEndian>(len_u32(params.len())?)?;
            for (name, tensor) in TargetedMILModel::param_names().iter().zip(params) {
                write_tensor(&mut w, name, tensor)?;
            }
        }
        CheckpointModel::Baseline(m) => {
            w.write_u32::<LittleEndian>(KIND_BASELINE)?;
            w.write_u32::<LittleEndian>(len_u32(m.m())?)?;
            w.write_u32::<LittleEndian>(0)?;
            w.write_f64::<LittleEndian>(0.0)?;
            w.write_f64::<LittleEndian>(0.0)?;
            let params = m.params();
            w.write_u32::<LittleEndian>(len_u32(params.len())?)?;
            for (name, tensor) in BaselineModel::param_names().iter().zip(params) {
                write_tensor(&mut w, name, tensor)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> Result<(String, Tensor), TrainError> {
    let name_len = r.read_u16::<LittleEndian>()? as usize;
    let mut name_bytes = vec![0u8; name_len];
    r.read_exact(&mut name_bytes)?;
    let name =
        String::from_utf8(name_bytes).map_err(|_| bad("tensor name is not valid UTF-8"))?;
    let ndim = r.read_u8()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.read_u32::<LittleEndian>()? as usize);
    }
    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(r.read_f64::<LittleEndian>()?);
    }
    let tensor = Tensor::new(shape, data)
        .map_err(|e| bad(format!("tensor '{name}' has an invalid shape: {e}")))?;
    if !tensor.all_finite() {
        return Err(bad(format!("tensor '{name}' contains non-finite values")));
    }
    Ok((name, tensor))
}

/// Fills a model skeleton from named tensors, enforcing canonical names
/// and shapes.
fn fill_params(
    kind: &str,
    names: &[&str],
    targets: Vec<&mut Tensor>,
    stored: Vec<(String, Tensor)>,
) -> Result<(), TrainError> {
    if stored.len() != names.len() {
        return Err(bad(format!(
            "{kind} checkpoint has {} tensors, expected {}",
            stored.len(),
            names.len()
        )));
    }
    for ((target, expected_name), (name, tensor)) in
        targets.into_iter().zip(names).zip(stored)
    {
        if name != *expected_name {
            return Err(bad(format!(
                "unexpected tensor '{name}' (expected '{expected_name}')"
            )));
        }
        if tensor.shape() != target.shape() {
            return Err(bad(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                tensor.shape(),
                target.shape()
            )));
        }
        *target = tensor;
    }
    Ok(())
}

/// Loads a TMILCKPT file written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<CheckpointModel, TrainError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(bad(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let kind = r.read_u32::<LittleEndian>()?;
    let m = r.read_u32::<LittleEndian>()? as usize;
    let d = r.read_u32::<LittleEndian>()? as usize;
    let alpha = r.read_f64::<LittleEndian>()?;
    let noise_var = r.read_f64::<LittleEndian>()?;
    let n_tensors = r.read_u32::<LittleEndian>()? as usize;
    let mut stored = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        stored.push(read_tensor(&mut r)?);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(bad("trailing bytes after the last tensor"));
    }

    match kind {
        KIND_TARGETED => {
            let hyper = ModelHyper {
                m,
                d,
                alpha,
                decoder_noise_var: noise_var,
            };
            let mut model = TargetedMILModel::zeroed(hyper)
                .map_err(|e| bad(format!("invalid stored hyperparameters: {e}")))?;
            fill_params(
                "TargetedMIL",
                TargetedMILModel::param_names(),
                model.params_mut(),
                stored,
            )?;
            Ok(CheckpointModel::Targeted(model))
        }
        KIND_BASELINE => {
            use crate::model::net::Linear;
            if m == 0 {
                return Err(bad("baseline checkpoint has m = 0"));
            }
            let mut model = BaselineModel::from_layers(
                Linear::zeroed(m, super::BASE_HIDDEN1),
                Linear::zeroed(super::BASE_HIDDEN1, super::BASE_HIDDEN2),
                Linear::zeroed(super::BASE_HIDDEN2, 1),
            );
            fill_params(
                "baseline",
                BaselineModel::param_names(),
                model.params_mut(),
                stored,
            )?;
            Ok(CheckpointModel::Baseline(model))
        }
        other => Err(bad(format!("unknown model kind {other}"))),
    }
}
