//! Checkpoint file: magic "SVCK", version, JSON-encoded ModelConfig
//! (length-prefixed), then named tensors as (name length, name bytes,
//! rank, dims, little-endian f32 data). Round-trips are byte-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};

use super::{ModelConfig, ModelError, ModelParams, ParamSet};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    let config_json = serde_json::to_vec(&params.config)
        .map_err(|e| ModelError::Checkpoint(format!("config encode: {e}")))?;
    out.write_u32::<LittleEndian>(config_json.len() as u32)?;
    out.write_all(&config_json)?;
    out.write_u32::<LittleEndian>(params.set.len() as u32)?;
    for (name, tensor) in params.set.iter() {
        out.write_u32::<LittleEndian>(name.len() as u32)?;
        out.write_all(name.as_bytes())?;
        out.write_u32::<LittleEndian>(tensor.ndim() as u32)?;
        for &d in tensor.shape() {
            out.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in tensor.iter() {
            out.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    let mut file = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic, not a checkpoint".into()));
    }
    let version = file.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Version {
            got: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config_len = file.read_u32::<LittleEndian>()? as usize;
    let mut config_bytes = vec![0u8; config_len];
    file.read_exact(&mut config_bytes)?;
    let config: ModelConfig = serde_json::from_slice(&config_bytes)
        .map_err(|e| ModelError::Checkpoint(format!("config decode: {e}")))?;
    config.validate()?;

    let n_tensors = file.read_u32::<LittleEndian>()? as usize;
    let mut set = ParamSet::new();
    for _ in 0..n_tensors {
        let name_len = file.read_u32::<LittleEndian>()? as usize;
        let mut name_bytes = vec![0u8; name_len];
        file.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| ModelError::Checkpoint("tensor name is not utf-8".into()))?;
        let rank = file.read_u32::<LittleEndian>()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(file.read_u32::<LittleEndian>()? as usize);
        }
        let n_el: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n_el);
        for _ in 0..n_el {
            data.push(file.read_f32::<LittleEndian>()? as f64);
        }
        let tensor = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| ModelError::Checkpoint(format!("tensor {name}: {e}")))?;
        set.insert(&name, tensor);
    }

    let params = ModelParams { config, set };
    validate_shapes(&params)?;
    Ok(params)
}

/// Every tensor the config implies must be present with the right shape.
fn validate_shapes(params: &ModelParams) -> Result<(), ModelError> {
    let reference = ModelParams::init(&params.config, 0)?;
    if reference.set.len() != params.set.len() {
        return Err(ModelError::Checkpoint(format!(
            "expected {} tensors for this config, found {}",
            reference.set.len(),
            params.set.len()
        )));
    }
    for ((en, et), (gn, gt)) in reference.set.iter().zip(params.set.iter()) {
        if en != gn {
            return Err(ModelError::Checkpoint(format!(
                "tensor order mismatch: expected {en}, found {gn}"
            )));
        }
        if et.shape() != gt.shape() {
            return Err(ModelError::Checkpoint(format!(
                "tensor {gn} has shape {:?}, config implies {:?}",
                gt.shape(),
                et.shape()
            )));
        }
    }
    Ok(())
}
