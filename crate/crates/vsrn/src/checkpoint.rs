//! Model snapshots: named parameter arrays with the config, epoch, and
//! validation score they were taken at, in a checksummed binary format.

use std::fs;
use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::io_util::{Frame, FrameReader};
use crate::model::{ModelDims, ModelParams};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 4] = b"VSRN";
const CHECKPOINT_VERSION: u32 = 1;

/// A trained-model snapshot.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// 1-based epoch the snapshot was taken after.
    pub epoch: u32,
    pub val_rsum: f64,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Snapshot a model under its training config.
    pub fn from_model(
        config: &TrainConfig,
        model: &ModelParams,
        epoch: u32,
        val_rsum: f64,
    ) -> Self {
        Checkpoint {
            config: config.clone(),
            epoch,
            val_rsum,
            params: model.named_clone(),
        }
    }

    /// Rebuild the model; dimensions come from the stored config plus the
    /// embedding table's row count.
    pub fn to_model(&self) -> Result<ModelParams> {
        let embedding = self
            .params
            .iter()
            .find(|(name, _)| name == "text.embedding")
            .ok_or_else(|| Error::Format("checkpoint has no text.embedding parameter".into()))?;
        let dims = ModelDims {
            feature_dim: self.config.feature_dim,
            joint_dim: self.config.joint_dim,
            vocab_size: embedding.1.shape()[0],
            rrr_layers: self.config.rrr_layers,
        };
        ModelParams::from_named(dims, self.params.clone())
    }
}

/// Layout: magic, version, config text, epoch, validation rsum, then each
/// parameter as name, rank, dims, and raw little-endian doubles; a CRC32
/// trailer guards the whole file.
pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let mut frame = Frame::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
    frame.put_str(&checkpoint.config.to_config_string());
    frame.put_u32(checkpoint.epoch);
    frame.put_f64(checkpoint.val_rsum);
    frame.put_u32(checkpoint.params.len() as u32);
    for (name, tensor) in &checkpoint.params {
        frame.put_str(name);
        frame.put_u32(tensor.shape().len() as u32);
        for &dim in tensor.shape() {
            frame.put_u32(dim as u32);
        }
        frame.put_f64s(tensor.values());
    }
    fs::write(path, frame.finish())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let data = fs::read(path)?;
    let mut reader = FrameReader::open(&data, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let config = TrainConfig::parse(&reader.get_str()?)?;
    let epoch = reader.get_u32()?;
    let val_rsum = reader.get_f64()?;
    let n_params = reader.get_u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    let mut seen = std::collections::HashSet::new();
    for _ in 0..n_params {
        let name = reader.get_str()?;
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate parameter {name:?}")));
        }
        let rank = reader.get_u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(reader.get_u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let values = reader.get_f64s(numel)?;
        params.push((name, Tensor::param(&shape, values)?));
    }
    reader.expect_end()?;
    Ok(Checkpoint {
        config,
        epoch,
        val_rsum,
        params,
    })
}
