//! Checkpoint container: `AMECKPT1` magic, a little-endian u64 metadata
//! length, JSON metadata (phase, epoch, seed, config snapshot, metrics trail,
//! tensor index), then the raw little-endian tensor payload in index order.
//! Save → load round-trips bit-exactly.

use super::{EpochLog, ModelBundle, Phase};
use crate::config::RunConfig;
use crate::nn;
use crate::{Error, Result, Scalar};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"AMECKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub phase: Phase,
    pub epoch: usize,
    pub seed: u64,
    pub dtype: String,
    pub run: RunConfig,
    pub metrics: Vec<EpochLog>,
    pub tensors: Vec<TensorInfo>,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptHeader { path: path.to_path_buf(), reason: reason.into() }
}

/// Serializes the bundle under `meta` (whose tensor index is filled in here).
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    bundle: &ModelBundle<T>,
    mut meta: CheckpointMeta,
) -> Result<()> {
    let state = nn::collect_state(bundle);
    meta.dtype = T::DTYPE.to_string();
    meta.tensors = state
        .iter()
        .map(|(name, arr)| TensorInfo { name: name.clone(), shape: arr.shape().to_vec() })
        .collect();

    let json = serde_json::to_vec(&meta)?;
    let payload: usize = state.iter().map(|(_, a)| a.len() * T::BYTES).sum();
    let mut bytes = Vec::with_capacity(MAGIC.len() + 8 + json.len() + payload);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, arr) in &state {
        for &v in arr.iter() {
            v.write_le(&mut bytes);
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, bytes).map_err(|_| Error::UnwritablePath(path.to_path_buf()))
}

/// Reads metadata only (no tensors); useful for inspection.
pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = read_file(path)?;
    let (meta, _) = split_meta(path, &bytes)?;
    Ok(meta)
}

/// Rebuilds the bundle recorded in the checkpoint.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(CheckpointMeta, ModelBundle<T>)> {
    let bytes = read_file(path)?;
    let (meta, mut offset) = split_meta(path, &bytes)?;
    if meta.dtype != T::DTYPE {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint holds {} tensors, asked to load as {}",
            meta.dtype,
            T::DTYPE
        )));
    }

    let mut tensors: HashMap<String, ArrayD<T>> = HashMap::new();
    for info in &meta.tensors {
        let n: usize = info.shape.iter().product();
        let end = offset + n * T::BYTES;
        if end > bytes.len() {
            return Err(corrupt(path, format!("payload truncated at tensor {}", info.name)));
        }
        let values: Vec<T> =
            bytes[offset..end].chunks_exact(T::BYTES).map(T::read_le).collect();
        let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&info.shape), values)
            .map_err(|e| corrupt(path, format!("tensor {}: {e}", info.name)))?;
        tensors.insert(info.name.clone(), arr);
        offset = end;
    }
    if offset != bytes.len() {
        return Err(corrupt(path, "trailing bytes after tensor payload"));
    }

    let mut bundle = ModelBundle::<T>::new(&meta.run.backbone, &meta.run.aggregation, meta.seed)?;
    nn::load_state(&mut bundle, &tensors)?;
    Ok((meta, bundle))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(std::fs::read(path)?)
}

fn split_meta(path: &Path, bytes: &[u8]) -> Result<(CheckpointMeta, usize)> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt(path, "missing AMECKPT1 magic"));
    }
    let len_bytes: [u8; 8] = bytes[8..16].try_into().expect("eight bytes");
    let json_len = u64::from_le_bytes(len_bytes) as usize;
    let end = 16usize.checked_add(json_len).ok_or_else(|| corrupt(path, "metadata length overflow"))?;
    if end > bytes.len() {
        return Err(corrupt(path, "metadata length exceeds file size"));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[16..end])
        .map_err(|e| corrupt(path, format!("metadata: {e}")))?;
    Ok((meta, end))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agg::AggregationConfig;
    use crate::config::DataConfig;
    use crate::net::BackboneConfig;
    use crate::train::PhaseConfig;

    fn tiny_run_config() -> RunConfig {
        RunConfig {
            data: DataConfig { data_dir: "d".into(), manifest: "m.json".into() },
            backbone: BackboneConfig {
                stage_channels: [4, 8, 8, 8],
                input_size: 32,
                ..Default::default()
            },
            phase: PhaseConfig::default(),
            aggregation: AggregationConfig { attention_hidden: 4, ..Default::default() },
        }
    }

    fn tiny_meta(run: &RunConfig) -> CheckpointMeta {
        CheckpointMeta {
            phase: Phase::MultiExit,
            epoch: 3,
            seed: 11,
            dtype: String::new(),
            run: run.clone(),
            metrics: vec![EpochLog {
                epoch: 0,
                phase: Phase::MultiExit,
                loss: 1.0,
                lr: 1e-4,
                exit_accuracy: Some([0.5; 4]),
            }],
            tensors: Vec::new(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let run = tiny_run_config();
        let bundle = ModelBundle::<f32>::new(&run.backbone, &run.aggregation, 11).unwrap();
        let hash_before = nn::state_hash(&bundle);
        save_checkpoint(&path, &bundle, tiny_meta(&run)).unwrap();
        let (meta, loaded) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(nn::state_hash(&loaded), hash_before);
        assert_eq!(meta.phase, Phase::MultiExit);
        assert_eq!(meta.epoch, 3);
        assert_eq!(meta.seed, 11);
        assert_eq!(meta.dtype, "f32");
        assert_eq!(meta.run, run);
        assert_eq!(meta.metrics.len(), 1);
    }

    #[test]
    fn magic_and_dtype_are_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let run = tiny_run_config();
        let bundle = ModelBundle::<f32>::new(&run.backbone, &run.aggregation, 0).unwrap();
        save_checkpoint(&path, &bundle, tiny_meta(&run)).unwrap();

        assert!(matches!(
            load_checkpoint::<f64>(&path),
            Err(Error::IncompatibleCheckpoint(_))
        ));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::CorruptHeader { .. })));
    }

    #[test]
    fn truncated_payload_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let run = tiny_run_config();
        let bundle = ModelBundle::<f32>::new(&run.backbone, &run.aggregation, 0).unwrap();
        save_checkpoint(&path, &bundle, tiny_meta(&run)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::CorruptHeader { .. })));
    }

    #[test]
    fn missing_file_is_a_clean_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&dir.path().join("none.ckpt")),
            Err(Error::MissingFile(_))
        ));
    }
}
