//! Checkpoint serialization.
//!
//! Binary layout: the magic bytes `INFC1`, then one record per array:
//! `[u32 name_len | name utf-8 | u32 ndims | u64 dims ... | f32 LE data]`
//! with row-major data. A JSON sidecar `<ckpt>.config.json` carries the
//! full training configuration, the iteration counter and the dataset
//! normalization statistics needed to drive the model on raw states.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::synthdata::NormStats;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"INFC1";

#[derive(Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub train_config: TrainConfig,
    pub iteration: u64,
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
}

impl CheckpointMeta {
    pub fn stats(&self) -> NormStats {
        NormStats {
            state_mean: Array1::from_vec(self.state_mean.clone()),
            state_std: Array1::from_vec(self.state_std.clone()),
            action_mean: Array1::from_vec(self.action_mean.clone()),
            action_std: Array1::from_vec(self.action_std.clone()),
        }
    }
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().unwrap_or_default().to_os_string();
    name.push(".config.json");
    ckpt.with_file_name(name)
}

fn write_record(out: &mut impl Write, name: &str, arr: &Array2<f64>) -> std::io::Result<()> {
    out.write_all(&(name.len() as u32).to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    out.write_all(&2u32.to_le_bytes())?;
    out.write_all(&(arr.nrows() as u64).to_le_bytes())?;
    out.write_all(&(arr.ncols() as u64).to_le_bytes())?;
    for v in arr.iter() {
        out.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    cfg: &TrainConfig,
    iteration: u64,
    stats: &NormStats,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    for i in 0..model.store.len() {
        write_record(&mut buf, model.store.name(i), model.store.array(i))
            .map_err(Error::io(path))?;
    }
    write_record(&mut buf, "codebook.alpha", &model.codebook.alpha).map_err(Error::io(path))?;
    std::fs::write(path, &buf).map_err(Error::io(path))?;

    let meta = CheckpointMeta {
        train_config: cfg.clone(),
        iteration,
        state_mean: stats.state_mean.to_vec(),
        state_std: stats.state_std.to_vec(),
        action_mean: stats.action_mean.to_vec(),
        action_std: stats.action_std.to_vec(),
    };
    let sidecar = sidecar_path(path);
    let text = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Checkpoint { path: sidecar.clone(), message: e.to_string() })?;
    std::fs::write(&sidecar, text + "\n").map_err(Error::io(&sidecar))?;
    Ok(())
}

fn read_exact_into(r: &mut impl Read, n: usize, path: &Path) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|_| Error::Checkpoint {
        path: path.to_path_buf(),
        message: "truncated record".into(),
    })?;
    Ok(buf)
}

fn read_records(path: &Path) -> Result<Vec<(String, Array2<f64>)>> {
    let data = std::fs::read(path).map_err(Error::io(path))?;
    if data.len() < 5 || &data[..5] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message: "missing INFC1 magic".into(),
        });
    }
    let mut cur = &data[5..];
    let mut records = Vec::new();
    while !cur.is_empty() {
        let name_len = u32::from_le_bytes(read_exact_into(&mut cur, 4, path)?.try_into().unwrap());
        let name_bytes = read_exact_into(&mut cur, name_len as usize, path)?;
        let name = String::from_utf8(name_bytes).map_err(|_| Error::Checkpoint {
            path: path.to_path_buf(),
            message: "record name is not utf-8".into(),
        })?;
        let ndims = u32::from_le_bytes(read_exact_into(&mut cur, 4, path)?.try_into().unwrap());
        if ndims != 2 {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("record `{name}`: expected 2 dims, found {ndims}"),
            });
        }
        let rows = u64::from_le_bytes(read_exact_into(&mut cur, 8, path)?.try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(read_exact_into(&mut cur, 8, path)?.try_into().unwrap()) as usize;
        let raw = read_exact_into(&mut cur, rows * cols * 4, path)?;
        let mut arr = Array2::zeros((rows, cols));
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            arr[(i / cols.max(1), i % cols.max(1))] =
                f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
        records.push((name, arr));
    }
    Ok(records)
}

pub struct LoadedCheckpoint {
    pub model: Model,
    pub meta: CheckpointMeta,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let sidecar = sidecar_path(path);
    let text = std::fs::read_to_string(&sidecar).map_err(Error::io(&sidecar))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
        path: sidecar.clone(),
        message: format!("invalid sidecar: {e}"),
    })?;
    meta.train_config.validate()?;

    let mut model = Model::new(
        &meta.train_config.model,
        &meta.train_config.model.codebook,
        meta.train_config.seed,
    );
    let mut records = read_records(path)?;
    let mut used = vec![false; records.len()];
    for i in 0..model.store.len() {
        let name = model.store.name(i).to_string();
        let pos = records.iter().position(|(n, _)| n == &name).ok_or_else(|| {
            Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("missing record `{name}`"),
            }
        })?;
        let expected = model.store.array(i).raw_dim();
        if records[pos].1.raw_dim() != expected {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!(
                    "record `{name}`: shape {:?} does not match model {:?}",
                    records[pos].1.shape(),
                    expected
                ),
            });
        }
        model.store.array_mut(i).assign(&records[pos].1);
        used[pos] = true;
    }
    let pos = records
        .iter()
        .position(|(n, _)| n == "codebook.alpha")
        .ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            message: "missing record `codebook.alpha`".into(),
        })?;
    if records[pos].1.raw_dim() != model.codebook.alpha.raw_dim() {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message: "record `codebook.alpha` has the wrong shape".into(),
        });
    }
    model.codebook.alpha = std::mem::take(&mut records[pos].1);
    used[pos] = true;
    if let Some(stale) = used.iter().position(|u| !u) {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!("unexpected record `{}`", records[stale].0),
        });
    }
    Ok(LoadedCheckpoint { model, meta })
}

/// Hex SHA-256 of a file, used as the model identity in label sets.
pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let data = std::fs::read(path).map_err(Error::io(path))?;
    Ok(hex::encode(Sha256::digest(&data)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;

    #[test]
    fn checkpoint_round_trip() {
        let cfg = TrainConfig::tiny(8, 2);
        let model = Model::new(&cfg.model, &cfg.model.codebook, 9);
        let stats = NormStats::identity(8, 2);
        let dir = std::env::temp_dir().join(format!("infocon_ckpt_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.infc");
        save_checkpoint(&path, &model, &cfg, 123, &stats).unwrap();

        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.meta.iteration, 123);
        for i in 0..model.store.len() {
            let orig = model.store.array(i).mapv(|v| v as f32 as f64);
            assert_eq!(&orig, loaded.model.store.array(i), "{}", model.store.name(i));
        }
        let alpha32 = model.codebook.alpha.mapv(|v| v as f32 as f64);
        assert_eq!(alpha32, loaded.model.codebook.alpha);

        // Saving twice produces identical bytes.
        let path2 = dir.join("model2.infc");
        save_checkpoint(&path2, &model, &cfg, 123, &stats).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        assert_eq!(file_sha256(&path).unwrap(), file_sha256(&path2).unwrap());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let cfg = TrainConfig::tiny(8, 2);
        let model = Model::new(&cfg.model, &cfg.model.codebook, 9);
        let stats = NormStats::identity(8, 2);
        let dir = std::env::temp_dir().join(format!("infocon_ckpt_bad_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.infc");
        save_checkpoint(&path, &model, &cfg, 1, &stats).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = match load_checkpoint(&path) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("corrupt checkpoint loaded"),
        };
        assert!(err.contains("magic"), "{err}");
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
