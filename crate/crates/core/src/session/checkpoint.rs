//! Binary checkpoint files: "ODTC" magic, version, JSON metadata block,
//! then named parameter tensors. Round trips are bit-exact, writes are
//! atomic (temp file + rename), and any structural damage — bad magic,
//! wrong version, truncation, trailing bytes — is rejected as corrupt.
//!
//! Checkpoints carry parameters and metadata only. Optimiser moments are
//! deliberately not serialised: each training session starts Adam fresh,
//! and the freezing mask is training-time state, so a checkpoint saved
//! under one mask loads into a model using any other.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{NetConfig, NetError, ToyAcousticModel};
use crate::seeding;
use crate::topology::Category;

use super::SessionConfig;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ODTC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Sanity bound on a single tensor's element count when reading.
const MAX_TENSOR_VALUES: u64 = 100_000_000;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not fit the model: {0}")]
    Shape(#[from] NetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint metadata: {0}")]
    Meta(#[from] serde_json::Error),
}

/// Everything needed to interpret the tensors: which round/epoch produced
/// them, the validation WER they achieved, the architecture, and the
/// feature standardisation (per mel bin) that inference must reuse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub round: u64,
    pub epoch: u64,
    pub val_wer: f64,
    pub submodel: Category,
    pub config_hash: u64,
    pub net_config: NetConfig,
    pub corpus_seed: u64,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
}

/// Stable hash of the run configuration, stored in metadata so a loaded
/// checkpoint can be matched to the config that produced it.
pub fn config_hash(session: &SessionConfig, net: &NetConfig) -> u64 {
    let text = serde_json::to_string(&(session, net)).expect("configs serialise");
    seeding::fnv1a(text.as_bytes())
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serialises metadata + all model tensors to the wire format.
pub fn checkpoint_bytes(model: &ToyAcousticModel, meta: &CheckpointMeta) -> Vec<u8> {
    let meta_json = serde_json::to_vec(meta).expect("metadata serialises");
    let tensors = model.export_tensors();
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    push_u32(&mut buf, CHECKPOINT_VERSION);
    push_u32(&mut buf, meta_json.len() as u32);
    buf.extend_from_slice(&meta_json);
    push_u32(&mut buf, tensors.len() as u32);
    for (name, dims, values) in &tensors {
        push_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        push_u32(&mut buf, dims.len() as u32);
        for &d in dims {
            push_u64(&mut buf, d as u64);
        }
        for &v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

/// Atomically writes the checkpoint: the bytes land under a temporary name
/// in the destination directory and are renamed into place, so a crash
/// never leaves a half-written file at `path`.
pub fn save_checkpoint(
    model: &ToyAcousticModel,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<(), CheckpointError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let bytes = checkpoint_bytes(model, meta);
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "truncated while reading {what} (need {n} bytes at offset {}, file has {})",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint file into metadata and named tensors.
pub fn load_checkpoint(
    path: &Path,
) -> Result<(CheckpointMeta, Vec<(String, Vec<usize>, Vec<f64>)>), CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(
    bytes: &[u8],
) -> Result<(CheckpointMeta, Vec<(String, Vec<usize>, Vec<f64>)>), CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Corrupt(format!(
            "bad magic {magic:02x?}, expected {CHECKPOINT_MAGIC:02x?}"
        )));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Corrupt(format!(
            "unsupported format version {version} (this build reads {CHECKPOINT_VERSION})"
        )));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta_bytes = r.take(meta_len, "metadata")?;
    let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)?;
    if meta.format_version != version {
        return Err(CheckpointError::Corrupt(format!(
            "metadata claims version {}, header says {version}",
            meta.format_version
        )));
    }
    let tensor_count = r.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(tensor_count as usize);
    for i in 0..tensor_count {
        let name_len = r.u32("tensor name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
            .map_err(|e| CheckpointError::Corrupt(format!("tensor {i} name not UTF-8: {e}")))?;
        let rank = r.u32("tensor rank")?;
        let mut dims = Vec::with_capacity(rank as usize);
        let mut count: u64 = 1;
        for _ in 0..rank {
            let d = r.u64("tensor dim")?;
            count = count.saturating_mul(d.max(1)).min(u64::MAX);
            dims.push(d as usize);
        }
        if count > MAX_TENSOR_VALUES {
            return Err(CheckpointError::Corrupt(format!(
                "tensor '{name}' claims {count} values"
            )));
        }
        let raw = r.take(count as usize * 8, "tensor values")?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, dims, values));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok((meta, tensors))
}

/// Loads a checkpoint's parameters into an existing model; shapes must
/// match the model's config. Returns the metadata.
pub fn load_into_model(
    path: &Path,
    model: &mut ToyAcousticModel,
) -> Result<CheckpointMeta, CheckpointError> {
    let (meta, tensors) = load_checkpoint(path)?;
    model.import_tensors(&tensors)?;
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureMatrix;
    use crate::session::SessionConfig;

    fn test_meta(net_config: &NetConfig) -> CheckpointMeta {
        CheckpointMeta {
            format_version: CHECKPOINT_VERSION,
            round: 2,
            epoch: 7,
            val_wer: 0.3125,
            submodel: Category::Medium,
            config_hash: config_hash(&SessionConfig::default(), net_config),
            net_config: net_config.clone(),
            corpus_seed: 4242,
            feature_mean: vec![0.5; 4],
            feature_std: vec![1.5; 4],
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = NetConfig::grad_check(5);
        let model = ToyAcousticModel::init(cfg.clone()).unwrap();
        let meta = test_meta(&cfg);
        save_checkpoint(&model, &meta, &path).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();

        let mut other = ToyAcousticModel::init(NetConfig::grad_check(6)).unwrap();
        let loaded_meta = load_into_model(&path, &mut other).unwrap();
        assert_eq!(loaded_meta, meta);
        assert_eq!(other.export_tensors(), model.export_tensors());

        // Save → load → save is byte-identical.
        let path2 = dir.path().join("m2.ckpt");
        save_checkpoint(&other, &loaded_meta, &path2).unwrap();
        assert_eq!(bytes1, std::fs::read(&path2).unwrap());
    }

    #[test]
    fn round_trip_preserves_forward_logits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = NetConfig::grad_check(9);
        let model = ToyAcousticModel::init(cfg.clone()).unwrap();
        save_checkpoint(&model, &test_meta(&cfg), &path).unwrap();

        let mut other = ToyAcousticModel::init(NetConfig::grad_check(10)).unwrap();
        load_into_model(&path, &mut other).unwrap();
        let mut rng = crate::seeding::rng_from(3, "ckpt-logits");
        use rand::Rng;
        let frames: Vec<Vec<f64>> = (0..9)
            .map(|_| (0..80).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let feats = FeatureMatrix::from_frames(frames).unwrap();
        let (a, _) = model.forward(&feats).unwrap();
        let (b, _) = other.forward(&feats).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn masks_are_not_serialised() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = NetConfig::grad_check(5);
        let mut medium = ToyAcousticModel::init(cfg.clone()).unwrap();
        medium.set_first_trainable_layer(1).unwrap();
        save_checkpoint(&medium, &test_meta(&cfg), &path).unwrap();

        let mut heavy = ToyAcousticModel::init(cfg).unwrap();
        heavy.set_first_trainable_layer(0).unwrap();
        load_into_model(&path, &mut heavy).unwrap();
        // The mask of the destination model is untouched by loading.
        assert_eq!(heavy.first_trainable_layer(), 0);
    }

    #[test]
    fn truncations_are_rejected() {
        let cfg = NetConfig::grad_check(5);
        let model = ToyAcousticModel::init(cfg.clone()).unwrap();
        let bytes = checkpoint_bytes(&model, &test_meta(&cfg));
        for cut in [0, 3, 4, 7, 11, 40, bytes.len() - 1, bytes.len() - 9] {
            let err = parse_checkpoint(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, CheckpointError::Corrupt(_) | CheckpointError::Meta(_)),
                "cut at {cut}: {err}"
            );
        }
    }

    #[test]
    fn structural_damage_is_rejected() {
        let cfg = NetConfig::grad_check(5);
        let model = ToyAcousticModel::init(cfg.clone()).unwrap();
        let good = checkpoint_bytes(&model, &test_meta(&cfg));

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            parse_checkpoint(&bad_magic).unwrap_err(),
            CheckpointError::Corrupt(_)
        ));

        let mut bad_version = good.clone();
        bad_version[4] = 99;
        assert!(matches!(
            parse_checkpoint(&bad_version).unwrap_err(),
            CheckpointError::Corrupt(_)
        ));

        let mut trailing = good.clone();
        trailing.extend_from_slice(&[0, 1, 2]);
        let err = parse_checkpoint(&trailing).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn wrong_architecture_is_a_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = NetConfig::grad_check(5);
        let model = ToyAcousticModel::init(cfg.clone()).unwrap();
        save_checkpoint(&model, &test_meta(&cfg), &path).unwrap();

        let mut toy = ToyAcousticModel::init(NetConfig::toy_default(5)).unwrap();
        assert!(matches!(
            load_into_model(&path, &mut toy).unwrap_err(),
            CheckpointError::Shape(_)
        ));
    }

    #[test]
    fn save_overwrites_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = NetConfig::grad_check(5);
        let a = ToyAcousticModel::init(cfg.clone()).unwrap();
        let b = ToyAcousticModel::init(NetConfig::grad_check(6)).unwrap();
        save_checkpoint(&a, &test_meta(&cfg), &path).unwrap();
        save_checkpoint(&b, &test_meta(&cfg), &path).unwrap();
        let (_, tensors) = load_checkpoint(&path).unwrap();
        assert_eq!(tensors, b.export_tensors());
        // No temp file persists.
        let names: Vec<String> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, vec!["m.ckpt".to_string()]);
    }
}
