//! Binary checkpoints.
//!
//! Layout (little endian): magic `GMCK`, `u32` format version, `u64` length
//! plus UTF-8 TOML of the experiment config, `u64` epoch, `f64` loss, `u32`
//! array count, then per array a `u32`-prefixed name, `u32` rank, `u64`
//! dims and `f64` values. A SHA-256 digest of everything before it closes
//! the file.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ExperimentConfig, TrainError};
use crate::model::Model;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"GMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything restored from a checkpoint file.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub model: Model,
    pub epoch: usize,
    pub loss: f64,
}

pub fn encode(config: &ExperimentConfig, model: &Model, epoch: usize, loss: f64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let text = config.to_toml();
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(epoch as u64).to_le_bytes());
    out.extend_from_slice(&loss.to_le_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.names().iter().zip(model.params()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt("unexpected end of data"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, TrainError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize, TrainError> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("length overflows"))
    }
}

fn corrupt(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, TrainError> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..4] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!(
            "format version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    if bytes.len() < 8 + 32 {
        return Err(corrupt("file is truncated"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch (truncated or corrupted file)"));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let text_len = r.len()?;
    let text = std::str::from_utf8(r.take(text_len)?).map_err(|_| corrupt("config is not UTF-8"))?;
    let config = ExperimentConfig::from_toml(text).map_err(|e| corrupt(format!("stored config: {e}")))?;
    let epoch = r.len()?;
    let loss = r.f64()?;
    let count = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| corrupt("array name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>, _>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| corrupt("array size overflows"))?;
        if numel.checked_mul(8).is_none_or(|b| b > body.len()) {
            return Err(corrupt(format!("array {name} is larger than the file")));
        }
        let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        let t = Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?;
        arrays.push((name, t));
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes after arrays"));
    }
    let model = Model::from_named(config.model.clone(), arrays)?;
    Ok(Checkpoint {
        config,
        model,
        epoch,
        loss,
    })
}

/// Writes to a temporary file in the target directory, then renames it.
pub fn save_checkpoint(
    path: &Path,
    config: &ExperimentConfig,
    model: &Model,
    epoch: usize,
    loss: f64,
) -> Result<(), TrainError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| TrainError::io(dir, e))?;
    tmp.write_all(&encode(config, model, epoch, loss))
        .and_then(|_| tmp.as_file().sync_all())
        .map_err(|e| TrainError::io(path, e))?;
    tmp.persist(path).map_err(|e| TrainError::io(path, e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let bytes = fs::read(path).map_err(|e| TrainError::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PointCloud;
    use crate::model::HeadMask;

    fn setup() -> (ExperimentConfig, Model) {
        let mut cfg = ExperimentConfig::preset("mini-4gh.lis").unwrap();
        cfg.model.d = 16;
        cfg.model.ff_hidden = 32;
        cfg.model.layers = 1;
        cfg.model.head_layout.truncate(1);
        let model = Model::new(cfg.model.clone(), 3).unwrap();
        (cfg, model)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (cfg, model) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &cfg, &model, 12, 0.25).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!((back.epoch, back.loss), (12, 0.25));
        assert_eq!(back.model.params(), model.params());
        let x = PointCloud::new(vec![[0.1, 0.2, 0.3], [0.5, -0.1, 0.0], [0.0, 0.9, -0.4]]).unwrap();
        let a = model.predict(&x, &x, &HeadMask::none(), false).unwrap();
        let b = back.model.predict(&x, &x, &HeadMask::none(), false).unwrap();
        assert_eq!(a.x_hat, b.x_hat);
        assert_eq!(a.y_hat, b.y_hat);
    }

    #[test]
    fn stores_one_scalar_per_sigma() {
        let (cfg, model) = setup();
        let back = decode(&encode(&cfg, &model, 0, 0.0)).unwrap();
        assert_eq!(back.model.param("sigmas").unwrap().shape(), &[4]);
        assert_eq!(back.model.sigmas(), vec![0.05, 0.1, 0.5, 1.0]);
    }

    #[test]
    fn truncation_and_corruption_are_rejected() {
        let (cfg, model) = setup();
        let bytes = encode(&cfg, &model, 0, 1.0);
        for cut in [0, 3, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(TrainError::Checkpoint(_))), "cut at {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(decode(&flipped).is_err());
        let mut wrong = bytes;
        wrong[4] = 9;
        let err = decode(&wrong).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }
}
