//! Versioned binary checkpoints for `f32` networks: a fixed header with the
//! architecture and init seed, then every parameter tensor little-endian in
//! canonical order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::cnn::{Cnn, CnnConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RWCP";
const VERSION: u32 = 1;

/// Header fields restored alongside the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub config: CnnConfig,
    pub init_seed: u64,
}

pub fn save_checkpoint(model: &Cnn<f32>, init_seed: u64, path: &Path) -> Result<()> {
    let cfg = model.config();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for field in [
        cfg.input_h,
        cfg.input_w,
        cfg.conv1_channels,
        cfg.conv2_channels,
        cfg.kernel,
        cfg.fc1_units,
        cfg.num_classes,
    ] {
        w.write_all(&(field as u32).to_le_bytes())?;
    }
    w.write_all(&init_seed.to_le_bytes())?;
    w.write_all(&(model.param_count() as u64).to_le_bytes())?;
    for tensor in model.tensors() {
        for p in tensor {
            w.write_all(&p.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Cnn<f32>, CheckpointMeta)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: version {version}, expected {VERSION}",
            path.display()
        )));
    }
    let fields: Vec<usize> = (0..7)
        .map(|_| read_u32(&mut r).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let config = CnnConfig {
        input_h: fields[0],
        input_w: fields[1],
        conv1_channels: fields[2],
        conv2_channels: fields[3],
        kernel: fields[4],
        fc1_units: fields[5],
        num_classes: fields[6],
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("{}: invalid architecture: {e}", path.display())))?;
    let init_seed = read_u64(&mut r)?;
    let param_count = read_u64(&mut r)? as usize;
    if param_count != config.param_count() {
        return Err(Error::Checkpoint(format!(
            "{}: header claims {param_count} parameters, architecture needs {}",
            path.display(),
            config.param_count()
        )));
    }

    let mut model = Cnn::<f32>::new(config, init_seed)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut buf = [0u8; 4];
    for tensor in model.tensors_mut() {
        for p in tensor.iter_mut() {
            r.read_exact(&mut buf)?;
            *p = f32::from_le_bytes(buf);
        }
    }
    let mut extra = [0u8; 1];
    match r.read(&mut extra)? {
        0 => Ok((model, CheckpointMeta { config, init_seed })),
        _ => Err(Error::Checkpoint(format!(
            "{}: trailing bytes after parameter block",
            path.display()
        ))),
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_model() -> Cnn<f32> {
        let cfg = CnnConfig {
            input_h: 12,
            input_w: 12,
            conv1_channels: 2,
            conv2_channels: 3,
            kernel: 3,
            fc1_units: 8,
            num_classes: 10,
        };
        Cnn::new(cfg, 21).unwrap()
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let model = small_model();
        save_checkpoint(&model, 21, &path).unwrap();
        let (loaded, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(meta.init_seed, 21);
        assert_eq!(meta.config, *model.config());
        for (a, b) in model.tensors().iter().zip(loaded.tensors().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        let model = small_model();
        save_checkpoint(&model, 21, &a).unwrap();
        save_checkpoint(&model, 21, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn rejects_corrupted_files() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_checkpoint(&small_model(), 0, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        // Bad magic.
        let mut bytes = good.clone();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

        // Unsupported version.
        let mut bytes = good.clone();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

        // Truncated parameter block.
        std::fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Io(_))));

        // Trailing junk.
        let mut bytes = good.clone();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

        // Parameter count disagreeing with the architecture. The count
        // field starts at byte 44: magic 4, version 4, config 28, seed 8.
        let mut bytes = good;
        bytes[44] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
