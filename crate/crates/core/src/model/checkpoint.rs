//! Binary checkpoints: magic, architecture fingerprint, then the parameter
//! vector as little-endian `f64`.

use std::io::{Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::{Error, Real, Result};

const MAGIC: &[u8; 8] = b"PLRECT01";

pub fn save_checkpoint<T: Real>(path: impl AsRef<Path>, params: &ModelParams<T>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(16 + params.fingerprint.len() + params.values.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(params.fingerprint.len() as u32).to_le_bytes());
    buf.extend_from_slice(params.fingerprint.as_bytes());
    buf.extend_from_slice(&(params.values.len() as u64).to_le_bytes());
    for v in &params.values {
        buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint and reconstructs the architecture from its fingerprint.
pub fn read_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<(ModelConfig, ModelParams<T>)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let corrupt = |msg: &str| Error::parse(path.display().to_string(), 0, msg);
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let flen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let rest = &bytes[12..];
    if rest.len() < flen + 8 {
        return Err(corrupt("truncated header"));
    }
    let fingerprint = std::str::from_utf8(&rest[..flen]).map_err(|_| corrupt("fingerprint is not UTF-8"))?.to_string();
    let count = u64::from_le_bytes(rest[flen..flen + 8].try_into().expect("8 bytes")) as usize;
    let body = &rest[flen + 8..];
    if body.len() != count * 8 {
        return Err(corrupt("parameter count does not match file size"));
    }
    let values = body.chunks_exact(8).map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes")))).collect();
    let cfg = ModelConfig::from_fingerprint(&fingerprint)?;
    if cfg.param_count() != count {
        return Err(corrupt("parameter count does not match the architecture"));
    }
    Ok((cfg, ModelParams { fingerprint, values }))
}

/// Loads a checkpoint that must match `expected`.
pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<ModelParams<T>> {
    let (_, params) = read_checkpoint(path)?;
    if params.fingerprint != expected.fingerprint() {
        return Err(Error::FingerprintMismatch { expected: expected.fingerprint(), found: params.fingerprint });
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadKind;

    #[test]
    fn round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = ModelConfig { input_size: 16, widths: vec![2, 3], ..ModelConfig::default() };
        let params = ModelParams::<f64>::init(&cfg, 7);
        save_checkpoint(&path, &params).unwrap();
        let (cfg2, back) = read_checkpoint::<f64>(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(back, params);
        let other = ModelConfig { head: HeadKind::ThreePoint, ..cfg };
        assert!(matches!(load_checkpoint::<f64>(&path, &other), Err(Error::FingerprintMismatch { .. })));
        std::fs::write(&path, b"garbage").unwrap();
        assert!(read_checkpoint::<f64>(&path).is_err());
    }
}
