//! Binary feature cache: magic `ERGLFEAT`, `u16` version, `u32` frames,
//! `u32` bins, then little-endian `f32` values row-major.

use std::io::{Read, Write};

use super::LogMelFeature;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"ERGLFEAT";
pub const FEATURE_VERSION: u16 = 1;

pub fn write_feature_cache(mut w: impl Write, feature: &LogMelFeature) -> Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&(feature.frames as u32).to_le_bytes())?;
    w.write_all(&(feature.mel_bins as u32).to_le_bytes())?;
    for v in &feature.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_feature_cache(mut r: impl Read) -> Result<LogMelFeature> {
    let mut header = [0u8; 18];
    r.read_exact(&mut header).map_err(|_| Error::Format("feature cache header truncated".into()))?;
    if &header[..8] != FEATURE_MAGIC {
        return Err(Error::Format("not a feature cache (bad magic)".into()));
    }
    let version = u16::from_le_bytes([header[8], header[9]]);
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!("unsupported feature cache version {version}")));
    }
    let frames = u32::from_le_bytes(header[10..14].try_into().unwrap()) as usize;
    let mel_bins = u32::from_le_bytes(header[14..18].try_into().unwrap()) as usize;
    let mut bytes = vec![0u8; frames * mel_bins * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format(format!("feature cache truncated: expected {frames}x{mel_bins} values")))?;
    let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(LogMelFeature { frames, mel_bins, values })
}
