use std::io::{Read, Write};

use super::LogMelSpectrogram;
use crate::error::{Error, Result};

pub const LMSP_MAGIC: &[u8; 4] = b"LMSP";

/// Writes `"LMSP"`, `u32 T`, `u32 B`, then `T*B` little-endian `f32`.
pub fn write_lmsp(w: &mut impl Write, spec: &LogMelSpectrogram) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + spec.frames.len() * 4);
    buf.extend_from_slice(LMSP_MAGIC);
    buf.extend_from_slice(&(spec.n_frames as u32).to_le_bytes());
    buf.extend_from_slice(&(spec.n_mels as u32).to_le_bytes());
    for v in &spec.frames {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads a cache file; the hop is not stored and must be supplied.
pub fn read_lmsp(r: &mut impl Read, frame_hop_s: f64) -> Result<LogMelSpectrogram> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != LMSP_MAGIC {
        return Err(Error::InvalidAudio("not an LMSP spectrogram file".into()));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let b = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != t * b * 4 {
        return Err(Error::InvalidAudio(format!(
            "LMSP header says {t}x{b} but payload has {} bytes",
            body.len()
        )));
    }
    let frames = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(LogMelSpectrogram {
        n_frames: t,
        n_mels: b,
        frames,
        frame_hop_s,
    })
}
