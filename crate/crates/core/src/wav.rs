//! Mono RIFF WAV I/O, 16-bit signed little-endian PCM.
//!
//! Samples map to [-1, 1) by division by 32768. Writing rounds to the
//! nearest PCM step and clamps to the representable range.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::dsp::Waveform;
use crate::error::{Error, Result};

const PCM_SCALE: f64 = 32768.0;

/// Quantize one sample to the 16-bit PCM grid.
pub fn quantize(x: f64) -> i16 {
    let v = (x * PCM_SCALE).round();
    v.clamp(-32768.0, 32767.0) as i16
}

/// Map one PCM value back to [-1, 1).
pub fn dequantize(v: i16) -> f64 {
    f64::from(v) / PCM_SCALE
}

/// Round-trip a buffer through the PCM grid without touching disk.
///
/// Forged stems are stored at 16 bits; running the float pipeline on the
/// quantized values keeps on-disk audio and recorded metadata consistent.
pub fn quantize_roundtrip(samples: &[f64]) -> Vec<f64> {
    samples.iter().map(|&x| dequantize(quantize(x))).collect()
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let pcm: Vec<i16> = w.samples.iter().map(|&x| quantize(x)).collect();
    let data_len = pcm.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for v in &pcm {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    f.write_all(&out)
        .map_err(|e| Error::io(format!("write {}", path.display()), e))
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    parse_wav(&bytes).map_err(|detail| Error::BadWav {
        path: path.display().to_string(),
        detail,
    })
}

fn parse_wav(bytes: &[u8]) -> std::result::Result<Waveform, String> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err("not a RIFF/WAVE file".into());
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = (pos + 8 + size).min(bytes.len());
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err("fmt chunk truncated".into());
                }
                let tag = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                fmt = Some((tag, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {} // skip LIST, fact, etc.
        }
        pos += 8 + size + (size & 1); // chunks are word-aligned
    }
    let (tag, channels, rate, bits) = fmt.ok_or("missing fmt chunk")?;
    if tag != 1 {
        return Err(format!("unsupported format tag {tag}, expected PCM"));
    }
    if channels != 1 {
        return Err(format!("expected mono, got {channels} channels"));
    }
    if bits != 16 {
        return Err(format!("expected 16-bit samples, got {bits}"));
    }
    if rate == 0 {
        return Err("zero sample rate".into());
    }
    let data = data.ok_or("missing data chunk")?;
    let samples: Vec<f64> = data
        .chunks_exact(2)
        .map(|c| dequantize(i16::from_le_bytes([c[0], c[1]])))
        .collect();
    Ok(Waveform::new(samples, rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact_on_grid() {
        let samples: Vec<f64> = (-4i32..4).map(|k| f64::from(k) * 0.125).collect();
        let w = Waveform::new(samples.clone(), 16_000);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.wav");
        write_wav(&p, &w).unwrap();
        let r = read_wav(&p).unwrap();
        assert_eq!(r.sample_rate, 16_000);
        assert_eq!(r.samples, samples);
    }

    #[test]
    fn quantize_clamps_and_rounds() {
        assert_eq!(quantize(1.5), 32767);
        assert_eq!(quantize(-1.5), -32768);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0 / 32768.0), 1);
    }

    #[test]
    fn rejects_stereo() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        // Hand-build a stereo header.
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&40u32.to_le_bytes());
        out.extend_from_slice(b"WAVEfmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&2u16.to_le_bytes());
        out.extend_from_slice(&16000u32.to_le_bytes());
        out.extend_from_slice(&64000u32.to_le_bytes());
        out.extend_from_slice(&4u16.to_le_bytes());
        out.extend_from_slice(&16u16.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&4u32.to_le_bytes());
        out.extend_from_slice(&[0u8; 4]);
        std::fs::write(&p, &out).unwrap();
        assert!(matches!(read_wav(&p), Err(Error::BadWav { .. })));
    }
}
