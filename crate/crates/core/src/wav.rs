//! Mono 16-bit PCM RIFF/WAVE reading and writing.
//!
//! Only the format the pipeline produces and consumes is supported:
//! PCM, one channel, 16 bits per sample. Samples are exposed as `f64` in
//! [-1, 1); writing quantizes with round-and-clamp at a scale of 32768, so
//! write-then-read is exact after the first quantization.

use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("wav field `{field}`: {detail}")]
    Format { field: &'static str, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_err(field: &'static str, detail: impl Into<String>) -> WavError {
    WavError::Format {
        field,
        detail: detail.into(),
    }
}

const SCALE: f64 = 32768.0;

/// Quantize a sample in [-1, 1) to i16 with round-and-clamp.
pub fn quantize_sample(x: f64) -> i16 {
    let v = (x * SCALE).round();
    v.clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

fn dequantize_sample(s: i16) -> f64 {
    s as f64 / SCALE
}

/// Write mono 16-bit PCM.
pub fn wav_write(path: &Path, samples: &[f64], sample_rate: u32) -> Result<(), WavError> {
    let data_len = samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes()); // fmt chunk size
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &x in samples {
        out.extend_from_slice(&quantize_sample(x).to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], WavError> {
        if self.pos + n > self.buf.len() {
            return Err(format_err(
                field,
                format!("file truncated at byte {}", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, field: &'static str) -> Result<u16, WavError> {
        let b = self.take(2, field)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32, WavError> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Read mono 16-bit PCM; returns samples in [-1, 1) and the sample rate.
pub fn wav_read(path: &Path) -> Result<(Vec<f64>, u32), WavError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor {
        buf: &bytes,
        pos: 0,
    };

    if cur.take(4, "riff_id")? != b"RIFF" {
        return Err(format_err("riff_id", "missing RIFF magic"));
    }
    let riff_size = cur.u32("riff_size")? as usize;
    if riff_size + 8 != bytes.len() {
        return Err(format_err(
            "riff_size",
            format!("declares {} bytes, file has {}", riff_size + 8, bytes.len()),
        ));
    }
    if cur.take(4, "wave_id")? != b"WAVE" {
        return Err(format_err("wave_id", "missing WAVE form type"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while cur.pos + 8 <= bytes.len() {
        let id: [u8; 4] = cur.take(4, "chunk_id")?.try_into().unwrap();
        let size = cur.u32("chunk_size")? as usize;
        let body = cur.take(size, "chunk_size")?;
        match &id {
            b"fmt " => {
                if size < 16 {
                    return Err(format_err(
                        "fmt_size",
                        format!("fmt chunk of {size} bytes, need at least 16"),
                    ));
                }
                let mut f = Cursor { buf: body, pos: 0 };
                let audio_format = f.u16("audio_format")?;
                let channels = f.u16("num_channels")?;
                let rate = f.u32("sample_rate")?;
                let _byte_rate = f.u32("byte_rate")?;
                let _block_align = f.u16("block_align")?;
                let bits = f.u16("bits_per_sample")?;
                fmt = Some((audio_format, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {} // skip ancillary chunks
        }
        if size % 2 == 1 {
            let _ = cur.take(1, "chunk_pad");
        }
    }

    let (audio_format, channels, rate, bits) =
        fmt.ok_or_else(|| format_err("fmt_chunk", "no fmt chunk present"))?;
    if audio_format != 1 {
        return Err(format_err(
            "audio_format",
            format!("expected PCM (1), got {audio_format}"),
        ));
    }
    if channels != 1 {
        return Err(format_err(
            "num_channels",
            format!("expected mono (1), got {channels}"),
        ));
    }
    if bits != 16 {
        return Err(format_err(
            "bits_per_sample",
            format!("expected 16, got {bits}"),
        ));
    }
    let body = data.ok_or_else(|| format_err("data_chunk", "no data chunk present"))?;
    if body.len() % 2 != 0 {
        return Err(format_err(
            "data_size",
            format!("odd data length {}", body.len()),
        ));
    }
    let samples = body
        .chunks_exact(2)
        .map(|b| dequantize_sample(i16::from_le_bytes([b[0], b[1]])))
        .collect();
    Ok((samples, rate))
}
