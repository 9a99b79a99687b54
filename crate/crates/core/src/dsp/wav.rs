//! PCM16 mono 16 kHz WAV files. Samples map to f64 by a 32767 scale with
//! symmetric clamping, so `-32768` reads back as `-1.0`.

use std::io::Cursor;
use std::path::Path;

use super::{AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};

const SCALE: f64 = 32767.0;

pub fn to_pcm16(x: f64) -> i16 {
    (x * SCALE).round().clamp(-SCALE, SCALE) as i16
}

pub fn from_pcm16(v: i16) -> f64 {
    (v.max(-32767) as f64) / SCALE
}

fn spec() -> hound::WavSpec {
    hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    }
}

pub fn encode_wav(clip: &AudioClip) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::with_capacity(44 + 2 * clip.len()));
    {
        let mut w = hound::WavWriter::new(&mut buf, spec())
            .map_err(|e| Error::format("wav", e.to_string()))?;
        let mut i16w = w.get_i16_writer(clip.len() as u32);
        for &s in clip.samples() {
            i16w.write_sample(to_pcm16(s));
        }
        i16w.flush().map_err(|e| Error::format("wav", e.to_string()))?;
        w.finalize().map_err(|e| Error::format("wav", e.to_string()))?;
    }
    Ok(buf.into_inner())
}

/// Parses an in-memory WAV file, rejecting anything but PCM16 mono 16 kHz.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    let reader = hound::WavReader::new(Cursor::new(bytes))
        .map_err(|e| Error::format("wav", e.to_string()))?;
    let s = reader.spec();
    if s.channels != 1 {
        return Err(Error::format("channels", format!("expected mono, found {} channels", s.channels)));
    }
    if s.sample_rate != SAMPLE_RATE {
        return Err(Error::format(
            "sample_rate",
            format!("expected {SAMPLE_RATE} Hz, found {} Hz", s.sample_rate),
        ));
    }
    if s.bits_per_sample != 16 || s.sample_format != hound::SampleFormat::Int {
        return Err(Error::format(
            "bits_per_sample",
            format!("expected 16-bit PCM, found {}-bit {:?}", s.bits_per_sample, s.sample_format),
        ));
    }
    // the declared length is untrusted; grow as samples actually arrive
    let mut samples = Vec::with_capacity((bytes.len() / 2).min(reader.len() as usize));
    for v in reader.into_samples::<i16>() {
        let v = v.map_err(|e| Error::format("data", e.to_string()))?;
        samples.push(from_pcm16(v));
    }
    AudioClip::new(samples)
}

pub fn write_wav(clip: &AudioClip, path: &Path) -> Result<()> {
    let bytes = encode_wav(clip)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes)
}
