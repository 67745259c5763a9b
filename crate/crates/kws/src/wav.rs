//! WAV reading and writing.
//!
//! Integer PCM of any width and 32-bit float are accepted on input; extra
//! channels are averaged down to mono. Output is always 16-bit mono PCM.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use kws_core::frontend::Waveform;

use crate::error::{Error, Result};

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<Result<_, _>>()
                .map_err(|e| wav_err(path, e))?
        }
        SampleFormat::Float => {
            reader.into_samples::<f32>().collect::<Result<_, _>>().map_err(|e| wav_err(path, e))?
        }
    };
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved.chunks_exact(channels).map(|f| f.iter().sum::<f32>() / channels as f32).collect()
    };
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Writes 16-bit mono PCM, clipping to `[-1, 1)`.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = WavSpec { channels: 1, sample_rate: wave.sample_rate, bits_per_sample: 16, sample_format: SampleFormat::Int };
    let mut w = WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in &wave.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(|e| wav_err(path, e))?;
    }
    w.finalize().map_err(|e| wav_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcm16_round_trip_is_exact_on_the_grid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let pcm: Vec<i16> = vec![0, 1, -1, 32767, -32768, 1234, -4321];
        let w = Waveform::from_pcm16(&pcm, 16_000);
        write_wav(&p, &w).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn clips_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_wav(&p, &Waveform::new(vec![2.0, -2.0], 8000)).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.samples, vec![32767.0 / 32768.0, -1.0]);
        assert_eq!(back.sample_rate, 8000);
    }

    #[test]
    fn stereo_and_float_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let spec = WavSpec { channels: 2, sample_rate: 16_000, bits_per_sample: 32, sample_format: SampleFormat::Float };
        let mut w = WavWriter::create(&p, spec).unwrap();
        for v in [0.5f32, -0.5, 1.0, 0.0] {
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
        assert_eq!(read_wav(&p).unwrap().samples, vec![0.0, 0.5]);
    }

    #[test]
    fn garbage_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        std::fs::write(&p, b"not a wave file").unwrap();
        assert!(matches!(read_wav(&p), Err(Error::Format { .. })));
        assert!(matches!(read_wav(&dir.path().join("missing.wav")), Err(Error::Io { .. })));
    }
}
