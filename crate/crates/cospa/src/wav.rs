//! Multichannel float-32 WAV files. Channel `m` is microphone `m`.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::{Error, Result};

/// Reads every channel as `[channel][sample]` and rejects any sample rate
/// other than `expected_rate`. 16/24/32-bit integer files are scaled to
/// [-1, 1).
pub fn read_wav(path: &Path, expected_rate: u32) -> Result<Vec<Vec<f64>>> {
    let reader = WavReader::open(path).map_err(|e| Error::wav(path, e))?;
    let spec = reader.spec();
    if spec.sample_rate != expected_rate {
        return Err(Error::SampleRate {
            path: path.to_path_buf(),
            expected: expected_rate,
            found: spec.sample_rate,
        });
    }
    let channels = usize::from(spec.channels);
    let interleaved: Vec<f64> = match spec.sample_format {
        SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>(),
        SampleFormat::Int => {
            let scale = 2f64.powi(i32::from(spec.bits_per_sample) - 1);
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| f64::from(v) / scale))
                .collect::<std::result::Result<_, _>>()
        }
    }
    .map_err(|e| Error::wav(path, e))?;
    let frames = interleaved.len() / channels;
    let mut out = vec![Vec::with_capacity(frames); channels];
    for frame in interleaved.chunks_exact(channels) {
        for (ch, v) in out.iter_mut().zip(frame) {
            ch.push(*v);
        }
    }
    Ok(out)
}

pub fn write_wav(path: &Path, channels: &[Vec<f64>], sample_rate: u32) -> Result<()> {
    let n = channels.first().map_or(0, Vec::len);
    if channels.is_empty() || channels.iter().any(|c| c.len() != n) {
        return Err(Error::Invalid(format!("{}: channels must be nonempty and of equal length", path.display())));
    }
    let spec = WavSpec {
        channels: u16::try_from(channels.len()).map_err(|_| Error::Invalid("too many channels".into()))?,
        sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let wrap = |e| Error::wav(path, e);
    let mut w = WavWriter::create(path, spec).map_err(wrap)?;
    for i in 0..n {
        for ch in channels {
            w.write_sample(ch[i] as f32).map_err(wrap)?;
        }
    }
    w.finalize().map_err(wrap)
}
