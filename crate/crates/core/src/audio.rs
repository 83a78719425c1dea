//! 16-bit PCM mono WAV reading and writing.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

impl AudioError {
    fn from_hound(path: &Path, err: hound::Error) -> Self {
        let path = path.display().to_string();
        match err {
            hound::Error::IoError(source) => AudioError::Io { path, source },
            other => AudioError::Format {
                path,
                message: other.to_string(),
            },
        }
    }
}

/// Read a mono WAV file, returning samples scaled to `[-1, 1)` and the rate.
/// Integer formats up to 32 bits and 32-bit float are accepted.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32), AudioError> {
    let reader = hound::WavReader::open(path).map_err(|e| AudioError::from_hound(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(AudioError::Format {
            path: path.display().to_string(),
            message: format!("expected mono audio, found {} channels", spec.channels),
        });
    }
    let samples: Result<Vec<f64>, hound::Error> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect()
        }
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect(),
    };
    let samples = samples.map_err(|e| AudioError::from_hound(path, e))?;
    Ok((samples, spec.sample_rate))
}

/// Quantize to 16-bit PCM with clipping.
pub fn to_i16(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<(), AudioError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer =
        hound::WavWriter::create(path, spec).map_err(|e| AudioError::from_hound(path, e))?;
    for &s in samples {
        writer
            .write_sample(to_i16(s))
            .map_err(|e| AudioError::from_hound(path, e))?;
    }
    writer
        .finalize()
        .map_err(|e| AudioError::from_hound(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_quantizes_to_16_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let x: Vec<f64> = (0..100).map(|i| (i as f64 * 0.1).sin() * 0.5).collect();
        write_wav(&path, &x, 16_000).unwrap();
        let (y, sr) = read_wav(&path).unwrap();
        assert_eq!(sr, 16_000);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() <= 0.5 / 32768.0 + 1e-12);
        }
        assert_eq!(to_i16(2.0), 32767);
        assert_eq!(to_i16(-2.0), -32768);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_wav(Path::new("/nonexistent/x.wav")).unwrap_err();
        assert!(matches!(err, AudioError::Io { .. }));
    }
}
