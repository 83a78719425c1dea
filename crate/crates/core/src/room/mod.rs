//! Room acoustics: image-method RIRs, reverberation, SNR mixing and
//! dataset synthesis.

pub mod mix;
pub mod rir;
pub mod synth;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::audio::AudioError;

pub use mix::{
    active_power, fft_convolve, measure_snr, mix_at_snr, noise_gain, reverberate, MixSpec,
};
pub use rir::{schroeder_t60, simulate_rir, split_rir, Absorption, Placement, Rir, RoomSpec};
pub use synth::{
    synth_dataset, Manifest, ManifestRecord, MixSampler, RoomSampler, SynthConfig, MANIFEST_NAME,
};

#[derive(Debug, Error)]
pub enum RoomError {
    #[error("invalid room: {0}")]
    InvalidRoom(String),
    #[error("source and microphone positions coincide")]
    Coincident,
    #[error("SNR {0} dB is not a finite value inside the allowed range")]
    InvalidSnr(f64),
    #[error("{0} signal is silent")]
    Silent(&'static str),
    #[error("reference has {reference} samples but noise has {noise}")]
    LengthMismatch { reference: usize, noise: usize },
    #[error("no usable WAV files in {0}")]
    EmptyDirectory(PathBuf),
    #[error("{path}: sample rate {rate} Hz, expected 16000")]
    SampleRate { path: PathBuf, rate: u32 },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Audio(#[from] AudioError),
}

impl RoomError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        RoomError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
