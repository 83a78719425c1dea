//! Objective metrics and manifest evaluation. PESQ is not provided; SI-SNR
//! and segmental SNR stand in for quality trends.

pub mod estoi;
pub mod report;
pub mod resample;

use thiserror::Error;

use crate::audio::AudioError;
use crate::room::RoomError;

pub use estoi::estoi;
pub use report::{
    evaluate_manifest, ChainEnhancer, Enhancer, EvalReport, PairScores, ReportRow, Scores,
    SNR_BUCKETS,
};
pub use resample::Resampler;

/// SI-SNR is reported within `[-SI_SNR_CAP, SI_SNR_CAP]` dB.
pub const SI_SNR_CAP: f64 = 60.0;
pub const SEG_SNR_MIN: f64 = -10.0;
pub const SEG_SNR_MAX: f64 = 35.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("clean has {clean} samples but processed has {processed}")]
    LengthMismatch { clean: usize, processed: usize },
    #[error("input too short: need {needed}, found {found}")]
    TooShort { needed: usize, found: usize },
    #[error("manifest pair {index}: {message}")]
    Pair { index: usize, message: String },
    #[error("enhancer failed on pair {index}: {message}")]
    Enhance { index: usize, message: String },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Manifest(#[from] RoomError),
}

fn check_lengths(clean: &[f64], processed: &[f64]) -> Result<(), MetricsError> {
    if clean.len() != processed.len() {
        return Err(MetricsError::LengthMismatch {
            clean: clean.len(),
            processed: processed.len(),
        });
    }
    Ok(())
}

/// Scale-invariant SNR after removing the means.
pub fn si_snr(clean: &[f64], processed: &[f64]) -> Result<f64, MetricsError> {
    check_lengths(clean, processed)?;
    let n = clean.len().max(1) as f64;
    let ms = clean.iter().sum::<f64>() / n;
    let mp = processed.iter().sum::<f64>() / n;
    let s: Vec<f64> = clean.iter().map(|v| v - ms).collect();
    let p: Vec<f64> = processed.iter().map(|v| v - mp).collect();
    let ss: f64 = s.iter().map(|v| v * v).sum();
    if ss == 0.0 {
        return Ok(-SI_SNR_CAP);
    }
    let alpha = s.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>() / ss;
    let target: f64 = alpha * alpha * ss;
    let err: f64 = s.iter().zip(&p).map(|(a, b)| (b - alpha * a).powi(2)).sum();
    if err == 0.0 {
        return Ok(if target > 0.0 {
            SI_SNR_CAP
        } else {
            -SI_SNR_CAP
        });
    }
    Ok((10.0 * (target / err).log10()).clamp(-SI_SNR_CAP, SI_SNR_CAP))
}

/// Mean per-frame SNR over frames within 40 dB of the loudest clean frame,
/// each clamped to `[SEG_SNR_MIN, SEG_SNR_MAX]`.
pub fn seg_snr(clean: &[f64], processed: &[f64], frame: usize) -> Result<f64, MetricsError> {
    check_lengths(clean, processed)?;
    if frame == 0 || clean.len() < frame {
        return Err(MetricsError::TooShort {
            needed: frame.max(1),
            found: clean.len(),
        });
    }
    let frames: Vec<(f64, f64)> = clean
        .chunks_exact(frame)
        .zip(processed.chunks_exact(frame))
        .map(|(c, p)| {
            let sig: f64 = c.iter().map(|v| v * v).sum();
            let err: f64 = c.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum();
            (sig, err)
        })
        .collect();
    let peak = frames.iter().map(|f| f.0).fold(0.0, f64::max);
    let floor = peak * 1e-4;
    let active: Vec<f64> = frames
        .iter()
        .filter(|(s, _)| *s > 0.0 && *s >= floor)
        .map(|&(s, e)| {
            if e == 0.0 {
                SEG_SNR_MAX
            } else {
                (10.0 * (s / e).log10()).clamp(SEG_SNR_MIN, SEG_SNR_MAX)
            }
        })
        .collect();
    if active.is_empty() {
        return Ok(SEG_SNR_MIN);
    }
    Ok(active.iter().sum::<f64>() / active.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn signal(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn si_snr_cap_and_scale() {
        let x = signal(4000, 1);
        assert_eq!(si_snr(&x, &x).unwrap(), SI_SNR_CAP);
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_snr(&x, &y).unwrap(), si_snr(&x, &x).unwrap());
    }

    #[test]
    fn si_snr_closed_form() {
        // Zero-mean s, and n orthogonal to s with n = 0.5 s' where s' ⟂ s:
        // projection of x + n onto x is x, so SI-SNR = 10 log10(|x|^2/|n|^2).
        let n = 1000;
        let s: Vec<f64> = (0..n)
            .map(|t| (2.0 * std::f64::consts::PI * 5.0 * t as f64 / n as f64).sin())
            .collect();
        let e: Vec<f64> = (0..n)
            .map(|t| 0.5 * (2.0 * std::f64::consts::PI * 5.0 * t as f64 / n as f64).cos())
            .collect();
        let p: Vec<f64> = s.iter().zip(&e).map(|(a, b)| a + b).collect();
        let expect = 10.0 * (1.0f64 / 0.25).log10();
        assert!((si_snr(&s, &p).unwrap() - expect).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn si_snr_scale_invariant(seed in 0u64..500, a in 0.01f64..100.0) {
            let x = signal(800, seed);
            let y: Vec<f64> = signal(800, seed + 1).iter().zip(&x).map(|(n, s)| s + 0.3 * n).collect();
            let ys: Vec<f64> = y.iter().map(|v| a * v).collect();
            prop_assert!((si_snr(&x, &y).unwrap() - si_snr(&x, &ys).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn seg_snr_clamps() {
        let x = signal(3200, 2);
        assert_eq!(seg_snr(&x, &x, 320).unwrap(), SEG_SNR_MAX);
        let anti: Vec<f64> = x.iter().map(|v| -v).collect();
        let expect = 10.0 * 0.25f64.log10();
        assert!((seg_snr(&x, &anti, 320).unwrap() - expect).abs() < 1e-12);
        let loud_anti: Vec<f64> = x.iter().map(|v| -3.0 * v).collect();
        assert_eq!(seg_snr(&x, &loud_anti, 320).unwrap(), SEG_SNR_MIN);
    }

    #[test]
    fn seg_snr_matches_per_frame_analytic_values() {
        let x = signal(320 * 4, 3);
        let e = signal(320 * 4, 4);
        let targets = [0.0, 5.0, 12.0, 20.0];
        let mut p = x.clone();
        for (f, snr) in targets.iter().enumerate() {
            let r = f * 320..(f + 1) * 320;
            let sig: f64 = x[r.clone()].iter().map(|v| v * v).sum();
            let err: f64 = e[r.clone()].iter().map(|v| v * v).sum();
            let g = (sig / err / 10f64.powf(snr / 10.0)).sqrt();
            for t in r {
                p[t] += g * e[t];
            }
        }
        let expect = targets.iter().sum::<f64>() / 4.0;
        assert!((seg_snr(&x, &p, 320).unwrap() - expect).abs() < 0.1);
    }
}
