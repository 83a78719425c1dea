//! Convolutional reverberation and SNR-controlled mixing.

use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use super::rir::{split_rir, Rir};
use super::RoomError;

/// Frame length used to find active reference frames.
pub const ACTIVITY_FRAME: usize = 320;
/// Frames more than this many dB below the loudest frame count as silent.
pub const ACTIVITY_RANGE_DB: f64 = 40.0;

/// Linear convolution of `a` and `b`, `a.len() + b.len() - 1` samples long.
pub fn fft_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let spectrum = |x: &[f64]| {
        let mut buf = fwd.make_input_vec();
        buf[..x.len()].copy_from_slice(x);
        let mut out = fwd.make_output_vec();
        fwd.process(&mut buf, &mut out)
            .expect("sizes come from the plan");
        out
    };
    let fa = spectrum(a);
    let fb = spectrum(b);
    let mut prod: Vec<_> = fa.iter().zip(&fb).map(|(x, y)| x * y).collect();
    let mut out = inv.make_output_vec();
    inv.process(&mut prod, &mut out)
        .expect("sizes come from the plan");
    out.truncate(out_len);
    let scale = 1.0 / n as f64;
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

/// Returns `(reverberant, target)`: `clean` convolved with the full response
/// and with its early part, both trimmed to `clean.len()`.
pub fn reverberate(clean: &[f64], rir: &Rir) -> (Vec<f64>, Vec<f64>) {
    let (early, _) = split_rir(rir);
    let mut full = fft_convolve(clean, &rir.taps);
    let mut target = fft_convolve(clean, &early.taps);
    full.resize(clean.len(), 0.0);
    target.resize(clean.len(), 0.0);
    (full, target)
}

/// Mean power over the frames within [`ACTIVITY_RANGE_DB`] of the loudest one.
pub fn active_power(x: &[f64]) -> f64 {
    let energies: Vec<(f64, usize)> = x
        .chunks(ACTIVITY_FRAME)
        .map(|c| {
            (
                c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64,
                c.len(),
            )
        })
        .collect();
    let peak = energies.iter().map(|e| e.0).fold(0.0, f64::max);
    if peak <= 0.0 {
        return 0.0;
    }
    let floor = peak * 10f64.powf(-ACTIVITY_RANGE_DB / 10.0);
    let (sum, count) = energies
        .iter()
        .filter(|(p, _)| *p >= floor)
        .fold((0.0, 0usize), |(s, n), &(p, len)| {
            (s + p * len as f64, n + len)
        });
    sum / count as f64
}

pub fn mean_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
    }
}

/// SNR of `reference` against `noise`: active reference power over the
/// noise's mean power.
pub fn measure_snr(reference: &[f64], noise: &[f64]) -> f64 {
    10.0 * (active_power(reference) / mean_power(noise)).log10()
}

/// Gain that puts `noise` at `snr_db` below `reference`.
pub fn noise_gain(reference: &[f64], noise: &[f64], snr_db: f64) -> Result<f64, RoomError> {
    if !snr_db.is_finite() {
        return Err(RoomError::InvalidSnr(snr_db));
    }
    let pr = active_power(reference);
    let pn = mean_power(noise);
    if !(pr > 0.0 && pr.is_finite()) {
        return Err(RoomError::Silent("reference"));
    }
    if !(pn > 0.0 && pn.is_finite()) {
        return Err(RoomError::Silent("noise"));
    }
    Ok((pr / (pn * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// `reference + g * noise` with `g` from [`noise_gain`].
pub fn mix_at_snr(
    reference: &[f64],
    noise: &[f64],
    snr_db: f64,
) -> Result<(Vec<f64>, f64), RoomError> {
    if reference.len() != noise.len() {
        return Err(RoomError::LengthMismatch {
            reference: reference.len(),
            noise: noise.len(),
        });
    }
    let g = noise_gain(reference, noise, snr_db)?;
    let noisy = reference
        .iter()
        .zip(noise)
        .map(|(r, n)| r + g * n)
        .collect();
    Ok((noisy, g))
}

/// One mixing directive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub snr_db: f64,
    pub snr_range: (f64, f64),
    pub seed: u64,
}

impl MixSpec {
    pub fn validate(&self) -> Result<(), RoomError> {
        let (lo, hi) = self.snr_range;
        if !(self.snr_db.is_finite() && lo <= self.snr_db && self.snr_db <= hi) {
            return Err(RoomError::InvalidSnr(self.snr_db));
        }
        Ok(())
    }
}
