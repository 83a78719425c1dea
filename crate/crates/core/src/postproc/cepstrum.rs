//! Cepstral harmonic pre-suppression of a power spectrum.

use std::sync::Arc;

use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

/// Liftering applied to voiced frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CepstralLifter {
    pub pitch_min_hz: f64,
    pub pitch_max_hz: f64,
    /// Gain on the pitch peak and its immediate neighbours.
    pub peak_gain: f64,
    pub peak_halfwidth: usize,
    /// Gain on quefrencies above the pitch peak.
    pub high_gain: f64,
    /// Minimum cepstral peak (natural-log units) for a frame to count as voiced.
    pub voicing_threshold: f64,
}

impl Default for CepstralLifter {
    fn default() -> Self {
        Self {
            pitch_min_hz: 60.0,
            pitch_max_hz: 400.0,
            peak_gain: 0.0,
            peak_halfwidth: 1,
            high_gain: 0.5,
            voicing_threshold: 0.5,
        }
    }
}

pub struct CepstralSmoother {
    lifter: CepstralLifter,
    fft_size: usize,
    q_range: (usize, usize),
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
    spec: Vec<Complex64>,
    cep: Vec<f64>,
}

impl CepstralSmoother {
    pub fn new(bins: usize, sample_rate: f64, lifter: CepstralLifter) -> Self {
        let fft_size = 2 * (bins - 1);
        let mut planner = RealFftPlanner::new();
        let half = fft_size / 2;
        let lo = ((sample_rate / lifter.pitch_max_hz).round() as usize).clamp(1, half);
        let hi = ((sample_rate / lifter.pitch_min_hz).round() as usize).clamp(lo, half);
        Self {
            lifter,
            fft_size,
            q_range: (lo, hi),
            forward: planner.plan_fft_forward(fft_size),
            inverse: planner.plan_fft_inverse(fft_size),
            spec: vec![Complex64::new(0.0, 0.0); bins],
            cep: vec![0.0; fft_size],
        }
    }

    /// Quefrency search range in samples, inclusive.
    pub fn quefrency_range(&self) -> (usize, usize) {
        self.q_range
    }

    /// Returns the smoothed spectrum; unvoiced frames pass through unchanged.
    pub fn apply(&mut self, power: &[f64]) -> Vec<f64> {
        let bins = self.spec.len();
        assert_eq!(power.len(), bins, "power spectrum length");
        let peak = power.iter().cloned().fold(0.0, f64::max);
        if peak <= 0.0 || !peak.is_finite() {
            return power.to_vec();
        }
        let floor = peak * 1e-10;
        for (s, &p) in self.spec.iter_mut().zip(power) {
            *s = Complex64::new((p.max(0.0) + floor).ln(), 0.0);
        }
        self.inverse
            .process(&mut self.spec, &mut self.cep)
            .expect("cepstrum buffers sized at construction");
        let n = self.fft_size as f64;
        self.cep.iter_mut().for_each(|c| *c /= n);

        let (lo, hi) = self.q_range;
        let (q_peak, c_peak) =
            (lo..=hi)
                .map(|q| (q, self.cep[q]))
                .fold(
                    (lo, f64::NEG_INFINITY),
                    |a, b| if b.1 > a.1 { b } else { a },
                );
        if c_peak <= self.lifter.voicing_threshold {
            return power.to_vec();
        }
        let half = self.fft_size / 2;
        let w = self.lifter.peak_halfwidth;
        for q in 1..=half {
            let gain = if q + w >= q_peak && q <= q_peak + w {
                self.lifter.peak_gain
            } else if q > q_peak + w {
                self.lifter.high_gain
            } else {
                1.0
            };
            if gain != 1.0 {
                self.cep[q] *= gain;
                if q != half {
                    self.cep[self.fft_size - q] *= gain;
                }
            }
        }
        self.forward
            .process(&mut self.cep, &mut self.spec)
            .expect("cepstrum buffers sized at construction");
        self.spec
            .iter()
            .map(|s| (s.re.exp() - floor).max(0.0))
            .collect()
    }
}

/// One-shot convenience over [`CepstralSmoother`] at 16 kHz.
pub fn cepstral_presmooth(power: &[f64], lifter: CepstralLifter) -> Vec<f64> {
    CepstralSmoother::new(power.len(), crate::dsp::SAMPLE_RATE as f64, lifter).apply(power)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{stft, FrameParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn zero_spectrum_stays_zero() {
        assert_eq!(
            cepstral_presmooth(&[0.0; 161], CepstralLifter::default()),
            vec![0.0; 161]
        );
    }

    #[test]
    fn white_noise_frames_pass_within_ten_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..160 * 101)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let spec = stft(&x, &FrameParams::default()).unwrap();
        let mut sm = CepstralSmoother::new(161, 16_000.0, CepstralLifter::default());
        for l in 0..100 {
            let p: Vec<f64> = spec.frame(l).iter().map(|z| z.norm_sqr()).collect();
            let out = sm.apply(&p);
            for (o, i) in out.iter().zip(&p) {
                assert!((o - i).abs() <= 0.1 * i, "frame {l}");
            }
        }
    }

    #[test]
    fn pulse_train_harmonics_are_flattened() {
        // 100 Hz pulse train with a 320-point frame: harmonics on even bins
        let p: Vec<f64> = (0..161)
            .map(|k| {
                let env = (-(k as f64) / 80.0).exp();
                env * if k % 2 == 0 { 1.0 } else { 0.1 }
            })
            .collect();
        let mut sm = CepstralSmoother::new(161, 16_000.0, CepstralLifter::default());
        assert_eq!(sm.quefrency_range(), (40, 160));
        let out = sm.apply(&p);
        let ratio_db = |s: &[f64]| {
            let h: f64 = (2..150).step_by(2).map(|k| s[k]).sum();
            let g: f64 = (3..151).step_by(2).map(|k| s[k]).sum();
            10.0 * (h / g).log10()
        };
        assert!(ratio_db(&p) - ratio_db(&out) >= 3.0);
        for k in (2..150).step_by(2) {
            assert!(out[k] <= p[k]);
        }
        assert!(out.iter().all(|&v| v >= 0.0));
    }
}
