//! Rational-ratio polyphase resampling with a Kaiser-windowed sinc.

use std::f64::consts::PI;

/// Modified Bessel function of the first kind, order zero.
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn kaiser_beta(atten_db: f64) -> f64 {
    if atten_db > 50.0 {
        0.1102 * (atten_db - 8.7)
    } else if atten_db >= 21.0 {
        0.5842 * (atten_db - 21.0).powf(0.4) + 0.07886 * (atten_db - 21.0)
    } else {
        0.0
    }
}

#[derive(Debug, Clone)]
pub struct Resampler {
    up: usize,
    down: usize,
    taps: Vec<f64>,
}

impl Resampler {
    /// `pass_hz` and `stop_hz` are band edges relative to `rate_in * up`,
    /// the intermediate rate.
    pub fn design(
        up: usize,
        down: usize,
        intermediate_rate: f64,
        pass_hz: f64,
        stop_hz: f64,
        atten_db: f64,
    ) -> Self {
        let dw = 2.0 * PI * (stop_hz - pass_hz) / intermediate_rate;
        let mut n = ((atten_db - 8.0) / (2.285 * dw)).ceil() as usize + 1;
        if n % 2 == 0 {
            n += 1;
        }
        let fc = 0.5 * (pass_hz + stop_hz) / intermediate_rate;
        let beta = kaiser_beta(atten_db);
        let centre = (n - 1) as f64 / 2.0;
        let norm = bessel_i0(beta);
        let taps = (0..n)
            .map(|i| {
                let t = i as f64 - centre;
                let sinc = if t == 0.0 {
                    2.0 * fc
                } else {
                    (2.0 * PI * fc * t).sin() / (PI * t)
                };
                let r = t / centre;
                let w = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / norm;
                up as f64 * sinc * w
            })
            .collect();
        Self { up, down, taps }
    }

    /// 16 kHz to 10 kHz, passband to 4.4 kHz, at least 60 dB rejection from 5 kHz.
    pub fn khz16_to_khz10() -> Self {
        Self::design(5, 8, 80_000.0, 4_400.0, 5_000.0, 65.0)
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        (input_len * self.up).div_ceil(self.down)
    }

    /// Zero-phase resampling; output sample `n` is aligned with input time
    /// `n * down / up`.
    pub fn process(&self, x: &[f64]) -> Vec<f64> {
        let delay = (self.taps.len() - 1) / 2;
        let up = self.up as i64;
        (0..self.output_len(x.len()))
            .map(|n| {
                let t = (n * self.down + delay) as i64;
                let first = t.rem_euclid(up);
                let mut acc = 0.0;
                let mut k = first;
                while k < self.taps.len() as i64 {
                    let idx = (t - k) / up;
                    if idx < 0 {
                        break;
                    }
                    if (idx as usize) < x.len() {
                        acc += self.taps[k as usize] * x[idx as usize];
                    }
                    k += up;
                }
                acc
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn response_db(taps: &[f64], f: f64, fs: f64) -> f64 {
        let (mut re, mut im) = (0.0, 0.0);
        for (i, h) in taps.iter().enumerate() {
            let w = 2.0 * PI * f / fs * i as f64;
            re += h * w.cos();
            im -= h * w.sin();
        }
        let dc: f64 = taps.iter().sum();
        20.0 * ((re * re + im * im).sqrt() / dc).log10()
    }

    #[test]
    fn stopband_is_at_least_60_db_down() {
        let r = Resampler::khz16_to_khz10();
        for i in 0..200 {
            let f = 5_000.0 + i as f64 * 175.0;
            assert!(response_db(r.taps(), f, 80_000.0) < -60.0, "{f} Hz");
        }
        for f in [100.0, 1000.0, 3000.0, 4300.0] {
            assert!(response_db(r.taps(), f, 80_000.0).abs() < 0.01);
        }
    }

    #[test]
    fn sine_survives_resampling() {
        let r = Resampler::khz16_to_khz10();
        let x: Vec<f64> = (0..16_000)
            .map(|t| (2.0 * PI * 1000.0 * t as f64 / 16_000.0).sin())
            .collect();
        let y = r.process(&x);
        assert_eq!(y.len(), 10_000);
        for (n, v) in y.iter().enumerate().skip(500).take(9000) {
            let e = (2.0 * PI * 1000.0 * n as f64 / 10_000.0).sin();
            assert!((v - e).abs() < 2e-3);
        }
    }

    #[test]
    fn bessel_reference() {
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-15);
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_4).abs() < 1e-14);
        assert!((bessel_i0(5.0) - 27.239_871_823_604_45).abs() < 1e-10);
    }
}
