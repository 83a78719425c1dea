//! Extended short-time objective intelligibility.

use std::f64::consts::PI;
use std::sync::OnceLock;

use realfft::RealFftPlanner;

use super::resample::Resampler;
use super::MetricsError;

pub const ESTOI_RATE: f64 = 10_000.0;
const FRAME: usize = 256;
const HOP: usize = 128;
const NFFT: usize = 512;
const BANDS: usize = 15;
const MIN_FREQ: f64 = 150.0;
/// Frames per 384 ms segment.
pub const SEGMENT: usize = 30;
const DYN_RANGE_DB: f64 = 40.0;

fn window() -> Vec<f64> {
    // Symmetric Hann of FRAME + 2 points with the zero end points dropped.
    (1..=FRAME)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (FRAME + 1) as f64).cos())
        .collect()
}

fn resampler() -> &'static Resampler {
    static R: OnceLock<Resampler> = OnceLock::new();
    R.get_or_init(Resampler::khz16_to_khz10)
}

/// FFT bin ranges `[lo, hi)` of the third-octave bands.
fn band_bins() -> Vec<(usize, usize)> {
    let df = ESTOI_RATE / NFFT as f64;
    let freqs: Vec<f64> = (0..=NFFT / 2).map(|k| k as f64 * df).collect();
    let nearest = |f: f64| {
        (0..freqs.len())
            .min_by(|&a, &b| (freqs[a] - f).abs().total_cmp(&(freqs[b] - f).abs()))
            .unwrap_or(0)
    };
    (0..BANDS)
        .map(|j| {
            let lo = MIN_FREQ * 2f64.powf((2 * j) as f64 / 6.0 - 1.0 / 6.0);
            let hi = MIN_FREQ * 2f64.powf((2 * j) as f64 / 6.0 + 1.0 / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

fn frame_starts(len: usize) -> impl Iterator<Item = usize> {
    (0..).map(|i| i * HOP).take_while(move |s| s + FRAME <= len)
}

/// Drop frames of both signals where `x` is more than 40 dB below its
/// loudest frame, then overlap-add what is left.
fn remove_silent_frames(x: &[f64], y: &[f64], w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let starts: Vec<usize> = frame_starts(x.len()).collect();
    let energy: Vec<f64> = starts
        .iter()
        .map(|&s| {
            let e: f64 = x[s..s + FRAME]
                .iter()
                .zip(w)
                .map(|(v, w)| (v * w).powi(2))
                .sum();
            20.0 * (e.sqrt() + f64::EPSILON).log10()
        })
        .collect();
    let max = energy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energy)
        .filter(|(_, &e)| e > max - DYN_RANGE_DB)
        .map(|(&s, _)| s)
        .collect();
    if kept.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let out_len = (kept.len() - 1) * HOP + FRAME;
    let mut xs = vec![0.0; out_len];
    let mut ys = vec![0.0; out_len];
    for (i, &s) in kept.iter().enumerate() {
        for t in 0..FRAME {
            xs[i * HOP + t] += x[s + t] * w[t];
            ys[i * HOP + t] += y[s + t] * w[t];
        }
    }
    (xs, ys)
}

/// Third-octave band envelopes, `[frame][band]`.
fn band_envelopes(x: &[f64], w: &[f64], bands: &[(usize, usize)]) -> Vec<[f64; BANDS]> {
    let mut planner = RealFftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(NFFT);
    let mut input = fft.make_input_vec();
    let mut spec = fft.make_output_vec();
    frame_starts(x.len())
        .map(|s| {
            input.iter_mut().for_each(|v| *v = 0.0);
            for t in 0..FRAME {
                input[t] = x[s + t] * w[t];
            }
            fft.process(&mut input, &mut spec)
                .expect("sizes come from the plan");
            std::array::from_fn(|j| {
                let (lo, hi) = bands[j];
                spec[lo..hi]
                    .iter()
                    .map(|z| z.norm_sqr())
                    .sum::<f64>()
                    .sqrt()
            })
        })
        .collect()
}

fn normalize(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Row (per band over time) then column (per frame over bands) normalised
/// segment, laid out `[frame][band]`.
fn normalized_segment(env: &[[f64; BANDS]]) -> Vec<[f64; BANDS]> {
    let mut seg = env.to_vec();
    for j in 0..BANDS {
        let mut row: Vec<f64> = seg.iter().map(|f| f[j]).collect();
        normalize(&mut row);
        for (f, v) in seg.iter_mut().zip(row) {
            f[j] = v;
        }
    }
    for f in &mut seg {
        normalize(f);
    }
    seg
}

/// ESTOI of `processed` against `clean`, both at 16 kHz.
pub fn estoi(clean: &[f64], processed: &[f64]) -> Result<f64, MetricsError> {
    if clean.len() != processed.len() {
        return Err(MetricsError::LengthMismatch {
            clean: clean.len(),
            processed: processed.len(),
        });
    }
    let min_len = (0.384 * 16_000.0) as usize;
    if clean.len() < min_len {
        return Err(MetricsError::TooShort {
            needed: min_len,
            found: clean.len(),
        });
    }
    let r = resampler();
    let x = r.process(clean);
    let y = r.process(processed);
    let w = window();
    let (x, y) = remove_silent_frames(&x, &y, &w);
    let bands = band_bins();
    let xe = band_envelopes(&x, &w, &bands);
    let ye = band_envelopes(&y, &w, &bands);
    if xe.len() < SEGMENT {
        return Err(MetricsError::TooShort {
            needed: SEGMENT,
            found: xe.len(),
        });
    }
    let segments = xe.len() - SEGMENT + 1;
    let mut total = 0.0;
    for m in 0..segments {
        let xn = normalized_segment(&xe[m..m + SEGMENT]);
        let yn = normalized_segment(&ye[m..m + SEGMENT]);
        let d: f64 = xn
            .iter()
            .zip(&yn)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q))
            .sum();
        total += d / SEGMENT as f64;
    }
    Ok(total / segments as f64)
}
