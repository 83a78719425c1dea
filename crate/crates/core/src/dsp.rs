//! Windowed STFT analysis/synthesis and spectral magnitude power compression.
//!
//! Frames are hop-aligned from sample 0: frame `l` covers samples
//! `[l * hop, l * hop + window_len)`, and a signal of `n` samples yields
//! `ceil(n / hop)` frames with the tail zero-padded. Synthesis reuses the
//! analysis Hann window and divides the overlap-added result by the
//! squared-window envelope, so `istft(stft(x))` reconstructs `x` up to
//! rounding everywhere the envelope is non-zero.

use std::sync::Arc;

use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use thiserror::Error;

/// The only sample rate the engine accepts.
pub const SAMPLE_RATE: u32 = 16_000;

/// Envelope values below this are treated as uncovered samples.
const ENVELOPE_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum DspError {
    #[error("empty input signal")]
    EmptySignal,
    #[error("spectrogram has {found} bins, frame parameters expect {expected}")]
    BinMismatch { expected: usize, found: usize },
    #[error("invalid frame parameters: {0}")]
    InvalidParams(String),
    #[error("compression exponent must satisfy 0 < beta <= 1, got {0}")]
    InvalidBeta(f64),
    #[error("hop block has {found} samples, expected {expected}")]
    HopMismatch { expected: usize, found: usize },
}

/// Framing parameters shared by analysis and synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameParams {
    pub sample_rate: u32,
    pub window_len: usize,
    pub hop: usize,
    pub fft_size: usize,
    window: Vec<f64>,
}

impl FrameParams {
    pub fn new(
        sample_rate: u32,
        window_len: usize,
        hop: usize,
        fft_size: usize,
    ) -> Result<Self, DspError> {
        if window_len == 0 || window_len % 2 != 0 {
            return Err(DspError::InvalidParams(format!(
                "window length {window_len} must be even and non-zero"
            )));
        }
        if fft_size != window_len {
            return Err(DspError::InvalidParams(format!(
                "fft size {fft_size} must equal window length {window_len}"
            )));
        }
        if hop * 2 != window_len {
            return Err(DspError::InvalidParams(format!(
                "hop {hop} must be half the window length {window_len}"
            )));
        }
        Ok(Self {
            sample_rate,
            window_len,
            hop,
            fft_size,
            window: hann_periodic(window_len),
        })
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// One-sided bin count, `fft_size / 2 + 1`.
    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frame count for a signal of `len` samples.
    pub fn num_frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }

    pub fn window_ms(&self) -> f64 {
        self.window_len as f64 * 1000.0 / self.sample_rate as f64
    }

    pub fn hop_ms(&self) -> f64 {
        self.hop as f64 * 1000.0 / self.sample_rate as f64
    }

    /// Algorithmic delay: one window of look-ahead plus one hop of processing.
    pub fn algorithmic_delay_ms(&self) -> f64 {
        self.window_ms() + self.hop_ms()
    }
}

impl Default for FrameParams {
    /// 20 ms Hann window, 10 ms hop, 320-point FFT at 16 kHz.
    fn default() -> Self {
        Self::new(SAMPLE_RATE, 320, 160, 320).expect("default frame parameters are valid")
    }
}

fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Frames x bins complex time-frequency representation, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    frames: usize,
    bins: usize,
    data: Vec<Complex64>,
}

impl ComplexSpectrogram {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self {
            frames,
            bins,
            data: vec![Complex64::new(0.0, 0.0); frames * bins],
        }
    }

    /// Build from frame-major data. Panics if `data.len() != frames * bins`.
    pub fn from_vec(frames: usize, bins: usize, data: Vec<Complex64>) -> Self {
        assert_eq!(data.len(), frames * bins, "spectrogram data size");
        Self { frames, bins, data }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn get(&self, frame: usize, bin: usize) -> Complex64 {
        self.data[frame * self.bins + bin]
    }

    pub fn set(&mut self, frame: usize, bin: usize, value: Complex64) {
        self.data[frame * self.bins + bin] = value;
    }

    pub fn frame(&self, l: usize) -> &[Complex64] {
        &self.data[l * self.bins..(l + 1) * self.bins]
    }

    pub fn frame_mut(&mut self, l: usize) -> &mut [Complex64] {
        &mut self.data[l * self.bins..(l + 1) * self.bins]
    }

    pub fn push_frame(&mut self, frame: &[Complex64]) {
        assert_eq!(frame.len(), self.bins, "frame bin count");
        self.data.extend_from_slice(frame);
        self.frames += 1;
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.norm()).collect()
    }

    pub fn phases(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.arg()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data
            .iter()
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }
}

/// Magnitude compression exponent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressionSpec {
    beta: f64,
}

impl CompressionSpec {
    pub fn new(beta: f64) -> Result<Self, DspError> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(DspError::InvalidBeta(beta));
        }
        Ok(Self { beta })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

impl Default for CompressionSpec {
    fn default() -> Self {
        Self { beta: 0.5 }
    }
}

/// Raise the magnitude of `z` to `exponent` keeping its phase. Zero stays zero.
#[inline]
pub fn pow_magnitude(z: Complex64, exponent: f64) -> Complex64 {
    let mag = z.norm();
    if mag == 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    z * mag.powf(exponent - 1.0)
}

pub fn compress(spec: &ComplexSpectrogram, c: CompressionSpec) -> ComplexSpectrogram {
    map_magnitude(spec, c.beta)
}

pub fn decompress(spec: &ComplexSpectrogram, c: CompressionSpec) -> ComplexSpectrogram {
    map_magnitude(spec, 1.0 / c.beta)
}

fn map_magnitude(spec: &ComplexSpectrogram, exponent: f64) -> ComplexSpectrogram {
    if exponent == 1.0 {
        return spec.clone();
    }
    ComplexSpectrogram {
        frames: spec.frames,
        bins: spec.bins,
        data: spec
            .data
            .iter()
            .map(|&z| pow_magnitude(z, exponent))
            .collect(),
    }
}

/// Windowed single-frame FFT pair with reusable plans and scratch.
pub struct FrameTransform {
    window: Vec<f64>,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
    time: Vec<f64>,
    freq: Vec<Complex64>,
}

impl FrameTransform {
    pub fn new(params: &FrameParams) -> Self {
        let mut planner = RealFftPlanner::<f64>::new();
        let forward = planner.plan_fft_forward(params.fft_size);
        let inverse = planner.plan_fft_inverse(params.fft_size);
        Self {
            window: params.window.clone(),
            time: forward.make_input_vec(),
            freq: forward.make_output_vec(),
            forward,
            inverse,
        }
    }

    /// Window `segment` (zero-padded to the window length) and transform it.
    pub fn analyze(&mut self, segment: &[f64], out: &mut [Complex64]) {
        for (i, t) in self.time.iter_mut().enumerate() {
            *t = segment.get(i).copied().unwrap_or(0.0) * self.window[i];
        }
        self.forward
            .process(&mut self.time, out)
            .expect("fft buffer sizes are fixed by construction");
    }

    /// Inverse-transform a one-sided spectrum and apply the synthesis window.
    ///
    /// The DC and Nyquist bins are forced real, which reimposes conjugate
    /// symmetry on spectra modified by processing.
    pub fn synthesize(&mut self, spectrum: &[Complex64], out: &mut [f64]) {
        self.freq.copy_from_slice(spectrum);
        let last = self.freq.len() - 1;
        self.freq[0].im = 0.0;
        self.freq[last].im = 0.0;
        self.inverse
            .process(&mut self.freq, &mut self.time)
            .expect("fft buffer sizes are fixed by construction");
        let scale = 1.0 / self.time.len() as f64;
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.time[i] * scale * self.window[i];
        }
    }
}

pub fn stft(signal: &[f64], params: &FrameParams) -> Result<ComplexSpectrogram, DspError> {
    if signal.is_empty() {
        return Err(DspError::EmptySignal);
    }
    let frames = params.num_frames(signal.len());
    let bins = params.num_bins();
    let mut spec = ComplexSpectrogram::zeros(frames, bins);
    let mut transform = FrameTransform::new(params);
    for l in 0..frames {
        let start = l * params.hop;
        let end = (start + params.window_len).min(signal.len());
        transform.analyze(&signal[start..end], spec.frame_mut(l));
    }
    Ok(spec)
}

/// Overlap-add synthesis. Output length is `(L - 1) * hop + window_len`;
/// callers trim to the original signal length.
pub fn istft(spec: &ComplexSpectrogram, params: &FrameParams) -> Result<Vec<f64>, DspError> {
    if spec.bins() != params.num_bins() {
        return Err(DspError::BinMismatch {
            expected: params.num_bins(),
            found: spec.bins(),
        });
    }
    if spec.frames() == 0 {
        return Ok(Vec::new());
    }
    let mut synth = OverlapAdd::new(params);
    let mut out = Vec::with_capacity((spec.frames() + 1) * params.hop);
    for l in 0..spec.frames() {
        out.extend(synth.push_frame(spec.frame(l))?);
    }
    out.extend(synth.finish());
    Ok(out)
}

/// Streaming analysis: accepts hop-sized blocks and emits one spectrum
/// frame per block once a full window is buffered. Frame `l` is produced
/// by the push of block `l + 1`, matching the offline framing of [`stft`].
pub struct StreamingStft {
    hop: usize,
    buffer: Vec<f64>,
    filled: usize,
    transform: FrameTransform,
}

impl StreamingStft {
    pub fn new(params: &FrameParams) -> Self {
        Self {
            hop: params.hop,
            buffer: vec![0.0; params.window_len],
            filled: 0,
            transform: FrameTransform::new(params),
        }
    }

    pub fn push_hop(&mut self, block: &[f64]) -> Result<Option<Vec<Complex64>>, DspError> {
        if block.len() != self.hop {
            return Err(DspError::HopMismatch {
                expected: self.hop,
                found: block.len(),
            });
        }
        self.buffer.copy_within(self.hop.., 0);
        let tail = self.buffer.len() - self.hop;
        self.buffer[tail..].copy_from_slice(block);
        self.filled += 1;
        if self.filled < 2 {
            return Ok(None);
        }
        let mut frame = vec![Complex64::new(0.0, 0.0); self.buffer.len() / 2 + 1];
        self.transform.analyze(&self.buffer, &mut frame);
        Ok(Some(frame))
    }
}

/// Streaming overlap-add synthesis. Each pushed frame completes exactly one
/// hop of output: frame `l` completes samples `[l * hop, (l + 1) * hop)`.
pub struct OverlapAdd {
    hop: usize,
    window_sq: Vec<f64>,
    tail: Vec<f64>,
    frame_buf: Vec<f64>,
    started: bool,
    transform: FrameTransform,
}

impl OverlapAdd {
    pub fn new(params: &FrameParams) -> Self {
        Self {
            hop: params.hop,
            window_sq: params.window.iter().map(|w| w * w).collect(),
            tail: vec![0.0; params.hop],
            frame_buf: vec![0.0; params.window_len],
            started: false,
            transform: FrameTransform::new(params),
        }
    }

    pub fn push_frame(&mut self, spectrum: &[Complex64]) -> Result<Vec<f64>, DspError> {
        let bins = self.frame_buf.len() / 2 + 1;
        if spectrum.len() != bins {
            return Err(DspError::BinMismatch {
                expected: bins,
                found: spectrum.len(),
            });
        }
        self.transform.synthesize(spectrum, &mut self.frame_buf);
        let hop = self.hop;
        let mut out = Vec::with_capacity(hop);
        for n in 0..hop {
            let mut env = self.window_sq[n];
            let mut acc = self.frame_buf[n];
            if self.started {
                env += self.window_sq[n + hop];
                acc += self.tail[n];
            }
            out.push(if env > ENVELOPE_EPS { acc / env } else { 0.0 });
        }
        self.tail.copy_from_slice(&self.frame_buf[hop..]);
        self.started = true;
        Ok(out)
    }

    /// Flush the trailing half-frame after the last pushed frame.
    pub fn finish(&mut self) -> Vec<f64> {
        if !self.started {
            return Vec::new();
        }
        let hop = self.hop;
        let out = (0..hop)
            .map(|n| {
                let env = self.window_sq[n + hop];
                if env > ENVELOPE_EPS {
                    self.tail[n] / env
                } else {
                    0.0
                }
            })
            .collect();
        self.tail.iter_mut().for_each(|t| *t = 0.0);
        self.started = false;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn direct_dft(frame: &[f64], bin: usize) -> Complex64 {
        let n = frame.len() as f64;
        frame
            .iter()
            .enumerate()
            .map(|(t, &x)| Complex64::from_polar(x, -2.0 * PI * bin as f64 * t as f64 / n))
            .sum()
    }

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_signal_gives_zero_spectrogram() {
        let p = FrameParams::default();
        let spec = stft(&vec![0.0; 1600], &p).unwrap();
        assert_eq!((spec.frames(), spec.bins()), (10, 161));
        assert!(spec.data().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn empty_signal_rejected() {
        assert_eq!(
            stft(&[], &FrameParams::default()),
            Err(DspError::EmptySignal)
        );
    }

    #[test]
    fn tone_matches_direct_dft() {
        let p = FrameParams::default();
        // bin 50 center: 50 * 16000 / 320 = 2500 Hz
        let x: Vec<f64> = (0..3200)
            .map(|n| (2.0 * PI * 2500.0 * n as f64 / 16000.0).sin())
            .collect();
        let spec = stft(&x, &p).unwrap();
        let l = 4;
        let windowed: Vec<f64> = (0..320).map(|i| x[l * 160 + i] * p.window()[i]).collect();
        for m in 0..161 {
            let d = direct_dft(&windowed, m);
            assert!((spec.get(l, m) - d).norm() < 1e-9, "bin {m}");
        }
        let energies: Vec<f64> = spec.frame(l).iter().map(|z| z.norm_sqr()).collect();
        let peak = energies
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(peak, 50);
        // periodic Hann leaks only into the two neighbouring bins
        assert!(energies[52] < 1e-18 * energies[50]);
    }

    #[test]
    fn impulse_frame_is_window_sample() {
        let p = FrameParams::default();
        let mut x = vec![0.0; 800];
        x[0] = 1.0;
        let spec = stft(&x, &p).unwrap();
        // window[0] == 0 for periodic Hann, so frame 0 is identically zero
        for m in 0..161 {
            assert!((spec.get(0, m) - Complex64::new(p.window()[0], 0.0)).norm() < 1e-15);
        }
        let mut y = vec![0.0; 800];
        y[7] = 1.0;
        let spec = stft(&y, &p).unwrap();
        let w7 = p.window()[7];
        for m in 0..161 {
            let expect = Complex64::from_polar(w7, -2.0 * PI * m as f64 * 7.0 / 320.0);
            assert!((spec.get(0, m) - expect).norm() < 1e-14);
        }
    }

    #[test]
    fn round_trip_random_and_ramp() {
        let p = FrameParams::default();
        let x = noise(16000, 3);
        let y = istft(&stft(&x, &p).unwrap(), &p).unwrap();
        assert_eq!(y.len(), (100 - 1) * 160 + 320);
        let (mut num, mut den) = (0.0, 0.0);
        for n in p.hop..x.len() {
            num += (x[n] - y[n]).powi(2);
            den += x[n] * x[n];
        }
        assert!((num / den).sqrt() < 1e-10);

        let ramp: Vec<f64> = (0..4000).map(|n| n as f64 / 4000.0).collect();
        let back = istft(&stft(&ramp, &p).unwrap(), &p).unwrap();
        let err = (p.hop..ramp.len())
            .map(|n| (ramp[n] - back[n]).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-8);
    }

    #[test]
    fn istft_rejects_bin_mismatch() {
        let p = FrameParams::default();
        let spec = ComplexSpectrogram::zeros(3, 100);
        assert!(matches!(
            istft(&spec, &p),
            Err(DspError::BinMismatch {
                expected: 161,
                found: 100
            })
        ));
        let zeros = istft(&ComplexSpectrogram::zeros(4, 161), &p).unwrap();
        assert!(zeros.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parseval_per_frame() {
        let p = FrameParams::default();
        let x = noise(1600, 9);
        let spec = stft(&x, &p).unwrap();
        for l in 0..spec.frames() - 1 {
            let time: f64 = (0..320)
                .map(|i| (x[l * 160 + i] * p.window()[i]).powi(2))
                .sum();
            let f = spec.frame(l);
            let mut freq = f[0].norm_sqr() + f[160].norm_sqr();
            freq += 2.0 * f[1..160].iter().map(|z| z.norm_sqr()).sum::<f64>();
            freq /= 320.0;
            assert!((time - freq).abs() / time < 1e-8);
        }
    }

    #[test]
    fn linearity() {
        let p = FrameParams::default();
        let x = noise(2000, 1);
        let y = noise(2000, 2);
        let (a, b) = (0.7, -1.3);
        let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
        let (sx, sy, sm) = (
            stft(&x, &p).unwrap(),
            stft(&y, &p).unwrap(),
            stft(&mix, &p).unwrap(),
        );
        for i in 0..sm.data().len() {
            let expect = sx.data()[i] * a + sy.data()[i] * b;
            assert!((sm.data()[i] - expect).norm() < 1e-10);
        }
    }

    #[test]
    fn compression_examples() {
        let c = CompressionSpec::default();
        let z = Complex64::from_polar(4.0, PI / 3.0);
        let spec = ComplexSpectrogram::from_vec(1, 1, vec![z]);
        let out = compress(&spec, c).get(0, 0);
        assert!((out.norm() - 2.0).abs() < 1e-12);
        assert!((out.arg() - PI / 3.0).abs() < 1e-12);

        let two = ComplexSpectrogram::from_vec(
            1,
            2,
            vec![Complex64::new(2.0, 0.0), Complex64::new(0.0, 0.0)],
        );
        let back = decompress(&two, c);
        assert!((back.get(0, 0).re - 4.0).abs() < 1e-12);
        assert_eq!(back.get(0, 1), Complex64::new(0.0, 0.0));

        let id = CompressionSpec::new(1.0).unwrap();
        assert_eq!(compress(&spec, id), spec);
        assert!(CompressionSpec::new(0.0).is_err());
        assert!(CompressionSpec::new(1.5).is_err());
    }

    #[test]
    fn streaming_matches_offline() {
        let p = FrameParams::default();
        let x = noise(1600 + 37, 5);
        let offline = stft(&x, &p).unwrap();
        let mut padded = x.clone();
        padded.resize((offline.frames() + 1) * p.hop, 0.0);
        let mut analysis = StreamingStft::new(&p);
        let mut frames = Vec::new();
        for block in padded.chunks(p.hop) {
            if let Some(f) = analysis.push_hop(block).unwrap() {
                frames.push(f);
            }
        }
        assert_eq!(frames.len(), offline.frames());
        for (l, f) in frames.iter().enumerate() {
            assert_eq!(f.as_slice(), offline.frame(l));
        }
    }

    proptest::proptest! {
        #[test]
        fn compress_inverse(beta_idx in 0usize..3, re in -50.0f64..50.0, im in -50.0f64..50.0) {
            let beta = [0.25, 0.5, 1.0][beta_idx];
            let c = CompressionSpec::new(beta).unwrap();
            let spec = ComplexSpectrogram::from_vec(1, 1, vec![Complex64::new(re, im)]);
            let back = decompress(&compress(&spec, c), c).get(0, 0);
            let z = spec.get(0, 0);
            if z.norm() > 1e-6 {
                proptest::prop_assert!((back - z).norm() / z.norm() < 1e-12);
            }
        }
    }
}
