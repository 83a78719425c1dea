//! The staged enhancement chain: magnitude denoising and dereverberation
//! with multi-frame filtering, phase recoupling, complex refinement with a
//! global residual, and optional post-processing.
//!
//! All network stages work on power-compressed spectra; the chain
//! decompresses once, after the last network stage.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Instant;

use num_complex::Complex64;
use thiserror::Error;

use crate::dsp::{
    compress, decompress, istft, stft, ComplexSpectrogram, CompressionSpec, DspError, FrameParams,
    OverlapAdd, StreamingStft, SAMPLE_RATE,
};
use crate::nn::{FeatureMap, NetState, NnError, NormMode, NormStats, StageKind, StageNet};
use crate::postproc::{PostProcessor, PpError, PpParams, SppProvider};

pub const MAX_DEPTH: usize = 4;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("depth {0} is outside 1..=4")]
    InvalidDepth(usize),
    #[error("depth {depth} needs weights for the {} stage", stage.name())]
    MissingStage { depth: usize, stage: StageKind },
    #[error("unsupported sample rate {0} Hz (expected 16000)")]
    UnsupportedSampleRate(u32),
    #[error("{stage} network expects {expected} input channels and emits {outputs}, config has {found_in}/{found_out}")]
    StageShape {
        stage: &'static str,
        expected: usize,
        outputs: usize,
        found_in: usize,
        found_out: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Pp(#[from] PpError),
}

/// Real non-negative frames x bins spectrogram.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeSpectrogram {
    frames: usize,
    bins: usize,
    data: Vec<f64>,
}

impl MagnitudeSpectrogram {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self {
            frames,
            bins,
            data: vec![0.0; frames * bins],
        }
    }

    pub fn from_vec(frames: usize, bins: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), frames * bins, "magnitude data size");
        Self { frames, bins, data }
    }

    pub fn of(spec: &ComplexSpectrogram) -> Self {
        Self::from_vec(spec.frames(), spec.bins(), spec.magnitudes())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, l: usize, m: usize) -> f64 {
        self.data[l * self.bins + m]
    }

    pub fn frame(&self, l: usize) -> &[f64] {
        &self.data[l * self.bins..(l + 1) * self.bins]
    }

    fn push_frame(&mut self, frame: &[f64]) {
        assert_eq!(frame.len(), self.bins);
        self.data.extend_from_slice(frame);
        self.frames += 1;
    }

    fn append(&mut self, other: &MagnitudeSpectrogram) {
        self.data.extend_from_slice(&other.data);
        self.frames += other.frames;
    }

    fn to_feature_channel(&self, out: &mut FeatureMap, channel: usize) {
        for l in 0..self.frames {
            for (d, &s) in out.row_mut(channel, l).iter_mut().zip(self.frame(l)) {
                *d = s as f32;
            }
        }
    }
}

/// Causal per-(frame, bin) filter taps; tap `tau` weights frame `l - tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiFrameFilter {
    taps: usize,
    frames: usize,
    bins: usize,
    /// Indexed `[l][tau][m]`.
    data: Vec<f64>,
}

impl MultiFrameFilter {
    /// `data` is indexed `[l][tau][m]`.
    pub fn from_vec(taps: usize, frames: usize, bins: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), taps * frames * bins, "filter data size");
        Self {
            taps,
            frames,
            bins,
            data,
        }
    }

    /// Interpret a `(taps, frames, bins)` network output.
    pub fn from_feature_map(map: &FeatureMap) -> Self {
        Self::from_vec(
            map.channels(),
            map.frames(),
            map.freq(),
            map.data().iter().map(|&v| v as f64).collect(),
        )
    }

    /// Unit tap at `tau = 0`.
    pub fn identity(taps: usize, frames: usize, bins: usize) -> Self {
        let mut f = Self::from_vec(taps, frames, bins, vec![0.0; taps * frames * bins]);
        for l in 0..frames {
            f.frame_mut(l)[..bins].iter_mut().for_each(|v| *v = 1.0);
        }
        f
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn get(&self, tau: usize, l: usize, m: usize) -> f64 {
        self.data[(l * self.taps + tau) * self.bins + m]
    }

    pub fn set(&mut self, tau: usize, l: usize, m: usize, v: f64) {
        self.data[(l * self.taps + tau) * self.bins + m] = v;
    }

    fn frame(&self, l: usize) -> &[f64] {
        let n = self.taps * self.bins;
        &self.data[l * n..(l + 1) * n]
    }

    fn frame_mut(&mut self, l: usize) -> &mut [f64] {
        let n = self.taps * self.bins;
        &mut self.data[l * n..(l + 1) * n]
    }
}

/// Sliding window of the last `taps` source frames for streaming filtering.
#[derive(Debug, Clone)]
struct FilterHistory {
    taps: usize,
    bins: usize,
    frames: VecDeque<Vec<f64>>,
}

impl FilterHistory {
    fn new(taps: usize, bins: usize) -> Self {
        Self {
            taps,
            bins,
            frames: VecDeque::with_capacity(taps),
        }
    }

    /// Push the current source frame and filter it with `taps` (`[tau][m]`).
    fn step(&mut self, taps: &[f64], source: &[f64]) -> Vec<f64> {
        if self.frames.len() == self.taps {
            self.frames.pop_back();
        }
        self.frames.push_front(source.to_vec());
        (0..self.bins)
            .map(|m| {
                let mut acc = 0.0;
                for tau in 0..self.taps {
                    let s = self.frames.get(tau).map_or(0.0, |f| f[m]);
                    acc += taps[tau * self.bins + m] * s;
                }
                acc.max(0.0)
            })
            .collect()
    }
}

/// `out(l, m) = max(0, sum_tau taps(tau, l, m) * source(l - tau, m))`,
/// with frames before the start read as zero.
pub fn mf_filter(
    taps: &MultiFrameFilter,
    source: &MagnitudeSpectrogram,
) -> Result<MagnitudeSpectrogram, PipelineError> {
    if taps.frames != source.frames || taps.bins != source.bins {
        return Err(PipelineError::Shape(format!(
            "filter is {}x{}, source is {}x{}",
            taps.frames, taps.bins, source.frames, source.bins
        )));
    }
    let mut hist = FilterHistory::new(taps.taps, taps.bins);
    let mut out = MagnitudeSpectrogram::zeros(0, source.bins);
    for l in 0..source.frames {
        out.push_frame(&hist.step(taps.frame(l), source.frame(l)));
    }
    Ok(out)
}

/// `mag * exp(j * arg(phase_source))`.
pub fn recouple_phase(
    mag: &MagnitudeSpectrogram,
    phase_source: &ComplexSpectrogram,
) -> Result<ComplexSpectrogram, PipelineError> {
    if mag.frames != phase_source.frames() || mag.bins != phase_source.bins() {
        return Err(PipelineError::Shape(
            "magnitude and phase spectrograms differ in shape".into(),
        ));
    }
    let data = mag
        .data
        .iter()
        .zip(phase_source.data())
        .map(|(&m, z)| Complex64::from_polar(m, z.arg()))
        .collect();
    Ok(ComplexSpectrogram::from_vec(mag.frames, mag.bins, data))
}

fn check_stage(
    net: &StageNet,
    stage: &'static str,
    inputs: usize,
    outputs: usize,
) -> Result<(), PipelineError> {
    let cfg = net.config();
    if cfg.in_channels != inputs || net.output_channels() != outputs {
        return Err(PipelineError::StageShape {
            stage,
            expected: inputs,
            outputs,
            found_in: cfg.in_channels,
            found_out: net.output_channels(),
        });
    }
    Ok(())
}

fn filter_len(net: &StageNet) -> usize {
    net.config().filter_len.unwrap_or(net.output_channels())
}

/// Denoising stage on a compressed noisy magnitude: returns the filtered
/// magnitude and the predicted taps.
pub fn run_dn(
    net: &StageNet,
    state: &mut NetState,
    noisy_mag: &MagnitudeSpectrogram,
) -> Result<(MagnitudeSpectrogram, MultiFrameFilter), PipelineError> {
    check_stage(net, "dn", 1, filter_len(net))?;
    let mut x = FeatureMap::zeros(1, noisy_mag.frames(), noisy_mag.bins());
    noisy_mag.to_feature_channel(&mut x, 0);
    let taps = MultiFrameFilter::from_feature_map(&net.forward(&x, state)?);
    Ok((mf_filter(&taps, noisy_mag)?, taps))
}

/// Dereverberation stage: taps predicted from `(mag_dn, noisy_mag)` and
/// applied to `mag_dn`.
pub fn run_dr(
    net: &StageNet,
    state: &mut NetState,
    mag_dn: &MagnitudeSpectrogram,
    noisy_mag: &MagnitudeSpectrogram,
) -> Result<(MagnitudeSpectrogram, MultiFrameFilter), PipelineError> {
    check_stage(net, "dr", 2, filter_len(net))?;
    let x = dr_input(mag_dn, noisy_mag);
    let taps = MultiFrameFilter::from_feature_map(&net.forward(&x, state)?);
    Ok((mf_filter(&taps, mag_dn)?, taps))
}

fn dr_input(mag_dn: &MagnitudeSpectrogram, noisy_mag: &MagnitudeSpectrogram) -> FeatureMap {
    let mut x = FeatureMap::zeros(2, mag_dn.frames(), mag_dn.bins());
    mag_dn.to_feature_channel(&mut x, 0);
    noisy_mag.to_feature_channel(&mut x, 1);
    x
}

fn sr_input(
    dn: &ComplexSpectrogram,
    dr: &ComplexSpectrogram,
    noisy: &ComplexSpectrogram,
) -> FeatureMap {
    let mut x = FeatureMap::zeros(6, dn.frames(), dn.bins());
    for (i, spec) in [dn, dr, noisy].into_iter().enumerate() {
        for l in 0..spec.frames() {
            for (m, z) in spec.frame(l).iter().enumerate() {
                x.set(2 * i, l, m, z.re as f32);
                x.set(2 * i + 1, l, m, z.im as f32);
            }
        }
    }
    x
}

/// Refinement stage: `cplx_dr + correction`, the correction's real and
/// imaginary parts coming from the two decoders.
pub fn run_sr(
    net: &StageNet,
    state: &mut NetState,
    cplx_dn: &ComplexSpectrogram,
    cplx_dr: &ComplexSpectrogram,
    noisy: &ComplexSpectrogram,
) -> Result<ComplexSpectrogram, PipelineError> {
    check_stage(net, "sr", 6, 2)?;
    let out = net.forward(&sr_input(cplx_dn, cplx_dr, noisy), state)?;
    let mut res = cplx_dr.clone();
    for l in 0..res.frames() {
        for (m, z) in res.frame_mut(l).iter_mut().enumerate() {
            *z += Complex64::new(out.get(0, l, m) as f64, out.get(1, l, m) as f64);
        }
    }
    Ok(res)
}

/// Intermediate results of one enhancement run, all in the linear
/// (decompressed) domain. Entries beyond the requested depth are `None`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageOutputs {
    pub mag_dn: Option<MagnitudeSpectrogram>,
    pub mag_dr: Option<MagnitudeSpectrogram>,
    pub cplx_dn: Option<ComplexSpectrogram>,
    pub cplx_dr: Option<ComplexSpectrogram>,
    pub cplx_sr: Option<ComplexSpectrogram>,
    pub cplx_pp: Option<ComplexSpectrogram>,
}

impl StageOutputs {
    fn append(&mut self, chunk: StageOutputs) {
        fn cat_c(a: &mut Option<ComplexSpectrogram>, b: Option<ComplexSpectrogram>) {
            if let Some(b) = b {
                match a {
                    Some(a) => (0..b.frames()).for_each(|l| a.push_frame(b.frame(l))),
                    None => *a = Some(b),
                }
            }
        }
        fn cat_m(a: &mut Option<MagnitudeSpectrogram>, b: Option<MagnitudeSpectrogram>) {
            if let Some(b) = b {
                match a {
                    Some(a) => a.append(&b),
                    None => *a = Some(b),
                }
            }
        }
        cat_m(&mut self.mag_dn, chunk.mag_dn);
        cat_m(&mut self.mag_dr, chunk.mag_dr);
        cat_c(&mut self.cplx_dn, chunk.cplx_dn);
        cat_c(&mut self.cplx_dr, chunk.cplx_dr);
        cat_c(&mut self.cplx_sr, chunk.cplx_sr);
        cat_c(&mut self.cplx_pp, chunk.cplx_pp);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Whole-utterance processing with utterance normalization statistics.
    Offline,
    /// Hop-by-hop processing with cumulative normalization statistics.
    Streaming,
    /// Hop-by-hop processing with statistics captured from an offline pass.
    StreamingOfflineStats,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "offline" => Some(Mode::Offline),
            "streaming" => Some(Mode::Streaming),
            "streaming-offline-stats" => Some(Mode::StreamingOfflineStats),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Offline => "offline",
            Mode::Streaming => "streaming",
            Mode::StreamingOfflineStats => "streaming-offline-stats",
        }
    }
}

/// Normalization statistics of every stage, captured from an offline run.
#[derive(Debug, Clone, Default)]
pub struct ChainNormStats {
    pub dn: Option<Arc<NormStats>>,
    pub dr: Option<Arc<NormStats>>,
    pub sr: Option<Arc<NormStats>>,
}

#[derive(Debug, Clone)]
pub enum NormSource {
    Utterance,
    Cumulative,
    Frozen(ChainNormStats),
}

/// Shareable enhancement engine: frame parameters, stage networks and
/// post-processing settings. Cloning is cheap.
#[derive(Clone)]
pub struct Engine {
    params: FrameParams,
    compression: CompressionSpec,
    dn: Option<Arc<StageNet>>,
    dr: Option<Arc<StageNet>>,
    sr: Option<Arc<StageNet>>,
    pp_params: PpParams,
    spp: SppProvider,
}

impl Default for Engine {
    fn default() -> Self {
        Self::new()
    }
}

struct ChainState {
    depth: usize,
    dn: NetState,
    dr: Option<NetState>,
    sr: Option<NetState>,
    hist_dn: FilterHistory,
    hist_dr: Option<FilterHistory>,
    pp: Option<PostProcessor>,
}

impl Engine {
    pub fn new() -> Self {
        Self {
            params: FrameParams::default(),
            compression: CompressionSpec::default(),
            dn: None,
            dr: None,
            sr: None,
            pp_params: PpParams::default(),
            spp: SppProvider::Heuristic,
        }
    }

    pub fn with_stage(mut self, net: StageNet) -> Self {
        let slot = match net.config().stage {
            StageKind::Denoise => &mut self.dn,
            StageKind::Dereverb => &mut self.dr,
            StageKind::Refine => &mut self.sr,
        };
        *slot = Some(Arc::new(net));
        self
    }

    pub fn with_postproc(mut self, params: PpParams, spp: SppProvider) -> Self {
        self.pp_params = params;
        self.spp = spp;
        self
    }

    pub fn with_compression(mut self, compression: CompressionSpec) -> Self {
        self.compression = compression;
        self
    }

    pub fn frame_params(&self) -> &FrameParams {
        &self.params
    }

    pub fn stage(&self, kind: StageKind) -> Option<&StageNet> {
        match kind {
            StageKind::Denoise => self.dn.as_deref(),
            StageKind::Dereverb => self.dr.as_deref(),
            StageKind::Refine => self.sr.as_deref(),
        }
    }

    /// Deepest depth the loaded stages support.
    pub fn max_depth(&self) -> usize {
        match (&self.dn, &self.dr, &self.sr) {
            (None, _, _) => 0,
            (Some(_), None, _) => 1,
            (Some(_), Some(_), None) => 2,
            _ => MAX_DEPTH,
        }
    }

    fn check_depth(&self, depth: usize) -> Result<(), PipelineError> {
        if !(1..=MAX_DEPTH).contains(&depth) {
            return Err(PipelineError::InvalidDepth(depth));
        }
        for (need, stage, net) in [
            (1, StageKind::Denoise, &self.dn),
            (2, StageKind::Dereverb, &self.dr),
            (3, StageKind::Refine, &self.sr),
        ] {
            if depth >= need && net.is_none() {
                return Err(PipelineError::MissingStage { depth, stage });
            }
        }
        Ok(())
    }

    fn new_state(&self, depth: usize, norm: &NormSource) -> Result<ChainState, PipelineError> {
        self.check_depth(depth)?;
        let mode = |stats: fn(&ChainNormStats) -> &Option<Arc<NormStats>>| match norm {
            NormSource::Utterance => NormMode::Utterance,
            NormSource::Cumulative => NormMode::Cumulative,
            NormSource::Frozen(s) => stats(s)
                .clone()
                .map_or(NormMode::Cumulative, NormMode::Frozen),
        };
        let bins = self.params.num_bins();
        let dn = self.dn.as_ref().expect("checked");
        check_stage(dn, "dn", 1, filter_len(dn))?;
        if let Some(dr) = self.dr.as_ref().filter(|_| depth >= 2) {
            check_stage(dr, "dr", 2, filter_len(dr))?;
        }
        if let Some(sr) = self.sr.as_ref().filter(|_| depth >= 3) {
            check_stage(sr, "sr", 6, 2)?;
        }
        Ok(ChainState {
            depth,
            dn: dn.new_state(mode(|s| &s.dn)),
            dr: (depth >= 2).then(|| self.dr.as_ref().unwrap().new_state(mode(|s| &s.dr))),
            sr: (depth >= 3).then(|| self.sr.as_ref().unwrap().new_state(mode(|s| &s.sr))),
            hist_dn: FilterHistory::new(filter_len(dn), bins),
            hist_dr: (depth >= 2)
                .then(|| FilterHistory::new(filter_len(self.dr.as_ref().unwrap()), bins)),
            pp: if depth >= 4 {
                Some(PostProcessor::new(bins, self.pp_params, self.spp.clone())?)
            } else {
                None
            },
        })
    }

    /// Run the chain over a block of noisy (linear) frames, continuing from
    /// `state`. Returns the stage-`depth` spectrum and the intermediates.
    fn process(
        &self,
        noisy: &ComplexSpectrogram,
        state: &mut ChainState,
    ) -> Result<(ComplexSpectrogram, StageOutputs), PipelineError> {
        let c = self.compression;
        let inv = |s: &ComplexSpectrogram| decompress(s, c);
        let noisy_c = compress(noisy, c);
        let noisy_mag = MagnitudeSpectrogram::of(&noisy_c);
        let (frames, bins) = (noisy.frames(), noisy.bins());
        let mut out = StageOutputs::default();

        let dn = self.dn.as_ref().expect("checked");
        let mut x = FeatureMap::zeros(1, frames, bins);
        noisy_mag.to_feature_channel(&mut x, 0);
        let taps = MultiFrameFilter::from_feature_map(&dn.forward(&x, &mut state.dn)?);
        let mut mag_dn = MagnitudeSpectrogram::zeros(0, bins);
        for l in 0..frames {
            mag_dn.push_frame(&state.hist_dn.step(taps.frame(l), noisy_mag.frame(l)));
        }
        let cplx_dn = recouple_phase(&mag_dn, &noisy_c)?;
        let dn_lin = inv(&cplx_dn);
        out.mag_dn = Some(MagnitudeSpectrogram::of(&dn_lin));
        out.cplx_dn = Some(dn_lin.clone());
        if state.depth == 1 {
            return Ok((dn_lin, out));
        }

        let dr = self.dr.as_ref().expect("checked");
        let x = dr_input(&mag_dn, &noisy_mag);
        let taps = MultiFrameFilter::from_feature_map(&dr.forward(&x, state.dr.as_mut().unwrap())?);
        let hist = state.hist_dr.as_mut().unwrap();
        let mut mag_dr = MagnitudeSpectrogram::zeros(0, bins);
        for l in 0..frames {
            mag_dr.push_frame(&hist.step(taps.frame(l), mag_dn.frame(l)));
        }
        let cplx_dr = recouple_phase(&mag_dr, &noisy_c)?;
        let dr_lin = inv(&cplx_dr);
        out.mag_dr = Some(MagnitudeSpectrogram::of(&dr_lin));
        out.cplx_dr = Some(dr_lin.clone());
        if state.depth == 2 {
            return Ok((dr_lin, out));
        }

        let sr = self.sr.as_ref().expect("checked");
        let cplx_sr = run_sr(sr, state.sr.as_mut().unwrap(), &cplx_dn, &cplx_dr, &noisy_c)?;
        let sr_lin = inv(&cplx_sr);
        out.cplx_sr = Some(sr_lin.clone());
        if state.depth == 3 {
            return Ok((sr_lin, out));
        }

        let pp = state.pp.as_mut().unwrap();
        let mut pp_out = sr_lin;
        for l in 0..frames {
            pp.process_frame(pp_out.frame_mut(l))?;
        }
        out.cplx_pp = Some(pp_out.clone());
        Ok((pp_out, out))
    }

    fn check_rate(&self, sample_rate: u32) -> Result<(), PipelineError> {
        if sample_rate != SAMPLE_RATE {
            return Err(PipelineError::UnsupportedSampleRate(sample_rate));
        }
        Ok(())
    }

    /// Enhance a 16 kHz signal through the first `depth` stages. The output
    /// has the input's length.
    pub fn enhance(
        &self,
        signal: &[f64],
        sample_rate: u32,
        depth: usize,
        mode: Mode,
    ) -> Result<(Vec<f64>, StageOutputs), PipelineError> {
        self.check_rate(sample_rate)?;
        match mode {
            Mode::Offline => {
                let mut state = self.new_state(depth, &NormSource::Utterance)?;
                let noisy = stft(signal, &self.params)?;
                let (spec, outputs) = self.process(&noisy, &mut state)?;
                let mut y = istft(&spec, &self.params)?;
                y.truncate(signal.len());
                Ok((y, outputs))
            }
            Mode::Streaming => self.enhance_streaming(signal, depth, NormSource::Cumulative, None),
            Mode::StreamingOfflineStats => {
                let stats = self.capture_norm_stats(signal, depth)?;
                self.enhance_streaming(signal, depth, NormSource::Frozen(stats), None)
            }
        }
    }

    /// Like [`enhance`](Self::enhance), also returning the wall time per
    /// frame in milliseconds. Offline mode reports its total time spread
    /// evenly over the frames.
    pub fn enhance_timed(
        &self,
        signal: &[f64],
        sample_rate: u32,
        depth: usize,
        mode: Mode,
    ) -> Result<(Vec<f64>, Vec<f64>), PipelineError> {
        self.check_rate(sample_rate)?;
        let mut times = Vec::new();
        let y = match mode {
            Mode::Offline => {
                let t = Instant::now();
                let (y, _) = self.enhance(signal, sample_rate, depth, mode)?;
                let frames = self.params.num_frames(signal.len()).max(1);
                times = vec![t.elapsed().as_secs_f64() * 1e3 / frames as f64; frames];
                y
            }
            Mode::Streaming => {
                self.enhance_streaming(signal, depth, NormSource::Cumulative, Some(&mut times))?
                    .0
            }
            Mode::StreamingOfflineStats => {
                let stats = self.capture_norm_stats(signal, depth)?;
                self.enhance_streaming(signal, depth, NormSource::Frozen(stats), Some(&mut times))?
                    .0
            }
        };
        Ok((y, times))
    }

    fn enhance_streaming(
        &self,
        signal: &[f64],
        depth: usize,
        norm: NormSource,
        mut times: Option<&mut Vec<f64>>,
    ) -> Result<(Vec<f64>, StageOutputs), PipelineError> {
        if signal.is_empty() {
            return Err(DspError::EmptySignal.into());
        }
        let hop = self.params.hop;
        let mut streamer = self.streamer(depth, norm)?.recording();
        let blocks = self.params.num_frames(signal.len()) + 1;
        let mut y = Vec::with_capacity(blocks * hop + hop);
        let mut block = vec![0.0; hop];
        for b in 0..blocks {
            block.iter_mut().for_each(|v| *v = 0.0);
            let start = (b * hop).min(signal.len());
            let end = ((b + 1) * hop).min(signal.len());
            block[..end - start].copy_from_slice(&signal[start..end]);
            let t = Instant::now();
            let out = streamer.push_hop(&block)?;
            if let Some(times) = times.as_deref_mut() {
                times.push(t.elapsed().as_secs_f64() * 1e3);
            }
            if let Some(out) = out {
                y.extend(out);
            }
        }
        y.extend(streamer.finish());
        y.truncate(signal.len());
        Ok((y, streamer.take_outputs()))
    }

    /// Offline pass that records every stage's normalization statistics.
    pub fn capture_norm_stats(
        &self,
        signal: &[f64],
        depth: usize,
    ) -> Result<ChainNormStats, PipelineError> {
        let mut state = self.new_state(depth, &NormSource::Utterance)?;
        let noisy = stft(signal, &self.params)?;
        self.process(&noisy, &mut state)?;
        let grab = |s: Option<&NetState>| s.and_then(|s| s.captured_stats()).map(Arc::new);
        Ok(ChainNormStats {
            dn: grab(Some(&state.dn)),
            dr: grab(state.dr.as_ref()),
            sr: grab(state.sr.as_ref()),
        })
    }

    pub fn streamer(
        &self,
        depth: usize,
        norm: NormSource,
    ) -> Result<StreamingEnhancer, PipelineError> {
        let state = self.new_state(depth, &norm)?;
        Ok(StreamingEnhancer {
            engine: self.clone(),
            analysis: StreamingStft::new(&self.params),
            synthesis: OverlapAdd::new(&self.params),
            state,
            outputs: None,
        })
    }
}

/// Hop-by-hop enhancer. Each pushed 160-sample block yields the block of
/// output one hop behind it (nothing for the very first block).
pub struct StreamingEnhancer {
    engine: Engine,
    analysis: StreamingStft,
    synthesis: OverlapAdd,
    state: ChainState,
    outputs: Option<StageOutputs>,
}

impl StreamingEnhancer {
    /// Keep every frame's intermediate results (see [`take_outputs`](Self::take_outputs)).
    pub fn recording(mut self) -> Self {
        self.outputs = Some(StageOutputs::default());
        self
    }

    pub fn hop(&self) -> usize {
        self.engine.params.hop
    }

    pub fn push_hop(&mut self, block: &[f64]) -> Result<Option<Vec<f64>>, PipelineError> {
        let Some(frame) = self.analysis.push_hop(block)? else {
            return Ok(None);
        };
        let noisy = ComplexSpectrogram::from_vec(1, frame.len(), frame);
        let (spec, chunk) = self.engine.process(&noisy, &mut self.state)?;
        if let Some(o) = self.outputs.as_mut() {
            o.append(chunk);
        }
        Ok(Some(self.synthesis.push_frame(spec.frame(0))?))
    }

    /// Flush the final half window.
    pub fn finish(&mut self) -> Vec<f64> {
        self.synthesis.finish()
    }

    pub fn take_outputs(&mut self) -> StageOutputs {
        self.outputs.take().unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ModelConfig, Scale};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn oracle(taps: &MultiFrameFilter, src: &MagnitudeSpectrogram) -> Vec<f64> {
        let mut out = vec![0.0; src.frames() * src.bins()];
        for l in 0..src.frames() {
            for m in 0..src.bins() {
                let mut acc = 0.0;
                for tau in 0..taps.taps() {
                    let s = if l >= tau { src.get(l - tau, m) } else { 0.0 };
                    acc += taps.get(tau, l, m) * s;
                }
                out[l * src.bins() + m] = acc.max(0.0);
            }
        }
        out
    }

    #[test]
    fn mf_identity_and_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src = MagnitudeSpectrogram::from_vec(
            6,
            3,
            (0..18).map(|_| rng.gen_range(0.0..3.0)).collect(),
        );
        let out = mf_filter(&MultiFrameFilter::identity(5, 6, 3), &src).unwrap();
        assert_eq!(out, src);

        let src = MagnitudeSpectrogram::from_vec(10, 2, vec![5.0; 20]);
        let avg = MultiFrameFilter::from_vec(5, 10, 2, vec![0.2; 100]);
        let out = mf_filter(&avg, &src).unwrap();
        for l in 4..10 {
            assert!((out.get(l, 0) - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mf_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let taps = MultiFrameFilter::from_vec(
                5,
                8,
                4,
                (0..160).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            );
            let src = MagnitudeSpectrogram::from_vec(
                8,
                4,
                (0..32).map(|_| rng.gen_range(0.0..2.0)).collect(),
            );
            let out = mf_filter(&taps, &src).unwrap();
            assert_eq!(out.data(), &oracle(&taps, &src)[..]);
            assert!(out.data().iter().all(|&v| v >= 0.0));
        }
        let bad = MagnitudeSpectrogram::zeros(7, 4);
        assert!(mf_filter(&MultiFrameFilter::identity(5, 8, 4), &bad).is_err());
    }

    #[test]
    fn recouple_examples() {
        let mag = MagnitudeSpectrogram::from_vec(1, 2, vec![2.0, 0.0]);
        let phase = ComplexSpectrogram::from_vec(
            1,
            2,
            vec![Complex64::new(0.0, 3.0), Complex64::new(1.0, 1.0)],
        );
        let z = recouple_phase(&mag, &phase).unwrap();
        assert!((z.get(0, 0) - Complex64::new(0.0, 2.0)).norm() < 1e-15);
        assert_eq!(z.get(0, 1).norm(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ComplexSpectrogram::from_vec(
            4,
            5,
            (0..20)
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect(),
        );
        let back = recouple_phase(&MagnitudeSpectrogram::of(&spec), &spec).unwrap();
        for (a, b) in back.data().iter().zip(spec.data()) {
            assert!((a.norm() - b.norm()).abs() <= 1e-15 * b.norm().max(1.0));
            assert!((a - b).norm() < 1e-14);
        }
    }

    fn toy_engine(seed: u64) -> Engine {
        let mut e = Engine::new();
        for (i, stage) in StageKind::ALL.into_iter().enumerate() {
            let cfg = ModelConfig::new(stage, Scale::Toy);
            let bundle = cfg.random_bundle(seed + i as u64);
            e = e.with_stage(StageNet::new(cfg, &bundle).unwrap());
        }
        e
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()
    }

    #[test]
    fn depth_and_rate_errors() {
        let e = Engine::new();
        assert!(matches!(
            e.enhance(&[0.0; 320], 16_000, 1, Mode::Offline),
            Err(PipelineError::MissingStage { .. })
        ));
        let e = toy_engine(1);
        assert!(matches!(
            e.enhance(&[0.0; 320], 8_000, 1, Mode::Offline),
            Err(PipelineError::UnsupportedSampleRate(8000))
        ));
        assert!(matches!(
            e.enhance(&[0.0; 320], 16_000, 5, Mode::Offline),
            Err(PipelineError::InvalidDepth(5))
        ));
    }

    #[test]
    fn zero_signal_depth_one_is_zero() {
        let e = toy_engine(4);
        let (y, out) = e
            .enhance(&vec![0.0; 1600], 16_000, 1, Mode::Offline)
            .unwrap();
        assert_eq!(y.len(), 1600);
        assert!(y.iter().all(|&v| v == 0.0));
        assert!(out.cplx_dn.unwrap().is_finite());
    }

    #[test]
    fn offline_matches_streaming_with_offline_stats() {
        let e = toy_engine(7);
        let x = noise(4000, 8);
        for depth in 1..=4 {
            let (a, _) = e.enhance(&x, 16_000, depth, Mode::Offline).unwrap();
            let (b, _) = e
                .enhance(&x, 16_000, depth, Mode::StreamingOfflineStats)
                .unwrap();
            assert_eq!(a.len(), b.len());
            let diff = a
                .iter()
                .zip(&b)
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-5, "depth {depth}: {diff}");
        }
    }

    #[test]
    fn swapping_dr_inputs_changes_output() {
        let cfg = ModelConfig::new(StageKind::Dereverb, Scale::Toy);
        let net = StageNet::new(cfg.clone(), &cfg.random_bundle(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = MagnitudeSpectrogram::from_vec(
            6,
            161,
            (0..966).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );
        let b = MagnitudeSpectrogram::from_vec(
            6,
            161,
            (0..966).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );
        let (_, t1) = run_dr(&net, &mut net.new_state(NormMode::Utterance), &a, &b).unwrap();
        let (_, t2) = run_dr(&net, &mut net.new_state(NormMode::Utterance), &b, &a).unwrap();
        assert_ne!(t1, t2);
    }
}
