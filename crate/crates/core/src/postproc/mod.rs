//! Classical residual-noise suppression applied after the network stages:
//! cepstral harmonic pre-suppression, SPP-weighted recursive noise PSD,
//! decision-directed a-priori SNR and an MMSE-LSA gain.

pub mod cepstrum;
pub mod lsa;
pub mod spp;

use std::sync::Arc;

use num_complex::Complex64;
use thiserror::Error;

use crate::dsp::{ComplexSpectrogram, SAMPLE_RATE};

pub use cepstrum::{cepstral_presmooth, CepstralLifter, CepstralSmoother};
pub use lsa::{expint_e1, mmse_lsa_gain};
pub use spp::{HeuristicSpp, SppNet, SppNetConfig};

#[derive(Debug, Error, PartialEq)]
pub enum PpError {
    #[error("a-priori and a-posteriori SNR must be positive and finite (xi={xi}, gamma={gamma})")]
    NonPositiveSnr { xi: f64, gamma: f64 },
    #[error("speech presence probability {value} at bin {bin} is outside [0, 1]")]
    SppOutOfRange { bin: usize, value: f64 },
    #[error("length mismatch: expected {expected} bins, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("invalid post-processing parameter: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpParams {
    pub alpha_npsd: f64,
    pub alpha_dd: f64,
    /// Linear gain floor; 1 disables suppression.
    pub gain_floor: f64,
    /// Lower bound of the decision-directed a-priori SNR.
    pub xi_min: f64,
    pub lifter: CepstralLifter,
    pub spp: HeuristicSpp,
}

impl Default for PpParams {
    fn default() -> Self {
        Self {
            alpha_npsd: 0.8,
            alpha_dd: 0.98,
            gain_floor: 0.178,
            xi_min: 10f64.powf(-25.0 / 10.0),
            lifter: CepstralLifter::default(),
            spp: HeuristicSpp::default(),
        }
    }
}

impl PpParams {
    pub fn validate(&self) -> Result<(), PpError> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.alpha_npsd) || !open(self.alpha_dd) {
            return Err(PpError::InvalidParams(
                "smoothing constants must lie in (0, 1)".into(),
            ));
        }
        if !(self.gain_floor > 0.0 && self.gain_floor <= 1.0) {
            return Err(PpError::InvalidParams(
                "gain_floor must lie in (0, 1]".into(),
            ));
        }
        if !(self.xi_min > 0.0) {
            return Err(PpError::InvalidParams("xi_min must be positive".into()));
        }
        if !(self.spp.max_spp > 0.0 && self.spp.max_spp <= 1.0) {
            return Err(PpError::InvalidParams("spp max must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-stream memory of the post-processor.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTrackerState {
    pub npsd: Vec<f64>,
    /// Previous-frame clean power estimate `G^2 |X|^2`.
    pub prev_clean_power: Vec<f64>,
    pub prev_gain: Vec<f64>,
    pub spp: Vec<f64>,
    pub initialized: bool,
}

impl NoiseTrackerState {
    pub fn new(bins: usize) -> Self {
        Self {
            npsd: vec![0.0; bins],
            prev_clean_power: vec![0.0; bins],
            prev_gain: vec![1.0; bins],
            spp: vec![0.0; bins],
            initialized: false,
        }
    }
}

/// `npsd += (1 - alpha) (1 - spp) (observed - npsd)`, the SPP-weighted
/// recursive average written so that `spp == 1` leaves the estimate exact.
pub fn update_npsd(
    state: &mut NoiseTrackerState,
    observed: &[f64],
    spp: &[f64],
    alpha: f64,
) -> Result<(), PpError> {
    let n = state.npsd.len();
    for len in [observed.len(), spp.len()] {
        if len != n {
            return Err(PpError::LengthMismatch {
                expected: n,
                found: len,
            });
        }
    }
    if let Some((bin, &value)) = spp
        .iter()
        .enumerate()
        .find(|(_, p)| !(0.0..=1.0).contains(*p))
    {
        return Err(PpError::SppOutOfRange { bin, value });
    }
    for ((l, &obs), &p) in state.npsd.iter_mut().zip(observed).zip(spp) {
        *l += (1.0 - alpha) * (1.0 - p) * (obs - *l);
        *l = l.max(0.0);
    }
    state.spp.copy_from_slice(spp);
    Ok(())
}

#[derive(Debug, Clone)]
pub enum SppProvider {
    Heuristic,
    Network(Arc<SppNet>),
}

/// Stateful frame-by-frame post-processor.
pub struct PostProcessor {
    params: PpParams,
    provider: SppProvider,
    smoother: CepstralSmoother,
    state: NoiseTrackerState,
    hidden: Vec<f32>,
}

impl PostProcessor {
    pub fn new(bins: usize, params: PpParams, provider: SppProvider) -> Result<Self, PpError> {
        params.validate()?;
        let hidden = match &provider {
            SppProvider::Heuristic => Vec::new(),
            SppProvider::Network(net) => {
                if net.config().bins != bins {
                    return Err(PpError::LengthMismatch {
                        expected: bins,
                        found: net.config().bins,
                    });
                }
                net.initial_state()
            }
        };
        Ok(Self {
            params,
            provider,
            smoother: CepstralSmoother::new(bins, SAMPLE_RATE as f64, params.lifter),
            state: NoiseTrackerState::new(bins),
            hidden,
        })
    }

    pub fn state(&self) -> &NoiseTrackerState {
        &self.state
    }

    /// Process one frame in place and return the applied gains.
    pub fn process_frame(&mut self, frame: &mut [Complex64]) -> Result<Vec<f64>, PpError> {
        let bins = self.state.npsd.len();
        if frame.len() != bins {
            return Err(PpError::LengthMismatch {
                expected: bins,
                found: frame.len(),
            });
        }
        let p = &self.params;
        let power: Vec<f64> = frame.iter().map(|z| z.norm_sqr()).collect();
        let smoothed = self.smoother.apply(&power);
        if !self.state.initialized {
            self.state.npsd.copy_from_slice(&smoothed);
            self.state.initialized = true;
        }
        let spp = match &self.provider {
            SppProvider::Heuristic => p.spp.estimate(&power, &self.state.npsd),
            SppProvider::Network(net) => net.step(&power, &mut self.hidden),
        };
        update_npsd(&mut self.state, &smoothed, &spp, p.alpha_npsd)?;

        let mut gains = Vec::with_capacity(bins);
        for k in 0..bins {
            let noise = self.state.npsd[k].max(f64::MIN_POSITIVE);
            let gamma = (power[k] / noise).clamp(1e-12, 1e12);
            let xi = (p.alpha_dd * self.state.prev_clean_power[k] / noise
                + (1.0 - p.alpha_dd) * (gamma - 1.0).max(0.0))
            .clamp(p.xi_min, 1e12);
            let g = lsa::lsa_gain_unchecked(xi, gamma).clamp(p.gain_floor, 1.0);
            frame[k] *= g;
            self.state.prev_clean_power[k] = g * g * power[k];
            self.state.prev_gain[k] = g;
            gains.push(g);
        }
        Ok(gains)
    }
}

/// Run the post-processor over a whole spectrogram.
pub fn apply_pp(
    spec: &ComplexSpectrogram,
    params: PpParams,
    provider: SppProvider,
) -> Result<ComplexSpectrogram, PpError> {
    let mut pp = PostProcessor::new(spec.bins(), params, provider)?;
    let mut out = spec.clone();
    for l in 0..out.frames() {
        pp.process_frame(out.frame_mut(l))?;
    }
    Ok(out)
}
