//! Speech presence probability providers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::weights::{fingerprint_specs, WeightsBundle, WeightsError};
use crate::nn::NnError;

/// Likelihood-ratio SPP from the a-posteriori SNR against the current noise
/// estimate, smoothed over neighbouring bins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeuristicSpp {
    /// Assumed a-priori SNR when speech is present, in dB.
    pub h1_snr_db: f64,
    /// Half-width of the bin neighbourhood averaged into the SNR.
    pub smoothing_bins: usize,
    /// Upper bound; keeps the noise tracker from freezing.
    pub max_spp: f64,
}

impl Default for HeuristicSpp {
    fn default() -> Self {
        Self {
            h1_snr_db: 15.0,
            smoothing_bins: 4,
            max_spp: 0.99,
        }
    }
}

impl HeuristicSpp {
    pub fn estimate(&self, power: &[f64], npsd: &[f64]) -> Vec<f64> {
        let n = power.len();
        let gamma: Vec<f64> = power
            .iter()
            .zip(npsd)
            .map(|(&p, &l)| {
                if l > 0.0 {
                    p / l
                } else if p > 0.0 {
                    f64::MAX
                } else {
                    0.0
                }
            })
            .collect();
        let xi = 10f64.powf(self.h1_snr_db / 10.0);
        let w = xi / (1.0 + xi);
        let r = self.smoothing_bins;
        (0..n)
            .map(|k| {
                let lo = k.saturating_sub(r);
                let hi = (k + r + 1).min(n);
                let g = gamma[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
                let odds = (1.0 + xi) * (-g * w).exp();
                let p = 1.0 / (1.0 + odds);
                if p.is_finite() {
                    p.clamp(0.0, self.max_spp)
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Shape of the band-energy recurrent SPP network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SppNetConfig {
    pub bins: usize,
    pub bands: usize,
    pub hidden: usize,
}

impl Default for SppNetConfig {
    fn default() -> Self {
        Self {
            bins: 161,
            bands: 16,
            hidden: 24,
        }
    }
}

impl SppNetConfig {
    pub fn tensor_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (b, h) = (self.bands, self.hidden);
        vec![
            ("spp.in.weight".into(), vec![h, b]),
            ("spp.in.bias".into(), vec![h]),
            ("spp.gru.weight_ih".into(), vec![3 * h, h]),
            ("spp.gru.weight_hh".into(), vec![3 * h, h]),
            ("spp.gru.bias_ih".into(), vec![3 * h]),
            ("spp.gru.bias_hh".into(), vec![3 * h]),
            ("spp.out.weight".into(), vec![b, h]),
            ("spp.out.bias".into(), vec![b]),
        ]
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint_specs(&self.tensor_specs())
    }

    pub fn random_bundle(&self, seed: u64) -> WeightsBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bundle = WeightsBundle::new(self.fingerprint());
        for (name, shape) in self.tensor_specs() {
            let n: usize = shape.iter().product();
            let bound = if shape.len() == 2 {
                (1.0 / shape[1] as f32).sqrt()
            } else {
                0.0
            };
            let data = (0..n)
                .map(|_| {
                    if bound > 0.0 {
                        rng.gen_range(-bound..bound)
                    } else {
                        0.0
                    }
                })
                .collect();
            bundle.insert(name, shape, data);
        }
        bundle
    }

    /// Triangular band weights `[band][bin]`; every bin's weights sum to one.
    pub fn band_weights(&self) -> Vec<Vec<f64>> {
        let last = (self.bins - 1) as f64;
        let step = last / (self.bands - 1) as f64;
        (0..self.bands)
            .map(|b| {
                let centre = b as f64 * step;
                (0..self.bins)
                    .map(|k| (1.0 - (k as f64 - centre).abs() / step).max(0.0))
                    .collect()
            })
            .collect()
    }
}

/// Band-energy network: dense + tanh, GRU, dense + sigmoid. Emits per-band
/// gains that are interpolated to bins and read as speech presence.
#[derive(Debug, Clone)]
pub struct SppNet {
    config: SppNetConfig,
    bands: Vec<Vec<f64>>,
    w_in: Vec<f32>,
    b_in: Vec<f32>,
    w_ih: Vec<f32>,
    w_hh: Vec<f32>,
    b_ih: Vec<f32>,
    b_hh: Vec<f32>,
    w_out: Vec<f32>,
    b_out: Vec<f32>,
}

fn matvec(w: &[f32], b: &[f32], x: &[f32]) -> Vec<f32> {
    let cols = x.len();
    b.iter()
        .enumerate()
        .map(|(r, &bias)| {
            bias + w[r * cols..(r + 1) * cols]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum::<f32>()
        })
        .collect()
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl SppNet {
    pub fn from_bundle(config: SppNetConfig, bundle: &WeightsBundle) -> Result<Self, NnError> {
        let report = bundle.validate_specs(&config.tensor_specs(), config.fingerprint());
        if !report.is_ok() {
            return Err(WeightsError::Validation(report).into());
        }
        let t = |name: &str| bundle.get(name).expect("validated").data.clone();
        Ok(Self {
            config,
            bands: config.band_weights(),
            w_in: t("spp.in.weight"),
            b_in: t("spp.in.bias"),
            w_ih: t("spp.gru.weight_ih"),
            w_hh: t("spp.gru.weight_hh"),
            b_ih: t("spp.gru.bias_ih"),
            b_hh: t("spp.gru.bias_hh"),
            w_out: t("spp.out.weight"),
            b_out: t("spp.out.bias"),
        })
    }

    pub fn config(&self) -> SppNetConfig {
        self.config
    }

    pub fn initial_state(&self) -> Vec<f32> {
        vec![0.0; self.config.hidden]
    }

    pub fn macs_per_frame(&self) -> u64 {
        let (b, h) = (self.config.bands as u64, self.config.hidden as u64);
        b * h + 6 * h * h + h * b
    }

    /// One causal step; `hidden` carries the recurrent state.
    pub fn step(&self, power: &[f64], hidden: &mut [f32]) -> Vec<f64> {
        let feats: Vec<f32> = self
            .bands
            .iter()
            .map(|w| (w.iter().zip(power).map(|(a, p)| a * p).sum::<f64>() + 1e-10).log10() as f32)
            .collect();
        let x: Vec<f32> = matvec(&self.w_in, &self.b_in, &feats)
            .into_iter()
            .map(f32::tanh)
            .collect();
        let h = self.config.hidden;
        let gi = matvec(&self.w_ih, &self.b_ih, &x);
        let gh = matvec(&self.w_hh, &self.b_hh, hidden);
        for j in 0..h {
            let r = sigmoid(gi[j] + gh[j]);
            let z = sigmoid(gi[h + j] + gh[h + j]);
            let n = (gi[2 * h + j] + r * gh[2 * h + j]).tanh();
            hidden[j] = (1.0 - z) * n + z * hidden[j];
        }
        let gains: Vec<f64> = matvec(&self.w_out, &self.b_out, hidden)
            .into_iter()
            .map(|g| sigmoid(g) as f64)
            .collect();
        (0..self.config.bins)
            .map(|k| {
                self.bands
                    .iter()
                    .zip(&gains)
                    .map(|(w, g)| w[k] * g)
                    .sum::<f64>()
                    .clamp(0.0, 1.0)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Exp1};

    #[test]
    fn pure_noise_has_low_presence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spp = HeuristicSpp::default();
        let npsd = vec![2.0; 161];
        let mut total = 0.0;
        for _ in 0..200 {
            let p: Vec<f64> = (0..161)
                .map(|_| {
                    let e: f64 = Exp1.sample(&mut rng);
                    2.0 * e
                })
                .collect();
            total += spp.estimate(&p, &npsd).iter().sum::<f64>() / 161.0;
        }
        assert!(total / 200.0 < 0.3);
    }

    #[test]
    fn strong_signal_bins_are_present() {
        let npsd = vec![1.0; 161];
        let mut p = vec![1.0; 161];
        for v in &mut p[40..60] {
            *v = 1000.0;
        }
        let spp = HeuristicSpp::default().estimate(&p, &npsd);
        assert!(spp[42..58].iter().all(|&s| s > 0.9));
    }

    #[test]
    fn zero_frame_is_well_defined() {
        let spp = HeuristicSpp::default().estimate(&[0.0; 161], &[0.0; 161]);
        assert!(spp.iter().all(|s| (0.0..=1.0).contains(s)));
    }

    #[test]
    fn band_weights_partition_unity() {
        let bands = SppNetConfig::default().band_weights();
        for k in 0..161 {
            let s: f64 = bands.iter().map(|b| b[k]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn network_outputs_probabilities_and_is_causal() {
        let cfg = SppNetConfig::default();
        let net = SppNet::from_bundle(cfg, &cfg.random_bundle(4)).unwrap();
        let mut h = net.initial_state();
        let p = vec![0.5; 161];
        let a = net.step(&p, &mut h);
        assert!(a.iter().all(|s| (0.0..=1.0).contains(s)));
        let mut bad = cfg.random_bundle(4);
        bad.remove("spp.gru.bias_hh");
        assert!(SppNet::from_bundle(cfg, &bad).is_err());
    }
}
