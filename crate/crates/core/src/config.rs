//! Engine configuration file: flat `key = value` lines, `#` comments.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `scale` | `default` | model width preset, `default` or `toy` |
//! | `weights.dn`, `weights.dr`, `weights.sr` | unset | `.sddw` bundle per stage, relative to the config file |
//! | `depth` | `4` | last stage to run, 1 to 4 |
//! | `mode` | `offline` | `offline`, `streaming` or `streaming-offline-stats` |
//! | `seed` | `0` | seed for randomized commands |
//! | `pp.provider` | `heuristic` | speech presence provider, `heuristic` or `network` |
//! | `pp.spp_weights` | unset | `.sddw` bundle for the network provider |
//! | `pp.alpha_npsd` | `0.8` | noise PSD smoothing |
//! | `pp.alpha_dd` | `0.98` | decision-directed smoothing |
//! | `pp.gain_floor` | `0.178` | minimum gain, linear |
//! | `pp.xi_min_db` | `-25` | a-priori SNR floor, dB |
//! | `pp.spp_h1_snr_db` | `15` | assumed SNR under speech presence |
//! | `pp.spp_smoothing_bins` | `4` | half-width of the SPP bin average |
//! | `pp.spp_max` | `0.99` | SPP ceiling |
//! | `pp.pitch_min_hz`, `pp.pitch_max_hz` | `60`, `400` | cepstral pitch search range |
//! | `pp.cepstral_peak_gain` | `0` | gain on the pitch peak quefrencies |
//! | `pp.cepstral_peak_halfwidth` | `1` | quefrency bins either side of the peak |
//! | `pp.cepstral_high_gain` | `0.5` | gain on quefrencies above the peak |
//! | `pp.voicing_threshold` | `0.5` | minimum cepstral peak treated as voiced |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::nn::{ModelConfig, NnError, Scale, StageKind, StageNet, WeightsBundle, WeightsError};
use crate::pipeline::{Engine, Mode, MAX_DEPTH};
use crate::postproc::{PpParams, SppNet, SppNetConfig, SppProvider};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Weights {
        path: PathBuf,
        #[source]
        source: WeightsError,
    },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("{key}: {message}")]
    Value { key: String, message: String },
    #[error("depth {depth} needs weights for the {stage} stage (set weights.{stage})")]
    MissingWeights { depth: usize, stage: &'static str },
    #[error("{path} does not fit the {scale} {stage} config:\n{source}")]
    Mismatch {
        path: PathBuf,
        stage: &'static str,
        scale: &'static str,
        #[source]
        source: NnError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SppKind {
    Heuristic,
    Network,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub scale: Scale,
    pub dn_weights: Option<PathBuf>,
    pub dr_weights: Option<PathBuf>,
    pub sr_weights: Option<PathBuf>,
    pub depth: usize,
    pub mode: Mode,
    pub seed: u64,
    pub spp: SppKind,
    pub spp_weights: Option<PathBuf>,
    pub pp: PpParams,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            scale: Scale::Default,
            dn_weights: None,
            dr_weights: None,
            sr_weights: None,
            depth: MAX_DEPTH,
            mode: Mode::Offline,
            seed: 0,
            spp: SppKind::Heuristic,
            spp_weights: None,
            pp: PpParams::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Value {
        key: key.into(),
        message: format!("cannot parse {value:?}"),
    })
}

pub fn load_bundle(path: &Path) -> Result<WeightsBundle, ConfigError> {
    let bytes = fs::read(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    WeightsBundle::from_bytes(&bytes).map_err(|source| ConfigError::Weights {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_bundle(path: &Path, bundle: &WeightsBundle) -> Result<(), ConfigError> {
    fs::write(path, bundle.to_bytes()).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

impl EngineConfig {
    /// Parse config text; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            cfg.set(key.trim(), value.trim(), base)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Set one key. Command-line overrides go through here too.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<(), ConfigError> {
        let path = || Some(base.join(value));
        let bad = |message: &str| ConfigError::Value {
            key: key.into(),
            message: message.into(),
        };
        match key {
            "scale" => {
                self.scale = Scale::parse(value).ok_or_else(|| bad("expected default or toy"))?
            }
            "weights.dn" => self.dn_weights = path(),
            "weights.dr" => self.dr_weights = path(),
            "weights.sr" => self.sr_weights = path(),
            "depth" => self.depth = parse_num(key, value)?,
            "mode" => {
                self.mode = Mode::parse(value)
                    .ok_or_else(|| bad("expected offline, streaming or streaming-offline-stats"))?
            }
            "seed" => self.seed = parse_num(key, value)?,
            "pp.provider" => {
                self.spp = match value {
                    "heuristic" => SppKind::Heuristic,
                    "network" => SppKind::Network,
                    _ => return Err(bad("expected heuristic or network")),
                }
            }
            "pp.spp_weights" => self.spp_weights = path(),
            "pp.alpha_npsd" => self.pp.alpha_npsd = parse_num(key, value)?,
            "pp.alpha_dd" => self.pp.alpha_dd = parse_num(key, value)?,
            "pp.gain_floor" => self.pp.gain_floor = parse_num(key, value)?,
            "pp.xi_min_db" => self.pp.xi_min = 10f64.powf(parse_num::<f64>(key, value)? / 10.0),
            "pp.spp_h1_snr_db" => self.pp.spp.h1_snr_db = parse_num(key, value)?,
            "pp.spp_smoothing_bins" => self.pp.spp.smoothing_bins = parse_num(key, value)?,
            "pp.spp_max" => self.pp.spp.max_spp = parse_num(key, value)?,
            "pp.pitch_min_hz" => self.pp.lifter.pitch_min_hz = parse_num(key, value)?,
            "pp.pitch_max_hz" => self.pp.lifter.pitch_max_hz = parse_num(key, value)?,
            "pp.cepstral_peak_gain" => self.pp.lifter.peak_gain = parse_num(key, value)?,
            "pp.cepstral_peak_halfwidth" => self.pp.lifter.peak_halfwidth = parse_num(key, value)?,
            "pp.cepstral_high_gain" => self.pp.lifter.high_gain = parse_num(key, value)?,
            "pp.voicing_threshold" => self.pp.lifter.voicing_threshold = parse_num(key, value)?,
            _ => return Err(bad("unknown key")),
        }
        Ok(())
    }

    /// Render every key; `parse` of the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("scale", self.scale.name().into());
        for (k, p) in [
            ("weights.dn", &self.dn_weights),
            ("weights.dr", &self.dr_weights),
            ("weights.sr", &self.sr_weights),
        ] {
            if let Some(p) = p {
                kv(k, p.display().to_string());
            }
        }
        kv("depth", self.depth.to_string());
        kv("mode", self.mode.name().into());
        kv("seed", self.seed.to_string());
        kv(
            "pp.provider",
            match self.spp {
                SppKind::Heuristic => "heuristic",
                SppKind::Network => "network",
            }
            .into(),
        );
        if let Some(p) = &self.spp_weights {
            kv("pp.spp_weights", p.display().to_string());
        }
        let p = &self.pp;
        kv("pp.alpha_npsd", p.alpha_npsd.to_string());
        kv("pp.alpha_dd", p.alpha_dd.to_string());
        kv("pp.gain_floor", p.gain_floor.to_string());
        kv("pp.xi_min_db", (10.0 * p.xi_min.log10()).to_string());
        kv("pp.spp_h1_snr_db", p.spp.h1_snr_db.to_string());
        kv("pp.spp_smoothing_bins", p.spp.smoothing_bins.to_string());
        kv("pp.spp_max", p.spp.max_spp.to_string());
        kv("pp.pitch_min_hz", p.lifter.pitch_min_hz.to_string());
        kv("pp.pitch_max_hz", p.lifter.pitch_max_hz.to_string());
        kv("pp.cepstral_peak_gain", p.lifter.peak_gain.to_string());
        kv(
            "pp.cepstral_peak_halfwidth",
            p.lifter.peak_halfwidth.to_string(),
        );
        kv("pp.cepstral_high_gain", p.lifter.high_gain.to_string());
        kv(
            "pp.voicing_threshold",
            p.lifter.voicing_threshold.to_string(),
        );
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(1..=MAX_DEPTH).contains(&self.depth) {
            return Err(ConfigError::Value {
                key: "depth".into(),
                message: format!("{} is outside 1..={MAX_DEPTH}", self.depth),
            });
        }
        self.pp.validate().map_err(|e| ConfigError::Value {
            key: "pp".into(),
            message: e.to_string(),
        })
    }

    pub fn weights_path(&self, stage: StageKind) -> Option<&Path> {
        match stage {
            StageKind::Denoise => self.dn_weights.as_deref(),
            StageKind::Dereverb => self.dr_weights.as_deref(),
            StageKind::Refine => self.sr_weights.as_deref(),
        }
    }

    /// Load and validate every stage `depth` needs, plus any other stage
    /// whose weights are configured.
    pub fn build_engine(&self) -> Result<Engine, ConfigError> {
        self.validate()?;
        let mut engine = Engine::new();
        for (i, stage) in StageKind::ALL.into_iter().enumerate() {
            let Some(path) = self.weights_path(stage) else {
                if self.depth > i {
                    return Err(ConfigError::MissingWeights {
                        depth: self.depth,
                        stage: stage.name(),
                    });
                }
                continue;
            };
            let bundle = load_bundle(path)?;
            let net =
                StageNet::new(ModelConfig::new(stage, self.scale), &bundle).map_err(|source| {
                    ConfigError::Mismatch {
                        path: path.to_path_buf(),
                        stage: stage.name(),
                        scale: self.scale.name(),
                        source,
                    }
                })?;
            engine = engine.with_stage(net);
        }
        let provider = match self.spp {
            SppKind::Heuristic => SppProvider::Heuristic,
            SppKind::Network => {
                let path = self
                    .spp_weights
                    .as_deref()
                    .ok_or_else(|| ConfigError::Value {
                        key: "pp.spp_weights".into(),
                        message: "required by pp.provider = network".into(),
                    })?;
                let bundle = load_bundle(path)?;
                let net =
                    SppNet::from_bundle(SppNetConfig::default(), &bundle).map_err(|source| {
                        ConfigError::Mismatch {
                            path: path.to_path_buf(),
                            stage: "spp",
                            scale: "default",
                            source,
                        }
                    })?;
                SppProvider::Network(Arc::new(net))
            }
        };
        Ok(engine.with_postproc(self.pp, provider))
    }
}
