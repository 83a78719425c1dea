//! Analytic parameter and multiply-accumulate accounting.

use super::config::{ModelConfig, StageKind};

#[derive(Debug, Clone, PartialEq)]
pub struct StageComplexity {
    pub stage: StageKind,
    pub params: u64,
    /// Network MACs per output frame.
    pub network_macs: u64,
    /// MACs of the multi-frame filter applied to the network output.
    pub filter_macs: u64,
}

impl StageComplexity {
    pub fn macs(&self) -> u64 {
        self.network_macs + self.filter_macs
    }
}

/// Totals over the network stages (post-processing excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct Complexity {
    pub stages: Vec<StageComplexity>,
}

impl Complexity {
    pub fn params(&self) -> u64 {
        self.stages.iter().map(|s| s.params).sum()
    }

    pub fn macs_per_frame(&self) -> u64 {
        self.stages.iter().map(|s| s.macs()).sum()
    }

    /// Giga-MACs per second at the given frame rate.
    pub fn gmacs(&self, frames_per_second: f64) -> f64 {
        self.macs_per_frame() as f64 * frames_per_second / 1e9
    }
}

pub fn stage_complexity(config: &ModelConfig) -> StageComplexity {
    StageComplexity {
        stage: config.stage,
        params: config.param_count(),
        network_macs: config.all_layers().iter().map(|l| l.macs()).sum(),
        filter_macs: config
            .filter_len
            .map_or(0, |i| (i * config.freq_bins) as u64),
    }
}

pub fn count_params_and_macs(configs: &[ModelConfig]) -> Complexity {
    Complexity {
        stages: configs.iter().map(stage_complexity).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::config::{LayerKind, LayerSpec, Scale};

    #[test]
    fn single_pointwise_conv() {
        assert_eq!(LayerSpec::conv2d(2, 4, (1, 1), 1, 0, 10).macs(), 80);
    }

    /// Count one multiply per weight use, walking every output element.
    fn tally(layer: &LayerSpec) -> u64 {
        let mut n = 0u64;
        let (kt, kf) = layer.kernel;
        match layer.kind {
            LayerKind::Conv2d | LayerKind::Conv1dDilated => {
                for _co in 0..layer.out_channels {
                    for _fo in 0..layer.freq_out {
                        for _ci in 0..layer.in_channels {
                            for _t in 0..kt {
                                for _j in 0..kf {
                                    n += 1;
                                }
                            }
                        }
                    }
                }
            }
            LayerKind::Deconv2d => {
                for _ci in 0..layer.in_channels {
                    for _fi in 0..layer.freq_in {
                        for _co in 0..layer.out_channels {
                            for _t in 0..kt {
                                for _j in 0..kf {
                                    n += 1;
                                }
                            }
                        }
                    }
                }
            }
            LayerKind::Dense => {
                for _o in 0..layer.out_channels {
                    for _i in 0..layer.in_channels {
                        n += 1;
                    }
                }
            }
            LayerKind::Norm | LayerKind::Prelu => {}
        }
        n
    }

    #[test]
    fn two_channel_config_matches_tally() {
        for stage in StageKind::ALL {
            let mut cfg = ModelConfig::new(stage, Scale::Toy);
            cfg.encoder_channels = vec![2; 5];
            cfg.bottleneck_width = 2;
            cfg.tcm_squeeze_channels = 2;
            let analytic = stage_complexity(&cfg);
            let brute: u64 = cfg.all_layers().iter().map(tally).sum();
            assert_eq!(analytic.network_macs, brute);
            let bundle = cfg.random_bundle(0);
            assert_eq!(analytic.params, bundle.param_count());
        }
    }

    #[test]
    fn default_budget_is_near_reference() {
        let configs: Vec<_> = StageKind::ALL
            .iter()
            .map(|&s| ModelConfig::new(s, Scale::Default))
            .collect();
        let c = count_params_and_macs(&configs);
        let params = c.params() as f64 / 1e6;
        let macs = c.macs_per_frame() as f64 / 1e6;
        assert!((params / 6.38 - 1.0).abs() <= 0.2, "{params} M params");
        assert!((macs / 60.07 - 1.0).abs() <= 0.2, "{macs} M MACs");
    }
}
