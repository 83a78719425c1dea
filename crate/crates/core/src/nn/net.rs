use std::sync::Arc;

use super::config::{LayerSpec, ModelConfig};
use super::layers::{
    channel_stats, normalize_with, prelu, Affine, ChannelStats, Conv2d, Deconv2d, Dense,
    RunningStats,
};
use super::tensor::FeatureMap;
use super::weights::{WeightsBundle, WeightsError};
use super::NnError;

/// Source of instance-normalization statistics.
#[derive(Debug, Clone)]
pub enum NormMode {
    /// Statistics over everything passed to one `forward` call. Not causal.
    Utterance,
    /// Cumulative statistics over all frames seen so far.
    Cumulative,
    /// Fixed statistics per norm layer, e.g. captured from an utterance run.
    Frozen(Arc<NormStats>),
}

/// Statistics of every norm layer of a stage, indexed by layer slot.
pub type NormStats = Vec<ChannelStats>;

/// Per-stream inference state: temporal history of every conv layer and
/// running normalization statistics. One per stream, single-owner.
#[derive(Debug, Clone)]
pub struct NetState {
    mode: NormMode,
    history: Vec<Option<FeatureMap>>,
    running: Vec<RunningStats>,
    captured: Vec<Option<ChannelStats>>,
}

impl NetState {
    pub fn mode(&self) -> &NormMode {
        &self.mode
    }

    /// Statistics recorded by the last utterance-mode forward pass.
    pub fn captured_stats(&self) -> Option<NormStats> {
        self.captured.iter().cloned().collect()
    }

    fn conv(&mut self, slot: usize, layer: &Conv2d, x: &FeatureMap) -> Result<FeatureMap, NnError> {
        let y = layer.forward(x, self.history[slot].as_ref())?;
        self.remember(slot, layer.spec.receptive_history(), x);
        Ok(y)
    }

    fn deconv(
        &mut self,
        slot: usize,
        layer: &Deconv2d,
        x: &FeatureMap,
    ) -> Result<FeatureMap, NnError> {
        let y = layer.forward(x, self.history[slot].as_ref())?;
        self.remember(slot, layer.spec.receptive_history(), x);
        Ok(y)
    }

    fn remember(&mut self, slot: usize, depth: usize, x: &FeatureMap) {
        if depth == 0 {
            return;
        }
        let next = match self.history[slot].take() {
            Some(mut h) if x.frames() < depth => {
                h.append_frames(x);
                h.last_frames(depth)
            }
            _ => x.last_frames(depth),
        };
        self.history[slot] = Some(next);
    }

    fn norm(&mut self, slot: usize, affine: &Affine, x: &mut FeatureMap) {
        match &self.mode {
            NormMode::Utterance => {
                let stats = channel_stats(x);
                normalize_with(x, &stats, affine);
                self.captured[slot] = Some(stats);
            }
            NormMode::Cumulative => self.running[slot].normalize_causal(x, affine),
            NormMode::Frozen(stats) => normalize_with(x, &stats[slot], affine),
        }
    }
}

#[derive(Debug, Clone)]
struct NormAct {
    slot: usize,
    affine: Affine,
    alpha: Vec<f32>,
}

impl NormAct {
    fn load(
        bundle: &WeightsBundle,
        prefix: &str,
        suffix: &str,
        channels: usize,
        slot: usize,
    ) -> Result<Self, NnError> {
        let norm = format!("{prefix}.norm{suffix}");
        let affine = Affine::new(
            &norm,
            channels,
            take(bundle, &format!("{norm}.gain"))?,
            take(bundle, &format!("{norm}.bias"))?,
        )?;
        let alpha = take(bundle, &format!("{prefix}.prelu{suffix}.alpha"))?;
        Ok(Self {
            slot,
            affine,
            alpha,
        })
    }

    fn apply(&self, state: &mut NetState, x: &mut FeatureMap) {
        state.norm(self.slot, &self.affine, x);
        prelu(x, &self.alpha);
    }
}

fn take(bundle: &WeightsBundle, name: &str) -> Result<Vec<f32>, NnError> {
    bundle
        .get(name)
        .map(|t| t.data.clone())
        .ok_or_else(|| NnError::MissingTensor(name.to_string()))
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    slot: usize,
    conv: Conv2d,
    act: NormAct,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    slot: usize,
    deconv: Deconv2d,
    act: Option<NormAct>,
}

/// Squeezed temporal convolutional module: 1x1 squeeze, norm/PReLU,
/// dilated causal conv, norm/PReLU, 1x1 expand, residual add.
#[derive(Debug, Clone)]
pub struct Stcm {
    slots: [usize; 3],
    squeeze: Conv2d,
    act1: NormAct,
    dconv: Conv2d,
    act2: NormAct,
    expand: Conv2d,
}

impl Stcm {
    pub fn dilation(&self) -> usize {
        self.dconv.spec.dilation
    }

    /// `x` has shape `(width, frames, 1)`; output has the same shape.
    pub fn forward(&self, x: &FeatureMap, state: &mut NetState) -> Result<FeatureMap, NnError> {
        let mut h = state.conv(self.slots[0], &self.squeeze, x)?;
        self.act1.apply(state, &mut h);
        let mut h = state.conv(self.slots[1], &self.dconv, &h)?;
        self.act2.apply(state, &mut h);
        let mut y = state.conv(self.slots[2], &self.expand, &h)?;
        y.add_assign(x);
        Ok(y)
    }
}

/// One stage network with resolved weights. Immutable and shareable;
/// all per-stream state lives in [`NetState`].
#[derive(Debug, Clone)]
pub struct StageNet {
    config: ModelConfig,
    encoder: Vec<EncoderBlock>,
    bottleneck_in: Dense,
    tcms: Vec<Stcm>,
    bottleneck_out: Dense,
    decoders: Vec<Vec<DecoderBlock>>,
    conv_slots: usize,
    norm_slots: Vec<usize>,
}

impl StageNet {
    pub fn new(config: ModelConfig, bundle: &WeightsBundle) -> Result<Self, NnError> {
        config.validate()?;
        let report = bundle.validate(&config);
        if !report.is_ok() {
            return Err(WeightsError::Validation(report).into());
        }
        let mut conv_slots = 0;
        let mut norm_slots = Vec::new();
        let mut next_conv = || {
            conv_slots += 1;
            conv_slots - 1
        };
        let mut next_norm = |channels: usize| {
            norm_slots.push(channels);
            norm_slots.len() - 1
        };

        let mut encoder = Vec::new();
        for (i, spec) in config.encoder_layers().into_iter().enumerate() {
            let p = format!("enc{i}");
            let conv = conv_from(bundle, &format!("{p}.conv"), spec)?;
            encoder.push(EncoderBlock {
                slot: next_conv(),
                conv,
                act: NormAct::load(
                    bundle,
                    &p,
                    "",
                    spec.out_channels,
                    next_norm(spec.out_channels),
                )?,
            });
        }

        let flat = config.bottleneck_flat();
        let (w, sq) = (config.bottleneck_width, config.tcm_squeeze_channels);
        let bottleneck_in = Dense::new(
            "bottleneck.in",
            LayerSpec::dense(flat, w),
            take(bundle, "bottleneck.in.weight")?,
            take(bundle, "bottleneck.in.bias")?,
        )?;
        let mut tcms = Vec::new();
        for g in 0..config.tcm_groups {
            for (j, &d) in config.tcm_dilations.iter().enumerate() {
                let p = format!("tcm{g}.{j}");
                let squeeze = conv_from(
                    bundle,
                    &format!("{p}.squeeze"),
                    LayerSpec::conv1d(w, sq, 1, 1),
                )?;
                let s0 = next_conv();
                let act1 = NormAct::load(bundle, &p, "1", sq, next_norm(sq))?;
                let dconv = conv_from(
                    bundle,
                    &format!("{p}.dconv"),
                    LayerSpec::conv1d(sq, sq, config.tcm_kernel, d),
                )?;
                let s1 = next_conv();
                let act2 = NormAct::load(bundle, &p, "2", sq, next_norm(sq))?;
                let expand = conv_from(
                    bundle,
                    &format!("{p}.expand"),
                    LayerSpec::conv1d(sq, w, 1, 1),
                )?;
                tcms.push(Stcm {
                    slots: [s0, s1, next_conv()],
                    squeeze,
                    act1,
                    dconv,
                    act2,
                    expand,
                });
            }
        }
        let bottleneck_out = Dense::new(
            "bottleneck.out",
            LayerSpec::dense(w, flat),
            take(bundle, "bottleneck.out.weight")?,
            take(bundle, "bottleneck.out.bias")?,
        )?;

        let layers = config.decoder_layers();
        let mut decoders = Vec::new();
        for d in 0..config.num_decoders {
            let mut blocks = Vec::new();
            for (i, spec) in layers.iter().enumerate() {
                let p = format!("dec{d}.{i}");
                let deconv = Deconv2d::new(
                    &format!("{p}.deconv"),
                    *spec,
                    take(bundle, &format!("{p}.deconv.weight"))?,
                    take(bundle, &format!("{p}.deconv.bias"))?,
                )?;
                let slot = next_conv();
                let act = if i + 1 < layers.len() {
                    Some(NormAct::load(
                        bundle,
                        &p,
                        "",
                        spec.out_channels,
                        next_norm(spec.out_channels),
                    )?)
                } else {
                    None
                };
                blocks.push(DecoderBlock { slot, deconv, act });
            }
            decoders.push(blocks);
        }

        Ok(Self {
            config,
            encoder,
            bottleneck_in,
            tcms,
            bottleneck_out,
            decoders,
            conv_slots,
            norm_slots,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tcm_blocks(&self) -> &[Stcm] {
        &self.tcms
    }

    pub fn output_channels(&self) -> usize {
        self.config.decoder_out_channels * self.config.num_decoders
    }

    pub fn new_state(&self, mode: NormMode) -> NetState {
        NetState {
            mode,
            history: vec![None; self.conv_slots],
            running: self
                .norm_slots
                .iter()
                .map(|&c| RunningStats::new(c))
                .collect(),
            captured: vec![None; self.norm_slots.len()],
        }
    }

    /// Run the stage on `input` of shape `(in_channels, frames, freq_bins)`.
    /// Output channels are the decoders' outputs stacked in order.
    pub fn forward(&self, input: &FeatureMap, state: &mut NetState) -> Result<FeatureMap, NnError> {
        Ok(self.run(input, state, false)?.0)
    }

    /// Like [`forward`](Self::forward) but also returns, per decoder, the
    /// input of its final transposed conv (the readout features the output
    /// layer is linear in).
    pub fn forward_with_readout(
        &self,
        input: &FeatureMap,
        state: &mut NetState,
    ) -> Result<(FeatureMap, Vec<FeatureMap>), NnError> {
        self.run(input, state, true)
    }

    fn run(
        &self,
        input: &FeatureMap,
        state: &mut NetState,
        readout: bool,
    ) -> Result<(FeatureMap, Vec<FeatureMap>), NnError> {
        let cfg = &self.config;
        if input.channels() != cfg.in_channels || input.freq() != cfg.freq_bins {
            return Err(NnError::ShapeMismatch {
                tensor: "stage input".into(),
                expected: vec![cfg.in_channels, cfg.freq_bins],
                found: vec![input.channels(), input.freq()],
            });
        }
        let mut x = input.clone();
        let mut skips = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            let mut y = state.conv(block.slot, &block.conv, &x)?;
            block.act.apply(state, &mut y);
            skips.push(y.clone());
            x = y;
        }
        let (c5, f5) = (x.channels(), x.freq());
        let mut h = self.bottleneck_in.forward(&x)?;
        for tcm in &self.tcms {
            h = tcm.forward(&h, state)?;
        }
        let bottom = self.bottleneck_out.forward(&h)?.reshape_frames(c5, f5);

        let mut outputs: Option<FeatureMap> = None;
        let mut readouts = Vec::new();
        for blocks in &self.decoders {
            let mut d = bottom.clone();
            for (i, block) in blocks.iter().enumerate() {
                let inp = d.concat_channels(&skips[skips.len() - 1 - i]);
                if readout && i + 1 == blocks.len() {
                    readouts.push(inp.clone());
                }
                d = state.deconv(block.slot, &block.deconv, &inp)?;
                if let Some(act) = &block.act {
                    act.apply(state, &mut d);
                }
            }
            outputs = Some(match outputs {
                None => d,
                Some(prev) => prev.concat_channels(&d),
            });
        }
        Ok((outputs.expect("at least one decoder"), readouts))
    }
}

fn conv_from(bundle: &WeightsBundle, name: &str, spec: LayerSpec) -> Result<Conv2d, NnError> {
    Conv2d::new(
        name,
        spec,
        take(bundle, &format!("{name}.weight"))?,
        take(bundle, &format!("{name}.bias"))?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::config::{Scale, StageKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_net(stage: StageKind, seed: u64) -> StageNet {
        let cfg = ModelConfig::new(stage, Scale::Toy);
        let bundle = cfg.random_bundle(seed);
        StageNet::new(cfg, &bundle).unwrap()
    }

    fn rand_input(c: usize, l: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_fn(c, l, 161, |_, _, _| rng.gen_range(0.0..2.0))
    }

    #[test]
    fn shapes_round_trip_through_mirror() {
        let cfg = ModelConfig::new(StageKind::Denoise, Scale::Default);
        assert_eq!(cfg.encoder_freq_sizes(), vec![161, 81, 41, 21, 11, 6]);
        let last = cfg.decoder_layers().last().copied().unwrap();
        assert_eq!(last.freq_out, 161);
        let net = toy_net(StageKind::Refine, 1);
        let x = rand_input(6, 7, 2);
        let y = net
            .forward(&x, &mut net.new_state(NormMode::Utterance))
            .unwrap();
        assert_eq!((y.channels(), y.frames(), y.freq()), (2, 7, 161));
    }

    #[test]
    fn streaming_cumulative_equals_whole_sequence_cumulative() {
        let net = toy_net(StageKind::Dereverb, 3);
        let x = rand_input(2, 40, 4);
        let whole = net
            .forward(&x, &mut net.new_state(NormMode::Cumulative))
            .unwrap();
        let mut state = net.new_state(NormMode::Cumulative);
        for l in 0..40 {
            let frame = FeatureMap::from_vec(2, 1, 161, x.frame(l).to_vec());
            let y = net.forward(&frame, &mut state).unwrap();
            for (a, b) in y.frame(0).iter().zip(whole.frame(l)) {
                assert!(
                    (a - b).abs() <= 1e-5 * (1.0 + b.abs()),
                    "frame {l}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn frozen_stats_reproduce_utterance_mode_frame_by_frame() {
        let net = toy_net(StageKind::Denoise, 5);
        let x = rand_input(1, 25, 6);
        let mut offline = net.new_state(NormMode::Utterance);
        let reference = net.forward(&x, &mut offline).unwrap();
        let stats = Arc::new(offline.captured_stats().unwrap());
        let mut state = net.new_state(NormMode::Frozen(stats));
        for l in 0..25 {
            let frame = FeatureMap::from_vec(1, 1, 161, x.frame(l).to_vec());
            let y = net.forward(&frame, &mut state).unwrap();
            for (a, b) in y.frame(0).iter().zip(reference.frame(l)) {
                assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn stcm_with_zero_expansion_is_identity() {
        let cfg = ModelConfig::new(StageKind::Denoise, Scale::Toy);
        let mut bundle = cfg.random_bundle(9);
        bundle.zero_prefix("tcm0.3.expand");
        let net = StageNet::new(cfg, &bundle).unwrap();
        let block = &net.tcm_blocks()[3];
        assert_eq!(block.dilation(), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = FeatureMap::from_fn(32, 20, 1, |_, _, _| rng.gen_range(-1.0..1.0));
        let y = block
            .forward(&x, &mut net.new_state(NormMode::Cumulative))
            .unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn missing_weights_rejected() {
        let cfg = ModelConfig::new(StageKind::Denoise, Scale::Toy);
        let mut bundle = cfg.random_bundle(1);
        bundle.remove("dec0.4.deconv.bias");
        let err = StageNet::new(cfg, &bundle).unwrap_err();
        assert!(err.to_string().contains("dec0.4.deconv.bias"));
    }
}
