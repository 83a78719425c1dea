use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::weights::{fingerprint_specs, WeightsBundle};
use super::NnError;

/// Dilation schedule of one group of squeezed TCM blocks.
pub const TCM_DILATIONS: [usize; 6] = [1, 2, 4, 8, 16, 32];
pub const ENCODER_BLOCKS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d,
    Deconv2d,
    Conv1dDilated,
    Norm,
    Prelu,
    Dense,
}

/// Shape description of a single layer. Time stride is always 1; the time
/// axis uses causal (past-only) padding and the frequency axis symmetric
/// padding `pad_f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(time, freq)` kernel extent.
    pub kernel: (usize, usize),
    pub stride_f: usize,
    pub dilation: usize,
    pub pad_f: usize,
    /// Extra bins appended to a transposed-conv output.
    pub out_pad_f: usize,
    pub freq_in: usize,
    pub freq_out: usize,
}

impl LayerSpec {
    pub fn conv2d(
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride_f: usize,
        pad_f: usize,
        freq_in: usize,
    ) -> Self {
        let freq_out = (freq_in + 2 * pad_f - kernel.1) / stride_f + 1;
        Self {
            kind: LayerKind::Conv2d,
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride_f,
            dilation: 1,
            pad_f,
            out_pad_f: 0,
            freq_in,
            freq_out,
        }
    }

    /// Transposed conv sized to produce exactly `freq_out` bins.
    pub fn deconv2d(
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride_f: usize,
        pad_f: usize,
        freq_in: usize,
        freq_out: usize,
    ) -> Self {
        let natural = (freq_in - 1) * stride_f + kernel.1 - 2 * pad_f;
        Self {
            kind: LayerKind::Deconv2d,
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride_f,
            dilation: 1,
            pad_f,
            out_pad_f: freq_out.saturating_sub(natural),
            freq_in,
            freq_out,
        }
    }

    pub fn conv1d(cin: usize, cout: usize, kernel_t: usize, dilation: usize) -> Self {
        Self {
            kind: LayerKind::Conv1dDilated,
            in_channels: cin,
            out_channels: cout,
            kernel: (kernel_t, 1),
            stride_f: 1,
            dilation,
            pad_f: 0,
            out_pad_f: 0,
            freq_in: 1,
            freq_out: 1,
        }
    }

    pub fn dense(inputs: usize, outputs: usize) -> Self {
        Self {
            kind: LayerKind::Dense,
            in_channels: inputs,
            out_channels: outputs,
            kernel: (1, 1),
            stride_f: 1,
            dilation: 1,
            pad_f: 0,
            out_pad_f: 0,
            freq_in: 1,
            freq_out: 1,
        }
    }

    pub fn elementwise(kind: LayerKind, channels: usize, freq: usize) -> Self {
        Self {
            kind,
            in_channels: channels,
            out_channels: channels,
            kernel: (1, 1),
            stride_f: 1,
            dilation: 1,
            pad_f: 0,
            out_pad_f: 0,
            freq_in: freq,
            freq_out: freq,
        }
    }

    /// Number of past frames a temporal kernel reaches back.
    pub fn receptive_history(&self) -> usize {
        (self.kernel.0 - 1) * self.dilation
    }

    /// Multiply-accumulates per output frame.
    pub fn macs(&self) -> u64 {
        let taps = (self.in_channels * self.out_channels * self.kernel.0 * self.kernel.1) as u64;
        match self.kind {
            LayerKind::Conv2d | LayerKind::Conv1dDilated => taps * self.freq_out as u64,
            // each input element is scattered over the kernel once
            LayerKind::Deconv2d => taps * self.freq_in as u64,
            LayerKind::Dense => (self.in_channels * self.out_channels) as u64,
            LayerKind::Norm | LayerKind::Prelu => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StageKind {
    Denoise,
    Dereverb,
    Refine,
}

impl StageKind {
    pub const ALL: [StageKind; 3] = [StageKind::Denoise, StageKind::Dereverb, StageKind::Refine];

    pub fn name(self) -> &'static str {
        match self {
            StageKind::Denoise => "dn",
            StageKind::Dereverb => "dr",
            StageKind::Refine => "sr",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dn" => Some(StageKind::Denoise),
            "dr" => Some(StageKind::Dereverb),
            "sr" => Some(StageKind::Refine),
            _ => None,
        }
    }
}

/// Model width preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// Full size, tuned to the ~6.4 M parameter / ~60 MMAC per frame budget.
    Default,
    /// Channel widths divided by eight, for desk-scale experiments and tests.
    Toy,
}

impl Scale {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "default" => Some(Scale::Default),
            "toy" => Some(Scale::Toy),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scale::Default => "default",
            Scale::Toy => "toy",
        }
    }
}

/// Hyperparameters of one stage network: a 5-block convolutional encoder,
/// a bottleneck of squeezed TCM groups, and one or two mirrored decoders.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub stage: StageKind,
    pub in_channels: usize,
    pub freq_bins: usize,
    pub encoder_channels: Vec<usize>,
    pub kernel: (usize, usize),
    pub freq_stride: usize,
    pub freq_pad: usize,
    /// Channel width the flattened bottleneck is projected to for the TCMs.
    pub bottleneck_width: usize,
    pub tcm_groups: usize,
    pub tcm_per_group: usize,
    pub tcm_dilations: Vec<usize>,
    pub tcm_squeeze_channels: usize,
    pub tcm_kernel: usize,
    pub num_decoders: usize,
    pub decoder_out_channels: usize,
    /// Multi-frame filter length for magnitude stages.
    pub filter_len: Option<usize>,
}

impl ModelConfig {
    pub fn new(stage: StageKind, scale: Scale) -> Self {
        let (encoder_channels, width, squeeze) = match scale {
            Scale::Default => (vec![64, 128, 128, 96, 64], 256, 64),
            Scale::Toy => (vec![8, 16, 16, 12, 8], 32, 8),
        };
        let (in_channels, num_decoders, decoder_out_channels, filter_len) = match stage {
            StageKind::Denoise => (1, 1, 5, Some(5)),
            StageKind::Dereverb => (2, 1, 5, Some(5)),
            StageKind::Refine => (6, 2, 1, None),
        };
        Self {
            stage,
            in_channels,
            freq_bins: 161,
            encoder_channels,
            kernel: (2, 3),
            freq_stride: 2,
            freq_pad: 1,
            bottleneck_width: width,
            tcm_groups: 3,
            tcm_per_group: 6,
            tcm_dilations: TCM_DILATIONS.to_vec(),
            tcm_squeeze_channels: squeeze,
            tcm_kernel: 5,
            num_decoders,
            decoder_out_channels,
            filter_len,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |msg: String| Err(NnError::InvalidConfig(msg));
        if self.encoder_channels.len() != ENCODER_BLOCKS {
            return bad(format!(
                "encoder must have {ENCODER_BLOCKS} blocks, got {}",
                self.encoder_channels.len()
            ));
        }
        if self.tcm_dilations != TCM_DILATIONS {
            return bad(format!("tcm dilations must be {TCM_DILATIONS:?}"));
        }
        if self.tcm_per_group != self.tcm_dilations.len() {
            return bad("one tcm block per dilation".into());
        }
        if !(1..=2).contains(&self.num_decoders) {
            return bad(format!(
                "num_decoders must be 1 or 2, got {}",
                self.num_decoders
            ));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.freq_stride == 0 || self.tcm_kernel == 0
        {
            return bad("kernel extents and strides must be positive".into());
        }
        if let Some(i) = self.filter_len {
            if i == 0 || self.decoder_out_channels != i {
                return bad("decoder must emit one channel per filter tap".into());
            }
        }
        let sizes = self.encoder_freq_sizes();
        if sizes.iter().any(|&f| f == 0) {
            return bad("frequency axis collapses in the encoder".into());
        }
        Ok(())
    }

    /// Frequency sizes at the encoder input and after each block.
    pub fn encoder_freq_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.freq_bins];
        for _ in 0..self.encoder_channels.len() {
            let f = *sizes.last().unwrap();
            let padded = f + 2 * self.freq_pad;
            sizes.push(if padded < self.kernel.1 {
                0
            } else {
                (padded - self.kernel.1) / self.freq_stride + 1
            });
        }
        sizes
    }

    pub fn encoder_layers(&self) -> Vec<LayerSpec> {
        let sizes = self.encoder_freq_sizes();
        let mut cin = self.in_channels;
        self.encoder_channels
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let spec = LayerSpec::conv2d(
                    cin,
                    cout,
                    self.kernel,
                    self.freq_stride,
                    self.freq_pad,
                    sizes[i],
                );
                cin = cout;
                spec
            })
            .collect()
    }

    /// Deconv layers of one decoder, input block first. Each takes the
    /// previous decoder output concatenated with the mirrored encoder output.
    pub fn decoder_layers(&self) -> Vec<LayerSpec> {
        let sizes = self.encoder_freq_sizes();
        let n = self.encoder_channels.len();
        let mut prev = self.encoder_channels[n - 1];
        (0..n)
            .map(|i| {
                let level = n - 1 - i;
                let skip = self.encoder_channels[level];
                let cout = if level == 0 {
                    self.decoder_out_channels
                } else {
                    self.encoder_channels[level - 1]
                };
                let spec = LayerSpec::deconv2d(
                    prev + skip,
                    cout,
                    self.kernel,
                    self.freq_stride,
                    self.freq_pad,
                    sizes[level + 1],
                    sizes[level],
                );
                prev = cout;
                spec
            })
            .collect()
    }

    pub fn bottleneck_flat(&self) -> usize {
        self.encoder_channels[self.encoder_channels.len() - 1]
            * self.encoder_freq_sizes()[self.encoder_channels.len()]
    }

    /// Every layer of the stage in execution order (all decoders included).
    pub fn all_layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        for spec in self.encoder_layers() {
            layers.push(spec);
            layers.push(LayerSpec::elementwise(
                LayerKind::Norm,
                spec.out_channels,
                spec.freq_out,
            ));
            layers.push(LayerSpec::elementwise(
                LayerKind::Prelu,
                spec.out_channels,
                spec.freq_out,
            ));
        }
        let flat = self.bottleneck_flat();
        let (w, sq) = (self.bottleneck_width, self.tcm_squeeze_channels);
        layers.push(LayerSpec::dense(flat, w));
        for _ in 0..self.tcm_groups {
            for &d in &self.tcm_dilations {
                layers.push(LayerSpec::conv1d(w, sq, 1, 1));
                layers.push(LayerSpec::elementwise(LayerKind::Norm, sq, 1));
                layers.push(LayerSpec::elementwise(LayerKind::Prelu, sq, 1));
                layers.push(LayerSpec::conv1d(sq, sq, self.tcm_kernel, d));
                layers.push(LayerSpec::elementwise(LayerKind::Norm, sq, 1));
                layers.push(LayerSpec::elementwise(LayerKind::Prelu, sq, 1));
                layers.push(LayerSpec::conv1d(sq, w, 1, 1));
            }
        }
        layers.push(LayerSpec::dense(w, flat));
        let decoder = self.decoder_layers();
        for _ in 0..self.num_decoders {
            for (i, spec) in decoder.iter().enumerate() {
                layers.push(*spec);
                if i + 1 < decoder.len() {
                    layers.push(LayerSpec::elementwise(
                        LayerKind::Norm,
                        spec.out_channels,
                        spec.freq_out,
                    ));
                    layers.push(LayerSpec::elementwise(
                        LayerKind::Prelu,
                        spec.out_channels,
                        spec.freq_out,
                    ));
                }
            }
        }
        layers
    }

    /// Names and shapes of every tensor a weight bundle must provide.
    pub fn tensor_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let norm_prelu =
            |out: &mut Vec<(String, Vec<usize>)>, prefix: &str, c: usize, suffix: &str| {
                out.push((format!("{prefix}.norm{suffix}.gain"), vec![c]));
                out.push((format!("{prefix}.norm{suffix}.bias"), vec![c]));
                out.push((format!("{prefix}.prelu{suffix}.alpha"), vec![c]));
            };
        let (kt, kf) = self.kernel;
        for (i, spec) in self.encoder_layers().iter().enumerate() {
            let p = format!("enc{i}");
            out.push((
                format!("{p}.conv.weight"),
                vec![spec.out_channels, spec.in_channels, kt, kf],
            ));
            out.push((format!("{p}.conv.bias"), vec![spec.out_channels]));
            norm_prelu(&mut out, &p, spec.out_channels, "");
        }
        let flat = self.bottleneck_flat();
        let (w, sq) = (self.bottleneck_width, self.tcm_squeeze_channels);
        out.push(("bottleneck.in.weight".into(), vec![w, flat]));
        out.push(("bottleneck.in.bias".into(), vec![w]));
        for g in 0..self.tcm_groups {
            for j in 0..self.tcm_dilations.len() {
                let p = format!("tcm{g}.{j}");
                out.push((format!("{p}.squeeze.weight"), vec![sq, w, 1]));
                out.push((format!("{p}.squeeze.bias"), vec![sq]));
                norm_prelu(&mut out, &p, sq, "1");
                out.push((format!("{p}.dconv.weight"), vec![sq, sq, self.tcm_kernel]));
                out.push((format!("{p}.dconv.bias"), vec![sq]));
                norm_prelu(&mut out, &p, sq, "2");
                out.push((format!("{p}.expand.weight"), vec![w, sq, 1]));
                out.push((format!("{p}.expand.bias"), vec![w]));
            }
        }
        out.push(("bottleneck.out.weight".into(), vec![flat, w]));
        out.push(("bottleneck.out.bias".into(), vec![flat]));
        let decoder = self.decoder_layers();
        for d in 0..self.num_decoders {
            for (i, spec) in decoder.iter().enumerate() {
                let p = format!("dec{d}.{i}");
                out.push((
                    format!("{p}.deconv.weight"),
                    vec![spec.in_channels, spec.out_channels, kt, kf],
                ));
                out.push((format!("{p}.deconv.bias"), vec![spec.out_channels]));
                if i + 1 < decoder.len() {
                    norm_prelu(&mut out, &p, spec.out_channels, "");
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> u64 {
        self.tensor_specs()
            .iter()
            .map(|(_, shape)| shape.iter().product::<usize>() as u64)
            .sum()
    }

    /// Hash of the tensor demand list; stored in weight files.
    pub fn fingerprint(&self) -> u64 {
        fingerprint_specs(&self.tensor_specs())
    }

    /// Randomly initialised bundle: He-uniform conv/dense weights, zero
    /// biases, unit norm gains and PReLU slopes of 0.25.
    pub fn random_bundle(&self, seed: u64) -> WeightsBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bundle = WeightsBundle::new(self.fingerprint());
        for (name, shape) in self.tensor_specs() {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = if name.ends_with(".weight") {
                let fan_in = if name.contains("deconv") {
                    shape[0] * shape[2] * shape[3] / self.freq_stride.max(1)
                } else {
                    shape[1..].iter().product()
                };
                let bound = (6.0 / fan_in.max(1) as f64).sqrt() as f32;
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            } else if name.ends_with(".gain") {
                vec![1.0; n]
            } else if name.ends_with(".alpha") {
                vec![0.25; n]
            } else {
                vec![0.0; n]
            };
            bundle.insert(name, shape, data);
        }
        bundle
    }
}
