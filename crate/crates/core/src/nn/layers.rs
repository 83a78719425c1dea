//! Inference kernels. Every temporal kernel is causal: output frame `l`
//! reads input frames `<= l` only, with history before the first frame of
//! a call supplied through an optional context map (zeros when absent).

use matrixmultiply::sgemm;

use super::config::{LayerKind, LayerSpec};
use super::tensor::FeatureMap;
use super::NnError;

/// Added to the variance before normalization.
pub const NORM_EPS: f64 = 1e-8;

/// Frame `l` relative to the start of `x`; negative indices read `ctx`.
#[inline]
fn frame_at<'a>(x: &'a FeatureMap, ctx: Option<&'a FeatureMap>, l: isize) -> Option<&'a [f32]> {
    if l >= 0 {
        return Some(x.frame(l as usize));
    }
    let ctx = ctx?;
    let idx = ctx.frames() as isize + l;
    (idx >= 0).then(|| ctx.frame(idx as usize))
}

fn check_len(tensor: &str, shape: &[usize], found: usize) -> Result<(), NnError> {
    let expected: usize = shape.iter().product();
    if expected != found {
        return Err(NnError::ShapeMismatch {
            tensor: tensor.to_string(),
            expected: shape.to_vec(),
            found: vec![found],
        });
    }
    Ok(())
}

fn check_input(spec: &LayerSpec, x: &FeatureMap, name: &str) -> Result<(), NnError> {
    if x.channels() != spec.in_channels || x.freq() != spec.freq_in {
        return Err(NnError::ShapeMismatch {
            tensor: format!("{name} input"),
            expected: vec![spec.in_channels, spec.freq_in],
            found: vec![x.channels(), x.freq()],
        });
    }
    Ok(())
}

/// `C[m x n] += A[m x k] * B[k x n]`, all row-major and dense.
#[inline]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover the strided extents checked above.
    unsafe {
        sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Causal 2-D convolution (also used for 1-D dilated and 1x1 convolutions
/// with a unit frequency axis). Weight layout `[out][in][k_t][k_f]`; time
/// tap `t` reads frame `l - (k_t - 1 - t) * dilation`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub spec: LayerSpec,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Conv2d {
    pub fn new(
        name: &str,
        spec: LayerSpec,
        weight: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self, NnError> {
        let (kt, kf) = spec.kernel;
        check_len(
            &format!("{name}.weight"),
            &[spec.out_channels, spec.in_channels, kt, kf],
            weight.len(),
        )?;
        check_len(&format!("{name}.bias"), &[spec.out_channels], bias.len())?;
        Ok(Self { spec, weight, bias })
    }

    pub fn forward(&self, x: &FeatureMap, ctx: Option<&FeatureMap>) -> Result<FeatureMap, NnError> {
        check_input(&self.spec, x, "conv")?;
        if self.spec.freq_in == 1 && self.spec.freq_out == 1 && self.spec.kernel.1 == 1 {
            return Ok(self.forward_temporal(x, ctx));
        }
        let s = &self.spec;
        let (kt, kf) = s.kernel;
        let (fin, fout) = (s.freq_in, s.freq_out);
        let k = s.in_channels * kt * kf;
        let mut out = FeatureMap::zeros(s.out_channels, x.frames(), fout);
        let mut patches = vec![0.0f32; k * fout];
        for l in 0..x.frames() {
            patches.iter_mut().for_each(|p| *p = 0.0);
            for t in 0..kt {
                let back = ((kt - 1 - t) * s.dilation) as isize;
                let Some(src) = frame_at(x, ctx, l as isize - back) else {
                    continue;
                };
                for ci in 0..s.in_channels {
                    let row_in = &src[ci * fin..(ci + 1) * fin];
                    for j in 0..kf {
                        let r = (ci * kt + t) * kf + j;
                        let dst = &mut patches[r * fout..(r + 1) * fout];
                        for (fo, d) in dst.iter_mut().enumerate() {
                            let fi = (fo * s.stride_f + j) as isize - s.pad_f as isize;
                            if fi >= 0 && (fi as usize) < fin {
                                *d = row_in[fi as usize];
                            }
                        }
                    }
                }
            }
            let frame = out.frame_mut(l);
            for (co, b) in self.bias.iter().enumerate() {
                frame[co * fout..(co + 1) * fout]
                    .iter_mut()
                    .for_each(|v| *v = *b);
            }
            gemm_acc(s.out_channels, k, fout, &self.weight, &patches, frame);
        }
        Ok(out)
    }

    /// Frequency-free path: all frames in one matrix product.
    fn forward_temporal(&self, x: &FeatureMap, ctx: Option<&FeatureMap>) -> FeatureMap {
        let s = &self.spec;
        let kt = s.kernel.0;
        let frames = x.frames();
        let k = s.in_channels * kt;
        let mut patches = vec![0.0f32; k * frames];
        for l in 0..frames {
            for t in 0..kt {
                let back = ((kt - 1 - t) * s.dilation) as isize;
                if let Some(src) = frame_at(x, ctx, l as isize - back) {
                    for ci in 0..s.in_channels {
                        patches[(ci * kt + t) * frames + l] = src[ci];
                    }
                }
            }
        }
        let mut res = vec![0.0f32; s.out_channels * frames];
        for (co, b) in self.bias.iter().enumerate() {
            res[co * frames..(co + 1) * frames]
                .iter_mut()
                .for_each(|v| *v = *b);
        }
        gemm_acc(s.out_channels, k, frames, &self.weight, &patches, &mut res);
        let mut out = FeatureMap::zeros(s.out_channels, frames, 1);
        for l in 0..frames {
            let frame = out.frame_mut(l);
            for co in 0..s.out_channels {
                frame[co] = res[co * frames + l];
            }
        }
        out
    }
}

/// Causal transposed 2-D convolution. Weight layout `[in][out][k_t][k_f]`;
/// time tap `t` reads frame `l - t` and output bins are
/// `fi * stride - pad + j`.
#[derive(Debug, Clone)]
pub struct Deconv2d {
    pub spec: LayerSpec,
    /// Per time tap, a `[(out * k_f) x in]` matrix.
    taps: Vec<Vec<f32>>,
    bias: Vec<f32>,
}

impl Deconv2d {
    pub fn new(
        name: &str,
        spec: LayerSpec,
        weight: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self, NnError> {
        let (kt, kf) = spec.kernel;
        let (cin, cout) = (spec.in_channels, spec.out_channels);
        check_len(
            &format!("{name}.weight"),
            &[cin, cout, kt, kf],
            weight.len(),
        )?;
        check_len(&format!("{name}.bias"), &[cout], bias.len())?;
        let taps = (0..kt)
            .map(|t| {
                let mut m = vec![0.0f32; cout * kf * cin];
                for ci in 0..cin {
                    for co in 0..cout {
                        for j in 0..kf {
                            m[(co * kf + j) * cin + ci] =
                                weight[((ci * cout + co) * kt + t) * kf + j];
                        }
                    }
                }
                m
            })
            .collect();
        Ok(Self { spec, taps, bias })
    }

    pub fn forward(&self, x: &FeatureMap, ctx: Option<&FeatureMap>) -> Result<FeatureMap, NnError> {
        check_input(&self.spec, x, "deconv")?;
        let s = &self.spec;
        let kf = s.kernel.1;
        let (fin, fout) = (s.freq_in, s.freq_out);
        let rows = s.out_channels * kf;
        let mut out = FeatureMap::zeros(s.out_channels, x.frames(), fout);
        let mut cols = vec![0.0f32; rows * fin];
        for l in 0..x.frames() {
            let frame = out.frame_mut(l);
            for (co, b) in self.bias.iter().enumerate() {
                frame[co * fout..(co + 1) * fout]
                    .iter_mut()
                    .for_each(|v| *v = *b);
            }
            for (t, tap) in self.taps.iter().enumerate() {
                let Some(src) = frame_at(x, ctx, l as isize - t as isize) else {
                    continue;
                };
                cols.iter_mut().for_each(|c| *c = 0.0);
                gemm_acc(rows, s.in_channels, fin, tap, src, &mut cols);
                for co in 0..s.out_channels {
                    let dst = &mut frame[co * fout..(co + 1) * fout];
                    for j in 0..kf {
                        let col = &cols[(co * kf + j) * fin..(co * kf + j + 1) * fin];
                        for (fi, v) in col.iter().enumerate() {
                            let fo = (fi * s.stride_f + j) as isize - s.pad_f as isize;
                            if fo >= 0 && (fo as usize) < fout {
                                dst[fo as usize] += v;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Fully connected layer applied to each flattened frame independently.
/// Weight layout `[out][in]`. Output has a unit frequency axis.
#[derive(Debug, Clone)]
pub struct Dense {
    pub spec: LayerSpec,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Dense {
    pub fn new(
        name: &str,
        spec: LayerSpec,
        weight: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self, NnError> {
        check_len(
            &format!("{name}.weight"),
            &[spec.out_channels, spec.in_channels],
            weight.len(),
        )?;
        check_len(&format!("{name}.bias"), &[spec.out_channels], bias.len())?;
        Ok(Self { spec, weight, bias })
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap, NnError> {
        let (nin, nout) = (self.spec.in_channels, self.spec.out_channels);
        if x.frame_len() != nin {
            return Err(NnError::ShapeMismatch {
                tensor: "dense input".into(),
                expected: vec![nin],
                found: vec![x.frame_len()],
            });
        }
        let frames = x.frames();
        let mut out = FeatureMap::zeros(nout, frames, 1);
        for l in 0..frames {
            out.frame_mut(l).copy_from_slice(&self.bias);
        }
        // out[L x nout] += x[L x nin] * W^T
        // SAFETY: x holds frames*nin values, W nout*nin, out frames*nout.
        unsafe {
            sgemm(
                frames,
                nin,
                nout,
                1.0,
                x.data().as_ptr(),
                nin as isize,
                1,
                self.weight.as_ptr(),
                1,
                nin as isize,
                1.0,
                out.data_mut().as_mut_ptr(),
                nout as isize,
                1,
            );
        }
        Ok(out)
    }
}

/// Per-channel mean and variance over `(frames, freq)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub fn channel_stats(x: &FeatureMap) -> ChannelStats {
    let c = x.channels();
    let mut sum = vec![0.0f64; c];
    let mut sumsq = vec![0.0f64; c];
    for l in 0..x.frames() {
        for ch in 0..c {
            for &v in x.row(ch, l) {
                sum[ch] += v as f64;
                sumsq[ch] += (v as f64) * (v as f64);
            }
        }
    }
    let n = (x.frames() * x.freq()).max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let var = sumsq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n - m * m).max(0.0))
        .collect();
    ChannelStats { mean, var }
}

/// Affine parameters of an instance normalization layer.
#[derive(Debug, Clone)]
pub struct Affine {
    pub gain: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Affine {
    pub fn new(
        name: &str,
        channels: usize,
        gain: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self, NnError> {
        check_len(&format!("{name}.gain"), &[channels], gain.len())?;
        check_len(&format!("{name}.bias"), &[channels], bias.len())?;
        Ok(Self { gain, bias })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            gain: vec![1.0; channels],
            bias: vec![0.0; channels],
        }
    }
}

#[inline]
fn normalize_row(row: &mut [f32], mean: f64, var: f64, gain: f32, bias: f32) {
    let inv = 1.0 / (var + NORM_EPS).sqrt();
    for v in row {
        *v = ((*v as f64 - mean) * inv) as f32 * gain + bias;
    }
}

/// Normalize every frame of `x` with fixed statistics.
pub fn normalize_with(x: &mut FeatureMap, stats: &ChannelStats, affine: &Affine) {
    for l in 0..x.frames() {
        for c in 0..x.channels() {
            normalize_row(
                x.row_mut(c, l),
                stats.mean[c],
                stats.var[c],
                affine.gain[c],
                affine.bias[c],
            );
        }
    }
}

/// Instance normalization with statistics over the whole map.
pub fn instance_norm(x: &FeatureMap, affine: &Affine) -> FeatureMap {
    let stats = channel_stats(x);
    let mut y = x.clone();
    normalize_with(&mut y, &stats, affine);
    y
}

/// Cumulative per-channel statistics: frame `l` is normalized with the
/// mean/variance of every value seen up to and including frame `l`.
#[derive(Debug, Clone)]
pub struct RunningStats {
    count: f64,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            count: 0.0,
            sum: vec![0.0; channels],
            sumsq: vec![0.0; channels],
        }
    }

    pub fn normalize_causal(&mut self, x: &mut FeatureMap, affine: &Affine) {
        let freq = x.freq() as f64;
        for l in 0..x.frames() {
            self.count += freq;
            for c in 0..x.channels() {
                for &v in x.row(c, l) {
                    self.sum[c] += v as f64;
                    self.sumsq[c] += (v as f64) * (v as f64);
                }
            }
            for c in 0..x.channels() {
                let mean = self.sum[c] / self.count;
                let var = (self.sumsq[c] / self.count - mean * mean).max(0.0);
                normalize_row(x.row_mut(c, l), mean, var, affine.gain[c], affine.bias[c]);
            }
        }
    }
}

pub fn prelu(x: &mut FeatureMap, alpha: &[f32]) {
    assert_eq!(alpha.len(), x.channels(), "prelu slope per channel");
    for l in 0..x.frames() {
        for (c, &a) in alpha.iter().enumerate() {
            for v in x.row_mut(c, l) {
                if *v < 0.0 {
                    *v *= a;
                }
            }
        }
    }
}

/// Conv-like layer kinds that keep temporal history.
pub fn is_temporal(kind: LayerKind) -> bool {
    matches!(
        kind,
        LayerKind::Conv2d | LayerKind::Deconv2d | LayerKind::Conv1dDilated
    )
}
