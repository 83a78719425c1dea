//! Latency, parameter and compute accounting for a full chain.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::FrameParams;
use crate::nn::{count_params_and_macs, Complexity, ModelConfig, Scale, StageKind, StageNet};
use crate::pipeline::{Engine, NormSource, PipelineError, MAX_DEPTH};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub delay_ms: f64,
    pub complexity: Complexity,
    pub frames_per_second: f64,
    pub frames_timed: usize,
    pub frame_ms_mean: f64,
    pub frame_ms_p95: f64,
}

impl BenchReport {
    pub fn params(&self) -> u64 {
        self.complexity.params()
    }

    pub fn macs_per_frame(&self) -> u64 {
        self.complexity.macs_per_frame()
    }

    pub fn gmacs(&self) -> f64 {
        self.complexity.gmacs(self.frames_per_second)
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "algorithmic delay  {:.1} ms (window {:.1} ms + hop {:.1} ms)\n",
            self.delay_ms, self.window_ms, self.hop_ms
        );
        for st in &self.complexity.stages {
            s += &format!(
                "  {:<3} params {:>10}  MACs/frame {:>12} (filter {})\n",
                st.stage.name(),
                st.params,
                st.macs(),
                st.filter_macs
            );
        }
        s += &format!(
            "parameters         {} ({:.2} M)\n",
            self.params(),
            self.params() as f64 / 1e6
        );
        s += &format!(
            "MACs per frame     {} ({:.2} M)\n",
            self.macs_per_frame(),
            self.macs_per_frame() as f64 / 1e6
        );
        s += &format!(
            "GMAC/s at {:.0} fps  {:.3}\n",
            self.frames_per_second,
            self.gmacs()
        );
        if self.frames_timed > 0 {
            s += &format!(
                "frame time         mean {:.3} ms, p95 {:.3} ms over {} frames\n",
                self.frame_ms_mean, self.frame_ms_p95, self.frames_timed
            );
        }
        s
    }
}

/// Static accounting only.
pub fn account(params: &FrameParams, configs: &[ModelConfig]) -> BenchReport {
    BenchReport {
        window_ms: params.window_ms(),
        hop_ms: params.hop_ms(),
        delay_ms: params.algorithmic_delay_ms(),
        complexity: count_params_and_macs(configs),
        frames_per_second: 1000.0 / params.hop_ms(),
        frames_timed: 0,
        frame_ms_mean: 0.0,
        frame_ms_p95: 0.0,
    }
}

/// Time `frames` streaming hops through `engine` at `depth` on white noise.
/// Returns per-hop wall times in milliseconds.
pub fn time_frames(
    engine: &Engine,
    depth: usize,
    frames: usize,
    seed: u64,
) -> Result<Vec<f64>, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = engine.streamer(depth, NormSource::Cumulative)?;
    let hop = s.hop();
    let mut times = Vec::with_capacity(frames);
    for _ in 0..frames {
        let block: Vec<f64> = (0..hop).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let t = Instant::now();
        s.push_hop(&block)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(times)
}

/// Full bench: accounting for `scale` plus timing of a randomly initialised
/// four-stage chain.
pub fn run(scale: Scale, frames: usize, seed: u64) -> Result<BenchReport, PipelineError> {
    let configs: Vec<ModelConfig> = StageKind::ALL
        .iter()
        .map(|&k| ModelConfig::new(k, scale))
        .collect();
    let mut engine = Engine::new();
    for (i, cfg) in configs.iter().enumerate() {
        let bundle = cfg.random_bundle(seed.wrapping_add(i as u64));
        engine = engine.with_stage(StageNet::new(cfg.clone(), &bundle)?);
    }
    let mut report = account(engine.frame_params(), &configs);
    if frames > 0 {
        let mut times = time_frames(&engine, MAX_DEPTH, frames, seed)?;
        report.frames_timed = times.len();
        report.frame_ms_mean = times.iter().sum::<f64>() / times.len() as f64;
        times.sort_by(f64::total_cmp);
        report.frame_ms_p95 = times[((times.len() as f64 * 0.95) as usize).min(times.len() - 1)];
    }
    Ok(report)
}
