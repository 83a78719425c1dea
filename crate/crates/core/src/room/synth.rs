//! Seeded noisy/target pair synthesis and the line-delimited manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mix::{noise_gain, reverberate, MixSpec};
use super::rir::{simulate_rir, Absorption, Placement, Rir, RoomSpec};
use super::RoomError;
use crate::audio::{read_wav, to_i16, write_wav};
use crate::dsp::SAMPLE_RATE;

pub const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSampler {
    pub dims_min: [f64; 3],
    pub dims_max: [f64; 3],
    pub t60_range: (f64, f64),
    /// Minimum distance of source and mic from any wall.
    pub wall_margin: f64,
    pub min_distance: f64,
    pub early_samples: usize,
    pub placement: Placement,
}

impl Default for RoomSampler {
    fn default() -> Self {
        Self {
            dims_min: [3.0, 3.0, 2.5],
            dims_max: [8.0, 6.0, 3.5],
            t60_range: (0.2, 0.8),
            wall_margin: 0.5,
            min_distance: 0.5,
            early_samples: 1600,
            placement: Placement::Nearest,
        }
    }
}

impl RoomSampler {
    pub fn draw<R: Rng>(&self, rng: &mut R) -> RoomSpec {
        let dims: [f64; 3] =
            std::array::from_fn(|i| uniform(rng, self.dims_min[i], self.dims_max[i]));
        let t60 = uniform(rng, self.t60_range.0, self.t60_range.1);
        let point = |rng: &mut R| -> [f64; 3] {
            std::array::from_fn(|i| {
                let m = self.wall_margin.min(dims[i] / 4.0);
                uniform(rng, m, dims[i] - m)
            })
        };
        let source = point(rng);
        let mut mic = point(rng);
        for _ in 0..100 {
            let d: f64 = (0..3)
                .map(|i| (source[i] - mic[i]).powi(2))
                .sum::<f64>()
                .sqrt();
            if d >= self.min_distance {
                break;
            }
            mic = point(rng);
        }
        let mut spec = RoomSpec::new(dims, Absorption::T60(t60), source, mic);
        spec.length = ((t60 * spec.fs).ceil() as usize).max(2 * self.early_samples);
        spec.early_samples = self.early_samples;
        spec.placement = self.placement;
        spec
    }

    pub fn validate(&self) -> Result<(), RoomError> {
        let ok = (0..3).all(|i| self.dims_min[i] > 0.0 && self.dims_min[i] <= self.dims_max[i])
            && self.t60_range.0 > 0.0
            && self.t60_range.0 <= self.t60_range.1
            && self.wall_margin > 0.0;
        if ok {
            Ok(())
        } else {
            Err(RoomError::InvalidRoom(
                "room sampler ranges are inconsistent".into(),
            ))
        }
    }
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixSampler {
    pub snr_range: (f64, f64),
}

impl Default for MixSampler {
    fn default() -> Self {
        Self {
            snr_range: (-5.0, 15.0),
        }
    }
}

impl MixSampler {
    pub fn draw<R: Rng>(&self, rng: &mut R, seed: u64) -> MixSpec {
        MixSpec {
            snr_db: uniform(rng, self.snr_range.0, self.snr_range.1),
            snr_range: self.snr_range,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub rooms: RoomSampler,
    pub mix: MixSampler,
    pub count: usize,
    pub seed: u64,
    /// Number of distinct RIRs shared by all pairs.
    pub rir_pool: usize,
    /// Peak level of the loudest written signal of each pair.
    pub peak: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            rooms: RoomSampler::default(),
            mix: MixSampler::default(),
            count: 100,
            seed: 0,
            rir_pool: 100,
            peak: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomRecord {
    pub dims: [f64; 3],
    pub t60: f64,
    pub source: [f64; 3],
    pub mic: [f64; 3],
}

/// One synthesized pair. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub index: usize,
    pub noisy: String,
    pub target: String,
    pub reverberant: String,
    pub noise: String,
    pub clean_source: String,
    pub noise_source: String,
    pub snr_db: f64,
    pub noise_gain: f64,
    pub scale: f64,
    pub seed: u64,
    pub stream: u64,
    pub rir: usize,
    pub room: RoomRecord,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<(), RoomError> {
        fs::write(path, self.to_jsonl()).map_err(|e| RoomError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, RoomError> {
        let text = fs::read_to_string(path).map_err(|e| RoomError::io(path, e))?;
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| RoomError::Manifest {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            records,
        })
    }
}

struct Source {
    name: String,
    samples: Vec<f64>,
}

fn load_dir(dir: &Path) -> Result<Vec<Source>, RoomError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| RoomError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let (samples, rate) = read_wav(&p)?;
        if rate != SAMPLE_RATE {
            return Err(RoomError::SampleRate { path: p, rate });
        }
        if samples.iter().all(|&v| v == 0.0) {
            continue;
        }
        let name = p
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        out.push(Source { name, samples });
    }
    if out.is_empty() {
        return Err(RoomError::EmptyDirectory(dir.to_path_buf()));
    }
    Ok(out)
}

fn pair_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Simulate the shared RIR pool from stream 0 of `seed`.
pub fn rir_pool(
    rooms: &RoomSampler,
    size: usize,
    seed: u64,
) -> Result<Vec<(RoomSpec, Rir)>, RoomError> {
    let mut rng = pair_rng(seed, 0);
    let specs: Vec<RoomSpec> = (0..size).map(|_| rooms.draw(&mut rng)).collect();
    specs
        .into_par_iter()
        .map(|spec| simulate_rir(&spec).map(|rir| (spec, rir)))
        .collect()
}

/// Build `count` pairs under `out_dir` and write `out_dir/manifest.jsonl`.
/// Pair `i` draws from stream `i + 1` of `seed`, so the output does not
/// depend on thread scheduling.
pub fn synth_dataset(
    clean_dir: &Path,
    noise_dir: &Path,
    out_dir: &Path,
    cfg: &SynthConfig,
) -> Result<Manifest, RoomError> {
    cfg.rooms.validate()?;
    let (lo, hi) = cfg.mix.snr_range;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(RoomError::InvalidSnr(if lo.is_finite() { hi } else { lo }));
    }
    let clean = load_dir(clean_dir)?;
    let noise = load_dir(noise_dir)?;
    for sub in ["noisy", "target", "reverberant", "noise"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| RoomError::io(&d, e))?;
    }
    let pool = if cfg.count == 0 {
        Vec::new()
    } else {
        rir_pool(&cfg.rooms, cfg.rir_pool.max(1), cfg.seed)?
    };

    let records = (0..cfg.count)
        .into_par_iter()
        .map(|i| synth_pair(i, &clean, &noise, &pool, out_dir, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        records,
    };
    manifest.write(&out_dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}

fn synth_pair(
    index: usize,
    clean: &[Source],
    noise: &[Source],
    pool: &[(RoomSpec, Rir)],
    out_dir: &Path,
    cfg: &SynthConfig,
) -> Result<ManifestRecord, RoomError> {
    let stream = index as u64 + 1;
    let mut rng = pair_rng(cfg.seed, stream);
    let c = &clean[rng.gen_range(0..clean.len())];
    let n = &noise[rng.gen_range(0..noise.len())];
    let rir_idx = rng.gen_range(0..pool.len());
    let mix = cfg.mix.draw(&mut rng, cfg.seed);
    let offset = rng.gen_range(0..n.samples.len());

    let (room, rir) = &pool[rir_idx];
    let len = c.samples.len();
    let segment: Vec<f64> = (0..len)
        .map(|t| n.samples[(offset + t) % n.samples.len()])
        .collect();
    let (reverberant, target) = reverberate(&c.samples, rir);
    let draft = noise_gain(&target, &segment, mix.snr_db)?;
    let peak = reverberant
        .iter()
        .zip(&segment)
        .map(|(r, n)| r + draft * n)
        .chain(target.iter().copied())
        .chain(reverberant.iter().copied())
        .chain(segment.iter().map(|n| draft * n))
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { cfg.peak / peak } else { 1.0 };
    // Final gain is measured against the target as quantized on disk.
    let stored_target: Vec<f64> = target
        .iter()
        .map(|v| to_i16(v * scale) as f64 / 32768.0)
        .collect();
    let scaled_segment: Vec<f64> = segment.iter().map(|v| v * scale).collect();
    let g = noise_gain(&stored_target, &scaled_segment, mix.snr_db)?;
    let scaled_noise: Vec<f64> = segment.iter().map(|v| g * v).collect();
    let noisy: Vec<f64> = reverberant
        .iter()
        .zip(&scaled_noise)
        .map(|(a, b)| a + b)
        .collect();

    let name = format!("{index:06}.wav");
    let mut rel = Vec::with_capacity(4);
    for (sub, signal) in [
        ("noisy", &noisy),
        ("target", &target),
        ("reverberant", &reverberant),
        ("noise", &scaled_noise),
    ] {
        let r = format!("{sub}/{name}");
        let scaled: Vec<f64> = signal.iter().map(|v| v * scale).collect();
        write_wav(&out_dir.join(&r), &scaled, SAMPLE_RATE)?;
        rel.push(r);
    }
    let t60 = match room.absorption {
        Absorption::T60(t) => t,
        Absorption::Reflection(_) => room.sabine_t60(),
    };
    let mut rel = rel.into_iter();
    Ok(ManifestRecord {
        index,
        noisy: rel.next().unwrap_or_default(),
        target: rel.next().unwrap_or_default(),
        reverberant: rel.next().unwrap_or_default(),
        noise: rel.next().unwrap_or_default(),
        clean_source: c.name.clone(),
        noise_source: n.name.clone(),
        snr_db: mix.snr_db,
        noise_gain: g,
        scale,
        seed: cfg.seed,
        stream,
        rir: rir_idx,
        room: RoomRecord {
            dims: room.dims,
            t60,
            source: room.source,
            mic: room.mic,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::room::mix::measure_snr;

    pub(crate) fn write_sources(dir: &Path) -> (PathBuf, PathBuf) {
        let clean = dir.join("clean");
        let noise = dir.join("noise");
        fs::create_dir_all(&clean).unwrap();
        fs::create_dir_all(&noise).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for k in 0..3 {
            let f0 = 110.0 + 40.0 * k as f64;
            let x: Vec<f64> = (0..16_000)
                .map(|t| {
                    let on = (t / 2000) % 2 == 0;
                    let s: f64 = (1..8)
                        .map(|h| {
                            (2.0 * std::f64::consts::PI * f0 * h as f64 * t as f64 / 16_000.0).sin()
                                / h as f64
                        })
                        .sum();
                    if on {
                        0.2 * s
                    } else {
                        0.0
                    }
                })
                .collect();
            write_wav(&clean.join(format!("c{k}.wav")), &x, 16_000).unwrap();
            let n: Vec<f64> = (0..12_000).map(|_| rng.gen_range(-0.3..0.3)).collect();
            write_wav(&noise.join(format!("n{k}.wav")), &n, 16_000).unwrap();
        }
        (clean, noise)
    }

    fn small_config(count: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            rooms: RoomSampler {
                t60_range: (0.2, 0.4),
                ..RoomSampler::default()
            },
            count,
            seed,
            rir_pool: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_and_snr_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (clean, noise) = write_sources(dir.path());
        let a = synth_dataset(&clean, &noise, &dir.path().join("a"), &small_config(6, 5)).unwrap();
        let b = synth_dataset(&clean, &noise, &dir.path().join("b"), &small_config(6, 5)).unwrap();
        let ta = fs::read(dir.path().join("a").join(MANIFEST_NAME)).unwrap();
        let tb = fs::read(dir.path().join("b").join(MANIFEST_NAME)).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a.records.len(), 6);
        assert_eq!(
            Manifest::read(&dir.path().join("a").join(MANIFEST_NAME))
                .unwrap()
                .records,
            b.records
        );
        for r in &a.records {
            assert!((-5.0..15.0).contains(&r.snr_db));
            let (x, _) = read_wav(&a.resolve(&r.target)).unwrap();
            let (n, _) = read_wav(&a.resolve(&r.noise)).unwrap();
            assert!((measure_snr(&x, &n) - r.snr_db).abs() < 0.01);
        }
    }

    #[test]
    fn zero_count_and_empty_dirs() {
        let dir = tempfile::tempdir().unwrap();
        let (clean, noise) = write_sources(dir.path());
        let m = synth_dataset(&clean, &noise, &dir.path().join("z"), &small_config(0, 1)).unwrap();
        assert!(m.records.is_empty());
        assert_eq!(
            fs::read(dir.path().join("z").join(MANIFEST_NAME)).unwrap(),
            Vec::<u8>::new()
        );
        let empty = dir.path().join("empty");
        fs::create_dir_all(&empty).unwrap();
        let err =
            synth_dataset(&empty, &noise, &dir.path().join("e"), &small_config(1, 1)).unwrap_err();
        assert!(matches!(err, RoomError::EmptyDirectory(_)));
    }

    #[test]
    fn sampled_rooms_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = RoomSampler::default();
        for _ in 0..200 {
            let room = s.draw(&mut rng);
            room.validate().unwrap();
            assert!(room.length >= 3200);
        }
    }
}
