use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sdd_core::audio::{read_wav, to_i16, write_wav, AudioError};
use sdd_core::bench;
use sdd_core::config::{load_bundle, save_bundle, ConfigError, EngineConfig};
use sdd_core::dsp::{DspError, SAMPLE_RATE};
use sdd_core::metrics::{evaluate_manifest, ChainEnhancer};
use sdd_core::nn::{ModelConfig, Scale, StageKind, WeightsError};
use sdd_core::pipeline::{Mode, NormSource, PipelineError};
use sdd_core::postproc::SppNetConfig;
use sdd_core::room::{
    schroeder_t60, simulate_rir, split_rir, synth_dataset, Absorption, Manifest, MixSampler,
    RoomError, RoomSampler, RoomSpec, SynthConfig, MANIFEST_NAME,
};

const EXIT_IO: u8 = 3;
const EXIT_FORMAT: u8 = 4;
const EXIT_CONFIG: u8 = 5;

/// Causal multi-stage speech denoising and dereverberation.
#[derive(Parser)]
#[command(name = "sdd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Enhance a WAV file, or a raw 16-bit stream on stdin/stdout.
    Enhance(EnhanceArgs),
    /// Report algorithmic delay, parameters, MACs and frame time.
    Bench(BenchArgs),
    /// Synthesize a noisy/reverberant dataset with a manifest.
    Synth(SynthArgs),
    /// Simulate one room impulse response.
    Rir(RirArgs),
    /// Score a manifest at several stage depths.
    Eval(EvalArgs),
    /// List the tensors of a weight file and check it against a config.
    Inspect(InspectArgs),
    /// Write a randomly initialised weight file.
    InitWeights(InitArgs),
}

#[derive(Args)]
struct EngineArgs {
    /// Engine config file (key = value lines).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Model preset: default or toy.
    #[arg(long)]
    scale: Option<String>,
    #[arg(long)]
    weights_dn: Option<PathBuf>,
    #[arg(long)]
    weights_dr: Option<PathBuf>,
    #[arg(long)]
    weights_sr: Option<PathBuf>,
    /// Override any config key, e.g. --set pp.gain_floor=0.3
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl EngineArgs {
    fn load(&self) -> Result<EngineConfig> {
        let mut cfg = match &self.config {
            Some(p) => EngineConfig::load(p)?,
            None => EngineConfig::default(),
        };
        let here = Path::new("");
        if let Some(s) = &self.scale {
            cfg.set("scale", s, here)?;
        }
        for (key, value) in [
            ("weights.dn", &self.weights_dn),
            ("weights.dr", &self.weights_dr),
            ("weights.sr", &self.weights_sr),
        ] {
            if let Some(v) = value {
                cfg.set(key, &v.to_string_lossy(), here)?;
            }
        }
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').ok_or_else(|| ConfigError::Value {
                key: kv.clone(),
                message: "expected KEY=VALUE".into(),
            })?;
            cfg.set(k.trim(), v.trim(), here)?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct EnhanceArgs {
    #[command(flatten)]
    engine: EngineArgs,
    /// Input WAV (16 kHz mono). Ignored with --stream.
    #[arg(short, long, required_unless_present = "stream")]
    input: Option<PathBuf>,
    /// Output WAV. Ignored with --stream.
    #[arg(short, long, required_unless_present = "stream")]
    output: Option<PathBuf>,
    /// Number of stages to run, 1 to 4.
    #[arg(long)]
    stages: Option<usize>,
    /// offline, streaming or streaming-offline-stats.
    #[arg(long)]
    mode: Option<String>,
    /// Read little-endian 16-bit samples from stdin in 160-sample hops and
    /// write enhanced hops to stdout.
    #[arg(long)]
    stream: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Config file; only its scale is used.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scale: Option<String>,
    /// Frames to time through the four-stage chain.
    #[arg(long, default_value_t = 300)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    clean: PathBuf,
    #[arg(long)]
    noise: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Distinct RIRs shared by all pairs.
    #[arg(long, default_value_t = 100)]
    rir_pool: usize,
    #[arg(long, default_value_t = -5.0, allow_hyphen_values = true)]
    snr_min: f64,
    #[arg(long, default_value_t = 15.0, allow_hyphen_values = true)]
    snr_max: f64,
    #[arg(long, default_value_t = 0.2)]
    t60_min: f64,
    #[arg(long, default_value_t = 0.8)]
    t60_max: f64,
    /// Early-reflection window after the direct path, in ms.
    #[arg(long, default_value_t = 100.0)]
    early_ms: f64,
}

#[derive(Args)]
struct RirArgs {
    /// Room size in metres, x,y,z.
    #[arg(long, value_delimiter = ',', required = true)]
    dims: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    source: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    mic: Vec<f64>,
    /// Target reverberation time in seconds.
    #[arg(long, conflicts_with = "reflection")]
    t60: Option<f64>,
    /// Uniform wall reflection coefficient.
    #[arg(long)]
    reflection: Option<f64>,
    #[arg(long)]
    max_order: Option<usize>,
    /// Length in samples.
    #[arg(long, default_value_t = 8000)]
    length: usize,
    /// Write the response, peak-normalised, as a WAV file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long)]
    manifest: PathBuf,
    /// Stage depths to score; 0 is the unprocessed input.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    stages: Vec<usize>,
    #[arg(long)]
    mode: Option<String>,
    /// Writes PREFIX.txt and PREFIX.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    weights: PathBuf,
    /// Check against this stage's config: dn, dr, sr or spp.
    #[arg(long)]
    stage: Option<String>,
    #[arg(long, default_value = "default")]
    scale: String,
}

#[derive(Args)]
struct InitArgs {
    /// dn, dr, sr or spp.
    #[arg(long)]
    stage: String,
    #[arg(long, default_value = "default")]
    scale: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Zero every tensor whose name starts with this prefix.
    #[arg(long = "zero")]
    zero: Vec<String>,
    #[arg(short, long)]
    out: PathBuf,
}

fn parse_scale(s: &str) -> Result<Scale> {
    Scale::parse(s).ok_or_else(|| {
        ConfigError::Value {
            key: "scale".into(),
            message: format!("{s:?} is not default or toy"),
        }
        .into()
    })
}

fn parse_mode(s: &str) -> Result<Mode> {
    Mode::parse(s).ok_or_else(|| {
        ConfigError::Value {
            key: "mode".into(),
            message: format!("{s:?} is not offline, streaming or streaming-offline-stats"),
        }
        .into()
    })
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    sorted[((sorted.len() as f64 * q) as usize).min(sorted.len() - 1)]
}

fn cmd_enhance(args: EnhanceArgs) -> Result<()> {
    let mut cfg = args.engine.load()?;
    if let Some(d) = args.stages {
        cfg.depth = d;
    }
    if let Some(m) = &args.mode {
        cfg.mode = parse_mode(m)?;
    }
    let engine = cfg.build_engine()?;
    let params = engine.frame_params();

    if args.stream {
        if cfg.mode == Mode::StreamingOfflineStats {
            bail!(ConfigError::Value {
                key: "mode".into(),
                message:
                    "streaming-offline-stats needs the whole signal and cannot run on a stream"
                        .into(),
            });
        }
        if cfg.mode == Mode::Offline {
            eprintln!("note: stream input uses cumulative normalization");
        }
        let mut streamer = engine.streamer(cfg.depth, NormSource::Cumulative)?;
        let hop = streamer.hop();
        let mut input = BufReader::new(io::stdin().lock());
        let mut output = BufWriter::new(io::stdout().lock());
        let mut bytes = vec![0u8; hop * 2];
        let mut total_in = 0usize;
        let mut written = 0usize;
        // Never emit more samples than were read; the last hop may be partial.
        let mut emit = |samples: &[f64], limit: usize, written: &mut usize| -> io::Result<()> {
            let n = samples.len().min(limit.saturating_sub(*written));
            for &s in &samples[..n] {
                output.write_all(&to_i16(s).to_le_bytes())?;
            }
            output.flush()?;
            *written += n;
            Ok(())
        };
        loop {
            let got = read_full(&mut input, &mut bytes).context("reading stdin")?;
            if got < 2 {
                break;
            }
            let block: Vec<f64> = bytes[..got - got % 2]
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                .chain(std::iter::repeat(0.0))
                .take(hop)
                .collect();
            total_in += got / 2;
            if let Some(out) = streamer.push_hop(&block)? {
                emit(&out, usize::MAX, &mut written).context("writing stdout")?;
            }
            if got < bytes.len() {
                break;
            }
        }
        if total_in > 0 {
            if let Some(out) = streamer.push_hop(&vec![0.0; hop])? {
                emit(&out, total_in, &mut written).context("writing stdout")?;
            }
            emit(&streamer.finish(), total_in, &mut written).context("writing stdout")?;
        }
        return Ok(());
    }

    let input = args.input.expect("required by clap");
    let output = args.output.expect("required by clap");
    let (signal, rate) = read_wav(&input)?;
    let (y, mut times) = engine.enhance_timed(&signal, rate, cfg.depth, cfg.mode)?;
    write_wav(&output, &y, SAMPLE_RATE)?;
    let mean = times.iter().sum::<f64>() / times.len().max(1) as f64;
    times.sort_by(f64::total_cmp);
    eprintln!(
        "{} samples, {} frames, stages {}, mode {}",
        signal.len(),
        times.len(),
        cfg.depth,
        cfg.mode.name()
    );
    eprintln!(
        "frame time mean {:.3} ms, p95 {:.3} ms",
        mean,
        percentile(&times, 0.95)
    );
    eprintln!(
        "algorithmic delay {:.1} ms (window {:.1} ms + hop {:.1} ms)",
        params.algorithmic_delay_ms(),
        params.window_ms(),
        params.hop_ms()
    );
    Ok(())
}

fn read_full(r: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let mut scale = match &args.config {
        Some(p) => EngineConfig::load(p)?.scale,
        None => Scale::Default,
    };
    if let Some(s) = &args.scale {
        scale = parse_scale(s)?;
    }
    let report = bench::run(scale, args.frames, args.seed)?;
    println!("model scale        {}", scale.name());
    print!("{}", report.render());
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        rooms: RoomSampler {
            t60_range: (args.t60_min, args.t60_max),
            early_samples: (args.early_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize,
            ..RoomSampler::default()
        },
        mix: MixSampler {
            snr_range: (args.snr_min, args.snr_max),
        },
        count: args.count,
        seed: args.seed,
        rir_pool: args.rir_pool,
        ..SynthConfig::default()
    };
    let manifest = synth_dataset(&args.clean, &args.noise, &args.out, &cfg)?;
    println!(
        "wrote {} pairs to {}",
        manifest.records.len(),
        args.out.join(MANIFEST_NAME).display()
    );
    Ok(())
}

fn point(v: &[f64], name: &str) -> Result<[f64; 3]> {
    v.try_into().map_err(|_| {
        ConfigError::Value {
            key: name.into(),
            message: "expected three comma-separated numbers".into(),
        }
        .into()
    })
}

fn cmd_rir(args: RirArgs) -> Result<()> {
    let absorption = match (args.t60, args.reflection) {
        (Some(t), _) => Absorption::T60(t),
        (None, Some(b)) => Absorption::Reflection([b; 6]),
        (None, None) => bail!(ConfigError::Value {
            key: "t60".into(),
            message: "give --t60 or --reflection".into(),
        }),
    };
    let mut spec = RoomSpec::new(
        point(&args.dims, "dims")?,
        absorption,
        point(&args.source, "source")?,
        point(&args.mic, "mic")?,
    );
    spec.max_order = args.max_order;
    spec.length = args.length;
    let rir = simulate_rir(&spec)?;
    let (early, late) = split_rir(&rir);
    println!("direct delay   {} samples", rir.direct_delay);
    println!("split point    {} samples", rir.split_point);
    println!(
        "energy         early {:.6e}, late {:.6e}",
        early.energy(),
        late.energy()
    );
    println!("Sabine T60     {:.3} s", spec.sabine_t60());
    match schroeder_t60(&rir.taps, spec.fs) {
        Some(t) => println!("Schroeder T60  {t:.3} s"),
        None => println!("Schroeder T60  n/a (decay shorter than 25 dB)"),
    }
    if let Some(out) = args.out {
        let peak = rir.taps.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = if peak > 0.0 { 0.9 / peak } else { 1.0 };
        let scaled: Vec<f64> = rir.taps.iter().map(|v| v * scale).collect();
        write_wav(&out, &scaled, SAMPLE_RATE)?;
        println!("wrote {} (scaled by {scale:.6e})", out.display());
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut cfg = args.engine.load()?;
    if let Some(m) = &args.mode {
        cfg.mode = parse_mode(m)?;
    }
    let deepest = args.stages.iter().copied().max().unwrap_or(0);
    if deepest > 0 {
        cfg.depth = deepest;
    }
    let manifest = Manifest::read(&args.manifest)?;
    let engine = if deepest > 0 {
        cfg.build_engine()?
    } else {
        Default::default()
    };
    let enhancer = ChainEnhancer {
        engine: &engine,
        mode: cfg.mode,
    };
    let report = evaluate_manifest(&manifest, &enhancer, &args.stages)?;
    let table = report.to_table();
    print!("{table}");
    if let Some(prefix) = args.out {
        let txt = prefix.with_extension("txt");
        let csv = prefix.with_extension("csv");
        std::fs::write(&txt, &table).with_context(|| format!("writing {}", txt.display()))?;
        std::fs::write(&csv, report.to_csv())
            .with_context(|| format!("writing {}", csv.display()))?;
    }
    Ok(())
}

fn stage_specs(stage: &str, scale: Scale) -> Result<(Vec<(String, Vec<usize>)>, u64)> {
    if stage == "spp" {
        let c = SppNetConfig::default();
        return Ok((c.tensor_specs(), c.fingerprint()));
    }
    let kind = StageKind::parse(stage).ok_or_else(|| ConfigError::Value {
        key: "stage".into(),
        message: format!("{stage:?} is not dn, dr, sr or spp"),
    })?;
    let c = ModelConfig::new(kind, scale);
    Ok((c.tensor_specs(), c.fingerprint()))
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let bundle = load_bundle(&args.weights)?;
    println!(
        "{}: format v{}, fingerprint {:016x}, {} tensors, {} parameters",
        args.weights.display(),
        bundle.version,
        bundle.fingerprint,
        bundle.len(),
        bundle.param_count()
    );
    for (name, t) in bundle.iter() {
        let (mut lo, mut hi, mut sum) = (f32::INFINITY, f32::NEG_INFINITY, 0.0f64);
        for &v in &t.data {
            lo = lo.min(v);
            hi = hi.max(v);
            sum += v as f64;
        }
        let mean = if t.data.is_empty() {
            0.0
        } else {
            sum / t.data.len() as f64
        };
        println!(
            "  {name:<28} {:<18} min {lo:>9.4} max {hi:>9.4} mean {mean:>9.4}",
            format!("{:?}", t.shape)
        );
    }
    let scale = parse_scale(&args.scale)?;
    let candidates: Vec<String> = match &args.stage {
        Some(s) => vec![s.clone()],
        None => ["dn", "dr", "sr", "spp"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    };
    if args.stage.is_none() {
        for s in &candidates {
            for sc in [Scale::Default, Scale::Toy] {
                let (_, fp) = stage_specs(s, sc)?;
                if fp == bundle.fingerprint && (s != "spp" || sc == Scale::Default) {
                    println!("fingerprint matches {} {}", sc.name(), s);
                }
            }
        }
        return Ok(());
    }
    let (specs, fp) = stage_specs(&candidates[0], scale)?;
    let report = bundle.validate_specs(&specs, fp);
    if report.is_ok() {
        println!("matches the {} {} config", scale.name(), candidates[0]);
        Ok(())
    } else {
        println!(
            "does not match the {} {} config:\n{report:#}",
            scale.name(),
            candidates[0]
        );
        bail!(ConfigError::Value {
            key: "weights".into(),
            message: format!(
                "{} does not fit the {} config",
                args.weights.display(),
                candidates[0]
            ),
        })
    }
}

fn cmd_init(args: InitArgs) -> Result<()> {
    let scale = parse_scale(&args.scale)?;
    let mut bundle = if args.stage == "spp" {
        SppNetConfig::default().random_bundle(args.seed)
    } else {
        stage_specs(&args.stage, scale)?;
        let kind = StageKind::parse(&args.stage).expect("checked above");
        ModelConfig::new(kind, scale).random_bundle(args.seed)
    };
    for prefix in &args.zero {
        bundle.zero_prefix(prefix);
    }
    save_bundle(&args.out, &bundle)?;
    println!(
        "wrote {} ({} parameters)",
        args.out.display(),
        bundle.param_count()
    );
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<io::Error>().is_some() {
            return EXIT_IO;
        }
        if let Some(e) = cause.downcast_ref::<AudioError>() {
            return match e {
                AudioError::Io { .. } => EXIT_IO,
                AudioError::Format { .. } => EXIT_FORMAT,
            };
        }
        if let Some(e) = cause.downcast_ref::<ConfigError>() {
            return match e {
                ConfigError::Io { .. } => EXIT_IO,
                ConfigError::Weights { .. } => EXIT_FORMAT,
                _ => EXIT_CONFIG,
            };
        }
        if cause.downcast_ref::<WeightsError>().is_some()
            || cause.downcast_ref::<DspError>().is_some()
        {
            return EXIT_FORMAT;
        }
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            return match e {
                PipelineError::UnsupportedSampleRate(_) | PipelineError::Dsp(_) => EXIT_FORMAT,
                _ => EXIT_CONFIG,
            };
        }
        if let Some(e) = cause.downcast_ref::<RoomError>() {
            return match e {
                RoomError::Io { .. } => EXIT_IO,
                RoomError::Audio(AudioError::Io { .. }) => EXIT_IO,
                RoomError::Audio(_) | RoomError::SampleRate { .. } | RoomError::Manifest { .. } => {
                    EXIT_FORMAT
                }
                _ => EXIT_CONFIG,
            };
        }
    }
    1
}

/// The error chain joined by ": ", skipping causes whose text the previous
/// message already carries.
fn render_error(err: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if prev.contains(msg.trim_end()) {
            continue;
        }
        if !out.is_empty() {
            out += ": ";
        }
        out += msg.trim_end();
        prev = msg;
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Enhance(a) => cmd_enhance(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Rir(a) => cmd_rir(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::InitWeights(a) => cmd_init(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render_error(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
