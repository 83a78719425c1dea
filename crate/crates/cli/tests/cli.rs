use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use sdd_core::audio::{read_wav, write_wav};
use tempfile::TempDir;

fn sdd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = sdd(args);
    assert!(
        out.status.success(),
        "sdd {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    sdd(args).status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Cheap deterministic noise in [-1, 1).
fn hash_noise(n: usize, seed: u64) -> Vec<f64> {
    let mut x = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    (0..n)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect()
}

fn voiced(n: usize, f0: f64) -> Vec<f64> {
    (0..n)
        .map(|t| {
            let tt = t as f64 / 16_000.0;
            let env = (2.0 * PI * 2.5 * tt).sin().max(0.0);
            env * (1..5)
                .map(|h| 0.2 * (2.0 * PI * f0 * h as f64 * tt).sin() / h as f64)
                .sum::<f64>()
        })
        .collect()
}

struct Toy {
    dir: TempDir,
}

impl Toy {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let toy = Toy { dir };
        for (stage, seed) in [("dn", "1"), ("dr", "2"), ("sr", "3")] {
            ok(&[
                "init-weights",
                "--stage",
                stage,
                "--scale",
                "toy",
                "--seed",
                seed,
                "-o",
                s(&toy.path(&format!("{stage}.sddw"))),
            ]);
        }
        toy
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn engine_args(&self, sr: &str) -> Vec<String> {
        let mut v: Vec<String> = ["--scale", "toy", "--weights-dn"]
            .iter()
            .map(|x| x.to_string())
            .collect();
        v.push(self.path("dn.sddw").display().to_string());
        v.push("--weights-dr".into());
        v.push(self.path("dr.sddw").display().to_string());
        v.push("--weights-sr".into());
        v.push(self.path(sr).display().to_string());
        v
    }

    fn enhance(&self, input: &Path, output: &Path, extra: &[&str], sr: &str) {
        let mut args: Vec<String> = vec!["enhance".into()];
        args.extend(self.engine_args(sr));
        args.extend(
            ["-i", s(input), "-o", s(output)]
                .iter()
                .map(|x| x.to_string()),
        );
        args.extend(extra.iter().map(|x| x.to_string()));
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    }
}

fn noisy_input(path: &Path, seconds: f64) -> Vec<f64> {
    let n = (seconds * 16_000.0) as usize;
    let x: Vec<f64> = voiced(n, 140.0)
        .iter()
        .zip(hash_noise(n, 5))
        .map(|(v, e)| v + 0.05 * e)
        .collect();
    write_wav(path, &x, 16_000).unwrap();
    read_wav(path).unwrap().0
}

#[test]
fn enhance_preserves_length_and_rate() {
    let toy = Toy::new();
    let input = toy.path("in.wav");
    let x = noisy_input(&input, 1.0);
    for (mode, stages) in [
        ("offline", "4"),
        ("streaming", "2"),
        ("streaming-offline-stats", "1"),
    ] {
        let out = toy.path(&format!("out-{mode}.wav"));
        toy.enhance(
            &input,
            &out,
            &["--mode", mode, "--stages", stages],
            "sr.sddw",
        );
        let (y, rate) = read_wav(&out).unwrap();
        assert_eq!(rate, 16_000);
        assert_eq!(y.len(), x.len());
        assert!(y.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn zeroed_sr_output_layers_reproduce_stage_two() {
    let toy = Toy::new();
    ok(&[
        "init-weights",
        "--stage",
        "sr",
        "--scale",
        "toy",
        "--seed",
        "9",
        "--zero",
        "dec0.4.",
        "--zero",
        "dec1.4.",
        "-o",
        s(&toy.path("sr0.sddw")),
    ]);
    let input = toy.path("in.wav");
    noisy_input(&input, 1.0);
    let two = toy.path("two.wav");
    let three = toy.path("three.wav");
    toy.enhance(&input, &two, &["--stages", "2"], "sr0.sddw");
    toy.enhance(&input, &three, &["--stages", "3"], "sr0.sddw");
    assert_eq!(fs::read(&two).unwrap(), fs::read(&three).unwrap());
    let three_random = toy.path("three-random.wav");
    toy.enhance(&input, &three_random, &["--stages", "3"], "sr.sddw");
    assert_ne!(fs::read(&two).unwrap(), fs::read(&three_random).unwrap());
}

#[test]
fn raw_stream_matches_streaming_file_mode() {
    let toy = Toy::new();
    let input = toy.path("in.wav");
    // Not a whole number of hops.
    let x = noisy_input(&input, 0.77);
    let file_out = toy.path("out.wav");
    toy.enhance(
        &input,
        &file_out,
        &["--mode", "streaming", "--stages", "4"],
        "sr.sddw",
    );
    let (y, _) = read_wav(&file_out).unwrap();

    let raw: Vec<u8> = x
        .iter()
        .flat_map(|v| ((v * 32768.0).round() as i16).to_le_bytes())
        .collect();
    let mut args: Vec<String> = vec![
        "enhance".into(),
        "--stream".into(),
        "--mode".into(),
        "streaming".into(),
        "--stages".into(),
        "4".into(),
    ];
    args.extend(toy.engine_args("sr.sddw"));
    let mut child = Command::new(env!("CARGO_BIN_EXE_sdd"))
        .args(&args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(&raw).unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let streamed: Vec<i16> = out
        .stdout
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    let filed: Vec<i16> = y.iter().map(|v| (v * 32768.0).round() as i16).collect();
    assert_eq!(streamed.len(), x.len());
    assert_eq!(streamed, filed);
}

#[test]
fn exit_codes_follow_error_kind() {
    let toy = Toy::new();
    let input = toy.path("in.wav");
    noisy_input(&input, 0.5);
    let dn = toy.path("dn.sddw");
    let out = toy.path("o.wav");
    let missing = toy.path("missing.wav");
    let garbage = toy.path("garbage.wav");
    fs::write(&garbage, b"not audio at all").unwrap();

    let base = [
        "enhance",
        "--scale",
        "toy",
        "--weights-dn",
        s(&dn),
        "--stages",
        "1",
        "-o",
        s(&out),
        "-i",
    ];
    let with = |i: &Path| {
        let mut v = base.to_vec();
        v.push(s(i));
        code(&v)
    };
    assert_eq!(with(&missing), 3);
    assert_eq!(with(&garbage), 4);
    assert_eq!(
        code(&[
            "enhance",
            "--scale",
            "toy",
            "--weights-dn",
            s(&dn),
            "--stages",
            "2",
            "-i",
            s(&input),
            "-o",
            s(&out)
        ]),
        5
    );
    assert_eq!(
        code(&[
            "enhance",
            "--weights-dn",
            s(&dn),
            "--stages",
            "1",
            "-i",
            s(&input),
            "-o",
            s(&out)
        ]),
        5
    );
    assert_eq!(
        code(&[
            "enhance",
            "--set",
            "pp.gain_floor=oops",
            "-i",
            s(&input),
            "-o",
            s(&out)
        ]),
        5
    );
    assert_eq!(code(&["inspect", s(&garbage)]), 4);
    assert_eq!(
        code(&["inspect", s(&dn), "--stage", "sr", "--scale", "toy"]),
        5
    );
    assert_eq!(code(&["enhance", "--bogus"]), 2);
}

#[test]
fn inspect_recognises_fingerprints() {
    let toy = Toy::new();
    let out = ok(&["inspect", s(&toy.path("dr.sddw"))]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("fingerprint matches toy dr"), "{text}");
    assert!(text.contains("enc0.conv.weight"));
    ok(&[
        "inspect",
        s(&toy.path("dr.sddw")),
        "--stage",
        "dr",
        "--scale",
        "toy",
    ]);
}

#[test]
fn bench_reports_thirty_ms_delay() {
    let out = ok(&["bench", "--scale", "toy", "--frames", "10"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("algorithmic delay  30.0 ms"), "{text}");
    assert!(text.contains("over 10 frames"));
}

#[test]
fn rir_reports_direct_delay() {
    let dir = TempDir::new().unwrap();
    let wav = dir.path().join("rir.wav");
    let out = ok(&[
        "rir",
        "--dims",
        "5,4,3",
        "--source",
        "1,2,1.5",
        "--mic",
        "4.43,2,1.5",
        "--reflection",
        "0",
        "--out",
        s(&wav),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("direct delay   160 samples"));
    let (taps, _) = read_wav(&wav).unwrap();
    let nonzero: Vec<usize> = (0..taps.len()).filter(|&i| taps[i] != 0.0).collect();
    assert_eq!(nonzero, vec![160]);
    assert_eq!(
        code(&["rir", "--dims", "5,4", "--source", "1,2,1.5", "--mic", "4,2,1.5", "--t60", "0.3"]),
        5
    );
}

fn sources(root: &Path) -> (PathBuf, PathBuf) {
    let clean = root.join("clean");
    let noise = root.join("noise");
    fs::create_dir_all(&clean).unwrap();
    fs::create_dir_all(&noise).unwrap();
    for (i, f0) in [110.0, 150.0, 210.0].iter().enumerate() {
        write_wav(
            &clean.join(format!("c{i}.wav")),
            &voiced(40_000, *f0),
            16_000,
        )
        .unwrap();
    }
    for i in 0..2 {
        let n: Vec<f64> = hash_noise(48_000, 40 + i).iter().map(|v| 0.3 * v).collect();
        write_wav(&noise.join(format!("n{i}.wav")), &n, 16_000).unwrap();
    }
    (clean, noise)
}

#[test]
fn synth_is_deterministic_and_eval_scores_it() {
    let root = TempDir::new().unwrap();
    let (clean, noise) = sources(root.path());
    let run = |out: &Path, seed: &str| {
        ok(&[
            "synth",
            "--clean",
            s(&clean),
            "--noise",
            s(&noise),
            "--out",
            s(out),
            "--count",
            "4",
            "--rir-pool",
            "2",
            "--seed",
            seed,
            "--t60-max",
            "0.4",
        ]);
        fs::read(out.join("manifest.jsonl")).unwrap()
    };
    let a = run(&root.path().join("a"), "7");
    let b = run(&root.path().join("b"), "7");
    let c = run(&root.path().join("c"), "8");
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.iter().filter(|&&ch| ch == b'\n').count(), 4);
    assert_eq!(
        fs::read(root.path().join("a/noisy/000003.wav")).unwrap(),
        fs::read(root.path().join("b/noisy/000003.wav")).unwrap()
    );

    let toy = Toy::new();
    let prefix = root.path().join("report");
    let mut args: Vec<String> = [
        "eval",
        "--manifest",
        s(&root.path().join("a/manifest.jsonl")),
        "--stages",
        "0,1,2",
        "--out",
        s(&prefix),
    ]
    .iter()
    .map(|x| x.to_string())
    .collect();
    args.extend(toy.engine_args("sr.sddw"));
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let csv = fs::read_to_string(prefix.with_extension("csv")).unwrap();
    assert!(
        csv.starts_with("depth,bucket,count,estoi,si_snr,seg_snr\n"),
        "{csv}"
    );
    assert!(csv.lines().any(|l| l.starts_with("0,avg,4,")), "{csv}");
    assert!(csv.lines().any(|l| l.starts_with("2,avg,4,")), "{csv}");
    assert!(prefix.with_extension("txt").exists());
}

#[test]
fn synth_rejects_empty_source_directories() {
    let root = TempDir::new().unwrap();
    let empty = root.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let (clean, _) = sources(root.path());
    let out = root.path().join("out");
    assert_eq!(
        code(&[
            "synth",
            "--clean",
            s(&clean),
            "--noise",
            s(&empty),
            "--out",
            s(&out),
            "--count",
            "2"
        ]),
        5
    );
    assert_eq!(
        code(&[
            "synth",
            "--clean",
            s(&root.path().join("nope")),
            "--noise",
            s(&empty),
            "--out",
            s(&out)
        ]),
        3
    );
}
