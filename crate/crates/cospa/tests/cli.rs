use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use cospa::checkpoint::Checkpoint;
use cospa::commands::{enhance_signal, scene_seed};
use cospa::manifest::read_manifest;
use cospa::model::{ModelKind, Network, Preset};
use cospa::wav::{read_wav, write_wav};
use sha2::{Digest, Sha256};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cospa"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn cospa");
    assert!(
        out.status.success(),
        "cospa {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn fails(args: &[&str]) -> String {
    let out = bin().args(args).output().expect("spawn cospa");
    assert!(!out.status.success(), "cospa {args:?} should fail");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn digest(p: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(p).unwrap()).to_vec()
}

/// Two short scenes and a COSPA model trained on them for a few epochs,
/// shared by the tests below.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    scenes: PathBuf,
    model: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        run(&["simulate", "--out", s(&data), "--count", "2", "--duration", "0.5", "--seed", "3"]);
        let scenes = data.join("manifest.jsonl");
        let train = root.join("train");
        run(&["train", "--scenes", s(&scenes), "--out", s(&train), "--epochs", "3", "--seed", "1"]);
        Fixture {
            model: train.join("cospa.ckpt"),
            _dir: dir,
            root,
            scenes,
        }
    })
}

#[test]
fn simulate_is_deterministic_and_respects_ranges() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        run(&["simulate", "--out", s(d), "--count", "3", "--duration", "0.25", "--seed", "7", "--rt60", "0.4:0.5"]);
    }
    let specs = read_manifest(&a.join("manifest.jsonl")).unwrap();
    assert_eq!(specs.len(), 3);
    for (i, spec) in specs.iter().enumerate() {
        assert_eq!(spec.seed, scene_seed(7, i));
        assert!((0.4..=0.5).contains(&spec.room.rt60));
        for suffix in ["", ".speech", ".noise", ".music", ".sensor", ".target"] {
            let name = format!("{}{suffix}.wav", spec.id);
            assert_eq!(digest(&a.join(&name)), digest(&b.join(&name)), "{name}");
        }
    }
    assert_eq!(digest(&a.join("manifest.jsonl")), digest(&b.join("manifest.jsonl")));
    let snap = std::fs::read_to_string(a.join("resolved_config.toml")).unwrap();
    assert!(snap.contains("seed = 7") && snap.contains("0.4"));
}

#[test]
fn seven_second_scenes_have_112000_samples() {
    let dir = tempfile::tempdir().unwrap();
    run(&["simulate", "--out", s(dir.path()), "--count", "1", "--duration", "7", "--mixtures-only"]);
    let spec = &read_manifest(&dir.path().join("manifest.jsonl")).unwrap()[0];
    let r = hound::WavReader::open(dir.path().join(format!("{}.wav", spec.id))).unwrap();
    assert_eq!(r.spec().sample_rate, 16_000);
    assert_eq!(r.spec().channels, 5);
    assert_eq!(r.spec().sample_format, hound::SampleFormat::Float);
    assert_eq!(r.duration(), 112_000);
    assert!(!dir.path().join(format!("{}.speech.wav", spec.id)).exists());
}

#[test]
fn snapshot_replays_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    run(&["simulate", "--out", s(&a), "--count", "1", "--duration", "0.25", "--seed", "11", "--snr=-3:-1"]);
    let mut snap = std::fs::read_to_string(a.join("resolved_config.toml")).unwrap();
    let b = dir.path().join("b");
    snap = snap.replace(s(&a), s(&b));
    let cfg = dir.path().join("replay.toml");
    std::fs::write(&cfg, snap).unwrap();
    run(&["simulate", "--config", s(&cfg)]);
    let spec = &read_manifest(&a.join("manifest.jsonl")).unwrap()[0];
    assert!((-3.0..=-1.0).contains(&spec.snr_db));
    let name = format!("{}.wav", spec.id);
    assert_eq!(digest(&a.join(&name)), digest(&b.join(&name)));
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let f = fixture();
    let out = f.root.join("init");
    run(&["train", "--scenes", s(&f.scenes), "--out", s(&out), "--epochs", "0", "--seed", "5", "--model", "crunet"]);
    let ckpt = Checkpoint::load(&out.join("crunet.ckpt")).unwrap();
    assert!(ckpt.header.history.is_empty());
    let (_, init) = Network::build(ModelKind::Crunet, Preset::Desk.config(), 5).unwrap();
    assert_eq!(ckpt.params.fingerprint(), init.fingerprint());
    assert_eq!(std::fs::read_to_string(out.join("loss.csv")).unwrap().trim(), "epoch,loss_db");
}

#[test]
fn training_is_deterministic_and_resume_is_seamless() {
    let f = fixture();
    let full = f.root.join("full");
    let again = f.root.join("again");
    for d in [&full, &again] {
        run(&["train", "--scenes", s(&f.scenes), "--out", s(d), "--epochs", "4", "--seed", "2", "--lr", "1e-5"]);
    }
    assert_eq!(digest(&full.join("cospa.ckpt")), digest(&again.join("cospa.ckpt")));

    let half = f.root.join("half");
    run(&["train", "--scenes", s(&f.scenes), "--out", s(&half), "--epochs", "2", "--seed", "2", "--lr", "1e-5"]);
    let resumed = f.root.join("resumed");
    let saved = half.join("cospa.ckpt");
    run(&["train", "--scenes", s(&f.scenes), "--out", s(&resumed), "--epochs", "2", "--resume", s(&saved)]);
    let a = Checkpoint::load(&full.join("cospa.ckpt")).unwrap();
    let b = Checkpoint::load(&resumed.join("cospa.ckpt")).unwrap();
    assert_eq!(b.header.history.len(), 4);
    assert_eq!(a.header.history, b.header.history);
    assert_eq!(a.params.fingerprint(), b.params.fingerprint());
    let h = &b.header.history;
    assert!((h[2] - h[1]).abs() < 0.5, "resumed epoch jumped: {h:?}");
    let log = std::fs::read_to_string(resumed.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);
}

#[test]
fn enhance_streams_causally() {
    let f = fixture();
    let (model, store) = match Checkpoint::load(&f.model).unwrap().restore().unwrap() {
        (Network::Cospa(m), s) => (m, s),
        _ => panic!("expected a cospa checkpoint"),
    };
    let spec = &read_manifest(&f.scenes).unwrap()[0];
    let input = f.scenes.parent().unwrap().join(format!("{}.wav", spec.id));
    let out = f.root.join("enh.wav");
    run(&["enhance", "--checkpoint", s(&f.model), "--input", s(&input), "--output", s(&out)]);
    let x = read_wav(&input, 16_000).unwrap();
    let y = read_wav(&out, 16_000).unwrap();
    assert_eq!(y.len(), 1);
    assert_eq!(y[0].len(), x[0].len());
    assert!(y[0][..1024].iter().all(|v| *v == 0.0));
    assert!(y[0][1024..].iter().any(|v| *v != 0.0));

    // Bitwise prefix property, on odd lengths too.
    let full = enhance_signal(&model, &store, &x).unwrap();
    for cut in [x[0].len() / 2, 3001] {
        let head: Vec<Vec<f64>> = x.iter().map(|c| c[..cut].to_vec()).collect();
        let part = enhance_signal(&model, &store, &head).unwrap();
        assert_eq!(part[..], full[..cut]);
    }
    let head: Vec<Vec<f64>> = x.iter().map(|c| c[..c.len() / 2].to_vec()).collect();
    let half_in = f.root.join("half_in.wav");
    let half_out = f.root.join("half_out.wav");
    write_wav(&half_in, &head, 16_000).unwrap();
    run(&["enhance", "--checkpoint", s(&f.model), "--input", s(&half_in), "--output", s(&half_out)]);
    let yh = read_wav(&half_out, 16_000).unwrap();
    assert_eq!(yh[0][..], y[0][..yh[0].len()]);

    let silent = f.root.join("silent.wav");
    write_wav(&silent, &vec![vec![0.0; 5000]; 5], 16_000).unwrap();
    let so = f.root.join("silent_out.wav");
    run(&["enhance", "--checkpoint", s(&f.model), "--input", s(&silent), "--output", s(&so)]);
    let z = read_wav(&so, 16_000).unwrap();
    assert_eq!(z[0].len(), 5000);
    assert!(z[0].iter().all(|v| *v == 0.0));
}

#[test]
fn enhance_rejects_bad_inputs() {
    let f = fixture();
    let narrow = f.root.join("narrow.wav");
    write_wav(&narrow, &vec![vec![0.1; 800]; 3], 16_000).unwrap();
    let err = fails(&["enhance", "--checkpoint", s(&f.model), "--input", s(&narrow), "--output", s(&f.root.join("x.wav"))]);
    assert!(err.contains("3 channels") && err.contains("M = 5"), "{err}");
    let slow = f.root.join("slow.wav");
    write_wav(&slow, &vec![vec![0.1; 800]; 5], 8_000).unwrap();
    let err = fails(&["enhance", "--checkpoint", s(&f.model), "--input", s(&slow), "--output", s(&f.root.join("y.wav"))]);
    assert!(err.contains("8000 Hz") && err.contains("16000 Hz"), "{err}");
    let bogus = f.root.join("bogus.ckpt");
    std::fs::write(&bogus, b"COSPACKP not really").unwrap();
    let err = fails(&["enhance", "--checkpoint", s(&bogus), "--input", s(&slow), "--output", s(&f.root.join("z.wav"))]);
    assert!(err.contains("checkpoint"), "{err}");
}

#[test]
fn evaluate_reports_methods_and_skips_missing_models() {
    let f = fixture();
    let out = f.root.join("eval");
    let res = run(&[
        "evaluate",
        "--scenes",
        s(&f.scenes),
        "--out",
        s(&out),
        "--cospa",
        s(&f.model),
        "--methods",
        "passthrough,omvdr,cospa,crunet,dnn-mvdr",
    ]);
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("skipping crunet") && stderr.contains("skipping dnn-mvdr"), "{stderr}");
    let pass = std::fs::read_to_string(out.join("passthrough.jsonl")).unwrap();
    assert_eq!(pass.lines().count(), 2);
    for line in pass.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["delta_sinr_db"].as_f64().unwrap(), 0.0);
        assert_eq!(v["method"], "passthrough");
    }
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().collect();
    assert!(rows[0].starts_with("method,delta_sinr_db,sdr_db"));
    let methods: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["passthrough", "omvdr", "cospa"]);
    assert!(out.join("resolved_config.toml").exists());

    let err = fails(&["evaluate", "--scenes", s(&f.scenes), "--out", s(&out), "--methods", "gev"]);
    assert!(err.contains("unknown method"), "{err}");
    let err = fails(&["evaluate", "--scenes", s(&f.root.join("nope.jsonl")), "--out", s(&out)]);
    assert!(err.contains("nope.jsonl"), "{err}");
}

#[test]
fn beampattern_csv_has_the_fixed_grid() {
    let f = fixture();
    let out = f.root.join("bp").join("pattern.csv");
    let spec = read_manifest(&f.scenes).unwrap().remove(1);
    run(&["beampattern", "--checkpoint", s(&f.model), "--scenes", s(&f.scenes), "--scene", &spec.id, "--output", s(&out)]);
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    let meta = lines.next().unwrap();
    assert!(meta.starts_with('#'));
    let field = |key: &str| -> f64 {
        let kv = meta.split_whitespace().find(|t| t.starts_with(key)).unwrap();
        kv.split_once('=').unwrap().1.parse().unwrap()
    };
    assert!((field("speech_doa_deg=") - spec.speech_doa()).abs() < 1e-3);
    assert!((field("noise_doa_deg=") - spec.noise_doa()).abs() < 1e-3);
    assert!((field("music_doa_deg=") - spec.music_doa()).abs() < 1e-3);
    assert!(meta.contains(&format!("scene={}", spec.id)));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 36);
    assert!(rows.iter().all(|r| r.len() == 513));
    let max = rows.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    assert_eq!(max, 0.0);
}

#[test]
fn params_reports_real_degrees_of_freedom() {
    let f = fixture();
    let out = run(&["params", s(&f.model)]);
    let n: usize = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert_eq!(n, 396_676);
}

#[test]
fn missing_settings_are_reported() {
    let err = fails(&["train", "--epochs", "1"]);
    assert!(err.contains("paths.out") || err.contains("paths.scenes"), "{err}");
    let err = fails(&["simulate", "--rt60", "0.7:0.3", "--out", "x"]);
    assert!(err.contains("empty range"), "{err}");
}
