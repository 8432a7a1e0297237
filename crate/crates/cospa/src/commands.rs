//! The five pipeline commands. Each takes a fully resolved [`RunConfig`],
//! writes its outputs plus a config snapshot and returns what it produced.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cospa_core::beamforming::{dnn_mvdr_filter, make_target, ogmvdr_filter, omvdr_filter};
use cospa_core::cospa::{single_channel_filter, CospaStream, FilteredComponents, TrainConfig, Trainer};
use cospa_core::ctensor::ParamStore;
use cospa_core::eval::{angle_grid, beampattern, delta_sinr, score_filter, sdr, Beampattern, MetricsReport};
use cospa_core::filter::{analyze_channels, Spectrogram};
use cospa_core::scene::{sample_scene, RenderedScene, SceneSpec};
use cospa_core::stft::{Stft, StreamingAnalyzer, StreamingSynthesizer};
use cospa_core::C64;
use log::{info, warn};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, METHODS};
use crate::manifest::{read_manifest, render, write_manifest};
use crate::model::{ModelKind, Network};
use crate::wav::{read_wav, write_wav};
use crate::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.jsonl";
pub const LOSS_LOG_NAME: &str = "loss.csv";
pub const SUMMARY_NAME: &str = "summary.csv";

/// Seed of scene `index` in a corpus drawn with the global `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

pub fn checkpoint_name(kind: ModelKind) -> String {
    format!("{}.ckpt", kind.name())
}

fn required<'a, T>(v: &'a Option<T>, what: &'static str) -> Result<&'a T> {
    v.as_ref().ok_or(Error::Missing(what))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Samples `count` scenes, renders them and writes `manifest.jsonl`, one
/// mixture WAV per scene and (optionally) the isolated components and the
/// training target.
pub fn simulate(cfg: &RunConfig) -> Result<Vec<SceneSpec>> {
    let out = required(&cfg.paths.out, "paths.out (--out)")?;
    create_dir(out)?;
    let ranges = cfg.simulate.ranges()?;
    let specs = (0..cfg.simulate.count)
        .map(|i| sample_scene(scene_seed(cfg.seed, i), &ranges))
        .collect::<cospa_core::Result<Vec<_>>>()?;
    let stft = Stft::new(cospa_core::stft::FrameSpec::default())?;
    for spec in &specs {
        let scene = render(spec)?;
        let fs = spec.sample_rate;
        write_wav(&out.join(format!("{}.wav", spec.id)), &scene.mixture, fs)?;
        if cfg.simulate.write_components {
            for (suffix, sig) in [("speech", &scene.speech), ("noise", &scene.noise), ("music", &scene.music), ("sensor", &scene.sensor)] {
                write_wav(&out.join(format!("{}.{suffix}.wav", spec.id)), sig, fs)?;
            }
            let target = make_target(&stft, &scene)?;
            write_wav(&out.join(format!("{}.target.wav", spec.id)), &[target.signal], fs)?;
        }
        info!("rendered {} (rt60 {:.2} s, snr {:.1} dB, smr {:.1} dB)", spec.id, spec.room.rt60, spec.snr_db, spec.smr_db);
    }
    write_manifest(&out.join(MANIFEST_NAME), &specs)?;
    cfg.snapshot(out)?;
    Ok(specs)
}

fn load_scenes(cfg: &RunConfig) -> Result<Vec<RenderedScene>> {
    let path = required(&cfg.paths.scenes, "paths.scenes (--scenes)")?;
    read_manifest(path)?.iter().map(render).collect()
}

fn check_rate(net: &Network, scenes: &[RenderedScene]) -> Result<()> {
    let want = net.config().sample_rate;
    match scenes.iter().find(|s| s.spec.sample_rate != want) {
        Some(s) => Err(Error::Invalid(format!("scene {} is at {} Hz, model expects {want} Hz", s.spec.id, s.spec.sample_rate))),
        None => Ok(()),
    }
}

/// Trains (or resumes) a network on the manifest's scenes. The checkpoint
/// and `loss.csv` are rewritten after every epoch, so an interrupted run
/// can be resumed from its last completed epoch.
pub fn train(cfg: &RunConfig) -> Result<Checkpoint> {
    let out = required(&cfg.paths.out, "paths.out (--out)")?;
    create_dir(out)?;
    let (net, mut trainer, init_seed) = match &cfg.paths.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            let seed = ckpt.header.seed;
            let (net, trainer) = ckpt.into_trainer()?;
            info!("resuming {} from epoch {}", net.kind().name(), trainer.history.len());
            (net, trainer, seed)
        }
        None => {
            let (net, params) = Network::build(cfg.model.kind, cfg.model.preset.config(), cfg.seed)?;
            (net, Trainer::new(params, cfg.train.learning_rate), cfg.seed)
        }
    };
    let scenes = load_scenes(cfg)?;
    check_rate(&net, &scenes)?;
    let stft = Stft::new(net.config().frame_spec()?)?;
    let examples = scenes.iter().map(|s| net.example(&stft, s)).collect::<Result<Vec<_>>>()?;
    drop(scenes);
    let tc = TrainConfig {
        epochs: cfg.train.epochs,
        learning_rate: trainer.adam.learning_rate,
        seed: init_seed,
        clip_norm: cfg.train.clip_norm,
        stop_below: cfg.train.stop_below,
    };
    let ckpt_path = out.join(checkpoint_name(net.kind()));
    let save = |trainer: &Trainer| -> Result<Checkpoint> {
        let ckpt = Checkpoint::from_trainer(net.kind(), net.config(), init_seed, trainer);
        ckpt.save(&ckpt_path)?;
        let mut log = String::from("epoch,loss_db\n");
        for (i, l) in trainer.history.iter().enumerate() {
            writeln!(log, "{},{l}", i + 1).expect("string write");
        }
        write_text(&out.join(LOSS_LOG_NAME), &log)?;
        Ok(ckpt)
    };
    cfg.snapshot(out)?;
    let mut ckpt = save(&trainer)?;
    for _ in 0..tc.epochs {
        let loss = trainer.epoch(&net, &examples, &tc)?;
        info!("epoch {} loss {loss:.3} dB", trainer.history.len());
        ckpt = save(&trainer)?;
        if tc.stop_below.is_some_and(|s| loss <= s) {
            info!("loss reached {:.3} dB, stopping", loss);
            break;
        }
    }
    Ok(ckpt)
}

fn load_cospa(path: &Path) -> Result<(cospa_core::cospa::Cospa, ParamStore)> {
    match Checkpoint::load(path)?.restore()? {
        (Network::Cospa(m), store) => Ok((m, store)),
        (other, _) => Err(Error::Checkpoint(format!("{} holds a {} model, expected cospa", path.display(), other.kind().name()))),
    }
}

fn load_crunet(path: &Path) -> Result<(cospa_core::cospa::CrunetModel, ParamStore)> {
    match Checkpoint::load(path)?.restore()? {
        (Network::Crunet(m), store) => Ok((m, store)),
        (other, _) => Err(Error::Checkpoint(format!("{} holds a {} model, expected crunet", path.display(), other.kind().name()))),
    }
}

/// Frame-by-frame enhancement of a multichannel signal. The output has the
/// input's length and lags it by one frame (`L` samples); the first `L`
/// samples are zero.
pub fn enhance_signal(model: &cospa_core::cospa::Cospa, store: &ParamStore, input: &[Vec<f64>]) -> Result<Vec<f64>> {
    let m = model.config.channels;
    if input.len() != m {
        return Err(Error::ChannelMismatch { expected: m, found: input.len() });
    }
    let spec = model.config.frame_spec()?;
    let (hop, delay) = (spec.hop, spec.frame_len);
    let n = input[0].len();
    let mut analyzers = (0..m).map(|_| StreamingAnalyzer::new(spec.clone())).collect::<cospa_core::Result<Vec<_>>>()?;
    let mut synth = StreamingSynthesizer::new(spec.clone())?;
    let mut stream = CospaStream::new(model);
    let mut out = vec![0.0; n];
    // After frame τ the synthesizer finalizes batch samples starting at
    // τ·hop - (L - hop); shifted by the L-sample delay that is τ·hop + hop.
    let mut write_at = hop;
    let mut block = vec![0.0; hop];
    let mut start = 0;
    while write_at < n {
        let mut frame: Vec<Vec<C64>> = Vec::with_capacity(m);
        for (ch, an) in input.iter().zip(&mut analyzers) {
            for (i, b) in block.iter_mut().enumerate() {
                *b = ch.get(start + i).copied().unwrap_or(0.0);
            }
            frame.push(an.push(&block)?);
        }
        let (_, y) = stream.process(store, &frame)?;
        let samples = synth.push(&y)?;
        for (i, v) in samples.into_iter().enumerate() {
            let k = write_at + i;
            if k >= delay && k < n {
                out[k] = v;
            }
        }
        write_at += hop;
        start += hop;
    }
    Ok(out)
}

pub fn enhance(cfg: &RunConfig) -> Result<Vec<f64>> {
    let ckpt = required(&cfg.paths.checkpoint, "paths.checkpoint (--checkpoint)")?;
    let input = required(&cfg.paths.input, "paths.input (--input)")?;
    let output = required(&cfg.paths.output, "paths.output (--output)")?;
    let (model, store) = load_cospa(ckpt)?;
    let fs = model.config.sample_rate;
    let x = read_wav(input, fs)?;
    let y = enhance_signal(&model, &store, &x)?;
    let dir = parent_dir(output);
    create_dir(&dir)?;
    write_wav(output, &[y.clone()], fs)?;
    cfg.snapshot(&dir)?;
    Ok(y)
}

/// Per-method filters for one scene; `None` where a method cannot run.
struct Evaluators {
    cospa: Option<(cospa_core::cospa::Cospa, ParamStore)>,
    crunet: Option<(cospa_core::cospa::CrunetModel, ParamStore)>,
}

impl Evaluators {
    fn crunet_masks(&self, spectra: &[Spectrogram]) -> Result<Vec<Spectrogram>> {
        let (m, store) = self.crunet.as_ref().expect("checked by caller");
        spectra.iter().map(|s| Ok(m.infer_mask(store, s)?)).collect()
    }

    /// `(ΔSINR, SDR)` of `method` on `scene`.
    fn score(&self, method: &str, stft: &Stft, scene: &RenderedScene, mic: usize) -> Result<(f64, f64)> {
        let spectra = || analyze_channels(stft, &scene.mixture);
        let m = scene.n_mics();
        let filter = match method {
            "passthrough" => {
                // Scored on the raw signals: identity processing has exactly
                // zero gain, without STFT round-off.
                let raw = FilteredComponents {
                    speech: scene.speech[mic].clone(),
                    noise: scene.noise[mic].clone(),
                    music: scene.music[mic].clone(),
                    sensor: scene.sensor[mic].clone(),
                    mixture: scene.mixture[mic].clone(),
                };
                return Ok((delta_sinr(scene, &raw, mic), sdr(&scene.speech[mic], &raw.speech)?));
            }
            "omvdr" => omvdr_filter(stft, scene)?,
            "ogmvdr" => ogmvdr_filter(stft, scene)?,
            "cospa" => {
                let (model, store) = self.cospa.as_ref().expect("checked by caller");
                model.infer_masks(store, &spectra())?
            }
            "dnn-mvdr" => dnn_mvdr_filter(stft, scene, &self.crunet_masks(&spectra())?)?,
            "crunet" => {
                // Single-channel method: scored on every microphone, averaged.
                let masks = self.crunet_masks(&spectra())?;
                let (mut ds, mut sd) = (0.0, 0.0);
                for (ch, g) in masks.iter().enumerate() {
                    let (d, s) = score_filter(stft, scene, &single_channel_filter(g, m, ch), ch)?;
                    ds += d;
                    sd += s;
                }
                return Ok((ds / m as f64, sd / m as f64));
            }
            other => return Err(Error::Invalid(format!("unknown method {other:?}; known: {}", METHODS.join(", ")))),
        };
        Ok(score_filter(stft, scene, &filter, mic)?)
    }
}

/// Scores every configured method on every scene; writes
/// `<method>.jsonl` per method and `summary.csv` for the corpus.
pub fn evaluate(cfg: &RunConfig) -> Result<Vec<MetricsReport>> {
    let out = required(&cfg.paths.out, "paths.out (--out)")?;
    let scenes = load_scenes(cfg)?;
    let ev = Evaluators {
        cospa: cfg.paths.cospa.as_deref().map(load_cospa).transpose()?,
        crunet: cfg.paths.crunet.as_deref().map(load_crunet).transpose()?,
    };
    let mut methods = Vec::new();
    for method in &cfg.evaluate.methods {
        let needs = match method.as_str() {
            "cospa" => ev.cospa.is_none().then_some("cospa"),
            "crunet" | "dnn-mvdr" => ev.crunet.is_none().then_some("crunet"),
            m if METHODS.contains(&m) => None,
            other => return Err(Error::Invalid(format!("unknown method {other:?}; known: {}", METHODS.join(", ")))),
        };
        match needs {
            Some(ckpt) => warn!("skipping {method}: no {ckpt} checkpoint given (paths.{ckpt})"),
            None => methods.push(method.as_str()),
        }
    }
    let fs = scenes[0].spec.sample_rate;
    for model_rate in [ev.cospa.as_ref().map(|m| m.0.config.sample_rate), ev.crunet.as_ref().map(|m| m.0.config.sample_rate)].into_iter().flatten() {
        if model_rate != fs {
            return Err(Error::Invalid(format!("model expects {model_rate} Hz, scenes are {fs} Hz")));
        }
    }
    let stft = Stft::new(match &ev.cospa {
        Some((m, _)) => m.config.frame_spec()?,
        None => cospa_core::stft::FrameSpec::default(),
    })?;
    let mut reports: Vec<MetricsReport> = methods.iter().map(|m| MetricsReport::new(*m)).collect();
    for scene in &scenes {
        if cfg.evaluate.mic >= scene.n_mics() {
            return Err(Error::Invalid(format!("reference mic {} but scene {} has {} mics", cfg.evaluate.mic, scene.spec.id, scene.n_mics())));
        }
        for (method, report) in methods.iter().zip(&mut reports) {
            let (d, s) = ev.score(method, &stft, scene, cfg.evaluate.mic)?;
            info!("{} {method}: dSINR {d:.2} dB, SDR {s:.2} dB", scene.spec.id);
            report.push(scene.spec.id.clone(), d, s);
        }
    }
    create_dir(out)?;
    let mut summary = String::from("method,delta_sinr_db,sdr_db,delta_sinr_std,sdr_std,scenes\n");
    for r in &reports {
        let mut lines = String::new();
        for s in &r.scenes {
            lines.push_str(&serde_json::to_string(s)?);
            lines.push('\n');
        }
        write_text(&out.join(format!("{}.jsonl", r.method)), &lines)?;
        let ((dm, ds), (sm, ss)) = (r.delta_sinr(), r.sdr());
        writeln!(summary, "{},{dm},{sm},{ds},{ss},{}", r.method, r.scenes.len()).expect("string write");
    }
    write_text(&out.join(SUMMARY_NAME), &summary)?;
    cfg.snapshot(out)?;
    Ok(reports)
}

/// Beampattern of a COSPA model's masks on one scene, written as a CSV
/// matrix (rows: 0°..175° in 5° steps, columns: frequency bins, values in
/// dB re the global maximum) after a `#` metadata line.
pub fn export_beampattern(cfg: &RunConfig) -> Result<Beampattern> {
    let ckpt = required(&cfg.paths.checkpoint, "paths.checkpoint (--checkpoint)")?;
    let output = required(&cfg.paths.output, "paths.output (--output)")?;
    let manifest = required(&cfg.paths.scenes, "paths.scenes (--scenes)")?;
    let specs = read_manifest(manifest)?;
    let spec = match &cfg.paths.scene {
        Some(id) => specs
            .iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| Error::Invalid(format!("scene {id} not in {}", manifest.display())))?,
        None => &specs[0],
    };
    let (model, store) = load_cospa(ckpt)?;
    let scene = render(spec)?;
    let fspec = model.config.frame_spec()?;
    let stft = Stft::new(fspec.clone())?;
    let masks = model.infer_masks(&store, &analyze_channels(&stft, &scene.mixture))?;
    let bp = beampattern(&masks, &spec.array, &fspec, spec.room.speed_of_sound, &angle_grid())?;
    let mut text = format!(
        "# scene={} speech_doa_deg={:.3} noise_doa_deg={:.3} music_doa_deg={:.3} angles_deg=0:5:175 bins={} bin_hz={}\n",
        spec.id,
        spec.speech_doa(),
        spec.noise_doa(),
        spec.music_doa(),
        fspec.bins(),
        fspec.bin_freq(1)
    );
    for row in &bp.power_db {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    let dir = parent_dir(output);
    create_dir(&dir)?;
    write_text(output, &text)?;
    cfg.snapshot(&dir)?;
    Ok(bp)
}
