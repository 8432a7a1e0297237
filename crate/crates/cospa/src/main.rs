use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cospa::commands;
use cospa::config::RunConfig;
use cospa::model::{ModelKind, Preset};

/// Multichannel speech enhancement with a complex-valued spatial autoencoder.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed for scene sampling, initialization and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample and render scenes; write WAVs and a manifest.
    Simulate(SimulateArgs),
    /// Train a COSPA or CRUNet model on a manifest.
    Train(TrainArgs),
    /// Enhance a multichannel WAV frame by frame.
    Enhance(EnhanceArgs),
    /// Score all methods on a test manifest.
    Evaluate(EvaluateArgs),
    /// Export the beampattern of a model's masks on one scene.
    Beampattern(BeampatternArgs),
    /// Print the real parameter count of a checkpoint.
    Params {
        checkpoint: PathBuf,
    },
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    /// Scene length in seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Reverberation time range in seconds, `lo:hi`.
    #[arg(long, value_parser = parse_range)]
    rt60: Option<(f64, f64)>,
    #[arg(long, value_parser = parse_range, allow_hyphen_values = true)]
    snr: Option<(f64, f64)>,
    #[arg(long, value_parser = parse_range, allow_hyphen_values = true)]
    smr: Option<(f64, f64)>,
    /// Write only the mixtures (no component or target WAVs).
    #[arg(long)]
    mixtures_only: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scenes: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<ModelKind>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Stop once the epoch loss (dB) reaches this value.
    #[arg(long, allow_hyphen_values = true)]
    stop_below: Option<f64>,
    /// Continue from this checkpoint (weights, optimizer state, loss log).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EnhanceArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    scenes: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    cospa: Option<PathBuf>,
    #[arg(long)]
    crunet: Option<PathBuf>,
    /// Comma-separated subset of cospa,crunet,dnn-mvdr,omvdr,ogmvdr,passthrough.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Reference microphone (0-based).
    #[arg(long)]
    mic: Option<usize>,
}

#[derive(Args)]
struct BeampatternArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    scenes: Option<PathBuf>,
    /// Scene id; defaults to the first scene of the manifest.
    #[arg(long)]
    scene: Option<String>,
    #[arg(long)]
    output: Option<PathBuf>,
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(':').ok_or_else(|| format!("expected lo:hi, got {s:?}"))?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{lo:?}: {e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{hi:?}: {e}"))?;
    if lo > hi {
        return Err(format!("empty range {s}"));
    }
    Ok((lo, hi))
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, cli.seed);
    match cli.command {
        Command::Simulate(a) => {
            set_opt(&mut cfg.paths.out, a.out);
            set(&mut cfg.simulate.count, a.count);
            set(&mut cfg.simulate.duration, a.duration);
            set(&mut cfg.simulate.rt60, a.rt60);
            set(&mut cfg.simulate.snr_db, a.snr);
            set(&mut cfg.simulate.smr_db, a.smr);
            if a.mixtures_only {
                cfg.simulate.write_components = false;
            }
            let specs = commands::simulate(&cfg)?;
            println!("wrote {} scenes", specs.len());
        }
        Command::Train(a) => {
            set_opt(&mut cfg.paths.scenes, a.scenes);
            set_opt(&mut cfg.paths.out, a.out);
            set_opt(&mut cfg.paths.resume, a.resume);
            set(&mut cfg.model.kind, a.model);
            set(&mut cfg.model.preset, a.preset);
            set(&mut cfg.train.epochs, a.epochs);
            set(&mut cfg.train.learning_rate, a.lr);
            set_opt(&mut cfg.train.stop_below, a.stop_below);
            let ckpt = commands::train(&cfg)?;
            match ckpt.header.history.last() {
                Some(l) => println!("{} epochs, final loss {l:.3} dB", ckpt.header.history.len()),
                None => println!("initialized, no epochs run"),
            }
        }
        Command::Enhance(a) => {
            set_opt(&mut cfg.paths.checkpoint, a.checkpoint);
            set_opt(&mut cfg.paths.input, a.input);
            set_opt(&mut cfg.paths.output, a.output);
            commands::enhance(&cfg)?;
        }
        Command::Evaluate(a) => {
            set_opt(&mut cfg.paths.scenes, a.scenes);
            set_opt(&mut cfg.paths.out, a.out);
            set_opt(&mut cfg.paths.cospa, a.cospa);
            set_opt(&mut cfg.paths.crunet, a.crunet);
            set(&mut cfg.evaluate.methods, a.methods);
            set(&mut cfg.evaluate.mic, a.mic);
            for r in commands::evaluate(&cfg)? {
                let ((dm, ds), (sm, ss)) = (r.delta_sinr(), r.sdr());
                println!("{:<12} dSINR {dm:6.2} ± {ds:5.2} dB   SDR {sm:6.2} ± {ss:5.2} dB", r.method);
            }
        }
        Command::Beampattern(a) => {
            set_opt(&mut cfg.paths.checkpoint, a.checkpoint);
            set_opt(&mut cfg.paths.scenes, a.scenes);
            set_opt(&mut cfg.paths.scene, a.scene);
            set_opt(&mut cfg.paths.output, a.output);
            let bp = commands::export_beampattern(&cfg)?;
            println!("peak (0.5-4 kHz) at {} deg", bp.peak_angle(500.0, 4000.0)?);
        }
        Command::Params { checkpoint } => {
            let (_, store) = cospa::checkpoint::Checkpoint::load(&checkpoint)?.restore()?;
            println!("{}", cospa_core::eval::param_count(&store));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
