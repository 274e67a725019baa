//! `cmrl`: train, encode, decode and evaluate with the CMRL codec.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use cmrl_core::bitstream::{read_model, read_stream, write_model, write_stream};
use cmrl_core::codec::{decode_audio, encode_audio, snr_db, stream_rate};
use cmrl_core::config::{BitrateMode, TrainConfig};
use cmrl_core::framing::{read_wav, write_wav};
use cmrl_core::synth::corpus;
use cmrl_core::train::{prepare_corpus, train, EpochLog, Trainer};
use cmrl_core::CmrlError;

#[derive(Parser)]
#[command(
    name = "cmrl",
    version,
    about = "Cross-module residual learning speech codec"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a directory of 16 kHz mono WAV files.
    Train(TrainArgs),
    /// Encode a WAV file into a `.cmrl` stream.
    Encode(CodecArgs),
    /// Decode a `.cmrl` stream into a WAV file.
    Decode(CodecArgs),
    /// Compare a decoded WAV file with its reference.
    Eval(EvalArgs),
    /// Print the training configuration as TOML.
    Config(ModeArgs),
    /// Write a synthetic speech-like corpus.
    Synth(SynthArgs),
}

#[derive(Args, Clone)]
struct ModeArgs {
    /// Bitrate mode in kbps: 8.85, 15.85, 19.85 or 23.85.
    #[arg(long)]
    mode: Option<BitrateMode>,
    /// Code the LPC residual instead of raw PCM.
    #[arg(long)]
    lpc: bool,
    /// TOML training configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    mode: ModeArgs,
    /// Directory of training WAV files.
    #[arg(long)]
    corpus: PathBuf,
    /// Output model file.
    #[arg(long, short)]
    output: PathBuf,
    /// Per-epoch key=value log; defaults to `<output>.log`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Checkpoint written after every epoch; defaults to `<output>.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct CodecArgs {
    #[command(flatten)]
    mode: ModeArgs,
    #[arg(long, short)]
    model: PathBuf,
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    decoded: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 5.0)]
    seconds: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Process exit code for each error class.
fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<CmrlError>()) else {
        return if err.chain().any(|c| c.is::<std::io::Error>()) {
            4
        } else {
            1
        };
    };
    match e {
        CmrlError::Config(_) => 3,
        CmrlError::Io(_) => 4,
        CmrlError::BadMagic
        | CmrlError::VersionMismatch(_)
        | CmrlError::TruncatedStream(_)
        | CmrlError::ChecksumMismatch { .. }
        | CmrlError::Decode(_)
        | CmrlError::UnknownSymbol(_) => 5,
        CmrlError::ModelMismatch(_) => 6,
        CmrlError::SilentInput(_)
        | CmrlError::TooShort { .. }
        | CmrlError::LengthMismatch { .. }
        | CmrlError::UnsupportedFormat(_)
        | CmrlError::SampleRate(_)
        | CmrlError::NonFinite(_) => 7,
        CmrlError::Corpus(_) => 8,
        CmrlError::Divergence(_) | CmrlError::RateControl(_) => 9,
        CmrlError::NumericalFailure(_)
        | CmrlError::UnstableFilter
        | CmrlError::ShapeMismatch(_)
        | CmrlError::OddChannels { .. }
        | CmrlError::WindowState(_) => 10,
    }
}

fn load_config(args: &ModeArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_toml(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    if args.lpc {
        cfg.lpc = true;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading corpus directory {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    Ok(files)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.mode)?;
    if let Some(e) = args.epochs {
        cfg.epochs_per_module = e;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    let files = wav_files(&args.corpus)?;
    if files.is_empty() {
        return Err(CmrlError::Corpus(format!("no WAV files in {}", args.corpus.display())).into());
    }
    let audio = files
        .iter()
        .map(|f| read_wav(f).with_context(|| format!("reading {}", f.display())))
        .collect::<Result<Vec<_>>>()?;
    let corpus = prepare_corpus(&audio, cfg.lpc, cfg.validation_fraction, cfg.seed)?;
    println!(
        "files={} train_frames={} validation_frames={} scale={:.6e} mode={} lpc={}",
        files.len(),
        corpus.train_frames.len(),
        corpus.validation_frames.len(),
        corpus.scale,
        cfg.mode,
        cfg.lpc
    );
    let log_path = args.log.unwrap_or_else(|| suffixed(&args.output, "log"));
    let ckpt_path = args
        .checkpoint
        .unwrap_or_else(|| suffixed(&args.output, "ckpt"));
    let mut log =
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut hook = |l: &EpochLog, t: &Trainer| -> cmrl_core::Result<()> {
        let line = l.to_kv();
        println!("{line}");
        writeln!(log, "{line}")?;
        fs::write(&ckpt_path, write_model(&t.to_model(&corpus)?)?)?;
        Ok(())
    };
    let (model, trainer) = train(cfg, &corpus, &mut hook)?;
    fs::write(&args.output, write_model(&model)?)
        .with_context(|| format!("writing {}", args.output.display()))?;
    let p = model.param_count();
    println!(
        "status=ok model={} epochs={} steps={} weights={} parameters={}",
        args.output.display(),
        trainer.logs().len(),
        trainer.steps(),
        p.weights,
        p.total()
    );
    Ok(())
}

fn suffixed(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn load_model(path: &Path, flags: &ModeArgs) -> Result<cmrl_core::cascade::CmrlModel> {
    let bytes = fs::read(path).with_context(|| format!("reading model {}", path.display()))?;
    let model = read_model(&bytes).with_context(|| format!("parsing model {}", path.display()))?;
    if let Some(m) = flags.mode {
        if m != model.mode {
            return Err(CmrlError::ModelMismatch(format!(
                "--mode {m} but the model codes at {}",
                model.mode
            ))
            .into());
        }
    }
    Ok(model)
}

fn cmd_encode(args: CodecArgs) -> Result<()> {
    let model = load_model(&args.model, &args.mode)?;
    if args.mode.lpc != model.lpc {
        return Err(CmrlError::ModelMismatch(format!(
            "--lpc={} but the model has lpc={}",
            args.mode.lpc, model.lpc
        ))
        .into());
    }
    let audio =
        read_wav(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let stream = encode_audio(&model, &audio)?;
    let encoded = write_stream(&stream, &model.tables)?;
    let report = stream_rate(&model, &stream)?;
    if report.payload_bits != encoded.payload_bits {
        bail!(
            "payload {} bits differs from predicted {}",
            encoded.payload_bits,
            report.payload_bits
        );
    }
    fs::write(&args.output, &encoded.bytes)
        .with_context(|| format!("writing {}", args.output.display()))?;
    print!("{}", report.to_kv());
    println!(
        "samples={} file_bytes={} header_bytes={} mode={} lpc={}",
        audio.len(),
        encoded.bytes.len(),
        encoded.header_bytes,
        model.mode,
        model.lpc
    );
    Ok(())
}

fn cmd_decode(args: CodecArgs) -> Result<()> {
    let model = load_model(&args.model, &args.mode)?;
    let bytes =
        fs::read(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let stream = read_stream(&bytes, &model.tables)?;
    if stream.header.lpc != args.mode.lpc {
        return Err(CmrlError::ModelMismatch(format!(
            "stream has lpc={} but --lpc={}",
            stream.header.lpc, args.mode.lpc
        ))
        .into());
    }
    let audio = decode_audio(&model, &stream)?;
    write_wav(&args.output, &audio)
        .with_context(|| format!("writing {}", args.output.display()))?;
    print!("{}", stream_rate(&model, &stream)?.to_kv());
    println!(
        "samples={} mode={} lpc={}",
        audio.len(),
        model.mode,
        model.lpc
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let r = read_wav(&args.reference)
        .with_context(|| format!("reading {}", args.reference.display()))?;
    let d =
        read_wav(&args.decoded).with_context(|| format!("reading {}", args.decoded.display()))?;
    if r.sample_rate != d.sample_rate {
        return Err(CmrlError::SampleRate(d.sample_rate).into());
    }
    let snr = snr_db(&r.samples, &d.samples)?;
    println!(
        "samples={} sample_rate={} snr_db={snr:.6}",
        r.len(),
        r.sample_rate
    );
    Ok(())
}

fn cmd_config(args: ModeArgs) -> Result<()> {
    print!("{}", load_config(&args)?.to_toml()?);
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    if args.count == 0 || !(args.seconds > 0.0) {
        return Err(CmrlError::Config("count and seconds must be positive".into()).into());
    }
    fs::create_dir_all(&args.output)
        .with_context(|| format!("creating {}", args.output.display()))?;
    for (i, u) in corpus(args.seed, args.count, args.seconds)
        .iter()
        .enumerate()
    {
        let path = args.output.join(format!("utt{i:04}.wav"));
        write_wav(&path, u).with_context(|| format!("writing {}", path.display()))?;
    }
    let total: f64 = args.count as f64 * args.seconds;
    println!(
        "files={} seconds={total:.1} dir={}",
        args.count,
        args.output.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Config(a) => cmd_config(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
