//! `vmt`: command-line front end for the codec, synthetic data, training,
//! generation, piano-roll rendering and the gradient checks.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vmt_core::codec::{self, CodecConfig};
use vmt_core::frames::{self, Manifest, SynthSpec};
use vmt_core::gradcheck::{self, SuiteOptions};
use vmt_core::infer::{self, GenConfig, GenMode};
use vmt_core::midi;
use vmt_core::models::{self, ModelError};
use vmt_core::tensor::{DType, Float};
use vmt_core::train::{self, RunConfig, TrainError};
use vmt_core::viz::{self, RollSpec};

#[derive(Parser, Debug)]
#[command(name = "vmt", version, about = "Video-to-music transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Encode a MIDI file to performance tokens, one mnemonic per line.
    CodecEncode {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Cut the window [START, START + clip length) out of the score first.
        #[arg(long)]
        start: Option<f64>,
    },
    /// Decode a token file to MIDI and print the decode warnings.
    CodecDecode {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Write a synthetic paired dataset with a manifest.
    DatasetSynth {
        /// Number of training pairs.
        #[arg(short = 'n', long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        validation: usize,
        #[arg(long, default_value_t = 0)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Check every clip, MIDI file and token sequence a manifest refers to.
    DatasetValidate { manifest: PathBuf },
    /// Train from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate MIDI for a clip from a checkpoint.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long, default_value = "greedy")]
        mode: GenMode,
        #[arg(long, default_value_t = 1.0)]
        temp: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Token cap before END is forced.
        #[arg(long, default_value_t = 1024)]
        max_len: usize,
        #[arg(short, long)]
        output: PathBuf,
        /// Also write the generation report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also write the generated tokens.
        #[arg(long)]
        tokens: Option<PathBuf>,
    },
    /// Render a MIDI file as an SVG piano roll.
    Viz {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        t0: f64,
        #[arg(long, default_value_t = 10.0)]
        t1: f64,
        #[arg(long, default_value_t = 36)]
        pitch_lo: u8,
        #[arg(long, default_value_t = 96)]
        pitch_hi: u8,
        #[arg(long, default_value_t = 1000.0)]
        width: f64,
        #[arg(long, default_value_t = 600.0)]
        height: f64,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Entries sampled per tensor.
        #[arg(long, default_value_t = 6, conflicts_with = "all")]
        samples: usize,
        /// Check every entry instead of sampling.
        #[arg(long)]
        all: bool,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

type Result<T = ()> = std::result::Result<T, CliError>;

fn data(e: impl fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn in_file(path: &Path) -> impl FnOnce(String) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

fn model_err(e: ModelError) -> CliError {
    match e {
        ModelError::Config(_) | ModelError::TargetTooLong { .. } => CliError::Usage(e.to_string()),
        _ => CliError::Data(e.to_string()),
    }
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::Config(_) | TrainError::StepZero(_) => CliError::Usage(e.to_string()),
        TrainError::NonFiniteGrad(_) | TrainError::NonFiniteLoss(_) | TrainError::AllMasked => {
            CliError::Numeric(e.to_string())
        }
        TrainError::Model(m) => model_err(m),
        TrainError::Data(_) | TrainError::Io { .. } => CliError::Data(e.to_string()),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result {
    fs::write(path, bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_midi(path: &Path) -> Result<midi::MidiScore> {
    midi::parse_smf(&read(path)?).map_err(|e| in_file(path)(e.to_string()))
}

fn codec_encode(input: &Path, output: &Path, start: Option<f64>) -> Result {
    let cfg = CodecConfig::default();
    let mut score = read_midi(input)?;
    if let Some(s) = start {
        score = midi::clip_score(&score, s, s + cfg.clip_len_sec).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let tokens = codec::encode(&score, &cfg).map_err(|e| in_file(input)(e.to_string()))?;
    write(output, codec::tokens_to_text(&tokens))?;
    println!("{} notes -> {} tokens", score.notes.len(), tokens.len());
    Ok(())
}

fn codec_decode(input: &Path, output: &Path) -> Result {
    let text = fs::read_to_string(input).map_err(|e| in_file(input)(e.to_string()))?;
    let tokens = codec::tokens_from_text(&text).map_err(|e| in_file(input)(e.to_string()))?;
    let (score, w) = codec::decode(&tokens, &CodecConfig::default());
    write(output, midi::write_smf(&score))?;
    println!("{} tokens -> {} notes", tokens.len(), score.notes.len());
    println!(
        "warnings: total={} unmatched_note_on={} unmatched_note_off={} retriggered={} zero_length={} truncated={} missing_start={} stray_start={} missing_end={} tokens_after_end={}",
        w.total(),
        w.unmatched_note_on,
        w.unmatched_note_off,
        w.retriggered,
        w.zero_length,
        w.truncated,
        w.missing_start,
        w.stray_start,
        w.missing_end,
        w.tokens_after_end
    );
    Ok(())
}

fn dataset_synth(spec: SynthSpec, dir: &Path) -> Result {
    let m = frames::synth_dataset(&spec, dir).map_err(|e| match e {
        frames::DataError::Manifest(_) => CliError::Usage(e.to_string()),
        _ => data(e),
    })?;
    println!("wrote {} pairs to {}", m.entries.len(), dir.display());
    Ok(())
}

fn dataset_validate(path: &Path) -> Result {
    let m = Manifest::load(path).map_err(data)?;
    let report = frames::validate_dataset(&m, &CodecConfig::default()).map_err(data)?;
    for (split, n) in &report.per_split {
        println!("{split}: {n}");
    }
    println!("ok: {} pairs, longest {} tokens", report.pairs, report.max_tokens);
    Ok(())
}

fn run_train(config: &Path) -> Result {
    let rc = RunConfig::load(config).map_err(train_err)?;
    let manifest = Manifest::load(&rc.manifest).map_err(data)?;
    let outcome = match rc.dtype {
        DType::F32 => train::train_loop::<f32>(rc.model, &manifest, rc.train, rc.codec, rc.resume),
        DType::F64 => train::train_loop::<f64>(rc.model, &manifest, rc.train, rc.codec, rc.resume),
    }
    .map_err(train_err)?;
    print!("{} steps, train loss {:.4}", outcome.steps, outcome.final_train_loss);
    if let Some(v) = outcome.final_val_loss {
        print!(", val loss {v:.4}");
    }
    println!();
    println!("checkpoint {}", outcome.checkpoint.display());
    println!("metrics {}", outcome.metrics.display());
    Ok(())
}

struct GenArgs<'a> {
    clip: &'a Path,
    cfg: GenConfig,
    output: &'a Path,
    report: Option<&'a Path>,
    tokens: Option<&'a Path>,
}

fn generate_with<T: Float>(ckpt_path: &Path, bytes: &[u8], a: &GenArgs) -> Result {
    let ckpt = models::from_bytes::<T>(bytes).map_err(|e| in_file(ckpt_path)(e.to_string()))?;
    let clip = frames::read_vmtf_file(a.clip).map_err(data)?;
    a.cfg.validate(&ckpt.model).map_err(model_err)?;
    let g = infer::generate_midi(&ckpt.model, &clip, &a.cfg, &ckpt.codec).map_err(model_err)?;
    infer::write_generation(&g, a.output, a.report).map_err(data)?;
    if let Some(p) = a.tokens {
        write(p, codec::tokens_to_text(&g.tokens))?;
    }
    let r = &g.report;
    println!(
        "{} tokens ({}), {} notes, {:.3} s, {} warnings",
        r.token_count,
        if r.ended_naturally { "ended" } else { "capped" },
        r.note_count,
        r.duration_sec,
        r.warning_total
    );
    Ok(())
}

fn run_generate(ckpt: &Path, a: GenArgs) -> Result {
    let bytes = read(ckpt)?;
    match models::checkpoint_dtype(&bytes).map_err(|e| in_file(ckpt)(e.to_string()))? {
        DType::F32 => generate_with::<f32>(ckpt, &bytes, &a),
        DType::F64 => generate_with::<f64>(ckpt, &bytes, &a),
    }
}

fn run_viz(input: &Path, output: &Path, spec: RollSpec) -> Result {
    let score = read_midi(input)?;
    let svg = viz::piano_roll_svg(&score, &spec).map_err(CliError::Usage)?;
    write(output, svg)?;
    println!("{} notes drawn", score.notes.len());
    Ok(())
}

fn run_gradcheck(opts: SuiteOptions) -> Result {
    let results = gradcheck::run_suite(&opts);
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok  " } else { "FAIL" };
        match &r.error {
            Some(e) => println!("{status} {:<28} error: {e}", r.name),
            None => println!(
                "{status} {:<28} checked {:>5}  max rel err {:.2e}  at {}",
                r.name, r.checked, r.max_rel_err, r.worst
            ),
        }
        failed += usize::from(!r.passed());
    }
    println!("{} checks, {failed} failed (tolerance {:.0e})", results.len(), gradcheck::TOLERANCE);
    if failed > 0 {
        return Err(CliError::Numeric(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

fn run(cli: Cli) -> Result {
    match cli.command {
        Command::CodecEncode { input, output, start } => codec_encode(&input, &output, start),
        Command::CodecDecode { input, output } => codec_decode(&input, &output),
        Command::DatasetSynth {
            n,
            validation,
            test,
            seed,
            output,
        } => dataset_synth(
            SynthSpec {
                train: n,
                validation,
                test,
                seed,
            },
            &output,
        ),
        Command::DatasetValidate { manifest } => dataset_validate(&manifest),
        Command::Train { config } => run_train(&config),
        Command::Generate {
            ckpt,
            clip,
            mode,
            temp,
            seed,
            max_len,
            output,
            report,
            tokens,
        } => {
            let cfg = GenConfig {
                mode,
                temperature: temp,
                seed,
                max_len,
            };
            let args = GenArgs {
                clip: &clip,
                cfg,
                output: &output,
                report: report.as_deref(),
                tokens: tokens.as_deref(),
            };
            run_generate(&ckpt, args)
        }
        Command::Viz {
            input,
            output,
            t0,
            t1,
            pitch_lo,
            pitch_hi,
            width,
            height,
        } => {
            let spec = RollSpec {
                pitch_lo,
                pitch_hi,
                t0_sec: t0,
                t1_sec: t1,
                width,
                height,
                ..RollSpec::default()
            };
            run_viz(&input, &output, spec)
        }
        Command::Gradcheck { samples, all, seed } => run_gradcheck(SuiteOptions {
            samples: if all { None } else { Some(samples) },
            seed,
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
