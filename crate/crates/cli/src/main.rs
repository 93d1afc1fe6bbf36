//! `ambiset`: scene generation, ASM filter design, encoding, enhancement and
//! evaluation from the command line.
//!
//! Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ambiset_core::enhance::{DropoutSpec, FtJnfWeights};
use ambiset_core::geometry::CATALOG;
use ambiset_core::pipeline::{
    cmd_asm_design, cmd_asm_design_measured, cmd_encode, cmd_enhance, cmd_eval, cmd_scene_generate,
    format_nmse_summary, load_eval_manifest, resolve_array, DesignOutcome, EnhanceRequest, EstimatorChoice,
    EstimatorKind, InputPath, PipelineConfig, SubsetKind,
};
use ambiset_core::steering::{free_field_steering, import_measured_steering, FrequencyGrid};
use ambiset_core::{AsmFilterBank, Error, Result, WavAudio};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(name = "ambiset", version, about = "Array-agnostic Ambisonics encoding and enhancement")]
struct Cli {
    /// Print every verb and flag as JSON and exit.
    #[arg(long, global = true)]
    help_json: bool,

    /// JSON pipeline configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a seeded scene bundle (mic, Ambisonics and clean WAVs plus manifest).
    SceneGenerate(SceneArgs),
    /// Design ASM encoders for an array and print the NMSE summary.
    AsmDesign(DesignArgs),
    /// Encode microphone signals to packed Ambisonics with a filter bank.
    Encode(EncodeArgs),
    /// Mask-based enhancement of the a_00 channel.
    Enhance(EnhanceArgs),
    /// SI-SDR report over a manifest of (clean, noisy, enhanced) triples.
    Eval(EvalArgs),
    /// List the built-in arrays.
    ArraysList(ArraysListArgs),
    /// Write the free-field steering matrix of an array.
    SteeringExport(SteeringExportArgs),
    /// Validate an external steering matrix and rewrite it in canonical form.
    SteeringImport(SteeringImportArgs),
    /// Write FT-JNF weights (seeded random or all zero).
    WeightsInit(WeightsInitArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SubsetArg {
    Horizontal,
    Full,
}

impl From<SubsetArg> for SubsetKind {
    fn from(s: SubsetArg) -> Self {
        match s {
            SubsetArg::Horizontal => SubsetKind::Horizontal,
            SubsetArg::Full => SubsetKind::Full,
        }
    }
}

#[derive(Args)]
struct HarmonicArgs {
    /// Ambisonics order.
    #[arg(long)]
    order: Option<u32>,
    /// Harmonic subset.
    #[arg(long, value_enum)]
    subset: Option<SubsetArg>,
}

#[derive(Args)]
struct SceneArgs {
    /// Scene seed; the bundle is a pure function of (config, seed).
    #[arg(long)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Speech WAVs, one per speaker slot, target first.
    #[arg(long, num_args = 1..)]
    speech: Vec<PathBuf>,
    /// Use the built-in synthetic speech generator.
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    speakers: Option<usize>,
    /// Segment length in seconds.
    #[arg(long)]
    segment: Option<f64>,
    /// Catalog name or array JSON file.
    #[arg(long)]
    array: Option<String>,
    /// Sensor SNR in dB.
    #[arg(long)]
    snr: Option<f64>,
    #[command(flatten)]
    harmonics: HarmonicArgs,
}

#[derive(Args)]
struct DesignArgs {
    /// Catalog name or array JSON file.
    #[arg(long, required_unless_present = "steering")]
    array: Option<String>,
    /// Design from an ASMV1 steering file instead of the free-field model.
    #[arg(long, conflicts_with = "array")]
    steering: Option<PathBuf>,
    /// Output ASMF1 filter bank.
    #[arg(long)]
    out: PathBuf,
    /// Design SNR in dB.
    #[arg(long)]
    snr: Option<f64>,
    #[command(flatten)]
    harmonics: HarmonicArgs,
    /// Also write the summary as JSON.
    #[arg(long)]
    summary_json: Option<PathBuf>,
}

#[derive(Args)]
struct EncodeArgs {
    /// Microphone WAV.
    #[arg(long)]
    input: PathBuf,
    /// ASMF1 filter bank.
    #[arg(long)]
    filters: PathBuf,
    /// Output packed Ambisonics WAV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Unit,
    Oracle,
    FtJnf,
}

#[derive(Args)]
struct EnhanceArgs {
    /// Packed Ambisonics WAV, or microphone WAV with --filters.
    #[arg(long)]
    input: PathBuf,
    /// Encode microphone input with this ASMF1 bank first.
    #[arg(long)]
    filters: Option<PathBuf>,
    #[arg(long, value_enum)]
    estimator: Option<EstimatorArg>,
    /// Clean a_00 reference (oracle estimator).
    #[arg(long)]
    clean: Option<PathBuf>,
    /// FTJW1 weights (ft-jnf estimator).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Training-chain channel dropout probability.
    #[arg(long)]
    dropout_p: Option<f64>,
    /// Dropout seed.
    #[arg(long, requires = "dropout_p")]
    seed: Option<u64>,
    /// Output mono WAV.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    harmonics: HarmonicArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// JSON manifest of rows; paths relative to the manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for report.json and report.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ArraysListArgs {
    /// Print the geometries as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SteeringExportArgs {
    #[arg(long)]
    array: String,
    /// Output ASMV1 file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SteeringImportArgs {
    /// ASMV1 steering file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct WeightsInitArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    channels: usize,
    #[arg(long, default_value_t = 256)]
    h1: usize,
    #[arg(long, default_value_t = 128)]
    h2: usize,
    /// All-zero weights instead of random ones.
    #[arg(long)]
    zero: bool,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help and version requests are not failures
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.help_json {
        println!("{}", serde_json::to_string_pretty(&help_json()).expect("help serializes"));
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("no command given; see --help");
        return ExitCode::from(2);
    };
    match run(command, cli.config.as_deref()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

fn help_json() -> serde_json::Value {
    let cmd = Cli::command();
    let args = |c: &clap::Command| -> Vec<serde_json::Value> {
        c.get_arguments()
            .filter(|a| a.get_id() != "help" && a.get_id() != "version")
            .map(|a| {
                json!({
                    "name": a.get_id().as_str(),
                    "long": a.get_long(),
                    "required": a.is_required_set(),
                    "takes_value": a.get_action().takes_values(),
                    "help": a.get_help().map(|h| h.to_string()),
                })
            })
            .collect()
    };
    let verbs: Vec<_> = cmd
        .get_subcommands()
        .map(|s| {
            json!({
                "name": s.get_name(),
                "about": s.get_about().map(|h| h.to_string()),
                "args": args(s),
            })
        })
        .collect();
    json!({
        "name": cmd.get_name(),
        "version": cmd.get_version(),
        "global_args": args(&cmd),
        "commands": verbs,
        "exit_codes": {"0": "success", "2": "validation error", "3": "numerical failure"},
    })
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    path.map_or_else(|| Ok(PipelineConfig::default()), PipelineConfig::load)
}

fn apply_harmonics(cfg: &mut ambiset_core::pipeline::HarmonicConfig, args: &HarmonicArgs) {
    if let Some(o) = args.order {
        cfg.order = o;
    }
    if let Some(s) = args.subset {
        cfg.subset = s.into();
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(command: Command, config: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(config)?;
    match command {
        Command::SceneGenerate(a) => {
            let sc = &mut cfg.scene;
            if !a.speech.is_empty() {
                sc.speech = a.speech;
            }
            sc.synthetic |= a.synthetic;
            if let Some(v) = a.speakers {
                sc.speakers = v;
            }
            if let Some(v) = a.segment {
                sc.segment_seconds = v;
            }
            if let Some(v) = a.array {
                sc.array = v;
            }
            if let Some(v) = a.snr {
                sc.snr_db = v;
            }
            apply_harmonics(&mut sc.harmonics, &a.harmonics);
            let m = cmd_scene_generate(sc, a.seed, &a.out)?;
            println!(
                "scene {} written to {}: {} mics, {} Ambisonics channels, {} samples, reference mic {}",
                m.seed,
                a.out.display(),
                m.scene.array.len(),
                m.harmonics.len(),
                m.segment_samples,
                m.reference_mic
            );
        }
        Command::AsmDesign(a) => {
            apply_harmonics(&mut cfg.asm.harmonics, &a.harmonics);
            if let Some(v) = a.snr {
                cfg.asm.snr_db = v;
            }
            let outcome: DesignOutcome = match (&a.steering, &a.array) {
                (Some(p), _) => cmd_asm_design_measured(&import_measured_steering(p)?, &cfg.asm, &cfg.stft)?,
                (None, Some(name)) => cmd_asm_design(&resolve_array(name)?, &cfg.asm, &cfg.stft)?,
                (None, None) => return Err(Error::Validation("give --array or --steering".into())),
            };
            outcome.bank.save(&a.out)?;
            print!("{}", format_nmse_summary(&outcome));
            if let Some(p) = a.summary_json {
                write_text(&p, &serde_json::to_string_pretty(&outcome.summary)?)?;
            }
        }
        Command::Encode(a) => {
            let bank = AsmFilterBank::load(&a.filters)?;
            let mic = WavAudio::read(&a.input)?;
            let amb = cmd_encode(&mic, &bank, &cfg.stft)?;
            amb.write(&a.out)?;
        }
        Command::Enhance(a) => {
            let path = match &a.filters {
                Some(f) => InputPath::Asm(AsmFilterBank::load(f)?),
                None => {
                    apply_harmonics(&mut cfg.asm.harmonics, &a.harmonics);
                    InputPath::Ideal(cfg.asm.harmonics.set()?)
                }
            };
            let kind = match a.estimator {
                Some(EstimatorArg::Unit) => EstimatorKind::Unit,
                Some(EstimatorArg::Oracle) => EstimatorKind::Oracle,
                Some(EstimatorArg::FtJnf) => EstimatorKind::FtJnf,
                None => cfg.estimator,
            };
            let estimator = match kind {
                EstimatorKind::Unit => EstimatorChoice::Unit,
                EstimatorKind::Oracle => {
                    let p = a
                        .clean
                        .ok_or_else(|| Error::Validation("the oracle estimator needs --clean".into()))?;
                    EstimatorChoice::Oracle(WavAudio::read(&p)?)
                }
                EstimatorKind::FtJnf => {
                    let p = a
                        .weights
                        .ok_or_else(|| Error::Validation("the ft-jnf estimator needs --weights".into()))?;
                    EstimatorChoice::FtJnf(Box::new(FtJnfWeights::load(&p)?))
                }
            };
            let mut req = EnhanceRequest::new(path, estimator);
            req.stft = cfg.stft;
            if let Some(c) = cfg.mask_clip {
                req.mask_clip = c;
            }
            req.dropout = match a.dropout_p {
                Some(p) => Some(DropoutSpec {
                    p,
                    seed: a.seed.or(cfg.seed).unwrap_or(0),
                    ..cfg.dropout.clone().unwrap_or_else(|| DropoutSpec::training(0))
                }),
                None => cfg.dropout,
            };
            let input = WavAudio::read(&a.input)?;
            cmd_enhance(&input, &req)?.write(&a.out)?;
        }
        Command::Eval(a) => {
            let manifest = load_eval_manifest(&a.manifest)?;
            let base = a.manifest.parent().unwrap_or(Path::new("."));
            let out = cmd_eval(&manifest, base)?;
            std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
            write_text(&a.out.join("report.json"), &out.report.to_json())?;
            let table = out.report.to_table();
            write_text(&a.out.join("report.txt"), &table)?;
            print!("{table}");
            for (utt, why) in &out.skipped {
                eprintln!("skipped {utt}: {why}");
            }
        }
        Command::ArraysList(a) => {
            for name in CATALOG {
                let arr = resolve_array(name)?;
                if a.json {
                    println!("{}", arr.to_json());
                } else {
                    println!("{name:<16} {} mics, aperture radius {:.3} m", arr.len(), arr.aperture_radius());
                }
            }
        }
        Command::SteeringExport(a) => {
            let array = resolve_array(&a.array)?;
            let grid = cfg.asm.grid.build()?;
            let freqs = FrequencyGrid::dft_bins(cfg.stft.fft_size, cfg.stft.sample_rate, cfg.asm.speed_of_sound)?;
            free_field_steering(&array, &grid, &freqs).export(&a.out)?;
        }
        Command::SteeringImport(a) => {
            let v = import_measured_steering(&a.input)?;
            v.export(&a.out)?;
            println!(
                "{}: {} mics, {} directions, {} frequencies",
                v.array_name(),
                v.mic_count(),
                v.grid().len(),
                v.freqs().len()
            );
        }
        Command::WeightsInit(a) => {
            let w = if a.zero {
                FtJnfWeights::zeros(a.channels, a.h1, a.h2)
            } else {
                FtJnfWeights::random(a.channels, a.h1, a.h2, a.seed)
            };
            w.save(&a.out)?;
        }
    }
    Ok(())
}
