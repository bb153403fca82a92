//! `diarkit` command line.
//!
//! Exit codes: 0 on success, 1 on validation errors (bad flags, malformed
//! inputs, failed checks), 2 on runtime errors (I/O).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{corpus_stats, der, DerReport};
use crate::pipeline::{run_pipeline, Formulation};
use crate::pit::{
    check_multilabel_gradient, check_powerset_gradient, multilabel_pit_loss, powerset_pit_loss, LossResult,
};
use crate::powerset::PowersetCodec;
use crate::synth::{generate_chunk_predictions, generate_conversation};
use crate::timeline::{Annotation, FrameKind, FrameMatrix};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Finite-difference step and tolerance of `loss --grad-check`.
pub const GRAD_CHECK_STEP: f64 = 1e-6;
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(name = "diarkit", version, about = "Powerset speaker diarization toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the number of powerset classes (and optionally list them).
    Codec(CodecArgs),
    /// Evaluate a permutation-invariant loss on frame matrix files.
    Loss(LossArgs),
    /// Stitch chunk predictions into a global diarization.
    Pipeline(PipelineArgs),
    /// Diarization error rate of a hypothesis RTTM against a reference.
    Score(ScoreArgs),
    /// Overlap statistics and chunk speaker counts of an RTTM corpus.
    Stats(StatsArgs),
    /// Generate a synthetic conversation and simulated chunk predictions.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct CodecArgs {
    #[arg(long)]
    pub speakers: usize,
    #[arg(long)]
    pub max_overlap: usize,
    #[arg(long)]
    pub list: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LossFormulation {
    Multilabel,
    Powerset,
}

#[derive(Debug, Args)]
pub struct LossArgs {
    #[arg(long, value_enum)]
    pub formulation: LossFormulation,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    /// `K,O`: local speakers and maximum overlap of the powerset codec.
    #[arg(long, default_value = "3,2")]
    pub codec: String,
    #[arg(long)]
    pub grad_check: bool,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub chunks: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Recording identifier written to the RTTM.
    #[arg(long, default_value = "recording")]
    pub uri: String,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long = "hyp")]
    pub hypothesis: PathBuf,
    /// Total collar width in seconds, centred on reference boundaries.
    #[arg(long, default_value_t = 0.0)]
    pub collar: f64,
    #[arg(long)]
    pub uem: Option<PathBuf>,
    #[arg(long)]
    pub per_file: bool,
    /// JSON report path (default: `<hyp>.der.json`).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub rttm: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    pub chunk: f64,
    #[arg(long, default_value_t = 0.5)]
    pub step: f64,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

pub fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Codec(a) => codec(a),
        Command::Loss(a) => loss(a),
        Command::Pipeline(a) => pipeline(a),
        Command::Score(a) => score(a),
        Command::Stats(a) => stats(a),
        Command::Synth(a) => synth(a),
    }
}

fn codec(args: &CodecArgs) -> Result<i32> {
    let codec = PowersetCodec::new(args.speakers, args.max_overlap)?;
    println!("{}", codec.num_classes());
    if args.list {
        for (i, members) in codec.classes().iter().enumerate() {
            let names: Vec<String> = members.iter().map(|s| format!("s{}", s + 1)).collect();
            println!("{i}\t{{{}}}", names.join(","));
        }
    }
    Ok(EXIT_OK)
}

fn parse_codec_flag(text: &str) -> Result<PowersetCodec> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let parsed: Vec<usize> = parts.iter().filter_map(|p| p.parse().ok()).collect();
    match parsed.as_slice() {
        [k, o] if parts.len() == 2 => PowersetCodec::new(*k, *o),
        _ => Err(Error::InvalidArgument(format!("--codec expects K,O, got {text:?}"))),
    }
}

fn read_matrix(path: &Path) -> Result<FrameMatrix> {
    io::parse_frame_matrix(&io::read_text(path)?, &path.display().to_string())
}

/// Powerset targets may be given as a multi-label matrix (K columns) or as
/// one-hot powerset classes.
fn powerset_targets(codec: &PowersetCodec, target: &FrameMatrix) -> Result<Vec<usize>> {
    if target.num_cols() == codec.num_speakers() && target.kind() == FrameKind::BinaryTarget {
        let encoded = codec.encode_classes(target)?;
        if encoded.truncated_frames > 0 {
            log::warn!("{} target frames exceed the maximum overlap and were truncated", encoded.truncated_frames);
        }
        Ok(encoded.classes)
    } else {
        codec.classes_of(target)
    }
}

fn loss(args: &LossArgs) -> Result<i32> {
    let target = read_matrix(&args.target)?;
    let pred = read_matrix(&args.pred)?;
    let (result, check): (LossResult, _) = match args.formulation {
        LossFormulation::Multilabel => {
            target.require_kind(FrameKind::BinaryTarget)?;
            pred.require_kind(FrameKind::Probability)?;
            let result = multilabel_pit_loss(target.values(), pred.values())?;
            let check = args
                .grad_check
                .then(|| check_multilabel_gradient(target.values(), pred.values(), GRAD_CHECK_STEP))
                .transpose()?;
            (result, check)
        }
        LossFormulation::Powerset => {
            let codec = parse_codec_flag(&args.codec)?;
            if pred.num_cols() != codec.num_classes() {
                return Err(Error::ShapeMismatch(format!(
                    "prediction has {} columns but the {},{} codec has {} classes",
                    pred.num_cols(),
                    codec.num_speakers(),
                    codec.max_overlap(),
                    codec.num_classes()
                )));
            }
            let classes = powerset_targets(&codec, &target)?;
            let logits: Array2<f64> = pred.values().to_owned();
            let result = powerset_pit_loss(&codec, &classes, logits.view())?;
            let check = args
                .grad_check
                .then(|| check_powerset_gradient(&codec, &classes, logits.view(), GRAD_CHECK_STEP))
                .transpose()?;
            (result, check)
        }
    };
    println!("loss: {:.9}", result.value);
    println!("permutation: {}", result.permutation);
    if let Some(check) = check {
        println!(
            "grad-check: max relative error {:.3e} over {} coordinates ({} skipped near permutation switches)",
            check.max_relative_error, check.checked, check.skipped
        );
        if !check.passes(GRAD_CHECK_TOLERANCE) {
            eprintln!("gradient check failed (tolerance {GRAD_CHECK_TOLERANCE:e})");
            return Ok(EXIT_VALIDATION);
        }
    }
    Ok(EXIT_OK)
}

fn pipeline(args: &PipelineArgs) -> Result<i32> {
    let config = io::parse_pipeline_config(&io::read_text(&args.config)?)?;
    let chunks = io::read_chunk_dir(&args.chunks)?;
    if chunks.is_empty() {
        return Err(Error::InvalidArgument(format!("no chunks found in {}", args.chunks.display())));
    }
    if let Some(c) = chunks.iter().find(|c| c.activities().kind() != config.formulation.activity_kind()) {
        return Err(Error::InvalidArgument(format!(
            "chunk at {:.3} s holds {} values, the {:?} formulation expects {}",
            c.chunk().start(),
            c.activities().kind(),
            config.formulation,
            config.formulation.activity_kind()
        )));
    }
    let output = run_pipeline(&chunks, &config, &args.uri)?;
    fs::write(&args.out, io::write_rttm([&output.annotation]))?;
    let diag_path = with_suffix(&args.out, ".diagnostics.json");
    fs::write(
        &diag_path,
        serde_json::to_string_pretty(&output.diagnostics).expect("diagnostics serialize"),
    )?;
    println!(
        "{} chunks, {} clusters, {} local speakers dropped; wrote {}",
        output.diagnostics.chunks,
        output.diagnostics.clusters,
        output.diagnostics.dropped_local_speakers,
        args.out.display()
    );
    Ok(EXIT_OK)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn score(args: &ScoreArgs) -> Result<i32> {
    let reference = io::parse_rttm_named(&io::read_text(&args.reference)?, &args.reference.display().to_string())?;
    let hypothesis = io::parse_rttm_named(&io::read_text(&args.hypothesis)?, &args.hypothesis.display().to_string())?;
    let uem = args
        .uem
        .as_ref()
        .map(|p| io::read_text(p).and_then(|t| io::parse_uem(&t)))
        .transpose()?;

    for uri in hypothesis.keys().filter(|u| !reference.contains_key(*u)) {
        log::warn!("hypothesis file {uri} has no reference and is not scored");
    }
    let mut reports = Vec::with_capacity(reference.len());
    for (uri, r) in &reference {
        let h = match hypothesis.get(uri) {
            Some(h) => h.clone(),
            None => {
                log::warn!("no hypothesis for {uri}; scoring it as entirely missed");
                eprintln!("warning: no hypothesis for {uri}");
                Annotation::new(uri.clone())
            }
        };
        let regions = match &uem {
            Some(u) => Some(u.get(uri).cloned().unwrap_or_default()),
            None => None,
        };
        reports.push(der(r, &h, args.collar, regions.as_deref())?);
    }
    let total = DerReport::combine(&reports);
    let shown: &[DerReport] = if args.per_file { &reports } else { &[] };
    print!("{}", io::der_report_table(shown, &total));
    println!("DER: {:.6}", total.der);
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| with_suffix(&args.hypothesis, ".der.json"));
    fs::write(report_path, io::der_report_json(&reports, &total))?;
    Ok(EXIT_OK)
}

fn stats(args: &StatsArgs) -> Result<i32> {
    let annotations = io::parse_rttm_named(&io::read_text(&args.rttm)?, &args.rttm.display().to_string())?;
    let annotations: Vec<Annotation> = annotations.into_values().collect();
    let stats = corpus_stats(&annotations, args.chunk, args.step)?;
    print!("{}", io::corpus_stats_table(&stats));
    if let Some(path) = &args.json {
        fs::write(path, io::corpus_stats_json(&stats))?;
    }
    Ok(EXIT_OK)
}

fn synth(args: &SynthArgs) -> Result<i32> {
    let (mut synth_config, pipeline_config) = match &args.config {
        Some(p) => io::parse_synth_config(&io::read_text(p)?)?,
        None => Default::default(),
    };
    if let Some(seed) = args.seed {
        synth_config.seed = seed;
    }
    let conversation = generate_conversation(&synth_config)?;
    let generated = generate_chunk_predictions(&conversation.annotation, &synth_config, &pipeline_config)?;

    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("reference.rttm"), io::write_rttm([&conversation.annotation]))?;
    io::write_chunk_dir(&args.out.join("chunks"), &generated.chunks)?;
    fs::write(args.out.join("pipeline.toml"), io::write_pipeline_config(&pipeline_config))?;

    let stats = corpus_stats(
        std::slice::from_ref(&conversation.annotation),
        pipeline_config.framing.chunk_duration,
        pipeline_config.framing.step,
    )?;
    let summary = serde_json::json!({
        "uri": conversation.annotation.uri(),
        "seed": synth_config.seed,
        "formulation": match pipeline_config.formulation {
            Formulation::Powerset => "powerset",
            Formulation::MultiLabel => "multi-label",
        },
        "realized_overlap": conversation.realized_overlap,
        "chunks": generated.chunks.len(),
        "truncated_chunks": generated.truncated_chunks,
        "truncated_frames": generated.truncated_frames,
    });
    fs::write(
        args.out.join("synth.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    println!("uri: {}", conversation.annotation.uri());
    println!("realized overlap: {:.4}", conversation.realized_overlap);
    print!("{}", io::corpus_stats_table(&stats));
    Ok(EXIT_OK)
}
