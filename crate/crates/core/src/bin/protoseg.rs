use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use protoseg::app::{self, ExtractorChoice, PhantomRequest, SegmentRequest};
use protoseg::eval::{mean_of, AblationAxis};
use protoseg::phantom::SupportSelection;
use protoseg::{BuiltinExtractorSpec, ClassId, EpisodeConfig, Error, Fusion, ProtoStrategy, SupportPairing, WindowRadius};

/// Few-shot volumetric segmentation with prototype networks and
/// inference-time pseudo-labelling.
#[derive(Parser)]
#[command(name = "protoseg", version)]
struct Cli {
    /// Worker threads (default: all cores). Also read from PROTOSEG_THREADS.
    #[arg(long, global = true, env = "PROTOSEG_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom volume and mask, or a whole episode suite.
    PhantomGen {
        /// JSON phantom spec (with "dims") or suite spec (with "episodes").
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Segment a query volume from an annotated support volume.
    Segment(SegmentArgs),
    /// Sweep one configuration axis over a suite and write a Dice CSV.
    Ablate {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        axis: AblationAxis,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        method: MethodArgs,
    },
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    support_vol: PathBuf,
    #[arg(long)]
    support_mask: PathBuf,
    #[arg(long)]
    query_vol: PathBuf,
    /// Query ground truth; when given, per-class Dice is printed.
    #[arg(long)]
    query_mask: Option<PathBuf>,
    /// FEATVOL of the support volume, required when --extractor is a FEATVOL path.
    #[arg(long)]
    support_features: Option<PathBuf>,
    /// RESULT path; the sidecar is written to <out>.json.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    method: MethodArgs,
}

#[derive(Args)]
struct MethodArgs {
    /// Built-in extractor (raw, multiscale:1,2,4, patchstat:5, phase:2.4, optional @d)
    /// or, for `segment`, a FEATVOL path for the query volume.
    #[arg(long, default_value = "phase:2.4")]
    extractor: String,
    /// Number of annotated support slices.
    #[arg(long, default_value_t = 3)]
    shots: usize,
    #[arg(long, value_enum, default_value = "evenly-spaced")]
    selection: Selection,
    /// Confidence threshold for pseudo-labels.
    #[arg(long, default_value_t = 0.95)]
    gamma: f64,
    /// Per-class threshold override, CLASS=GAMMA; repeatable.
    #[arg(long = "class-gamma", value_parser = parse_class_gamma)]
    class_gamma: Vec<(ClassId, f64)>,
    /// Query window radius in slices, or ALL.
    #[arg(long, default_value = "7")]
    window: WindowRadius,
    /// Pseudo-label passes after the initial segmentation. 2 runs
    /// initial, then (query prototypes, re-segment) twice.
    #[arg(long, default_value_t = 2)]
    iterations: usize,
    #[arg(long, default_value = "SUPPORT_AND_QUERY")]
    strategy: ProtoStrategy,
    /// Cosine similarity scale.
    #[arg(long, default_value_t = 20.0)]
    alpha: f64,
    #[arg(long, default_value = "MAX")]
    fusion: Fusion,
    #[arg(long, default_value = "ALL_AVERAGE")]
    pairing: SupportPairing,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Selection {
    EvenlySpaced,
    CenterBlock,
}

impl From<Selection> for SupportSelection {
    fn from(s: Selection) -> Self {
        match s {
            Selection::EvenlySpaced => SupportSelection::EvenlySpaced,
            Selection::CenterBlock => SupportSelection::CenterBlock,
        }
    }
}

fn parse_class_gamma(s: &str) -> Result<(ClassId, f64), String> {
    let (c, g) = s.split_once('=').ok_or_else(|| format!("expected CLASS=GAMMA, got {s:?}"))?;
    let c: u8 = c.trim().parse().map_err(|_| format!("bad class id in {s:?}"))?;
    let g: f64 = g.trim().parse().map_err(|_| format!("bad gamma in {s:?}"))?;
    Ok((ClassId(c), g))
}

impl MethodArgs {
    fn config(&self) -> protoseg::Result<EpisodeConfig> {
        let config = EpisodeConfig {
            shots: self.shots,
            gamma: self.gamma,
            class_gamma: self.class_gamma.iter().copied().collect::<BTreeMap<_, _>>(),
            window: self.window,
            iterations: self.iterations,
            strategy: self.strategy,
            alpha: self.alpha,
            fusion: self.fusion,
            pairing: self.pairing,
        };
        config.validate()?;
        Ok(config)
    }
}

fn run_phantom_gen(spec: &Path, out_dir: &Path) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(spec).map_err(|cause| Error::Io { path: spec.to_path_buf(), cause })?;
    let request = PhantomRequest::parse(&text, spec)?;
    let written = app::phantom_gen(&request, out_dir)?;
    println!("wrote {} files to {}", written.len(), out_dir.display());
    Ok(())
}

fn run_segment(args: &SegmentArgs) -> anyhow::Result<()> {
    let request = SegmentRequest {
        support_volume: args.support_vol.clone(),
        support_mask: args.support_mask.clone(),
        query_volume: args.query_vol.clone(),
        query_mask: args.query_mask.clone(),
        extractor: ExtractorChoice::resolve(&args.method.extractor, args.support_features.as_deref())?,
        selection: args.method.selection.into(),
        config: args.method.config()?,
    };
    let outcome = app::segment(&request)?;
    app::write_result(&args.out, &outcome.result.masks, &outcome.sidecar)?;
    if let Some(dice) = &outcome.dice {
        for (class, d) in dice {
            println!("class {class}: dice {d:.4}");
        }
        println!("mean: dice {:.4}", mean_of(dice));
    }
    Ok(())
}

fn run_ablate(suite: &Path, axis: AblationAxis, out: &Path, method: &MethodArgs) -> anyhow::Result<()> {
    let extractor: BuiltinExtractorSpec = method.extractor.parse()?;
    let csv = app::ablate_suite(suite, axis, &extractor, &method.config()?, method.selection.into())?;
    protoseg::io::write_atomic(out, csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if !e.is_input_error() => 1,
        Some(_) => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        let built = rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring thread pool");
        if let Err(e) = built {
            eprintln!("protoseg: {e:#}");
            return ExitCode::from(1);
        }
    }
    let outcome = match &cli.command {
        Command::PhantomGen { spec, out_dir } => run_phantom_gen(spec, out_dir),
        Command::Segment(args) => run_segment(args),
        Command::Ablate { suite, axis, out, method } => run_ablate(suite, *axis, out, method),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("protoseg: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
