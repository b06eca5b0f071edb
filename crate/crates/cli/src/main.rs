use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use symflow::config::{LensSpec, Mode, PipelineConfig, SynthKind};
use symflow::pipeline;
use symflow::{Boundary, Error};

#[derive(Parser)]
#[command(name = "symflow", version, about = "Wide-angle distortion correction with flip-symmetric flow priors")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config JSON; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file, for `warp`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Barrel coefficients, centered on the image.
    #[arg(long, global = true, value_name = "K1,K2", value_parser = parse_lens)]
    lens: Option<(f64, f64)>,
    /// Corner displacement in pixels for corner-stretch distortion.
    #[arg(long, global = true, value_name = "PX")]
    strength: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Correct one image.
    Correct {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        face_flow: Option<PathBuf>,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Score prediction annotations against ground truth.
    Eval {
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        pred: Option<PathBuf>,
    },
    /// Warp an image with a flow file.
    Warp {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        flow: PathBuf,
        /// Clamp out-of-range samples to the edge instead of zero padding.
        #[arg(long)]
        clamp: bool,
    },
    /// Flow file utilities.
    Flow {
        #[command(subcommand)]
        action: FlowAction,
    },
    /// Distort one image with a lens or a corner stretch.
    Distort {
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum FlowAction {
    /// Print size and magnitude statistics as JSON.
    Inspect { file: PathBuf },
    /// Convert between .flo and .json, or render to .png.
    Convert { input: PathBuf, output: PathBuf },
}

fn parse_lens(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected K1,K2")?;
    let k1 = a.trim().parse::<f64>().map_err(|e| e.to_string())?;
    let k2 = b.trim().parse::<f64>().map_err(|e| e.to_string())?;
    Ok((k1, k2))
}

fn fail(err: &Error) -> ExitCode {
    eprintln!("{}", json!({ "error": { "code": err.code(), "message": err.to_string() } }));
    ExitCode::FAILURE
}

fn print_json<S: serde::Serialize>(value: &S) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn base_config(common: &Common) -> Result<PipelineConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.paths.output = Some(out.clone());
    }
    if let Some((k1, k2)) = common.lens {
        cfg.lens = Some(LensSpec::Centered { k1, k2 });
    }
    if let Some(s) = common.strength {
        cfg.synth.strength = s;
        cfg.synth.kind = SynthKind::CornerStretch;
        if common.lens.is_none() {
            cfg.lens = None;
        }
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let mut cfg = base_config(&cli.common)?;
    match cli.command {
        Command::Correct { input, annotations, reference, mask, face_flow } => {
            cfg.mode = Some(Mode::Correct);
            let p = &mut cfg.paths;
            p.input = input.or(p.input.take());
            p.annotations = annotations.or(p.annotations.take());
            p.reference = reference.or(p.reference.take());
            p.mask = mask.or(p.mask.take());
            p.face_flow = face_flow.or(p.face_flow.take());
            let report = pipeline::run_correct(&cfg)?;
            print_json(&report)?;
            if report.is_ok() {
                Ok(ExitCode::SUCCESS)
            } else {
                for e in &report.errors {
                    eprintln!("{}", json!({ "error": e }));
                }
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Synth { count, split } => {
            if let Some(n) = count {
                cfg.synth.count = n;
            }
            if let Some(s) = split {
                cfg.synth.split = s;
            }
            if cli.common.lens.is_some() {
                cfg.synth.kind = SynthKind::Barrel;
            }
            let records = pipeline::run_synth(&cfg)?;
            print_json(&json!({ "written": records.len() }))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { gt, pred } => {
            cfg.paths.ground_truth = gt.or(cfg.paths.ground_truth.take());
            cfg.paths.predictions = pred.or(cfg.paths.predictions.take());
            let summary = pipeline::run_eval(&cfg)?;
            let m = &summary.mean;
            let f = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
            println!("mean,{},{},{}", f(m.line_acc), f(m.shape_acc), f(m.landmark_distance));
            for (id, why) in &summary.skipped {
                eprintln!("skipped {id}: {why}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Warp { input, flow, clamp } => {
            let out = cli
                .common
                .out
                .ok_or_else(|| Error::InvalidConfig("warp needs --out <file>".into()))?;
            let boundary = if clamp { Boundary::Clamp } else { cfg.boundary };
            pipeline::run_warp(&input, &flow, &out, boundary)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Flow { action } => {
            match action {
                FlowAction::Inspect { file } => print_json(&pipeline::inspect_flow(&file)?)?,
                FlowAction::Convert { input, output } => pipeline::convert_flow(&input, &output)?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Distort { input } => {
            cfg.paths.input = input.or(cfg.paths.input.take());
            let record = pipeline::run_distort(&cfg)?;
            print_json(&record)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => fail(&e),
    }
}
