use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use hybridq::exec::{read_inputs, write_inputs};
use hybridq::fixtures::{conv_heavy, hand_traced, toy_hybrid};
use hybridq::quant::{DEFAULT_BITS, DEFAULT_EPSILON};
use hybridq::{
    compare, derive_report, identify_blocks, quantize_model, record_traces, Granularity,
    ModelPackage, PipelineConfig, QuantConfig, TracePackage,
};

#[derive(Parser)]
#[command(
    name = "hybridq",
    version,
    about = "Post-training quantization for hybrid CNN/transformer models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the CNN and transformer block paths of a model package.
    Inspect { model: PathBuf },
    /// Run the fp32 executor over an inputs file and record post-softmax traces.
    Trace {
        model: PathBuf,
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantize conv weights and calibrate softmax sites.
    Quantize {
        model: PathBuf,
        #[arg(long, required_unless_present = "allow_uncalibrated")]
        traces: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BITS)]
        bits: u8,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
        #[arg(long, default_value_t = Granularity::PerModule)]
        granularity: Granularity,
        /// Also write the quantization report to this file.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Leave softmax sites without traces in fp32.
        #[arg(long)]
        allow_uncalibrated: bool,
    },
    /// Print the report stored in a quantized package.
    Report { quant: PathBuf },
    /// Compare fp32 and simulated-quant outputs over an inputs file.
    Eval {
        model: PathBuf,
        quant: PathBuf,
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Write a built-in demo model plus calibration and eval inputs.
    Fixture {
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = FixtureKind::Toy)]
        kind: FixtureKind,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FixtureKind {
    Toy,
    ConvHeavy,
    HandTraced,
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_model(path: &Path) -> Result<ModelPackage> {
    ModelPackage::load(path).with_context(|| format!("loading model package {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Inspect { model } => print_json(&identify_blocks(&load_model(&model)?)),
        Command::Trace { model, inputs, out } => {
            let pkg = load_model(&model)?;
            let xs = read_inputs(&inputs)?;
            let traces = record_traces(&pkg, &xs)?;
            traces.save(&out)?;
            println!(
                "recorded {} samples at {} sites into {}",
                traces.n_samples(),
                traces.site_ids().count(),
                out.display()
            );
            Ok(())
        }
        Command::Quantize {
            model,
            traces,
            out,
            bits,
            epsilon,
            granularity,
            report,
            allow_uncalibrated,
        } => {
            let pkg = load_model(&model)?;
            let traces = traces
                .map(|p| {
                    TracePackage::load(&p)
                        .with_context(|| format!("loading traces {}", p.display()))
                })
                .transpose()?;
            let cfg = PipelineConfig {
                quant: QuantConfig { bits, epsilon },
                granularity,
                allow_uncalibrated,
            };
            let (quantized, rep) = quantize_model(&pkg, traces.as_ref(), &cfg)?;
            quantized.save(&out)?;
            if let Some(path) = report {
                fs::write(&path, rep.to_json_bytes())
                    .with_context(|| format!("writing report {}", path.display()))?;
            }
            for w in &rep.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "quantized {} tensors, calibrated {} sites, compression {:.3}x -> {}",
                rep.totals.quantized_tensors,
                rep.totals.calibrated_sites,
                rep.totals.compression_ratio,
                out.display()
            );
            Ok(())
        }
        Command::Report { quant } => {
            let rep = derive_report(&load_model(&quant)?)?;
            print!("{}", String::from_utf8(rep.to_json_bytes())?);
            Ok(())
        }
        Command::Eval {
            model,
            quant,
            inputs,
            json,
        } => {
            let pkg = load_model(&model)?;
            let q = load_model(&quant)?;
            let xs = read_inputs(&inputs)?;
            let s = compare(&pkg, &q, &xs)?;
            if json {
                return print_json(&s);
            }
            println!("samples             {}", s.samples);
            println!("cosine similarity   {:.6}", s.cosine_sim);
            println!("  per-sample mean   {:.6}", s.mean_sample_cosine);
            println!("  per-sample min    {:.6}", s.min_sample_cosine);
            println!("max abs output diff {:.6}", s.max_abs_diff);
            println!("top-1 agreement     {:.2}%", s.top1_agreement * 100.0);
            Ok(())
        }
        Command::Fixture { out, kind, seed } => {
            let model_dir = out.join("model");
            match kind {
                FixtureKind::HandTraced => hand_traced(seed).save(&model_dir)?,
                FixtureKind::Toy | FixtureKind::ConvHeavy => {
                    let fx = match kind {
                        FixtureKind::Toy => toy_hybrid(seed),
                        _ => conv_heavy(seed),
                    };
                    fx.model.save(&model_dir)?;
                    write_inputs(out.join("calibration.bin"), &fx.calibration)?;
                    write_inputs(out.join("eval.bin"), &fx.eval)?;
                }
            }
            println!("wrote fixture to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e.chain().find_map(|c| c.downcast_ref::<hybridq::Error>()) {
                Some(inner) => eprintln!("error[{}]: {e:#}", inner.code()),
                None => eprintln!("error: {e:#}"),
            }
            ExitCode::FAILURE
        }
    }
}
