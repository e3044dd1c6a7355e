use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crossd::autograd::VjpFault;
use crossd::RotationMode;
use crossd_cli::archive::{self, ExportConfig};
use crossd_cli::bench::{self, BenchConfig, OutputFormat, Precision};
use crossd_cli::check::{self, Suite};
use crossd_cli::train::{self, TrainConfig};
use crossd_cli::{resolve_threads, CliError, CliResult};

#[derive(Parser)]
#[command(name = "crossd", version, about = "Cross-D convolution benchmarks, checks and tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time conv2d, crossd, acs and conv3d forward passes.
    Bench(BenchArgs),
    /// Run invariant suites against reference implementations.
    Check(CheckArgs),
    /// Train a tiny Cross-D classifier on synthetic bars.
    TrainDemo(TrainArgs),
    /// Write a weight bank (optionally rotated) to an archive.
    Export(ExportArgs),
    /// Read and validate an archive.
    Import(ImportArgs),
}

fn parse_mode(s: &str) -> Result<RotationMode, String> {
    s.parse()
}

fn parse_axis(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|c| c.trim().parse::<f64>().map_err(|_| format!("bad axis component {c:?}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| format!("axis {s:?} must have three components"))
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated input shapes, each BxCxHxW.
    #[arg(long, default_value = "2x8x32x32")]
    shapes: String,
    #[arg(long, default_value_t = 20)]
    repeats: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Worker threads (falls back to CROSSD_THREADS, then all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
    format: OutputFormat,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "batch-mean", value_parser = parse_mode)]
    mode: RotationMode,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(value_enum, default_value_t = Suite::All)]
    suite: Suite,
    /// Shorthand for the spectral suite.
    #[arg(long, conflicts_with_all = ["conv", "grad", "transfer"])]
    spectral: bool,
    /// Shorthand for the conv suite.
    #[arg(long, conflicts_with_all = ["grad", "transfer"])]
    conv: bool,
    /// Shorthand for the grad suite.
    #[arg(long, conflicts_with = "transfer")]
    grad: bool,
    /// Shorthand for the transfer suite.
    #[arg(long)]
    transfer: bool,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Negative control: corrupt the rotation VJP.
    #[arg(long, hide = true)]
    corrupt_vjp: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Write the JSON trace here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    out: PathBuf,
    /// Read the bank from an existing archive.
    #[arg(long)]
    from: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    out_channels: usize,
    #[arg(long, default_value_t = 4)]
    in_channels: usize,
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    /// Freeze a rotation of this angle (radians, |θ| <= π/4).
    #[arg(long, allow_hyphen_values = true)]
    rotate: Option<f64>,
    #[arg(long, default_value = "0,0,1", value_parser = parse_axis, allow_hyphen_values = true)]
    axis: [f64; 3],
}

#[derive(Args)]
struct ImportArgs {
    path: PathBuf,
    /// Re-save the loaded tensors to this path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
    format: OutputFormat,
}

fn write_output(text: &str, out: Option<&PathBuf>) -> CliResult<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            if !text.ends_with('\n') {
                stdout.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

fn with_threads<R>(threads: usize, f: impl FnOnce() -> CliResult<R> + Send) -> CliResult<R>
where
    R: Send,
{
    if threads == 0 {
        return Err(CliError::Usage("--threads must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot build thread pool: {e}")))?
        .install(f)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Bench(a) => {
            let cfg = BenchConfig {
                shapes: bench::parse_shapes(&a.shapes).map_err(CliError::Usage)?,
                repeats: a.repeats,
                warmup: a.warmup,
                kernel: a.kernel,
                seed: a.seed,
                precision: a.precision,
                mode: a.mode,
                threads: resolve_threads(a.threads)?,
            };
            let report = bench::run_bench(&cfg)?;
            write_output(&report.render(a.format)?, a.out.as_ref())?;
            for o in report.ordering.iter().filter(|o| !o.holds) {
                eprintln!("note: ordering {} does not hold for {}", o.expected, o.shape);
            }
            Ok(())
        }
        Command::Check(a) => {
            let suite = match (a.spectral, a.conv, a.grad, a.transfer) {
                (true, ..) => Suite::Spectral,
                (_, true, ..) => Suite::Conv,
                (_, _, true, _) => Suite::Grad,
                (.., true) => Suite::Transfer,
                _ => a.suite,
            };
            let fault = a.corrupt_vjp.then_some(VjpFault::FlipAngleSign);
            let outcomes = with_threads(a.threads, || Ok(check::run_suite(suite, a.seed, fault)))?;
            for o in &outcomes {
                println!("{o}");
            }
            let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
            if failed.is_empty() {
                println!("all {} checks passed", outcomes.len());
                Ok(())
            } else {
                Err(CliError::Verification(failed.join(", ")))
            }
        }
        Command::TrainDemo(a) => {
            let cfg = TrainConfig { steps: a.steps, lr: a.lr, seed: a.seed, ..Default::default() };
            let trace = with_threads(a.threads, || {
                train::train_demo(&cfg, |step, loss| eprintln!("step {step:4}  loss {loss:.6}"))
            })?;
            write_output(&trace.to_json()?, a.out.as_ref())
        }
        Command::Export(a) => {
            let cfg = ExportConfig {
                out: a.out,
                from: a.from,
                seed: a.seed,
                out_channels: a.out_channels,
                in_channels: a.in_channels,
                kernel: a.kernel,
                rotate: a.rotate,
                axis: a.axis,
            };
            for r in archive::export(&cfg)? {
                eprintln!("wrote {} {:?}", r.name, r.shape);
            }
            Ok(())
        }
        Command::Import(a) => {
            let records = archive::import(&a.path, a.out.as_deref())?;
            let text = match a.format {
                OutputFormat::Json => serde_json::to_string_pretty(&records)?,
                OutputFormat::Csv => {
                    let mut s = String::from("name,shape,l2_norm\n");
                    for r in &records {
                        let shape: Vec<String> = r.shape.iter().map(usize::to_string).collect();
                        s.push_str(&format!("{},{},{:e}\n", r.name, shape.join("x"), r.l2_norm));
                    }
                    s
                }
            };
            write_output(&text, None)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
