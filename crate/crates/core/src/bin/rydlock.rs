use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rydlock::scenario::{cmd_adev, cmd_run, cmd_scan, cmd_transfer, LoadedScenario, Outputs};
use rydlock::servo::FidelityMode;
use rydlock::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "rydlock", version, about = "Three-step Rydberg laser lock simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the scenario seed.
    #[arg(long, value_parser = clap::value_parser!(u64).range(0..=i64::MAX as u64))]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Servo fidelity: envelope or waveform.
    #[arg(long)]
    mode: Option<FidelityMode>,
    /// Exit with status 2 if any lock is lost.
    #[arg(long)]
    strict: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Third-step lineshape and calibrated error curve.
    Scan(Common),
    /// Closed-loop run, counter readings and Allan deviations.
    Run(Common),
    /// Lock-offset sweep and transfer factors.
    Transfer {
        #[command(flatten)]
        common: Common,
        /// Swept channel, 1 or 2.
        #[arg(long)]
        channel: Option<u8>,
        /// Comma-separated sweep levels, Hz.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        levels: Option<Vec<f64>>,
    },
    /// Allan deviation of an existing counter CSV.
    Adev {
        /// Counter CSV with columns t_s,<label>_hz,...
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Largest tau, s.
        #[arg(long)]
        max_tau: Option<f64>,
        /// Remove a linear trend before analysis.
        #[arg(long)]
        detrend: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => EXIT_IO,
        Error::Config(_) | Error::InvalidParameter { .. } | Error::Csv(_) | Error::Counter(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn load(c: &Common) -> Result<LoadedScenario, Error> {
    let mut l = LoadedScenario::from_path(&c.config)?;
    if let Some(seed) = c.seed {
        l = l.with_seed(seed);
    }
    if let Some(mode) = c.mode {
        l = l.with_mode(mode)?;
    }
    Ok(l)
}

fn write(outputs: &Outputs) -> Result<(), Error> {
    outputs.write()?;
    eprintln!("wrote {} files to {}", outputs.files.len(), outputs.dir.display());
    Ok(())
}

fn warn(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: Result<u8, Error> = (|| match cli.command {
        Command::Scan(c) => {
            let l = load(&c)?;
            let r = cmd_scan(&l, c.out.as_deref())?;
            warn(&r.warnings);
            write(&r.outputs)?;
            println!(
                "zero crossing {:.1} Hz, calibrated slope {:.4} mV/MHz",
                r.zero_crossing,
                r.calibrated_slope * 1e9
            );
            Ok(0)
        }
        Command::Run(c) => {
            let l = load(&c)?;
            let strict = c.strict || l.scenario.strict;
            let r = cmd_run(&l, c.out.as_deref())?;
            warn(&r.warnings);
            write(&r.outputs)?;
            for i in 0..3 {
                if let (Some(s1), Some(smax)) = (r.sigma_1s[i], r.max_sigma_1e3[i]) {
                    println!(
                        "ch{}: sigma(1 s) = {:.2} kHz, max sigma(tau <= 1e3 s) = {:.2} kHz",
                        i + 1,
                        s1 / 1e3,
                        smax / 1e3
                    );
                }
            }
            Ok(if strict && r.lock_lost { EXIT_RUNTIME } else { 0 })
        }
        Command::Transfer { common, channel, levels } => {
            let l = load(&common)?;
            let r = cmd_transfer(&l, channel, levels.as_deref(), common.out.as_deref())?;
            write(&r.outputs)?;
            for (name, f) in &r.fits {
                let (lo, hi) = f.ci();
                println!("{name}: slope {:.5} (95% CI {lo:.5} .. {hi:.5})", f.slope);
            }
            for n in &r.notes {
                println!("note: {n}");
            }
            let strict = common.strict || l.scenario.strict;
            Ok(if strict && !r.excluded.is_empty() { EXIT_RUNTIME } else { 0 })
        }
        Command::Adev {
            input,
            out,
            max_tau,
            detrend,
        } => {
            let r = cmd_adev(&input, max_tau, detrend, &out)?;
            warn(&r.warnings);
            write(&r.outputs)?;
            Ok(0)
        }
    })();
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
