use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use oamlink::harness::{emit_report, read_fidelity_points, run_scenario, sweep, LinkScenario, SweepParam};
use oamlink::security::{fidelity_threshold, fit_fidelity_model, FidelityModel, REFERENCE_C};
use oamlink::Result;

#[derive(Parser)]
#[command(name = "oamlink", version, about = "OAM QKD link simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its report.
    Run {
        /// Preset name (`lab`, `campus`) or scenario JSON file.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Override the number of realizations.
        #[arg(long)]
        realizations: Option<usize>,
    },
    /// Run a scenario over several values of one parameter.
    Sweep {
        #[arg(long)]
        scenario: String,
        /// `d_over_r0` or `cn2`.
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        realizations: Option<usize>,
    },
    /// Fidelity above which a d-dimensional channel yields key.
    Threshold {
        #[arg(long)]
        d: usize,
    },
    /// Fit the fidelity-versus-D/r0 model to a CSV of `d_over_r0,fidelity`.
    Fit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "B")]
        model: FidelityModel,
    },
    /// Print a preset as scenario JSON.
    Preset { name: String },
}

fn load(spec: &str, seed: Option<u64>, realizations: Option<usize>) -> Result<LinkScenario> {
    let mut s = LinkScenario::load(spec)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    if let Some(n) = realizations {
        s.n_realizations = n;
    }
    s.validate()?;
    Ok(s)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            scenario,
            seed,
            out,
            realizations,
        } => {
            let s = load(&scenario, seed, realizations)?;
            let report = run_scenario(&s)?;
            for path in emit_report(&report, &out)? {
                println!("{}", path.display());
            }
            for v in &report.verdicts {
                println!(
                    "{}: {} F = {:.4} (threshold {:.4}, d = {}) {}",
                    v.label,
                    v.basis,
                    v.mean_fidelity,
                    v.threshold,
                    v.dimension,
                    if v.secure { "secure" } else { "insecure" }
                );
            }
        }
        Command::Sweep {
            scenario,
            param,
            values,
            out,
            seed,
            realizations,
        } => {
            let s = load(&scenario, seed, realizations)?;
            let reports = sweep(&s, param, &values)?;
            let summary = out.join("sweep.csv");
            std::fs::create_dir_all(&out).map_err(|e| oamlink::Error::Io {
                path: out.clone(),
                source: e,
            })?;
            let mut rows = vec!["value,d_over_r0,fidelity,std,fraction_above_threshold".to_string()];
            for (v, r) in values.iter().zip(&reports) {
                emit_report(r, &out.join(format!("value_{v}")))?;
                let st = &r.results.oam;
                rows.push(format!(
                    "{v},{},{},{},{}",
                    r.d_over_r0, st.mean, st.std, st.fraction_above_threshold
                ));
                println!("{v}: OAM F = {:.4} ± {:.4}", st.mean, st.std);
            }
            std::fs::write(&summary, rows.join("\n") + "\n").map_err(|e| oamlink::Error::Io {
                path: summary.clone(),
                source: e,
            })?;
            println!("{}", summary.display());
        }
        Command::Threshold { d } => {
            println!("{:.6}", fidelity_threshold(d)?);
        }
        Command::Fit { input, model } => {
            let points = read_fidelity_points(&input)?;
            let c = fit_fidelity_model(&points, model)?;
            println!("c = {c:.6} (model {model:?}; reference {REFERENCE_C})");
        }
        Command::Preset { name } => {
            println!("{}", oamlink::harness::preset(&name)?.to_json());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
