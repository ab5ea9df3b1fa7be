//! Command-line front end: `fit`, `predict`, `simulate`, `compare`, `bench`.
//!
//! Every failure prints a one-line JSON object (`{"kind", "error"}`) to
//! stderr and exits 1. A fit whose split R-hat exceeds 1.05 on any parameter
//! still writes its artifacts but exits 3: the run finished, convergence is
//! suspect. `MDGP_THREADS` caps the sampler's worker threads.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mdgp::config::RunConfig;
use mdgp::driver::{
    run_bench, run_compare, run_fit, run_predict, run_simulate, BenchOptions, CompareOptions,
    FitOptions,
};
use mdgp::Error;

#[derive(Parser)]
#[command(
    name = "mdgp",
    version,
    about = "Reduced-rank Gaussian-process models over mixed continuous and categorical covariates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model from a run config and write a model directory.
    Fit {
        /// Run config TOML.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the chain count.
        #[arg(long)]
        chains: Option<usize>,
        /// Override the output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Override the basis size.
        #[arg(long = "B")]
        num_basis: Option<usize>,
        /// Override the domain scaling factor.
        #[arg(long = "c")]
        scale: Option<f64>,
        /// Gaussian only: sample hyperparameters against the marginalized
        /// likelihood, then reattach exact conditional coefficient draws.
        #[arg(long)]
        marginalized: bool,
        /// Also write the training feature matrix as features.csv.
        #[arg(long)]
        dump_features: bool,
    },
    /// Predict at new covariates from a fitted model directory.
    Predict {
        /// Model directory written by `fit`.
        #[arg(long)]
        model: PathBuf,
        /// Covariate CSV (plus a trials column for count models).
        #[arg(long)]
        data: PathBuf,
        /// Where to write the prediction tables (default: the model directory).
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Simulate the longitudinal benchmark dataset and a starter config.
    Simulate {
        #[arg(long, default_value_t = 60)]
        n_train: usize,
        #[arg(long, default_value_t = 30)]
        n_test: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "mdgp-sim")]
        output_dir: PathBuf,
    },
    /// Score exact GP predictions against the reduced-rank model on
    /// simulated data, sweeping the basis size.
    Compare {
        /// Comma-separated basis sizes.
        #[arg(long = "B", value_delimiter = ',', default_value = "8,16,32")]
        b_values: Vec<usize>,
        #[arg(long, default_value_t = 90)]
        n_train: usize,
        #[arg(long, default_value_t = 30)]
        n_test: usize,
        /// Comma-separated simulation seeds; metrics are averaged.
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seed: Vec<u64>,
        /// Domain scaling factor.
        #[arg(long = "c", default_value_t = 1.5)]
        scale: f64,
        /// Conditional coefficient draws per basis size.
        #[arg(long, default_value_t = 4000)]
        draws: usize,
        #[arg(long, default_value = "mdgp-compare")]
        output_dir: PathBuf,
    },
    /// Time full fits across dataset sizes.
    Bench {
        /// Comma-separated dataset sizes.
        #[arg(long = "n", value_delimiter = ',', default_value = "250,500,1000")]
        n_values: Vec<usize>,
        #[arg(long = "B", default_value_t = 16)]
        num_basis: usize,
        /// Fixed-work HMC iterations per chain (32 leapfrog steps each).
        #[arg(long, default_value_t = 200)]
        iters: usize,
        #[arg(long, default_value_t = 2)]
        chains: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "mdgp-bench")]
        output_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            let payload = serde_json::json!({ "kind": kind(&err), "error": err.to_string() });
            eprintln!("{payload}");
            ExitCode::from(1)
        }
    }
}

fn kind(err: &Error) -> &'static str {
    match err {
        Error::Formula(_) => "formula",
        Error::Model(_) => "model",
        Error::Data(_) => "data",
        Error::Numerical(_) => "numerical",
        Error::Sampler(_) => "sampler",
        Error::Config(_) => "config",
        Error::Io(_) => "io",
        Error::Csv(_) => "csv",
        Error::Json(_) => "json",
    }
}

fn run(cli: Cli) -> mdgp::Result<ExitCode> {
    match cli.command {
        Command::Fit {
            config,
            seed,
            chains,
            output_dir,
            num_basis,
            scale,
            marginalized,
            dump_features,
        } => {
            let mut cfg = RunConfig::from_path(&config)?;
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = chains {
                cfg.sampler.chains = v;
            }
            if let Some(v) = output_dir {
                cfg.output_dir = Some(v);
            }
            if let Some(v) = num_basis {
                cfg.num_basis = v;
            }
            if let Some(v) = scale {
                cfg.scale = v;
            }
            let outcome = run_fit(
                &cfg,
                &FitOptions {
                    marginalized,
                    dump_features,
                },
            )?;
            let report = &outcome.report;
            println!("model directory: {}", outcome.output_dir.display());
            println!(
                "{} points, {} feature columns, {:.1}s; max split R-hat {:.4}, \
                 min bulk ESS {:.0}, {} divergences",
                report.num_points,
                report.column_count,
                report.elapsed_seconds,
                report.max_rhat,
                report.min_ess,
                report.diagnostics.divergences,
            );
            for warning in &report.warnings {
                eprintln!("warning: {warning}");
            }
            Ok(if outcome.converged {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(3)
            })
        }
        Command::Predict {
            model,
            data,
            output_dir,
        } => {
            let out = run_predict(&model, &data, output_dir.as_deref())?;
            println!(
                "{} draws at {} points -> {} and {}",
                out.num_draws,
                out.num_points,
                out.predictions_path.display(),
                out.summary_path.display(),
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate {
            n_train,
            n_test,
            seed,
            output_dir,
        } => {
            let out = run_simulate(n_train, n_test, seed, &output_dir)?;
            println!(
                "wrote {}, {}, {}, and {}",
                out.train_path.display(),
                out.test_path.display(),
                out.truth_path.display(),
                out.config_path.display(),
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare {
            b_values,
            n_train,
            n_test,
            seed,
            scale,
            draws,
            output_dir,
        } => {
            let rows = run_compare(&CompareOptions {
                n_train,
                n_test,
                b_values,
                scale,
                seeds: seed,
                draws,
                out_dir: Some(output_dir.clone()),
            })?;
            println!(
                "{:>6} {:>14} {:>14} {:>10} {:>12} {:>10} {:>10}",
                "B", "MLPD(approx)", "MLPD(exact)", "gap", "max|K~-K|", "t_approx", "t_exact"
            );
            for r in &rows {
                println!(
                    "{:>6} {:>14.4} {:>14.4} {:>10.4} {:>12.3e} {:>9.2}s {:>9.2}s",
                    r.num_basis,
                    r.mlpd_approx,
                    r.mlpd_exact,
                    r.gap,
                    r.kernel_error,
                    r.secs_approx,
                    r.secs_exact,
                );
            }
            println!(
                "report: {}",
                output_dir.join(mdgp::driver::COMPARE_FILE).display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench {
            n_values,
            num_basis,
            iters,
            chains,
            seed,
            output_dir,
        } => {
            let rows = run_bench(&BenchOptions {
                n_values,
                num_basis,
                iters,
                chains,
                seed,
                out_dir: Some(output_dir.clone()),
            })?;
            println!("{:>8} {:>9} {:>10}", "N", "columns", "seconds");
            for r in &rows {
                println!("{:>8} {:>9} {:>10.3}", r.n, r.columns, r.seconds);
            }
            for pair in rows.windows(2) {
                println!(
                    "t({})/t({}) = {:.2}",
                    pair[1].n,
                    pair[0].n,
                    pair[1].seconds / pair[0].seconds
                );
            }
            println!(
                "report: {}",
                output_dir.join(mdgp::driver::BENCH_FILE).display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}
