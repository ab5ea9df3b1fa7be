//! End-to-end runs behind the command-line interface.
//!
//! [`run_fit`] turns a run config plus a training CSV into a self-contained
//! model directory:
//!
//! - `config.toml` — the effective configuration, overrides applied
//! - `model.json` — covariate space, standardization, parameter layout
//! - `feature_basis.json` — the data-independent feature expansion
//! - `draws.csv` — constrained posterior draws, one row per draw
//! - `diagnostics.json` — split R-hat, bulk ESS, and sampler counters
//!
//! [`run_predict`] needs only that directory plus a covariate CSV. It emits
//! a long table of per-draw values — the latent total, each additive
//! component, and the posterior predictive — and a `mean +/- 2 sd` summary,
//! all on the original data scale. The response mean belongs to the total,
//! not to any one component, so components are scale-transformed only and
//! sum to `total - response_mean` draw by draw.
//!
//! [`run_compare`] measures the cost of the basis approximation in
//! isolation: it simulates the longitudinal experiment, pins the
//! hyperparameters at the generating values (rescaled to the standardized
//! data), and scores exact GP predictions against the reduced-rank model at
//! several basis sizes. The exact side uses the closed-form predictive; the
//! approximate side mixes the predictive density over conditional
//! coefficient draws, so the reported gap converges to the true divergence
//! between the two models as the draw count grows. [`run_bench`] times
//! fixed-work HMC across dataset sizes to expose the linear cost in `N`.
//!
//! Every run is a pure function of its config and seed: rerunning with the
//! same inputs reproduces identical artifacts bit for bit.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::basis::{approx_kernel_matrix, BasisConfig, ColumnKey, FeatureBasis, FeatureMap};
use crate::config::{CovariateDecl, RunConfig};
use crate::data::{
    experiment_expr, experiment_space, simulate_experiment1, ColumnKind, Dataset, Standardization,
};
use crate::error::{Error, Result};
use crate::exact::{exact_predict, TrainFactor};
use crate::formula::parse_formula;
use crate::inference::{
    hmc_sample_fixed, sample_posterior, sample_posterior_marginalized, ChainStats, Diagnostics,
    ParamLayout, Posterior, PosteriorDraws, PriorSpec, SamplerConfig, WoodburyState,
};
use crate::kernel::{kernel_cross_matrix, kernel_matrix, CovariateSpace, HyperParams, Value};
use crate::obs::{ObsKind, ObsModel};
use crate::predict::{draws_component_at, draws_f_at, draws_predictive, mlpd};

pub const CONFIG_FILE: &str = "config.toml";
pub const MODEL_FILE: &str = "model.json";
pub const BASIS_FILE: &str = "feature_basis.json";
pub const DRAWS_FILE: &str = "draws.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const FEATURES_FILE: &str = "features.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const PREDICTION_SUMMARY_FILE: &str = "prediction_summary.csv";
pub const COMPARE_FILE: &str = "compare.csv";
pub const BENCH_FILE: &str = "bench.csv";

/// Threshold above which a split R-hat flags a convergence warning.
pub const RHAT_WARN: f64 = 1.05;

/// Everything prediction needs besides the feature basis and the draws.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelRecord {
    pub formula: String,
    pub likelihood: ObsKind,
    pub space: CovariateSpace,
    pub standardization: Standardization,
    pub layout: ParamLayout,
    pub num_points: usize,
}

/// Convergence report written as `diagnostics.json`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FitReport {
    pub parameter_names: Vec<String>,
    pub diagnostics: Diagnostics,
    pub chain_stats: Vec<ChainStats>,
    pub max_rhat: f64,
    pub min_ess: f64,
    /// Active feature columns `M`.
    pub column_count: usize,
    /// `M` had zero-eigenvalue columns been retained.
    pub full_column_count: usize,
    pub num_points: usize,
    pub elapsed_seconds: f64,
    pub warnings: Vec<String>,
}

/// Fit-time switches that live on the command line, not in the config file.
#[derive(Debug, Clone, Copy, Default)]
pub struct FitOptions {
    /// Gaussian-only: sample hyperparameters against the marginalized
    /// likelihood instead of running the joint sampler.
    pub marginalized: bool,
    /// Also write the training feature matrix as `features.csv`.
    pub dump_features: bool,
}

/// Result of [`run_fit`].
#[derive(Debug)]
pub struct FitOutcome {
    pub output_dir: PathBuf,
    pub report: FitReport,
    /// False when any split R-hat exceeds [`RHAT_WARN`].
    pub converged: bool,
}

/// Fits the model described by `cfg` and writes the model directory.
pub fn run_fit(cfg: &RunConfig, opts: &FitOptions) -> Result<FitOutcome> {
    cfg.validate()?;
    if opts.marginalized && cfg.likelihood != ObsKind::Gaussian {
        return Err(Error::Config(
            "the marginalized sampler integrates coefficients out of a gaussian \
             likelihood; it cannot run a beta_binomial model"
                .into(),
        ));
    }
    let data_path = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("fit needs a `data` path in the config".into()))?;
    let start = Instant::now();

    let mut train = Dataset::from_csv(data_path, &cfg.train_schema()?)?;
    train.standardize()?;
    let standardization = train.standardization.clone().expect("just standardized");
    let custom = cfg.load_custom_matrices()?;
    let formula = parse_formula(&cfg.formula, &train.space, &custom)?;
    let fm = FeatureMap::build(
        &formula.expr,
        &train.space,
        &cfg.basis_config()?,
        &train.half_ranges(),
        &train.points,
    )?;

    let mut sampler = cfg.sampler.clone();
    sampler.seed = cfg.seed;
    let draws = if opts.marginalized {
        sample_posterior_marginalized(&fm, &train.response_vector()?, cfg.priors.clone(), &sampler)?
    } else {
        let responses = train
            .response
            .clone()
            .expect("training schema has a response");
        sample_posterior(&fm, responses, cfg.likelihood, cfg.priors.clone(), &sampler)?
    };
    let diagnostics = draws.diagnostics()?;

    let mut warnings = Vec::new();
    for (name, rhat) in draws.names.iter().zip(&diagnostics.split_rhat) {
        if *rhat > RHAT_WARN {
            warnings.push(format!(
                "split R-hat {rhat:.3} for {name} exceeds {RHAT_WARN}"
            ));
        }
    }
    let converged = warnings.is_empty();
    if diagnostics.divergences > 0 {
        warnings.push(format!(
            "{} divergent transitions after warmup",
            diagnostics.divergences
        ));
    }
    if diagnostics.max_treedepth_hits > 0 {
        warnings.push(format!(
            "{} iterations hit the maximum tree depth",
            diagnostics.max_treedepth_hits
        ));
    }

    let report = FitReport {
        parameter_names: draws.names.clone(),
        max_rhat: diagnostics.max_rhat(),
        min_ess: diagnostics.min_ess(),
        diagnostics,
        chain_stats: draws.stats.clone(),
        column_count: fm.basis.column_count(),
        full_column_count: fm.basis.full_column_count(),
        num_points: train.len(),
        elapsed_seconds: start.elapsed().as_secs_f64(),
        warnings,
    };

    let output_dir = cfg
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("mdgp-fit"));
    std::fs::create_dir_all(&output_dir)?;
    let toml_text = toml::to_string_pretty(cfg).map_err(|e| Error::Config(format!("{e}")))?;
    std::fs::write(output_dir.join(CONFIG_FILE), toml_text)?;
    let record = ModelRecord {
        formula: cfg.formula.clone(),
        likelihood: cfg.likelihood,
        space: train.space.clone(),
        standardization,
        layout: draws.layout.clone(),
        num_points: train.len(),
    };
    write_json(&output_dir.join(MODEL_FILE), &record)?;
    write_json(&output_dir.join(BASIS_FILE), &fm.basis)?;
    write_draws_csv(&output_dir.join(DRAWS_FILE), &draws)?;
    write_json(&output_dir.join(DIAGNOSTICS_FILE), &report)?;
    if opts.dump_features {
        write_features_csv(&output_dir.join(FEATURES_FILE), &fm)?;
    }
    Ok(FitOutcome {
        output_dir,
        report,
        converged,
    })
}

/// Files written by [`run_predict`].
#[derive(Debug)]
pub struct PredictOutcome {
    pub predictions_path: PathBuf,
    pub summary_path: PathBuf,
    pub num_points: usize,
    pub num_draws: usize,
}

/// Predicts at the covariates in `input` from a saved model directory.
pub fn run_predict(
    model_dir: &Path,
    input: &Path,
    out_dir: Option<&Path>,
) -> Result<PredictOutcome> {
    let cfg = RunConfig::from_path(model_dir.join(CONFIG_FILE))?;
    let record: ModelRecord = read_json(&model_dir.join(MODEL_FILE))?;
    let basis: FeatureBasis = read_json(&model_dir.join(BASIS_FILE))?;
    let draws = load_draws_csv(&model_dir.join(DRAWS_FILE), &record.layout)?;

    let mut points = Dataset::from_csv_with_space(input, &cfg.predict_schema(), &record.space)?;
    points.apply_standardization(&record.standardization)?;

    let total = draws_f_at(&basis, &record.space, &points.points, &draws)?;
    let components: Vec<DMatrix<f64>> = (0..basis.term_ranges.len())
        .map(|t| draws_component_at(&basis, &record.space, &points.points, &draws, t))
        .collect::<Result<_>>()?;
    let predictive = draws_predictive(
        &basis,
        &record.space,
        &points.points,
        &draws,
        points.trials.as_deref(),
        cfg.seed,
    )?;

    // Back to the original response scale. Components carry no intercept:
    // scaling without the mean shift keeps their sum equal to the centered
    // total. Beta-binomial models record no response transform, so latent
    // values stay on the logit scale and predictive values are counts.
    let (y_mean, y_sd) = record.standardization.response.unwrap_or((0.0, 1.0));

    let out = out_dir.unwrap_or(model_dir);
    std::fs::create_dir_all(out)?;
    let predictions_path = out.join(PREDICTIONS_FILE);
    let mut w = csv::Writer::from_path(&predictions_path)?;
    w.write_record(["draw", "point_id", "kind", "value"])?;
    let (s, p) = (total.nrows(), total.ncols());
    for draw in 0..s {
        for point in 0..p {
            let mut push = |kind: &str, value: f64| {
                w.write_record([
                    draw.to_string(),
                    point.to_string(),
                    kind.to_string(),
                    format!("{value}"),
                ])
            };
            push("total", y_mean + y_sd * total[(draw, point)])?;
            for (k, comp) in components.iter().enumerate() {
                push(&format!("component.{k}"), y_sd * comp[(draw, point)])?;
            }
            push("predictive", y_mean + y_sd * predictive[(draw, point)])?;
        }
    }
    w.flush()?;

    let summary_path = out.join(PREDICTION_SUMMARY_FILE);
    let mut w = csv::Writer::from_path(&summary_path)?;
    w.write_record(["point_id", "kind", "mean", "sd", "lower", "upper"])?;
    let mut summarize = |point: usize, kind: &str, column: &[f64]| {
        let mean = column.iter().sum::<f64>() / column.len() as f64;
        let var = column.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
            / (column.len() as f64 - 1.0).max(1.0);
        let sd = var.sqrt();
        w.write_record([
            point.to_string(),
            kind.to_string(),
            format!("{mean}"),
            format!("{sd}"),
            format!("{}", mean - 2.0 * sd),
            format!("{}", mean + 2.0 * sd),
        ])
    };
    for point in 0..p {
        let col: Vec<f64> = total
            .column(point)
            .iter()
            .map(|v| y_mean + y_sd * v)
            .collect();
        summarize(point, "total", &col)?;
        for (k, comp) in components.iter().enumerate() {
            let col: Vec<f64> = comp.column(point).iter().map(|v| y_sd * v).collect();
            summarize(point, &format!("component.{k}"), &col)?;
        }
        let col: Vec<f64> = predictive
            .column(point)
            .iter()
            .map(|v| y_mean + y_sd * v)
            .collect();
        summarize(point, "predictive", &col)?;
    }
    w.flush()?;
    Ok(PredictOutcome {
        predictions_path,
        summary_path,
        num_points: p,
        num_draws: s,
    })
}

/// Files written by [`run_simulate`].
#[derive(Debug)]
pub struct SimulateOutcome {
    pub train_path: PathBuf,
    pub test_path: PathBuf,
    pub truth_path: PathBuf,
    pub config_path: PathBuf,
}

/// Simulates the longitudinal experiment and writes `train.csv`,
/// `test.csv`, the latent truth, and a ready-to-run `run.toml`.
pub fn run_simulate(
    n_train: usize,
    n_test: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<SimulateOutcome> {
    let sim = simulate_experiment1(n_train, n_test, seed)?;
    std::fs::create_dir_all(out_dir)?;
    let train_path = out_dir.join("train.csv");
    let test_path = out_dir.join("test.csv");
    sim.train.write_csv(&train_path)?;
    sim.test.write_csv(&test_path)?;

    let truth_path = out_dir.join("truth.csv");
    let mut w = csv::Writer::from_path(&truth_path)?;
    w.write_record(["role", "age", "z", "f"])?;
    let space = &sim.train.space;
    let mut write_rows = |role: &str, ds: &Dataset, f: &nalgebra::DVector<f64>| {
        for (i, point) in ds.points.iter().enumerate() {
            let age = match point[0] {
                Value::Real(x) => x,
                Value::Cat(_) => unreachable!("age is continuous"),
            };
            let z = match point[1] {
                Value::Cat(c) => space.labels(1)?[c].clone(),
                Value::Real(_) => unreachable!("z is categorical"),
            };
            w.write_record([role.to_string(), format!("{age}"), z, format!("{}", f[i])])?;
        }
        Ok::<(), Error>(())
    };
    write_rows("train", &sim.train, &sim.truth_train)?;
    write_rows("test", &sim.test, &sim.truth_test)?;
    w.flush()?;

    let cfg = RunConfig {
        formula: "y ~ gp(age) + gp(age)*zs(z)".into(),
        likelihood: ObsKind::Gaussian,
        covariates: vec![
            CovariateDecl {
                name: "age".into(),
                kind: ColumnKind::Continuous,
            },
            CovariateDecl {
                name: "z".into(),
                kind: ColumnKind::Categorical,
            },
        ],
        num_basis: 16,
        scale: 1.5,
        seed,
        data: Some(PathBuf::from("train.csv")),
        output_dir: Some(PathBuf::from("fit")),
        response: Default::default(),
        priors: PriorSpec::default(),
        sampler: SamplerConfig::default(),
        kernels: Default::default(),
    };
    let config_path = out_dir.join("run.toml");
    let text = toml::to_string_pretty(&cfg).map_err(|e| Error::Config(format!("{e}")))?;
    std::fs::write(&config_path, text)?;
    Ok(SimulateOutcome {
        train_path,
        test_path,
        truth_path,
        config_path,
    })
}

/// Settings for the exact-vs-approximate comparison.
#[derive(Debug, Clone)]
pub struct CompareOptions {
    pub n_train: usize,
    pub n_test: usize,
    /// Basis sizes to evaluate, in the order reported.
    pub b_values: Vec<usize>,
    pub scale: f64,
    /// Simulation seeds; metrics are averaged across them.
    pub seeds: Vec<u64>,
    /// Conditional coefficient draws per basis size.
    pub draws: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self {
            n_train: 90,
            n_test: 30,
            b_values: vec![8, 16, 32],
            scale: 1.5,
            seeds: vec![1],
            draws: 4000,
            out_dir: None,
        }
    }
}

/// One row of the comparison table, averaged over seeds.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CompareRow {
    pub num_basis: usize,
    /// Mean log predictive density of the reduced-rank model (original scale).
    pub mlpd_approx: f64,
    /// Mean log predictive density of the exact GP (original scale).
    pub mlpd_exact: f64,
    /// Mean absolute MLPD difference.
    pub gap: f64,
    /// Max-abs error of the approximate train kernel matrix.
    pub kernel_error: f64,
    pub secs_approx: f64,
    pub secs_exact: f64,
}

/// Scores the exact GP against the reduced-rank approximation on simulated
/// data with hyperparameters pinned at the generating values, isolating
/// basis-approximation error from sampling noise.
pub fn run_compare(opts: &CompareOptions) -> Result<Vec<CompareRow>> {
    if opts.b_values.is_empty() || opts.seeds.is_empty() {
        return Err(Error::Config(
            "compare needs at least one basis size and one seed".into(),
        ));
    }
    if opts.draws < 2 {
        return Err(Error::Config(
            "compare needs at least two coefficient draws".into(),
        ));
    }
    let mut rows: Vec<CompareRow> = opts
        .b_values
        .iter()
        .map(|&b| CompareRow {
            num_basis: b,
            mlpd_approx: 0.0,
            mlpd_exact: 0.0,
            gap: 0.0,
            kernel_error: 0.0,
            secs_approx: 0.0,
            secs_exact: 0.0,
        })
        .collect();

    for &seed in &opts.seeds {
        let sim = simulate_experiment1(opts.n_train, opts.n_test, seed)?;
        let mut train = sim.train;
        train.standardize()?;
        let std = train.standardization.clone().expect("just standardized");
        let mut test = sim.test;
        test.apply_standardization(&std)?;

        // The generator draws f with unit magnitudes, lengthscales {2, 1} on
        // the raw age axis, and y = 100 + 10 (f + eps), eps ~ N(0, 0.5^2).
        // Under x' = (x - mx)/sx, y' = (y - my)/sy the same process has
        // magnitudes 10/sy, lengthscales {2/sx, 1/sx}, and noise sd 5/sy.
        let (_, sd_x) = std.continuous[0].expect("age is continuous");
        let (_, sd_y) = std.response.expect("gaussian response");
        let sigma = 5.0 / sd_y;
        let params = HyperParams {
            magnitudes: vec![10.0 / sd_y, 10.0 / sd_y],
            lengthscales: vec![vec![2.0 / sd_x], vec![1.0 / sd_x]],
            obs: ObsModel::Gaussian { sigma },
        };
        let y_train = train.response_vector()?;
        let y_test = test.response_vector()?;

        let exact_start = Instant::now();
        let k_train = kernel_matrix(&sim.expr, &params, &train.space, &train.points)?;
        let k_cross = kernel_cross_matrix(
            &sim.expr,
            &params,
            &train.space,
            &test.points,
            &train.points,
        )?;
        let k_test = kernel_matrix(&sim.expr, &params, &train.space, &test.points)?;
        let factor = TrainFactor::new(&k_train, sigma)?;
        let (mu, cov) = exact_predict(&k_cross, &k_test, &factor, &y_train)?;
        let mlpd_exact = (0..y_test.len())
            .map(|i| normal_logpdf(y_test[i], mu[i], cov[(i, i)] + sigma * sigma))
            .sum::<f64>()
            / y_test.len() as f64
            - sd_y.ln();
        let secs_exact = exact_start.elapsed().as_secs_f64();

        for (row, &b) in rows.iter_mut().zip(&opts.b_values) {
            let approx_start = Instant::now();
            let fm = FeatureMap::build(
                &sim.expr,
                &train.space,
                &BasisConfig::new(b, opts.scale)?,
                &train.half_ranges(),
                &train.points,
            )?;
            let state = WoodburyState::new(&fm, &y_train)?;
            let sqrt_delta = fm.basis.delta(&params)?.map(f64::sqrt);
            let m = fm.basis.column_count();
            let layout = ParamLayout::new(m, vec![1, 1], ObsKind::Gaussian);
            let names = layout.names();
            // Conditional coefficient draws at the pinned hyperparameters;
            // stream 7 keeps this RNG disjoint from the NUTS chains.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(7);
            let mut mat = DMatrix::zeros(opts.draws, layout.dim());
            for s in 0..opts.draws {
                let xi = state.sample_xi(&sqrt_delta, sigma, &mut rng)?;
                for j in 0..m {
                    mat[(s, j)] = xi[j];
                }
                for (j, &a) in params.magnitudes.iter().enumerate() {
                    mat[(s, layout.alpha_offset() + j)] = a;
                }
                let mut offset = layout.ell_offset();
                for ells in &params.lengthscales {
                    for &ell in ells {
                        mat[(s, offset)] = ell;
                        offset += 1;
                    }
                }
                mat[(s, layout.obs_offset())] = sigma;
            }
            let draws = PosteriorDraws {
                layout,
                names,
                chains: vec![mat],
                stats: Vec::new(),
            };
            let responses = test
                .response
                .as_ref()
                .expect("simulated test data has responses");
            let mlpd_approx = mlpd(
                &fm.basis,
                &train.space,
                &test.points,
                responses,
                &draws,
                true,
            )? - sd_y.ln();
            row.secs_approx += approx_start.elapsed().as_secs_f64();
            row.secs_exact += secs_exact;
            row.mlpd_approx += mlpd_approx;
            row.mlpd_exact += mlpd_exact;
            row.gap += (mlpd_approx - mlpd_exact).abs();
            row.kernel_error += (approx_kernel_matrix(&fm, &params)? - &k_train).amax();
        }
    }

    let count = opts.seeds.len() as f64;
    for row in &mut rows {
        row.mlpd_approx /= count;
        row.mlpd_exact /= count;
        row.gap /= count;
        row.kernel_error /= count;
        row.secs_approx /= count;
        row.secs_exact /= count;
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join(COMPARE_FILE))?;
        for row in &rows {
            w.serialize(row)?;
        }
        w.flush()?;
    }
    Ok(rows)
}

/// Settings for the runtime sweep.
#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub n_values: Vec<usize>,
    pub num_basis: usize,
    /// Fixed-work HMC iterations per chain.
    pub iters: usize,
    pub chains: usize,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            n_values: vec![250, 500, 1000],
            num_basis: 16,
            iters: 200,
            chains: 2,
            seed: 0,
            out_dir: None,
        }
    }
}

/// One timing measurement.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchRow {
    pub n: usize,
    /// Feature columns `M` of the fitted model.
    pub columns: usize,
    /// Wall-clock sampling time.
    pub seconds: f64,
}

/// Leapfrog steps per benchmark iteration. Fixed so that one iteration costs
/// the same number of gradient evaluations at every dataset size.
const BENCH_LEAPFROGS: usize = 32;

/// Benchmark integrator step size. Acceptance quality is irrelevant to the
/// timing (rejected trajectories cost the same work), so this only needs to
/// keep the integrator numerically sane.
const BENCH_STEP_SIZE: f64 = 0.01;

/// Times posterior sampling over a sweep of dataset sizes at a fixed basis
/// size and iteration budget. Each chain runs fixed-length HMC — exactly
/// `iters x 32` gradient evaluations — rather than the adaptive sampler,
/// whose data-dependent trajectory lengths would confound the measurement.
/// Per-evaluation cost is `O(N M)`, so the timings should grow linearly in
/// `N`. Chains run back-to-back on one thread: the result is a pure
/// single-stream cost, unaffected by core count.
pub fn run_bench(opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    if opts.n_values.is_empty() {
        return Err(Error::Config(
            "bench needs at least one dataset size".into(),
        ));
    }
    let mut rows = Vec::with_capacity(opts.n_values.len());
    for &n in &opts.n_values {
        let mut ds = bench_dataset(n, opts.seed)?;
        ds.standardize()?;
        let expr = experiment_expr(&ds.space);
        let fm = FeatureMap::build(
            &expr,
            &ds.space,
            &BasisConfig::new(opts.num_basis, 1.5)?,
            &ds.half_ranges(),
            &ds.points,
        )?;
        let responses = ds.response.clone().expect("bench data has responses");
        let post = Posterior::new(&fm, responses, ObsKind::Gaussian, PriorSpec::default())?;
        let start = Instant::now();
        for chain in 0..opts.chains {
            hmc_sample_fixed(
                &post,
                opts.iters,
                BENCH_LEAPFROGS,
                BENCH_STEP_SIZE,
                opts.seed.wrapping_add(chain as u64),
            )?;
        }
        rows.push(BenchRow {
            n,
            columns: fm.basis.column_count(),
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join(BENCH_FILE))?;
        for row in &rows {
            w.serialize(row)?;
        }
        w.flush()?;
    }
    Ok(rows)
}

/// Synthetic timing dataset over the experiment covariate space: smooth
/// signal plus noise, any size (the experiment simulator needs sizes
/// divisible by its group structure, which a runtime sweep should not).
fn bench_dataset(n: usize, seed: u64) -> Result<Dataset> {
    let space = experiment_space();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut responses = Vec::with_capacity(n);
    for i in 0..n {
        let age: f64 = rng.random_range(0.0..10.0);
        points.push(vec![Value::Real(age), Value::Cat(i % 3)]);
        let eps: f64 = StandardNormal.sample(&mut rng);
        responses.push(crate::obs::Response::Real(
            100.0 + 10.0 * ((0.6 * age).sin() + 0.5 * eps),
        ));
    }
    Dataset::new(space, points, Some(responses))
}

fn normal_logpdf(y: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (y - mean).powi(2) / var)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read `{}`: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_draws_csv(path: &Path, draws: &PosteriorDraws) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&draws.names)?;
    let stacked = draws.stacked();
    for i in 0..stacked.nrows() {
        let row: Vec<String> = (0..stacked.ncols())
            .map(|j| format!("{}", stacked[(i, j)]))
            .collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn load_draws_csv(path: &Path, layout: &ParamLayout) -> Result<PosteriorDraws> {
    let mut reader = csv::Reader::from_path(path)?;
    let names: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if names != layout.names() {
        return Err(Error::Data(format!(
            "draws file `{}` does not match the model layout",
            path.display()
        )));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let mut row = Vec::with_capacity(names.len());
        for (j, cell) in record.iter().enumerate() {
            row.push(cell.parse::<f64>().map_err(|_| {
                Error::Data(format!(
                    "draws row {}, column `{}`: `{cell}` is not a number",
                    i + 1,
                    names[j]
                ))
            })?);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data("draws file has no rows".into()));
    }
    let mat = DMatrix::from_fn(rows.len(), names.len(), |i, j| rows[i][j]);
    Ok(PosteriorDraws {
        layout: layout.clone(),
        names,
        chains: vec![mat],
        stats: Vec::new(),
    })
}

fn write_features_csv(path: &Path, fm: &FeatureMap) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> = fm.basis.columns.iter().map(column_name).collect();
    w.write_record(&header)?;
    for i in 0..fm.psi_dagger.nrows() {
        let row: Vec<String> = (0..fm.psi_dagger.ncols())
            .map(|j| format!("{}", fm.psi_dagger[(i, j)]))
            .collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn column_name(key: &ColumnKey) -> String {
    let mut s = format!("term{}", key.term);
    for b in &key.cont_index {
        s.push_str(&format!(".b{b}"));
    }
    for c in &key.cat_index {
        s.push_str(&format!(".c{c}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Simulate, shrink the sampler to test scale, and fit.
    fn quick_fit(dir: &Path, opts: &FitOptions) -> (RunConfig, FitOutcome) {
        run_simulate(12, 6, 17, dir).unwrap();
        let mut cfg = RunConfig::from_path(dir.join("run.toml")).unwrap();
        cfg.num_basis = 8;
        cfg.sampler.chains = 2;
        cfg.sampler.iters = 300;
        cfg.sampler.warmup = 150;
        let outcome = run_fit(&cfg, opts).unwrap();
        (cfg, outcome)
    }

    #[test]
    fn fit_writes_a_self_contained_model_directory() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, outcome) = quick_fit(dir.path(), &FitOptions::default());
        let model_dir = dir.path().join("fit");
        assert_eq!(
            outcome.output_dir, model_dir,
            "output dir comes from the config"
        );
        for file in [
            CONFIG_FILE,
            MODEL_FILE,
            BASIS_FILE,
            DRAWS_FILE,
            DIAGNOSTICS_FILE,
        ] {
            assert!(model_dir.join(file).exists(), "missing artifact {file}");
        }
        assert!(
            !model_dir.join(FEATURES_FILE).exists(),
            "features are only dumped on request"
        );

        let record: ModelRecord = read_json(&model_dir.join(MODEL_FILE)).unwrap();
        assert_eq!(record.likelihood, ObsKind::Gaussian);
        assert_eq!(record.num_points, 12);
        assert_eq!(record.layout.num_features, outcome.report.column_count);
        let basis: FeatureBasis = read_json(&model_dir.join(BASIS_FILE)).unwrap();
        assert_eq!(basis.column_count(), 8 + 8 * 2, "B + B(C-1) columns");
        assert_eq!(outcome.report.full_column_count, 8 + 8 * 3);

        let report: FitReport = read_json(&model_dir.join(DIAGNOSTICS_FILE)).unwrap();
        assert_eq!(report.parameter_names.len(), record.layout.dim());
        assert!(report.elapsed_seconds > 0.0);

        let reread = RunConfig::from_path(model_dir.join(CONFIG_FILE)).unwrap();
        assert_eq!(
            reread.num_basis, cfg.num_basis,
            "config copy reflects overrides"
        );
    }

    #[test]
    fn draws_csv_round_trips_bit_exactly() {
        let layout = ParamLayout::new(3, vec![1], ObsKind::Gaussian);
        let names = layout.names();
        let mut rng = StdRng::seed_from_u64(4);
        let mat = DMatrix::from_fn(5, layout.dim(), |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v.exp()
        });
        let draws = PosteriorDraws {
            layout: layout.clone(),
            names,
            chains: vec![mat.clone()],
            stats: Vec::new(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(DRAWS_FILE);
        write_draws_csv(&path, &draws).unwrap();
        let back = load_draws_csv(&path, &layout).unwrap();
        assert_eq!(back.stacked(), mat, "decimal text round-trip must be exact");

        let other = ParamLayout::new(4, vec![1], ObsKind::Gaussian);
        let err = load_draws_csv(&path, &other).unwrap_err();
        assert!(
            err.to_string().contains("does not match"),
            "unexpected message: {err}"
        );
    }

    #[test]
    fn predictions_come_back_on_the_original_scale() {
        let dir = tempfile::tempdir().unwrap();
        let (_, outcome) = quick_fit(dir.path(), &FitOptions::default());
        let out = run_predict(&outcome.output_dir, &dir.path().join("test.csv"), None).unwrap();
        assert_eq!(out.num_points, 6);
        assert_eq!(out.num_draws, 2 * 150);

        let record: ModelRecord = read_json(&outcome.output_dir.join(MODEL_FILE)).unwrap();
        let (y_mean, _) = record.standardization.response.unwrap();

        let mut reader = csv::Reader::from_path(&out.summary_path).unwrap();
        let mut means: std::collections::BTreeMap<(usize, String), f64> =
            std::collections::BTreeMap::new();
        for rec in reader.records() {
            let rec = rec.unwrap();
            let point: usize = rec[0].parse().unwrap();
            let mean: f64 = rec[2].parse().unwrap();
            assert!(
                mean.is_finite(),
                "non-finite summary for {} at {point}",
                &rec[1]
            );
            means.insert((point, rec[1].to_string()), mean);
        }
        assert_eq!(
            means.len(),
            6 * 4,
            "total, two components, predictive per point"
        );

        let mut grand_total = 0.0;
        for point in 0..6 {
            let total = means[&(point, "total".to_string())];
            let sum: f64 = (0..2)
                .map(|k| means[&(point, format!("component.{k}"))])
                .sum();
            assert!(
                (total - sum - y_mean).abs() < 1e-8,
                "components must sum to the centered total: point {point}, \
                 total {total}, component sum {sum}, response mean {y_mean}"
            );
            grand_total += total / 6.0;
        }
        assert!(
            (70.0..130.0).contains(&grand_total),
            "original-scale predictions should sit near the response mean, got {grand_total}"
        );
    }

    #[test]
    fn marginalized_fit_shares_the_joint_layout() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, joint) = quick_fit(
            dir.path(),
            &FitOptions {
                marginalized: false,
                dump_features: false,
            },
        );
        let mut marg_cfg = cfg.clone();
        marg_cfg.output_dir = Some(dir.path().join("fit-marginalized"));
        let marg = run_fit(
            &marg_cfg,
            &FitOptions {
                marginalized: true,
                dump_features: false,
            },
        )
        .unwrap();
        let joint_record: ModelRecord = read_json(&joint.output_dir.join(MODEL_FILE)).unwrap();
        let marg_record: ModelRecord = read_json(&marg.output_dir.join(MODEL_FILE)).unwrap();
        assert_eq!(
            joint_record.layout, marg_record.layout,
            "both samplers must expose the same parameter layout"
        );

        let mut bb = cfg;
        bb.likelihood = ObsKind::BetaBinomial;
        bb.response = Default::default();
        let err = run_fit(
            &bb,
            &FitOptions {
                marginalized: true,
                dump_features: false,
            },
        );
        assert!(
            err.is_err(),
            "marginalized sampling requires the gaussian likelihood"
        );
    }

    #[test]
    fn feature_dump_is_written_on_request() {
        let dir = tempfile::tempdir().unwrap();
        let (_, outcome) = quick_fit(
            dir.path(),
            &FitOptions {
                marginalized: false,
                dump_features: true,
            },
        );
        let path = outcome.output_dir.join(FEATURES_FILE);
        let mut reader = csv::Reader::from_path(&path).unwrap();
        let header = reader.headers().unwrap().clone();
        assert_eq!(header.len(), outcome.report.column_count);
        assert!(
            header[0].starts_with("term0.b1"),
            "unexpected first column {}",
            &header[0]
        );
        assert_eq!(reader.records().count(), 12, "one row per training point");
    }

    #[test]
    fn simulate_writes_a_runnable_starter_config() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_simulate(12, 6, 3, dir.path()).unwrap();
        let cfg = RunConfig::from_path(&out.config_path).unwrap();
        assert_eq!(
            cfg.data.as_deref(),
            Some(dir.path().join("train.csv").as_path())
        );
        assert_eq!(cfg.seed, 3);

        let mut reader = csv::Reader::from_path(&out.truth_path).unwrap();
        let roles: Vec<String> = reader
            .records()
            .map(|r| r.unwrap()[0].to_string())
            .collect();
        assert_eq!(roles.len(), 18, "truth covers train and test points");
        assert_eq!(roles.iter().filter(|r| *r == "train").count(), 12);

        assert!(
            run_simulate(13, 6, 3, dir.path()).is_err(),
            "divisibility is enforced"
        );
    }

    #[test]
    fn compare_tracks_the_basis_approximation_error() {
        let dir = tempfile::tempdir().unwrap();
        let opts = CompareOptions {
            n_train: 12,
            n_test: 6,
            b_values: vec![4, 16],
            seeds: vec![2],
            draws: 200,
            out_dir: Some(dir.path().to_path_buf()),
            ..CompareOptions::default()
        };
        let rows = run_compare(&opts).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(
            rows[1].kernel_error < rows[0].kernel_error,
            "kernel error should shrink from B=4 ({}) to B=16 ({})",
            rows[0].kernel_error,
            rows[1].kernel_error
        );
        for row in &rows {
            assert!(row.mlpd_approx.is_finite() && row.mlpd_exact.is_finite());
            assert!(row.gap >= 0.0);
        }
        assert!(dir.path().join(COMPARE_FILE).exists());
    }

    #[test]
    fn bench_times_every_requested_size() {
        let dir = tempfile::tempdir().unwrap();
        let opts = BenchOptions {
            n_values: vec![30, 60],
            num_basis: 4,
            iters: 60,
            chains: 1,
            seed: 0,
            out_dir: Some(dir.path().to_path_buf()),
        };
        let rows = run_bench(&opts).unwrap();
        assert_eq!(rows.len(), 2);
        for row in &rows {
            assert!(row.seconds > 0.0);
            assert_eq!(row.columns, 4 + 4 * 2);
        }
        assert!(dir.path().join(BENCH_FILE).exists());
    }
}
