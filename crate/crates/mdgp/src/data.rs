//! Dataset ingestion, standardization, and synthetic-data generators.
//!
//! Datasets are row-major over a [`CovariateSpace`]: continuous cells parse
//! as floats, categorical cells as labels enumerated in first-appearance
//! order (the mapping is persisted in the space so later files must use the
//! same levels). Continuous covariates and real responses are standardized
//! to zero mean and unit sample variance before modelling; the recorded
//! transform is reapplied to test data and inverted on emitted predictions.
//!
//! The longitudinal generator draws an additive ground truth from the exact
//! GP prior `k = alpha_1^2 k_EQ(age; 2) + alpha_2^2 k_EQ(age; 1) k_ZS(z)`
//! over nine individuals in three groups, then assembles responses as
//! `y = 100 + 10 (f + eps)` with `eps ~ N(0, 0.5^2)` (or beta-binomial
//! counts through a logit link for the count-data variant). Individuals 1-6
//! form the training set and 7-9 the test set, so test groups are observed
//! but test individuals are not.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DVector;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::exact::mvn_sample;
use crate::kernel::{
    kernel_matrix, BaseKernel, CovariateSpace, DimSpec, HyperParams, KernelExpr, KernelTerm, Value,
};
use crate::obs::{ObsModel, Response};

/// Covariate column kind, before labels are known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Categorical,
}

/// Which response columns a CSV carries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResponseSchema {
    /// Covariates only (prediction inputs for a Gaussian model).
    None,
    /// One real-valued column.
    Real { column: String },
    /// Success and trial counts.
    Counts { successes: String, trials: String },
    /// Trial counts only (prediction inputs for a count model).
    TrialsOnly { trials: String },
}

/// Declares how to type a CSV's columns.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSchema {
    pub covariates: Vec<(String, ColumnKind)>,
    pub response: ResponseSchema,
}

/// Recorded standardization transform: per-dimension `(mean, sd)` for
/// continuous covariates, plus the response transform for real responses.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Standardization {
    /// Indexed by covariate dimension; `None` for categorical dimensions.
    pub continuous: Vec<Option<(f64, f64)>>,
    pub response: Option<(f64, f64)>,
}

impl Standardization {
    pub fn forward_x(&self, dim: usize, v: f64) -> f64 {
        match self.continuous[dim] {
            Some((m, s)) => (v - m) / s,
            None => v,
        }
    }

    pub fn inverse_x(&self, dim: usize, v: f64) -> f64 {
        match self.continuous[dim] {
            Some((m, s)) => v * s + m,
            None => v,
        }
    }

    pub fn forward_y(&self, v: f64) -> f64 {
        match self.response {
            Some((m, s)) => (v - m) / s,
            None => v,
        }
    }

    pub fn inverse_y(&self, v: f64) -> f64 {
        match self.response {
            Some((m, s)) => v * s + m,
            None => v,
        }
    }

    /// Sd of the response transform (1 when no transform is recorded); the
    /// log-density change of variables divides densities by this.
    pub fn response_sd(&self) -> f64 {
        self.response.map_or(1.0, |(_, s)| s)
    }
}

/// A typed, row-major dataset over a covariate space.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub space: CovariateSpace,
    pub points: Vec<Vec<Value>>,
    pub response: Option<Vec<Response>>,
    /// Trial counts for count-model prediction inputs; populated from the
    /// response when it holds counts.
    pub trials: Option<Vec<u64>>,
    /// Present once `standardize` or `apply_standardization` has run.
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn new(
        space: CovariateSpace,
        points: Vec<Vec<Value>>,
        response: Option<Vec<Response>>,
    ) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if p.len() != space.len() {
                return Err(Error::Data(format!(
                    "row {i} has {} covariates, expected {}",
                    p.len(),
                    space.len()
                )));
            }
        }
        if let Some(r) = &response {
            if r.len() != points.len() {
                return Err(Error::Data(format!(
                    "{} responses for {} rows",
                    r.len(),
                    points.len()
                )));
            }
        }
        let trials = response.as_ref().and_then(|resp| {
            resp.iter()
                .map(|r| match r {
                    Response::Counts { trials, .. } => Some(*trials),
                    Response::Real(_) => None,
                })
                .collect()
        });
        Ok(Self {
            space,
            points,
            response,
            trials,
            standardization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Loads a CSV, building the covariate space from the data: categorical
    /// levels are enumerated in first-appearance order.
    pub fn from_csv(path: impl AsRef<Path>, schema: &DataSchema) -> Result<Self> {
        let rows = read_rows(path.as_ref(), schema)?;
        let mut labels: Vec<Vec<String>> = vec![Vec::new(); schema.covariates.len()];
        for row in &rows.cells {
            for (d, (_, kind)) in schema.covariates.iter().enumerate() {
                if *kind == ColumnKind::Categorical && !labels[d].contains(&row[d]) {
                    labels[d].push(row[d].clone());
                }
            }
        }
        let dims = schema
            .covariates
            .iter()
            .zip(&labels)
            .map(|((name, kind), lab)| match kind {
                ColumnKind::Continuous => DimSpec::Continuous { name: name.clone() },
                ColumnKind::Categorical => DimSpec::Categorical {
                    name: name.clone(),
                    labels: lab.clone(),
                },
            })
            .collect();
        let space = CovariateSpace::new(dims)?;
        Self::typed_from_rows(space, rows, schema)
    }

    /// Loads a CSV against an existing space (prediction time): every
    /// categorical cell must be a level seen at training.
    pub fn from_csv_with_space(
        path: impl AsRef<Path>,
        schema: &DataSchema,
        space: &CovariateSpace,
    ) -> Result<Self> {
        if schema.covariates.len() != space.len() {
            return Err(Error::Data(format!(
                "schema has {} covariates but the model space has {}",
                schema.covariates.len(),
                space.len()
            )));
        }
        let rows = read_rows(path.as_ref(), schema)?;
        Self::typed_from_rows(space.clone(), rows, schema)
    }

    fn typed_from_rows(space: CovariateSpace, rows: RawRows, schema: &DataSchema) -> Result<Self> {
        let mut points = Vec::with_capacity(rows.cells.len());
        for (i, row) in rows.cells.iter().enumerate() {
            let mut point = Vec::with_capacity(space.len());
            for (d, cell) in row.iter().enumerate() {
                let value = match space.dim(d) {
                    DimSpec::Continuous { name } => {
                        let v: f64 = cell.parse().map_err(|_| {
                            Error::Data(format!(
                                "row {i}, column `{name}`: cannot parse `{cell}` as a number"
                            ))
                        })?;
                        Value::Real(v)
                    }
                    DimSpec::Categorical { name, .. } => {
                        let labels = space.labels(d)?;
                        let idx = labels.iter().position(|l| l == cell).ok_or_else(|| {
                            Error::Data(format!(
                                "row {i}, column `{name}`: level `{cell}` was not seen at training"
                            ))
                        })?;
                        Value::Cat(idx)
                    }
                };
                point.push(value);
            }
            points.push(point);
        }
        let response = match (&schema.response, rows.response) {
            (ResponseSchema::None, _) | (ResponseSchema::TrialsOnly { .. }, _) => None,
            (_, Some(r)) => Some(r),
            (_, None) => None,
        };
        let mut ds = Self::new(space, points, response)?;
        if ds.trials.is_none() {
            ds.trials = rows.trials_only;
        }
        Ok(ds)
    }

    /// Writes the dataset with canonical response headers (`y` for real
    /// responses, `successes`/`trials` for counts); categorical cells are
    /// written as their labels, continuous cells round-trip exactly.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        let mut header: Vec<String> = self
            .space
            .dims()
            .iter()
            .map(|d| d.name().to_string())
            .collect();
        match self.response.as_deref() {
            Some([Response::Real(_), ..]) => header.push("y".into()),
            Some([Response::Counts { .. }, ..]) => {
                header.push("successes".into());
                header.push("trials".into());
            }
            _ => {}
        }
        w.write_record(&header)?;
        for (i, point) in self.points.iter().enumerate() {
            let mut record = Vec::with_capacity(header.len());
            for (d, v) in point.iter().enumerate() {
                match v {
                    Value::Real(x) => record.push(x.to_string()),
                    Value::Cat(c) => record.push(self.space.labels(d)?[*c].clone()),
                }
            }
            if let Some(resp) = &self.response {
                match resp[i] {
                    Response::Real(y) => record.push(y.to_string()),
                    Response::Counts { successes, trials } => {
                        record.push(successes.to_string());
                        record.push(trials.to_string());
                    }
                }
            }
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Standardizes continuous covariates and any real response to zero mean
    /// and unit sample variance (in place), recording the transform.
    pub fn standardize(&mut self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Data("cannot standardize an empty dataset".into()));
        }
        let mut continuous = vec![None; self.space.len()];
        for d in 0..self.space.len() {
            if !self.space.dim(d).is_continuous() {
                continue;
            }
            let vals: Vec<f64> = self
                .points
                .iter()
                .map(|p| match p[d] {
                    Value::Real(v) => v,
                    Value::Cat(_) => unreachable!("typed column"),
                })
                .collect();
            continuous[d] = Some(mean_sd(&vals, self.space.dim(d).name())?);
        }
        let response = match self.response.as_deref() {
            Some(resp) if matches!(resp.first(), Some(Response::Real(_))) => {
                let vals: Vec<f64> = resp
                    .iter()
                    .map(|r| match r {
                        Response::Real(v) => *v,
                        Response::Counts { .. } => unreachable!("mixed response kinds"),
                    })
                    .collect();
                Some(mean_sd(&vals, "response")?)
            }
            _ => None,
        };
        self.apply_standardization(&Standardization {
            continuous,
            response,
        })
    }

    /// Applies an existing transform (training metadata) to this dataset.
    pub fn apply_standardization(&mut self, std: &Standardization) -> Result<()> {
        if std.continuous.len() != self.space.len() {
            return Err(Error::Data(
                "standardization metadata does not match the covariate space".into(),
            ));
        }
        for p in &mut self.points {
            for (d, v) in p.iter_mut().enumerate() {
                if let Value::Real(x) = v {
                    *x = std.forward_x(d, *x);
                }
            }
        }
        if let Some(resp) = &mut self.response {
            if std.response.is_some() {
                for r in resp.iter_mut() {
                    if let Response::Real(v) = r {
                        *v = std.forward_y(*v);
                    }
                }
            }
        }
        self.standardization = Some(std.clone());
        Ok(())
    }

    /// Per-dimension half-range `max(|min|, |max|)` of the (current) values;
    /// zero for categorical dimensions. Feeds the basis box size.
    pub fn half_ranges(&self) -> Vec<f64> {
        let mut out = vec![0.0f64; self.space.len()];
        for p in &self.points {
            for (d, v) in p.iter().enumerate() {
                if let Value::Real(x) = v {
                    out[d] = out[d].max(x.abs());
                }
            }
        }
        out
    }

    /// The response as a dense vector (real responses only).
    pub fn response_vector(&self) -> Result<DVector<f64>> {
        let resp = self
            .response
            .as_ref()
            .ok_or_else(|| Error::Data("dataset has no response column".into()))?;
        let vals: Result<Vec<f64>> = resp
            .iter()
            .map(|r| match r {
                Response::Real(v) => Ok(*v),
                Response::Counts { .. } => Err(Error::Data(
                    "count responses have no dense-vector form".into(),
                )),
            })
            .collect();
        Ok(DVector::from_vec(vals?))
    }
}

fn mean_sd(vals: &[f64], what: &str) -> Result<(f64, f64)> {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return Err(Error::Data(format!(
            "`{what}` needs at least two values to standardize"
        )));
    }
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 {
        return Err(Error::Data(format!(
            "`{what}` has zero variance and cannot be standardized"
        )));
    }
    Ok((mean, var.sqrt()))
}

struct RawRows {
    cells: Vec<Vec<String>>,
    response: Option<Vec<Response>>,
    trials_only: Option<Vec<u64>>,
}

fn read_rows(path: &Path, schema: &DataSchema) -> Result<RawRows> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("column `{name}` not found in {}", path.display())))
    };
    let cov_idx: Vec<usize> = schema
        .covariates
        .iter()
        .map(|(name, _)| col_index(name))
        .collect::<Result<_>>()?;
    enum RespIdx {
        None,
        Real(usize),
        Counts(usize, usize),
        TrialsOnly(usize),
    }
    let resp_idx = match &schema.response {
        ResponseSchema::None => RespIdx::None,
        ResponseSchema::Real { column } => RespIdx::Real(col_index(column)?),
        ResponseSchema::Counts { successes, trials } => {
            RespIdx::Counts(col_index(successes)?, col_index(trials)?)
        }
        ResponseSchema::TrialsOnly { trials } => RespIdx::TrialsOnly(col_index(trials)?),
    };

    let mut cells = Vec::new();
    let mut response = Vec::new();
    let mut trials_only = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let get = |c: usize| -> Result<&str> {
            let v = record.get(c).unwrap_or("");
            if v.trim().is_empty() {
                return Err(Error::Data(format!(
                    "row {i}, column `{}`: missing value",
                    headers.get(c).unwrap_or("?")
                )));
            }
            Ok(v.trim())
        };
        cells.push(
            cov_idx
                .iter()
                .map(|&c| get(c).map(str::to_string))
                .collect::<Result<Vec<_>>>()?,
        );
        match resp_idx {
            RespIdx::None => {}
            RespIdx::Real(c) => {
                let v: f64 = get(c)?.parse().map_err(|_| {
                    Error::Data(format!(
                        "row {i}: cannot parse response `{}`",
                        record.get(c).unwrap_or("")
                    ))
                })?;
                response.push(Response::Real(v));
            }
            RespIdx::Counts(cs, ct) => {
                let s: u64 = get(cs)?.parse().map_err(|_| {
                    Error::Data(format!(
                        "row {i}: bad success count `{}`",
                        record.get(cs).unwrap_or("")
                    ))
                })?;
                let t: u64 = get(ct)?.parse().map_err(|_| {
                    Error::Data(format!(
                        "row {i}: bad trial count `{}`",
                        record.get(ct).unwrap_or("")
                    ))
                })?;
                if s > t {
                    return Err(Error::Data(format!(
                        "row {i}: {s} successes out of {t} trials"
                    )));
                }
                response.push(Response::Counts {
                    successes: s,
                    trials: t,
                });
            }
            RespIdx::TrialsOnly(ct) => {
                let t: u64 = get(ct)?.parse().map_err(|_| {
                    Error::Data(format!(
                        "row {i}: bad trial count `{}`",
                        record.get(ct).unwrap_or("")
                    ))
                })?;
                trials_only.push(t);
            }
        }
    }
    Ok(RawRows {
        cells,
        response: if response.is_empty() {
            None
        } else {
            Some(response)
        },
        trials_only: if trials_only.is_empty() {
            None
        } else {
            Some(trials_only)
        },
    })
}

/// A simulated train/test pair with the latent ground truth attached.
#[derive(Debug, Clone)]
pub struct SimulatedExperiment {
    pub train: Dataset,
    pub test: Dataset,
    pub truth_train: DVector<f64>,
    pub truth_test: DVector<f64>,
    /// The generating model, `y ~ gp(age) + gp(age) * zs(z)`.
    pub expr: KernelExpr,
}

/// The longitudinal covariate space: continuous `age`, three-level group `z`.
pub fn experiment_space() -> CovariateSpace {
    CovariateSpace::new(vec![
        DimSpec::Continuous { name: "age".into() },
        DimSpec::Categorical {
            name: "z".into(),
            labels: vec!["1".into(), "2".into(), "3".into()],
        },
    ])
    .expect("static space is valid")
}

/// The longitudinal model structure: `gp(age) + gp(age)*zs(z)`.
pub fn experiment_expr(space: &CovariateSpace) -> KernelExpr {
    KernelExpr::new(
        vec![
            KernelTerm {
                continuous: vec![0],
                categorical: vec![],
            },
            KernelTerm {
                continuous: vec![0],
                categorical: vec![BaseKernel::Zs { dim: 1 }],
            },
        ],
        space,
    )
    .expect("static expression is valid")
}

/// Draws covariates and the latent truth shared by both generators: ages
/// uniform on [0, 10], individuals 1-9 with group `1 + (id-1) mod 3`, the
/// first six individuals forming the training block.
fn simulate_latents(
    n_train: usize,
    n_test: usize,
    rng: &mut StdRng,
) -> Result<(CovariateSpace, KernelExpr, Vec<Vec<Value>>, DVector<f64>)> {
    if n_train == 0 || n_train % 6 != 0 {
        return Err(Error::Data(format!(
            "training size must be a positive multiple of 6 (one block per individual), got {n_train}"
        )));
    }
    if n_test == 0 || n_test % 3 != 0 {
        return Err(Error::Data(format!(
            "test size must be a positive multiple of 3 (one block per individual), got {n_test}"
        )));
    }
    let space = experiment_space();
    let expr = experiment_expr(&space);
    let mut points = Vec::with_capacity(n_train + n_test);
    for id in 1..=9usize {
        let count = if id <= 6 { n_train / 6 } else { n_test / 3 };
        let group = (id - 1) % 3;
        for _ in 0..count {
            points.push(vec![
                Value::Real(rng.random::<f64>() * 10.0),
                Value::Cat(group),
            ]);
        }
    }
    let params = HyperParams {
        magnitudes: vec![1.0, 1.0],
        lengthscales: vec![vec![2.0], vec![1.0]],
        obs: ObsModel::Gaussian { sigma: 1.0 },
    };
    let k = kernel_matrix(&expr, &params, &space, &points)?;
    let f = mvn_sample(&DVector::zeros(points.len()), &k, rng)?;
    Ok((space, expr, points, f))
}

fn split_experiment(
    space: CovariateSpace,
    expr: KernelExpr,
    points: Vec<Vec<Value>>,
    f: DVector<f64>,
    responses: Vec<Response>,
    n_train: usize,
) -> Result<SimulatedExperiment> {
    let test_points = points[n_train..].to_vec();
    let train_points = points[..n_train].to_vec();
    let (train_resp, test_resp) = {
        let mut r = responses;
        let test = r.split_off(n_train);
        (r, test)
    };
    let truth_train = f.rows(0, n_train).into_owned();
    let truth_test = f.rows(n_train, f.len() - n_train).into_owned();
    Ok(SimulatedExperiment {
        train: Dataset::new(space.clone(), train_points, Some(train_resp))?,
        test: Dataset::new(space, test_points, Some(test_resp))?,
        truth_train,
        truth_test,
        expr,
    })
}

/// Longitudinal Gaussian generator: `y = 100 + 10 (f + eps)`,
/// `eps ~ N(0, 0.5^2)`.
pub fn simulate_experiment1(
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<SimulatedExperiment> {
    let mut rng = StdRng::seed_from_u64(seed);
    let (space, expr, points, f) = simulate_latents(n_train, n_test, &mut rng)?;
    let responses: Vec<Response> = f
        .iter()
        .map(|&fi| {
            let eps: f64 = StandardNormal.sample(&mut rng);
            Response::Real(100.0 + 10.0 * (fi + 0.5 * eps))
        })
        .collect();
    split_experiment(space, expr, points, f, responses, n_train)
}

/// Count-data variant: `y_i ~ BetaBinomial(trials, inv_logit(f_i), gamma)`
/// with zero intercept.
pub fn simulate_experiment1_counts(
    n_train: usize,
    n_test: usize,
    trials: u64,
    gamma: f64,
    seed: u64,
) -> Result<SimulatedExperiment> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Data(format!(
            "overdispersion gamma must lie in (0, 1), got {gamma}"
        )));
    }
    if trials == 0 {
        return Err(Error::Data("trial count must be positive".into()));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let (space, expr, points, f) = simulate_latents(n_train, n_test, &mut rng)?;
    let model = ObsModel::BetaBinomial {
        gamma,
        intercept: 0.0,
    };
    let responses: Vec<Response> = f
        .iter()
        .map(|&fi| model.sample_predictive(fi, Some(trials), &mut rng))
        .collect::<Result<_>>()?;
    split_experiment(space, expr, points, f, responses, n_train)
}

/// Group-to-individual map used by the generators, exposed for reporting:
/// individual `id` (1-based) carries group label index `(id-1) % 3`.
pub fn experiment_group_of(id: usize) -> usize {
    (id - 1) % 3
}

/// Convenience: level labels seen in a column of raw string data, in
/// first-appearance order (used when assembling spaces by hand).
pub fn first_appearance_levels<'a, I: IntoIterator<Item = &'a str>>(values: I) -> Vec<String> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for v in values {
        if seen.insert(v.to_string(), ()).is_none() {
            out.push(v.to_string());
        }
    }
    out
}
