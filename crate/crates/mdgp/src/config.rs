//! Run configuration: the TOML document that drives every CLI command.
//!
//! One file names the data columns, the model formula, the basis resolution
//! (`num_basis` functions per continuous factor on a box scaled to `scale`
//! times each covariate's half-range), the priors, and the sampler settings.
//! Unknown keys are rejected everywhere so typos fail fast instead of
//! silently falling back to defaults. Relative paths in the file (training
//! data, custom kernel matrices, output directory) are resolved against the
//! directory containing the config, not the process working directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::basis::BasisConfig;
use crate::data::{ColumnKind, DataSchema, ResponseSchema};
use crate::error::{Error, Result};
use crate::formula::CustomMatrices;
use crate::inference::{PriorSpec, SamplerConfig};
use crate::obs::ObsKind;

/// One covariate column declaration, in dataset column order.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateDecl {
    pub name: String,
    pub kind: ColumnKind,
}

/// Response column names. Anything unset falls back to a default derived
/// from the likelihood: the formula's left-hand side for a Gaussian model,
/// `successes`/`trials` for a beta-binomial one.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResponseColumns {
    /// Real-valued response column (Gaussian likelihood only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    /// Success-count column (beta-binomial likelihood only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub successes: Option<String>,
    /// Trial-count column (beta-binomial likelihood only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials: Option<String>,
}

/// Parsed and validated contents of a run-config file.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Model formula, e.g. `y ~ gp(age) + gp(age)*zs(z)`.
    pub formula: String,
    /// Observation model.
    pub likelihood: ObsKind,
    /// Covariate columns in dataset order.
    pub covariates: Vec<CovariateDecl>,
    /// Basis functions per continuous factor.
    #[serde(default = "default_num_basis")]
    pub num_basis: usize,
    /// Domain scaling factor: the expansion box is `scale` times the
    /// half-range of each standardized continuous covariate.
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Seed for sampling and any downstream randomness.
    #[serde(default)]
    pub seed: u64,
    /// Training data CSV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Where fit artifacts are written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Response column name overrides.
    #[serde(default)]
    pub response: ResponseColumns,
    /// Prior hyperparameter overrides.
    #[serde(default)]
    pub priors: PriorSpec,
    /// Sampler settings.
    #[serde(default)]
    pub sampler: SamplerConfig,
    /// Custom categorical kernel matrices: kernel name -> CSV path
    /// (C rows x C columns, no header).
    #[serde(default)]
    pub kernels: BTreeMap<String, PathBuf>,
}

fn default_num_basis() -> usize {
    16
}

fn default_scale() -> f64 {
    1.5
}

impl RunConfig {
    /// Parses a TOML document and validates it.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("{}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read `{}`: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(base) = path.parent() {
            cfg.anchor_paths(base);
        }
        Ok(cfg)
    }

    /// Prefixes every relative path in the config with `base`.
    pub fn anchor_paths(&mut self, base: &Path) {
        let anchor = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.data.as_mut() {
            anchor(p);
        }
        if let Some(p) = self.output_dir.as_mut() {
            anchor(p);
        }
        for p in self.kernels.values_mut() {
            anchor(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.covariates.is_empty() {
            return Err(Error::Config(
                "at least one covariate must be declared".into(),
            ));
        }
        for (i, c) in self.covariates.iter().enumerate() {
            if c.name.is_empty() {
                return Err(Error::Config(format!("covariate {i} has an empty name")));
            }
            if self.covariates[..i].iter().any(|prev| prev.name == c.name) {
                return Err(Error::Config(format!(
                    "covariate `{}` is declared twice",
                    c.name
                )));
            }
        }
        self.basis_config()?;
        self.priors.validate()?;
        self.sampler.validate()?;
        if self.sampler.seed != 0 {
            return Err(Error::Config(
                "set the top-level `seed`; the sampler inherits it".into(),
            ));
        }
        self.formula_response()?;
        match self.likelihood {
            ObsKind::Gaussian => {
                if self.response.successes.is_some() || self.response.trials.is_some() {
                    return Err(Error::Config(
                        "response.successes/trials are count columns; a gaussian \
                         likelihood takes response.column"
                            .into(),
                    ));
                }
            }
            ObsKind::BetaBinomial => {
                if self.response.column.is_some() {
                    return Err(Error::Config(
                        "response.column is a real-valued column; a beta_binomial \
                         likelihood takes response.successes and response.trials"
                            .into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Basis settings as consumed by the feature-map builder.
    pub fn basis_config(&self) -> Result<BasisConfig> {
        BasisConfig::new(self.num_basis, self.scale)
    }

    /// The formula's left-hand side (the response name).
    pub fn formula_response(&self) -> Result<&str> {
        let (lhs, _) = self
            .formula
            .split_once('~')
            .ok_or_else(|| Error::Formula(format!("missing `~` in `{}`", self.formula)))?;
        let lhs = lhs.trim();
        if lhs.is_empty() {
            return Err(Error::Formula(format!(
                "empty response name in `{}`",
                self.formula
            )));
        }
        Ok(lhs)
    }

    /// Response columns for training data, with defaults filled in.
    pub fn response_schema(&self) -> Result<ResponseSchema> {
        Ok(match self.likelihood {
            ObsKind::Gaussian => ResponseSchema::Real {
                column: match &self.response.column {
                    Some(c) => c.clone(),
                    None => self.formula_response()?.to_string(),
                },
            },
            ObsKind::BetaBinomial => ResponseSchema::Counts {
                successes: self
                    .response
                    .successes
                    .clone()
                    .unwrap_or_else(|| "successes".into()),
                trials: self
                    .response
                    .trials
                    .clone()
                    .unwrap_or_else(|| "trials".into()),
            },
        })
    }

    /// Column schema for training data.
    pub fn train_schema(&self) -> Result<DataSchema> {
        Ok(DataSchema {
            covariates: self
                .covariates
                .iter()
                .map(|c| (c.name.clone(), c.kind))
                .collect(),
            response: self.response_schema()?,
        })
    }

    /// Column schema for prediction inputs: covariates only, plus the trial
    /// counts a beta-binomial model needs to emit predictive counts.
    pub fn predict_schema(&self) -> DataSchema {
        let response = match self.likelihood {
            ObsKind::Gaussian => ResponseSchema::None,
            ObsKind::BetaBinomial => ResponseSchema::TrialsOnly {
                trials: self
                    .response
                    .trials
                    .clone()
                    .unwrap_or_else(|| "trials".into()),
            },
        };
        DataSchema {
            covariates: self
                .covariates
                .iter()
                .map(|c| (c.name.clone(), c.kind))
                .collect(),
            response,
        }
    }

    /// Loads every custom kernel matrix named in the config.
    pub fn load_custom_matrices(&self) -> Result<CustomMatrices> {
        let mut out = CustomMatrices::new();
        for (name, path) in &self.kernels {
            let matrix = read_kernel_matrix(path).map_err(|e| {
                Error::Config(format!("custom kernel `{name}` ({}): {e}", path.display()))
            })?;
            out.insert(name.clone(), matrix);
        }
        Ok(out)
    }
}

/// Reads a square numeric matrix from a headerless CSV file.
pub fn read_kernel_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path.as_ref())
        .map_err(|e| Error::Data(format!("{e}")))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let mut row = Vec::with_capacity(record.len());
        for (j, cell) in record.iter().enumerate() {
            let value: f64 = cell.trim().parse().map_err(|_| {
                Error::Data(format!(
                    "row {}, column {}: `{cell}` is not a number",
                    i + 1,
                    j + 1
                ))
            })?;
            row.push(value);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Data(format!(
                    "row {} has {} columns, expected {}",
                    i + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data("matrix file is empty".into()));
    }
    if rows.len() != rows[0].len() {
        return Err(Error::Data(format!(
            "matrix is {}x{}, expected square",
            rows.len(),
            rows[0].len()
        )));
    }
    let n = rows.len();
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}
