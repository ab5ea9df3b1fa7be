//! Mixed-domain covariate spaces and sum-of-product kernel expressions.
//!
//! A model kernel is a sum of terms, each term a product of base kernels
//! over distinct covariate dimensions:
//!
//! ```text
//! k(x, x') = sum_j alpha_j^2  prod_q k_EQ(x_q, x'_q | ell_jq)  prod_r l_jr(z_r, z'_r)
//! ```
//!
//! Continuous factors are exponentiated-quadratic (EQ) kernels with unit
//! magnitude — the per-term magnitude `alpha_j` keeps products identifiable.
//! Categorical factors are scale-free kernels given by `C x C` symmetric
//! matrices: zero-sum (ZS), compound symmetry (CS), binary masks (BIN), or a
//! user-supplied matrix (CustomCat).
//!
//! Everything here evaluates kernels *exactly*; the low-rank feature
//! expansion lives in [`crate::basis`].

use std::collections::BTreeSet;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::obs::ObsModel;

/// One covariate dimension: a real-valued column or a categorical column
/// with a fixed, ordered set of category labels.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DimSpec {
    Continuous { name: String },
    Categorical { name: String, labels: Vec<String> },
}

impl DimSpec {
    pub fn name(&self) -> &str {
        match self {
            DimSpec::Continuous { name } => name,
            DimSpec::Categorical { name, .. } => name,
        }
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self, DimSpec::Continuous { .. })
    }
}

/// The ordered list of covariate dimensions a model is defined over.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CovariateSpace {
    dims: Vec<DimSpec>,
}

impl CovariateSpace {
    pub fn new(dims: Vec<DimSpec>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Model("covariate space has no dimensions".into()));
        }
        let mut seen = BTreeSet::new();
        for d in &dims {
            if d.name().is_empty() {
                return Err(Error::Model("empty covariate name".into()));
            }
            if !seen.insert(d.name().to_string()) {
                return Err(Error::Model(format!(
                    "duplicate covariate name `{}`",
                    d.name()
                )));
            }
            if let DimSpec::Categorical { name, labels } = d {
                if labels.len() < 2 {
                    return Err(Error::Model(format!(
                        "categorical covariate `{name}` needs at least 2 categories"
                    )));
                }
                let unique: BTreeSet<_> = labels.iter().collect();
                if unique.len() != labels.len() {
                    return Err(Error::Model(format!(
                        "categorical covariate `{name}` has duplicate labels"
                    )));
                }
            }
        }
        Ok(Self { dims })
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn dims(&self) -> &[DimSpec] {
        &self.dims
    }

    pub fn dim(&self, i: usize) -> &DimSpec {
        &self.dims[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.dims.iter().position(|d| d.name() == name)
    }

    /// Number of categories of a categorical dimension.
    pub fn categories(&self, dim: usize) -> Result<usize> {
        match self.dims.get(dim) {
            Some(DimSpec::Categorical { labels, .. }) => Ok(labels.len()),
            Some(DimSpec::Continuous { name }) => Err(Error::Model(format!(
                "covariate `{name}` is continuous, not categorical"
            ))),
            None => Err(Error::Model(format!("covariate index {dim} out of range"))),
        }
    }

    pub fn labels(&self, dim: usize) -> Result<&[String]> {
        match self.dims.get(dim) {
            Some(DimSpec::Categorical { labels, .. }) => Ok(labels),
            _ => Err(Error::Model(format!(
                "covariate index {dim} is not categorical"
            ))),
        }
    }
}

/// One covariate value; categorical values are 0-based level indices into
/// the dimension's label list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value {
    Real(f64),
    Cat(usize),
}

/// A base kernel attached to one covariate dimension.
///
/// `Eq` applies to continuous dimensions (its lengthscale is a hyperparameter
/// slot, not stored here). The rest apply to categorical dimensions:
///
/// * `Zs`: 1 on the diagonal, `-1/(C-1)` off it, so rows sum to zero.
/// * `Cs`: compound symmetry, `variance` on the diagonal and `rho` off it,
///   with `-variance/(C-1) <= rho <= variance` for positive semidefiniteness.
/// * `Bin`: outer product of the indicator of *unmasked* categories —
///   the kernel is 1 iff both values avoid every masked category.
/// * `CustomCat`: an arbitrary symmetric PSD matrix supplied by the user.
#[derive(Debug, Clone, PartialEq)]
pub enum BaseKernel {
    Eq { dim: usize },
    Zs { dim: usize },
    Cs { dim: usize, variance: f64, rho: f64 },
    Bin { dim: usize, masked: BTreeSet<usize> },
    CustomCat { dim: usize, matrix: DMatrix<f64> },
}

impl BaseKernel {
    pub fn dim(&self) -> usize {
        match self {
            BaseKernel::Eq { dim }
            | BaseKernel::Zs { dim }
            | BaseKernel::Cs { dim, .. }
            | BaseKernel::Bin { dim, .. }
            | BaseKernel::CustomCat { dim, .. } => *dim,
        }
    }

    pub fn is_categorical(&self) -> bool {
        !matches!(self, BaseKernel::Eq { .. })
    }

    pub fn validate(&self, space: &CovariateSpace) -> Result<()> {
        let dim = self.dim();
        let spec = space
            .dims
            .get(dim)
            .ok_or_else(|| Error::Model(format!("kernel dimension {dim} out of range")))?;
        match self {
            BaseKernel::Eq { .. } => {
                if !spec.is_continuous() {
                    return Err(Error::Model(format!(
                        "gp kernel needs a continuous covariate, `{}` is categorical",
                        spec.name()
                    )));
                }
            }
            _ => {
                if spec.is_continuous() {
                    return Err(Error::Model(format!(
                        "categorical kernel needs a categorical covariate, `{}` is continuous",
                        spec.name()
                    )));
                }
                let c = space.categories(dim)?;
                match self {
                    BaseKernel::Cs { variance, rho, .. } => {
                        if !(*variance > 0.0) {
                            return Err(Error::Model("cs kernel variance must be positive".into()));
                        }
                        let lo = -variance / (c as f64 - 1.0);
                        if !(*rho >= lo && *rho <= *variance) {
                            return Err(Error::Model(format!(
                                "cs kernel rho = {rho} outside PSD range [{lo}, {variance}]"
                            )));
                        }
                    }
                    BaseKernel::Bin { masked, .. } => {
                        if masked.is_empty() {
                            return Err(Error::Model(
                                "bin kernel needs at least one masked category".into(),
                            ));
                        }
                        if masked.len() >= c {
                            return Err(Error::Model("bin kernel masks every category".into()));
                        }
                        if let Some(&bad) = masked.iter().find(|&&m| m >= c) {
                            return Err(Error::Model(format!(
                                "bin kernel masks category index {bad}, but `{}` has {c} categories",
                                spec.name()
                            )));
                        }
                    }
                    BaseKernel::CustomCat { matrix, .. } => {
                        if matrix.nrows() != c || matrix.ncols() != c {
                            return Err(Error::Model(format!(
                                "custom kernel matrix for `{}` is {}x{}, expected {c}x{c}",
                                spec.name(),
                                matrix.nrows(),
                                matrix.ncols()
                            )));
                        }
                        let scale = matrix.amax().max(1e-300);
                        for i in 0..c {
                            for jx in 0..i {
                                if (matrix[(i, jx)] - matrix[(jx, i)]).abs() > 1e-8 * scale {
                                    return Err(Error::Model(format!(
                                        "custom kernel matrix for `{}` is not symmetric",
                                        spec.name()
                                    )));
                                }
                            }
                        }
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

/// One additive term: a product of EQ factors over `continuous` dimensions
/// (in lengthscale-slot order) and scale-free categorical factors, sharing a
/// single magnitude hyperparameter.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelTerm {
    pub continuous: Vec<usize>,
    pub categorical: Vec<BaseKernel>,
}

impl KernelTerm {
    pub fn num_continuous(&self) -> usize {
        self.continuous.len()
    }
}

/// A validated sum-of-product kernel expression.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelExpr {
    pub terms: Vec<KernelTerm>,
}

impl KernelExpr {
    pub fn new(terms: Vec<KernelTerm>, space: &CovariateSpace) -> Result<Self> {
        let expr = Self { terms };
        expr.validate(space)?;
        Ok(expr)
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn validate(&self, space: &CovariateSpace) -> Result<()> {
        if self.terms.is_empty() {
            return Err(Error::Model("kernel expression has no terms".into()));
        }
        for (j, term) in self.terms.iter().enumerate() {
            if term.continuous.is_empty() && term.categorical.is_empty() {
                return Err(Error::Model(format!("term {} has no factors", j + 1)));
            }
            let mut used = BTreeSet::new();
            for &dim in &term.continuous {
                BaseKernel::Eq { dim }.validate(space)?;
                if !used.insert(dim) {
                    return Err(Error::Model(format!(
                        "term {} uses covariate `{}` in more than one factor",
                        j + 1,
                        space.dim(dim).name()
                    )));
                }
            }
            for base in &term.categorical {
                if !base.is_categorical() {
                    return Err(Error::Model("continuous factor in categorical list".into()));
                }
                base.validate(space)?;
                if !used.insert(base.dim()) {
                    return Err(Error::Model(format!(
                        "term {} uses covariate `{}` in more than one factor",
                        j + 1,
                        space.dim(base.dim()).name()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// All model hyperparameters: per-term magnitudes `alpha_j`, per-continuous-
/// factor lengthscales `ell[j][q]`, and the observation model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub magnitudes: Vec<f64>,
    pub lengthscales: Vec<Vec<f64>>,
    pub obs: ObsModel,
}

impl HyperParams {
    /// Check the parameter shapes against an expression and positivity.
    pub fn validate_for(&self, expr: &KernelExpr) -> Result<()> {
        if self.magnitudes.len() != expr.terms.len() || self.lengthscales.len() != expr.terms.len()
        {
            return Err(Error::Model(format!(
                "expected {} per-term parameter entries, got {} magnitudes / {} lengthscale rows",
                expr.terms.len(),
                self.magnitudes.len(),
                self.lengthscales.len()
            )));
        }
        for (j, term) in expr.terms.iter().enumerate() {
            if self.lengthscales[j].len() != term.num_continuous() {
                return Err(Error::Model(format!(
                    "term {} has {} continuous factors but {} lengthscales",
                    j + 1,
                    term.num_continuous(),
                    self.lengthscales[j].len()
                )));
            }
            if !(self.magnitudes[j] > 0.0 && self.magnitudes[j].is_finite()) {
                return Err(Error::Model(format!(
                    "magnitude of term {} must be positive",
                    j + 1
                )));
            }
            for &l in &self.lengthscales[j] {
                if !(l > 0.0 && l.is_finite()) {
                    return Err(Error::Model(format!(
                        "lengthscale of term {} must be positive",
                        j + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Unit-magnitude EQ kernel value for a coordinate difference `r = x - x'`.
pub fn eq_kernel(r: f64, ell: f64) -> f64 {
    (-r * r / (2.0 * ell * ell)).exp()
}

/// The `C x C` matrix of a categorical base kernel.
pub fn categorical_matrix(base: &BaseKernel, space: &CovariateSpace) -> Result<DMatrix<f64>> {
    base.validate(space)?;
    let c = space.categories(base.dim())?;
    Ok(match base {
        BaseKernel::Zs { .. } => {
            let off = -1.0 / (c as f64 - 1.0);
            DMatrix::from_fn(c, c, |i, j| if i == j { 1.0 } else { off })
        }
        BaseKernel::Cs { variance, rho, .. } => {
            DMatrix::from_fn(c, c, |i, j| if i == j { *variance } else { *rho })
        }
        BaseKernel::Bin { masked, .. } => DMatrix::from_fn(c, c, |i, j| {
            if masked.contains(&i) || masked.contains(&j) {
                0.0
            } else {
                1.0
            }
        }),
        BaseKernel::CustomCat { matrix, .. } => {
            // Symmetrize so tiny asymmetries from file round-trips cannot leak
            // into eigendecompositions.
            0.5 * (matrix + matrix.transpose())
        }
        BaseKernel::Eq { .. } => unreachable!("validate rejects Eq"),
    })
}

fn real_at(x: &[Value], dim: usize, space: &CovariateSpace) -> Result<f64> {
    match x.get(dim) {
        Some(Value::Real(v)) => Ok(*v),
        Some(Value::Cat(_)) => Err(Error::Data(format!(
            "point has a categorical value where `{}` expects a real",
            space.dim(dim).name()
        ))),
        None => Err(Error::Data(format!("point is missing dimension {dim}"))),
    }
}

fn cat_at(x: &[Value], dim: usize, space: &CovariateSpace) -> Result<usize> {
    let c = space.categories(dim)?;
    match x.get(dim) {
        Some(Value::Cat(v)) if *v < c => Ok(*v),
        Some(Value::Cat(v)) => Err(Error::Data(format!(
            "category index {v} out of range for `{}` (C = {c})",
            space.dim(dim).name()
        ))),
        Some(Value::Real(_)) => Err(Error::Data(format!(
            "point has a real value where `{}` expects a category",
            space.dim(dim).name()
        ))),
        None => Err(Error::Data(format!("point is missing dimension {dim}"))),
    }
}

/// Exact value of one additive term `j` of the kernel at a pair of points.
pub fn eval_term(
    expr: &KernelExpr,
    j: usize,
    params: &HyperParams,
    space: &CovariateSpace,
    x: &[Value],
    x_prime: &[Value],
) -> Result<f64> {
    let term = expr
        .terms
        .get(j)
        .ok_or_else(|| Error::Model(format!("term index {j} out of range")))?;
    let alpha = params.magnitudes[j];
    let mut v = alpha * alpha;
    for (q, &dim) in term.continuous.iter().enumerate() {
        let r = real_at(x, dim, space)? - real_at(x_prime, dim, space)?;
        v *= eq_kernel(r, params.lengthscales[j][q]);
    }
    for base in &term.categorical {
        let dim = base.dim();
        let (zi, zj) = (cat_at(x, dim, space)?, cat_at(x_prime, dim, space)?);
        let c = space.categories(dim)? as f64;
        v *= match base {
            BaseKernel::Zs { .. } => {
                if zi == zj {
                    1.0
                } else {
                    -1.0 / (c - 1.0)
                }
            }
            BaseKernel::Cs { variance, rho, .. } => {
                if zi == zj {
                    *variance
                } else {
                    *rho
                }
            }
            BaseKernel::Bin { masked, .. } => {
                if masked.contains(&zi) || masked.contains(&zj) {
                    0.0
                } else {
                    1.0
                }
            }
            BaseKernel::CustomCat { matrix, .. } => matrix[(zi, zj)],
            BaseKernel::Eq { .. } => unreachable!("validate rejects Eq in categorical list"),
        };
    }
    Ok(v)
}

/// Exact kernel value `k(x, x')` under the full sum-of-product expression.
pub fn eval_kernel(
    expr: &KernelExpr,
    params: &HyperParams,
    space: &CovariateSpace,
    x: &[Value],
    x_prime: &[Value],
) -> Result<f64> {
    params.validate_for(expr)?;
    if x.len() != space.len() || x_prime.len() != space.len() {
        return Err(Error::Data(format!(
            "points must have {} dimensions, got {} and {}",
            space.len(),
            x.len(),
            x_prime.len()
        )));
    }
    let mut total = 0.0;
    for j in 0..expr.terms.len() {
        total += eval_term(expr, j, params, space, x, x_prime)?;
    }
    Ok(total)
}

/// Exact cross-kernel matrix `K[i, j] = k(a_i, b_j)` between two point sets.
pub fn kernel_cross_matrix(
    expr: &KernelExpr,
    params: &HyperParams,
    space: &CovariateSpace,
    a: &[Vec<Value>],
    b: &[Vec<Value>],
) -> Result<DMatrix<f64>> {
    let mut k = DMatrix::zeros(a.len(), b.len());
    for (i, xi) in a.iter().enumerate() {
        for (j, xj) in b.iter().enumerate() {
            k[(i, j)] = eval_kernel(expr, params, space, xi, xj)?;
        }
    }
    Ok(k)
}

/// Exact kernel matrix over one point set (symmetric by construction).
pub fn kernel_matrix(
    expr: &KernelExpr,
    params: &HyperParams,
    space: &CovariateSpace,
    points: &[Vec<Value>],
) -> Result<DMatrix<f64>> {
    let n = points.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = eval_kernel(expr, params, space, &points[i], &points[j])?;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Exact cross-matrix of a single additive term between two point sets.
pub fn term_cross_matrix(
    expr: &KernelExpr,
    j: usize,
    params: &HyperParams,
    space: &CovariateSpace,
    a: &[Vec<Value>],
    b: &[Vec<Value>],
) -> Result<DMatrix<f64>> {
    let mut k = DMatrix::zeros(a.len(), b.len());
    for (i, xi) in a.iter().enumerate() {
        for (jj, xj) in b.iter().enumerate() {
            k[(i, jj)] = eval_term(expr, j, params, space, xi, xj)?;
        }
    }
    Ok(k)
}
