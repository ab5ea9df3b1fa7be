//! Low-rank feature expansion of sum-of-product kernels.
//!
//! Each additive term's kernel is approximated (continuous factors) or
//! decomposed exactly (categorical factors) in a separable basis:
//!
//! * A continuous EQ factor on standardized inputs uses the Laplacian
//!   Dirichlet eigenbasis on `[-L, L]`: eigenfunctions
//!   `phi_b(x) = sin(pi b (x + L) / (2L)) / sqrt(L)` with eigenvalues
//!   `lambda_b = (pi b / (2L))^2`, weighted by the EQ spectral density
//!   `S(omega) = ell sqrt(2 pi) exp(-ell^2 omega^2 / 2)` at `omega = sqrt(lambda_b)`.
//!   `B` basis functions per factor; `L` is `c` times the half-range of the
//!   standardized training covariate.
//! * A categorical factor uses the exact eigendecomposition `Theta D Theta^T`
//!   of its `C x C` kernel matrix; eigenvalues indistinguishable from zero
//!   are dropped, so a zero-sum factor contributes `C - 1` columns.
//!
//! A product term multiplies factor bases elementwise and a sum concatenates
//! columns, giving `f ≈ Psi xi` with `xi ~ N(0, I)` and
//! `Psi = Psi_dagger diag(sqrt(delta))`. The parameter-*independent* part
//! `Psi_dagger` (products of eigenfunction values and eigenvector lookups) is
//! built once per dataset; only the `M`-vector `delta` — per-column products
//! of `alpha_j^2`, spectral densities, and categorical eigenvalues — is
//! recomputed when hyperparameters move.

use std::f64::consts::PI;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::{
    categorical_matrix, BaseKernel, CovariateSpace, HyperParams, KernelExpr, Value,
};

/// Size controls of the expansion.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BasisConfig {
    /// Basis functions per continuous factor (shared across terms).
    pub num_basis: usize,
    /// Domain scaling factor: `L = scale x half-range` of the standardized
    /// covariate. Must exceed 1 so the data lie strictly inside the box.
    pub scale: f64,
    /// Hard cap on the total number of feature columns `M`; product terms
    /// multiply ranks, and this guards the combinatorial blow-up.
    pub max_columns: usize,
}

impl BasisConfig {
    pub fn new(num_basis: usize, scale: f64) -> Result<Self> {
        let cfg = Self {
            num_basis,
            scale,
            max_columns: 50_000,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_basis < 1 {
            return Err(Error::Model("num_basis must be at least 1".into()));
        }
        if !(self.scale > 1.0) {
            return Err(Error::Model(format!(
                "domain scale must exceed 1, got {}",
                self.scale
            )));
        }
        if self.max_columns == 0 {
            return Err(Error::Model("max_columns must be positive".into()));
        }
        Ok(())
    }
}

/// `b`-th Dirichlet eigenfunction of the negative Laplacian on `[-L, L]`,
/// `b >= 1`. Defined for all real `x` (the sine extension); only values
/// inside the box approximate the kernel.
pub fn laplacian_eigenfunction(b: usize, l: f64, x: f64) -> f64 {
    (PI * b as f64 * (x + l) / (2.0 * l)).sin() / l.sqrt()
}

/// Eigenvalue paired with [`laplacian_eigenfunction`]: `(pi b / (2L))^2`.
pub fn laplacian_eigenvalue(b: usize, l: f64) -> f64 {
    let w = PI * b as f64 / (2.0 * l);
    w * w
}

/// Spectral density of the unit-magnitude EQ kernel at frequency `omega`.
pub fn spectral_density_eq(omega: f64, ell: f64) -> f64 {
    ell * (2.0 * PI).sqrt() * (-0.5 * ell * ell * omega * omega).exp()
}

/// Exact eigendecomposition of a categorical kernel matrix.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CategoricalEigen {
    /// Eigenvectors as columns; orthogonal `C x C`.
    pub vectors: DMatrix<f64>,
    /// Eigenvalues, one per column of `vectors`.
    pub values: DVector<f64>,
    /// Indices of eigenvalues retained in the feature expansion (those above
    /// `1e-10 x max |d|`); zero eigenvalues carry no variance.
    pub kept: Vec<usize>,
}

impl CategoricalEigen {
    pub fn effective_rank(&self) -> usize {
        self.kept.len()
    }

    pub fn categories(&self) -> usize {
        self.vectors.nrows()
    }

    fn from_parts(vectors: DMatrix<f64>, values: DVector<f64>) -> Self {
        let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let kept = (0..values.len())
            .filter(|&i| values[i] > 1e-10 * max_abs)
            .collect();
        Self {
            vectors,
            values,
            kept,
        }
    }
}

/// Orthonormal basis `[ones/sqrt(C) | Helmert contrasts]`; every column past
/// the first is orthogonal to the ones vector.
fn helmert_basis(c: usize) -> DMatrix<f64> {
    let mut theta = DMatrix::zeros(c, c);
    let norm0 = (c as f64).sqrt();
    for i in 0..c {
        theta[(i, 0)] = 1.0 / norm0;
    }
    for t in 1..c {
        // Contrast t: rows 0..t equal, row t balances them out.
        let norm = (t as f64 * (t as f64 + 1.0)).sqrt();
        for i in 0..t {
            theta[(i, t)] = 1.0 / norm;
        }
        theta[(t, t)] = -(t as f64) / norm;
    }
    theta
}

/// Exact eigendecomposition of a categorical base kernel.
///
/// Zero-sum and compound-symmetry kernels use the closed form: for
/// `CS(variance, rho)` the ones direction has eigenvalue
/// `variance + (C-1) rho` and every contrast direction `variance - rho`,
/// with Helmert eigenvectors (ZS is CS with `variance = 1`,
/// `rho = -1/(C-1)`, making the ones eigenvalue exactly zero). Mask and
/// user-supplied kernels go through a symmetric eigensolver; a user matrix
/// with an eigenvalue below `-1e-8 x max |d|` is rejected as not PSD.
pub fn decompose_categorical(
    base: &BaseKernel,
    space: &CovariateSpace,
) -> Result<CategoricalEigen> {
    if !base.is_categorical() {
        return Err(Error::Model(
            "decompose_categorical needs a categorical kernel".into(),
        ));
    }
    let c = space.categories(base.dim())?;
    let (variance, rho) = match base {
        BaseKernel::Zs { .. } => (1.0, -1.0 / (c as f64 - 1.0)),
        BaseKernel::Cs { variance, rho, .. } => (*variance, *rho),
        _ => {
            // Numeric path for masks and user matrices.
            let m = categorical_matrix(base, space)?;
            let eig = m.symmetric_eigen();
            let max_abs = eig.eigenvalues.iter().fold(0.0f64, |mx, v| mx.max(v.abs()));
            if let Some(bad) = eig.eigenvalues.iter().find(|&&v| v < -1e-8 * max_abs) {
                return Err(Error::Numerical(format!(
                    "categorical kernel matrix for `{}` is not positive semidefinite \
                     (eigenvalue {bad})",
                    space.dim(base.dim()).name()
                )));
            }
            // Deterministic order and sign: eigenvalues descending, each
            // eigenvector flipped so its largest-magnitude entry is positive.
            let mut order: Vec<usize> = (0..c).collect();
            order.sort_by(|&a, &b| {
                eig.eigenvalues[b]
                    .partial_cmp(&eig.eigenvalues[a])
                    .expect("finite eigenvalues")
            });
            let mut vectors = DMatrix::zeros(c, c);
            let mut values = DVector::zeros(c);
            for (t, &s) in order.iter().enumerate() {
                values[t] = eig.eigenvalues[s].max(0.0);
                let col = eig.eigenvectors.column(s);
                let lead = col
                    .iter()
                    .cloned()
                    .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
                let sign = if lead < 0.0 { -1.0 } else { 1.0 };
                vectors.column_mut(t).copy_from(&(col * sign));
            }
            return Ok(CategoricalEigen::from_parts(vectors, values));
        }
    };
    // Closed form shared by ZS and CS. Clamp the ones eigenvalue: for ZS it
    // is exactly zero in exact arithmetic.
    base.validate(space)?;
    let mut values = DVector::from_element(c, variance - rho);
    values[0] = (variance + (c as f64 - 1.0) * rho).max(0.0);
    Ok(CategoricalEigen::from_parts(helmert_basis(c), values))
}

/// Feature basis for one continuous factor of one term.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ContFactorBasis {
    pub dim: usize,
    /// Box half-width `L` (on the standardized covariate scale).
    pub half_width: f64,
}

/// Feature basis for one categorical factor of one term.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CatFactorBasis {
    pub dim: usize,
    pub eigen: CategoricalEigen,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TermBasis {
    pub continuous: Vec<ContFactorBasis>,
    pub categorical: Vec<CatFactorBasis>,
}

/// Identifies what one feature column is made of: the term it belongs to,
/// the eigenfunction index `b_q` (1-based) per continuous factor, and the
/// retained eigenvalue index per categorical factor.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ColumnKey {
    pub term: usize,
    pub cont_index: Vec<usize>,
    pub cat_index: Vec<usize>,
}

/// The data-independent description of a feature expansion. Everything
/// needed to evaluate features at *new* points and to map hyperparameters to
/// column weights `delta`, but no training-point values.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FeatureBasis {
    pub num_basis: usize,
    pub scale: f64,
    pub terms: Vec<TermBasis>,
    pub columns: Vec<ColumnKey>,
    /// Column range of each term: `f_j = Psi[:, range_j] xi[range_j]`.
    pub term_ranges: Vec<Range<usize>>,
}

impl FeatureBasis {
    /// Lay out the feature columns of an expression.
    ///
    /// `half_ranges[dim]` is the half-range of the standardized covariate for
    /// each continuous dimension (entries for categorical dimensions are
    /// ignored); the box half-width is `scale x half_range`.
    pub fn build(
        expr: &KernelExpr,
        space: &CovariateSpace,
        config: &BasisConfig,
        half_ranges: &[f64],
    ) -> Result<Self> {
        config.validate()?;
        expr.validate(space)?;
        if half_ranges.len() != space.len() {
            return Err(Error::Model(format!(
                "expected {} half-ranges, got {}",
                space.len(),
                half_ranges.len()
            )));
        }
        let b = config.num_basis;
        let mut terms = Vec::with_capacity(expr.terms.len());
        let mut columns = Vec::new();
        let mut term_ranges = Vec::with_capacity(expr.terms.len());
        for (j, term) in expr.terms.iter().enumerate() {
            let mut tb = TermBasis {
                continuous: Vec::new(),
                categorical: Vec::new(),
            };
            for &dim in &term.continuous {
                let hr = half_ranges[dim];
                if !(hr > 0.0 && hr.is_finite()) {
                    return Err(Error::Model(format!(
                        "covariate `{}` has no usable range (half-range {hr})",
                        space.dim(dim).name()
                    )));
                }
                tb.continuous.push(ContFactorBasis {
                    dim,
                    half_width: config.scale * hr,
                });
            }
            for base in &term.categorical {
                tb.categorical.push(CatFactorBasis {
                    dim: base.dim(),
                    eigen: decompose_categorical(base, space)?,
                });
            }

            // Cartesian product of B eigenfunctions per continuous factor and
            // the retained eigenvalues per categorical factor, odometer order
            // (last factor fastest).
            let start = columns.len();
            let q = tb.continuous.len();
            let ranks: Vec<usize> = tb
                .categorical
                .iter()
                .map(|f| f.eigen.effective_rank())
                .collect();
            let mut count: usize = 1;
            for _ in 0..q {
                count = count.saturating_mul(b);
            }
            for &r in &ranks {
                count = count.saturating_mul(r);
            }
            if columns.len().saturating_add(count) > config.max_columns {
                return Err(Error::Model(format!(
                    "feature expansion needs more than {} columns; lower num_basis \
                     or raise max_columns",
                    config.max_columns
                )));
            }
            let mut cont_index = vec![1usize; q];
            let mut cat_index = vec![0usize; ranks.len()];
            for _ in 0..count {
                columns.push(ColumnKey {
                    term: j,
                    cont_index: cont_index.clone(),
                    cat_index: cat_index.clone(),
                });
                // Advance the odometer.
                let mut carry = true;
                for r in (0..cat_index.len()).rev() {
                    if !carry {
                        break;
                    }
                    cat_index[r] += 1;
                    if cat_index[r] < ranks[r] {
                        carry = false;
                    } else {
                        cat_index[r] = 0;
                    }
                }
                for qi in (0..q).rev() {
                    if !carry {
                        break;
                    }
                    cont_index[qi] += 1;
                    if cont_index[qi] <= b {
                        carry = false;
                    } else {
                        cont_index[qi] = 1;
                    }
                }
            }
            term_ranges.push(start..columns.len());
            terms.push(tb);
        }
        if columns.is_empty() {
            return Err(Error::Model("feature expansion has no columns".into()));
        }
        Ok(Self {
            num_basis: config.num_basis,
            scale: config.scale,
            terms,
            columns,
            term_ranges,
        })
    }

    /// Number of feature columns `M` (zero categorical eigenvalues dropped).
    pub fn column_count(&self) -> usize {
        self.columns.len()
    }

    /// Column count had zero eigenvalues been retained: `sum_j B^Q_j prod_r C_jr`.
    pub fn full_column_count(&self) -> usize {
        self.terms
            .iter()
            .map(|t| {
                let mut n = 1usize;
                for _ in &t.continuous {
                    n *= self.num_basis;
                }
                for f in &t.categorical {
                    n *= f.eigen.categories();
                }
                n
            })
            .sum()
    }

    /// Evaluate the parameter-free feature matrix `Psi_dagger` (`N x M`) at a
    /// set of points. Points outside a factor's box `[-L, L]` are evaluated
    /// through the sine extension and logged as a warning — the approximation
    /// degrades there.
    pub fn psi_dagger(
        &self,
        space: &CovariateSpace,
        points: &[Vec<Value>],
    ) -> Result<DMatrix<f64>> {
        let n = points.len();
        let m = self.column_count();
        let mut psi = DMatrix::zeros(n, m);
        let mut outside = 0usize;

        for (j, tb) in self.terms.iter().enumerate() {
            // Per-factor value tables for this term.
            let mut cont_tables = Vec::with_capacity(tb.continuous.len());
            for f in &tb.continuous {
                let mut table = DMatrix::zeros(n, self.num_basis);
                for (i, p) in points.iter().enumerate() {
                    let x = match p.get(f.dim) {
                        Some(Value::Real(v)) => *v,
                        _ => {
                            return Err(Error::Data(format!(
                                "point {i} has no real value for `{}`",
                                space.dim(f.dim).name()
                            )))
                        }
                    };
                    if x.abs() > f.half_width {
                        outside += 1;
                    }
                    for bi in 1..=self.num_basis {
                        table[(i, bi - 1)] = laplacian_eigenfunction(bi, f.half_width, x);
                    }
                }
                cont_tables.push(table);
            }
            let mut cat_tables = Vec::with_capacity(tb.categorical.len());
            for f in &tb.categorical {
                let c = f.eigen.categories();
                let rank = f.eigen.effective_rank();
                let mut table = DMatrix::zeros(n, rank);
                for (i, p) in points.iter().enumerate() {
                    let z = match p.get(f.dim) {
                        Some(Value::Cat(v)) if *v < c => *v,
                        _ => {
                            return Err(Error::Data(format!(
                                "point {i} has no valid category for `{}`",
                                space.dim(f.dim).name()
                            )))
                        }
                    };
                    for (t, &e) in f.eigen.kept.iter().enumerate() {
                        table[(i, t)] = f.eigen.vectors[(z, e)];
                    }
                }
                cat_tables.push(table);
            }

            for m_idx in self.term_ranges[j].clone() {
                let key = &self.columns[m_idx];
                let mut col = psi.column_mut(m_idx);
                col.fill(1.0);
                for (q, &bi) in key.cont_index.iter().enumerate() {
                    let table = &cont_tables[q];
                    for i in 0..n {
                        col[i] *= table[(i, bi - 1)];
                    }
                }
                for (r, &t) in key.cat_index.iter().enumerate() {
                    let table = &cat_tables[r];
                    for i in 0..n {
                        col[i] *= table[(i, t)];
                    }
                }
            }
        }
        if outside > 0 {
            log::warn!(
                "{outside} point-factor evaluations fall outside the basis box [-L, L]; \
                 the approximation is unreliable there (raise the domain scale c)"
            );
        }
        Ok(psi)
    }

    /// Column weights `delta_m = alpha_j^2 prod_q S(sqrt(lambda_bq); ell_jq)
    /// prod_r d_cr` for one hyperparameter setting. All entries nonnegative.
    pub fn delta(&self, params: &HyperParams) -> Result<DVector<f64>> {
        if params.magnitudes.len() != self.terms.len()
            || params.lengthscales.len() != self.terms.len()
        {
            return Err(Error::Model(format!(
                "expected parameters for {} terms",
                self.terms.len()
            )));
        }
        // Spectral density table per (term, continuous factor, eigenfunction).
        let mut spect: Vec<Vec<Vec<f64>>> = Vec::with_capacity(self.terms.len());
        for (j, tb) in self.terms.iter().enumerate() {
            if params.lengthscales[j].len() != tb.continuous.len() {
                return Err(Error::Model(format!(
                    "term {} needs {} lengthscales",
                    j + 1,
                    tb.continuous.len()
                )));
            }
            let per_factor = tb
                .continuous
                .iter()
                .enumerate()
                .map(|(q, f)| {
                    let ell = params.lengthscales[j][q];
                    (1..=self.num_basis)
                        .map(|bi| {
                            spectral_density_eq(laplacian_eigenvalue(bi, f.half_width).sqrt(), ell)
                        })
                        .collect()
                })
                .collect();
            spect.push(per_factor);
        }
        let mut delta = DVector::zeros(self.column_count());
        for (m_idx, key) in self.columns.iter().enumerate() {
            let j = key.term;
            let alpha = params.magnitudes[j];
            let mut d = alpha * alpha;
            for (q, &bi) in key.cont_index.iter().enumerate() {
                d *= spect[j][q][bi - 1];
            }
            for (r, &t) in key.cat_index.iter().enumerate() {
                let eigen = &self.terms[j].categorical[r].eigen;
                d *= eigen.values[eigen.kept[t]];
            }
            delta[m_idx] = d;
        }
        Ok(delta)
    }

    /// Laplacian eigenvalues `lambda_bq` per column and continuous factor —
    /// the only basis quantities hyperparameter gradients need.
    pub fn column_cont_eigenvalues(&self) -> Vec<Vec<f64>> {
        self.columns
            .iter()
            .map(|key| {
                key.cont_index
                    .iter()
                    .enumerate()
                    .map(|(q, &bi)| {
                        laplacian_eigenvalue(bi, self.terms[key.term].continuous[q].half_width)
                    })
                    .collect()
            })
            .collect()
    }
}

/// A feature basis bound to evaluated training features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub basis: FeatureBasis,
    /// `N x M` parameter-free feature matrix at the training points.
    pub psi_dagger: DMatrix<f64>,
}

impl FeatureMap {
    pub fn build(
        expr: &KernelExpr,
        space: &CovariateSpace,
        config: &BasisConfig,
        half_ranges: &[f64],
        points: &[Vec<Value>],
    ) -> Result<Self> {
        let basis = FeatureBasis::build(expr, space, config, half_ranges)?;
        let psi_dagger = basis.psi_dagger(space, points)?;
        Ok(Self { basis, psi_dagger })
    }

    pub fn num_points(&self) -> usize {
        self.psi_dagger.nrows()
    }
}

/// Approximate kernel matrix `Psi_dagger diag(delta) Psi_dagger^T` for given
/// column weights. Oracle/diagnostic use only — `O(N^2 M)`.
pub fn approx_kernel_from_delta(fm: &FeatureMap, delta: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = fm.psi_dagger.clone();
    for (m, mut col) in scaled.column_iter_mut().enumerate() {
        col *= delta[m];
    }
    &scaled * fm.psi_dagger.transpose()
}

/// Approximate kernel matrix under a hyperparameter setting: `K ≈ Psi Psi^T`.
pub fn approx_kernel_matrix(fm: &FeatureMap, params: &HyperParams) -> Result<DMatrix<f64>> {
    Ok(approx_kernel_from_delta(fm, &fm.basis.delta(params)?))
}
