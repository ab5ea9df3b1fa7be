//! Posterior functional, componentwise, and predictive draws at new points,
//! plus mean log predictive density scoring.
//!
//! Every draw `s` carries its own hyperparameters, so the latent function at
//! a point set `X*` is `f*^{(s)} = Psi_dagger(X*) (sqrt(delta(theta^{(s)}))
//! ∘ xi^{(s)})`: the parameter-free feature matrix is built once per point
//! set and only the spectral weights vary across draws. Component draws use
//! the column range belonging to one kernel term, so componentwise draws sum
//! exactly to the total.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::basis::FeatureBasis;
use crate::error::{Error, Result};
use crate::inference::PosteriorDraws;
use crate::kernel::{CovariateSpace, Value};
use crate::obs::{ObsKind, Response};

fn check_draws(basis: &FeatureBasis, draws: &PosteriorDraws) -> Result<()> {
    if draws.layout.num_features != basis.column_count() {
        return Err(Error::Model(format!(
            "draws carry {} latent coefficients but the basis has {} columns",
            draws.layout.num_features,
            basis.column_count()
        )));
    }
    Ok(())
}

/// Latent-function draws restricted to `columns` (the full range for totals).
fn latent_draws(
    basis: &FeatureBasis,
    space: &CovariateSpace,
    points: &[Vec<Value>],
    draws: &PosteriorDraws,
    columns: std::ops::Range<usize>,
) -> Result<DMatrix<f64>> {
    check_draws(basis, draws)?;
    let psi_star = basis.psi_dagger(space, points)?;
    let stacked = draws.stacked();
    let s = stacked.nrows();
    let p = points.len();
    let mut out = DMatrix::zeros(s, p);
    for row in 0..s {
        let v = stacked.row(row).transpose();
        let params = draws.layout.hyperparams_from_constrained(&v);
        let delta = basis.delta(&params)?;
        let weighted = DVector::from_fn(basis.column_count(), |i, _| {
            if columns.contains(&i) {
                delta[i].sqrt() * v[i]
            } else {
                0.0
            }
        });
        let f = &psi_star * weighted;
        out.row_mut(row).copy_from(&f.transpose());
    }
    Ok(out)
}

/// `S x P` latent-function draws at `points`.
pub fn draws_f_at(
    basis: &FeatureBasis,
    space: &CovariateSpace,
    points: &[Vec<Value>],
    draws: &PosteriorDraws,
) -> Result<DMatrix<f64>> {
    latent_draws(basis, space, points, draws, 0..basis.column_count())
}

/// `S x P` draws of one additive component (kernel term `term`, 0-based).
pub fn draws_component_at(
    basis: &FeatureBasis,
    space: &CovariateSpace,
    points: &[Vec<Value>],
    draws: &PosteriorDraws,
    term: usize,
) -> Result<DMatrix<f64>> {
    let range = basis.term_ranges.get(term).cloned().ok_or_else(|| {
        Error::Model(format!(
            "component index {term} out of range: the model has {} terms",
            basis.term_ranges.len()
        ))
    })?;
    latent_draws(basis, space, points, draws, range)
}

/// `S x P` posterior predictive draws. Gaussian models return real values;
/// the beta-binomial returns success counts (as f64) and requires per-point
/// trials. Fully determined by `seed`.
pub fn draws_predictive(
    basis: &FeatureBasis,
    space: &CovariateSpace,
    points: &[Vec<Value>],
    draws: &PosteriorDraws,
    trials: Option<&[u64]>,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if let Some(t) = trials {
        if t.len() != points.len() {
            return Err(Error::Data(format!(
                "{} trial counts for {} points",
                t.len(),
                points.len()
            )));
        }
    } else if draws.layout.obs == ObsKind::BetaBinomial {
        return Err(Error::Data(
            "the beta-binomial predictive needs a trial count per point".into(),
        ));
    }
    let f = draws_f_at(basis, space, points, draws)?;
    let stacked = draws.stacked();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DMatrix::zeros(f.nrows(), f.ncols());
    for s in 0..f.nrows() {
        let params = draws
            .layout
            .hyperparams_from_constrained(&stacked.row(s).transpose());
        for p in 0..f.ncols() {
            let y = params
                .obs
                .sample_predictive(f[(s, p)], trials.map(|t| t[p]), &mut rng)?;
            out[(s, p)] = match y {
                Response::Real(v) => v,
                Response::Counts { successes, .. } => successes as f64,
            };
        }
    }
    Ok(out)
}

/// Mean log predictive density over draws and points:
/// `(1/(S P)) sum_s sum_p log p(y_p | theta^{(s)}, f^{(s)}(x_p))`.
///
/// With `log_mean_exp = true` the per-point densities are instead mixed over
/// draws before taking the log (`log (1/S) sum_s p(...)`), which scores the
/// Monte Carlo predictive mixture rather than the average draw.
pub fn mlpd(
    basis: &FeatureBasis,
    space: &CovariateSpace,
    points: &[Vec<Value>],
    y: &[Response],
    draws: &PosteriorDraws,
    log_mean_exp: bool,
) -> Result<f64> {
    if y.len() != points.len() {
        return Err(Error::Data(format!(
            "{} responses for {} points",
            y.len(),
            points.len()
        )));
    }
    if points.is_empty() {
        return Err(Error::Data(
            "mean log predictive density of zero points".into(),
        ));
    }
    let f = draws_f_at(basis, space, points, draws)?;
    let stacked = draws.stacked();
    let s = f.nrows();
    let p = f.ncols();
    let mut logliks = DMatrix::zeros(s, p);
    for row in 0..s {
        let params = draws
            .layout
            .hyperparams_from_constrained(&stacked.row(row).transpose());
        for col in 0..p {
            logliks[(row, col)] = params.obs.loglik_point(y[col], f[(row, col)])?;
        }
    }
    if log_mean_exp {
        let mut total = 0.0;
        for col in 0..p {
            let max = logliks.column(col).max();
            let mixed = if max == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                max + (logliks.column(col).map(|l| (l - max).exp()).sum() / s as f64).ln()
            };
            total += mixed;
        }
        Ok(total / p as f64)
    } else {
        Ok(logliks.sum() / (s * p) as f64)
    }
}
