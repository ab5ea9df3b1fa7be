//! Posterior targets, priors, and sampling for the low-rank model.
//!
//! The default inference path samples the *joint* unconstrained vector
//!
//! ```text
//! v = [ xi_1..xi_M | log alpha_1..J | log ell (term-major) | obs params ]
//! ```
//!
//! where the latent function is `f = Psi_dagger (sqrt(delta(theta)) ∘ xi)`
//! with independent standard-normal priors on `xi`. Evaluating the log
//! posterior and its gradient costs one `N x M` product plus `O(N + M)`
//! work — no `N x N` object is ever formed.
//!
//! Priors (on the constrained scale, with change-of-variables Jacobians
//! folded into the unconstrained density):
//!
//! * magnitudes `alpha_j`: half-Student-t with 20 degrees of freedom,
//! * lengthscales `ell`: Log-Normal(0, 1),
//! * Gaussian noise: Inverse-Gamma(1, 2) on `sigma^2`, sampled as `log sigma`,
//! * beta-binomial: Log-Normal(1, 1) on `gamma`, Normal(0, 0.5^2) on `w0`.
//!
//! Submodules: [`nuts`] (the sampler), [`diagnostics`] (split R-hat and bulk
//! ESS), [`woodbury`] (the Gaussian-only marginalized likelihood over
//! hyperparameters alone).

pub mod diagnostics;
pub mod nuts;
pub mod woodbury;

use nalgebra::{DMatrix, DVector};

use crate::basis::FeatureMap;
use crate::error::{Error, Result};
use crate::kernel::HyperParams;
use crate::obs::{ObsKind, ObsModel, Response};

pub use diagnostics::{compute_diagnostics, Diagnostics};
pub use nuts::{hmc_sample_fixed, nuts_sample, ChainStats, SampleOutput, SamplerConfig};
pub use woodbury::{marginalized_loglik, MarginalizedPosterior, WoodburyState};

/// A differentiable unnormalized log density — what the sampler consumes.
///
/// `logp_grad` writes the gradient into `grad` and returns the log density;
/// a non-finite return means "reject this state" and the gradient content is
/// then ignored.
pub trait LogpGrad: Sync {
    fn dim(&self) -> usize;
    fn logp_grad(&self, position: &DVector<f64>, grad: &mut DVector<f64>) -> f64;
}

/// Prior hyperparameters. Defaults follow the standardized-data convention;
/// every field can be overridden from the run config.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSpec {
    /// Scale of the half-Student-t prior on magnitudes.
    pub alpha_scale: f64,
    /// Degrees of freedom of the half-Student-t prior on magnitudes.
    pub alpha_df: f64,
    /// Mean of log lengthscale.
    pub lengthscale_mean: f64,
    /// Sd of log lengthscale.
    pub lengthscale_sd: f64,
    /// Inverse-Gamma shape for the Gaussian noise variance.
    pub sigma2_shape: f64,
    /// Inverse-Gamma rate for the Gaussian noise variance.
    pub sigma2_rate: f64,
    /// Mean of log gamma (beta-binomial overdispersion).
    pub gamma_mean: f64,
    /// Sd of log gamma.
    pub gamma_sd: f64,
    /// Sd of the beta-binomial intercept prior (mean zero).
    pub intercept_sd: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            alpha_scale: 1.0,
            alpha_df: 20.0,
            lengthscale_mean: 0.0,
            lengthscale_sd: 1.0,
            sigma2_shape: 1.0,
            sigma2_rate: 2.0,
            gamma_mean: 1.0,
            gamma_sd: 1.0,
            intercept_sd: 0.5,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.alpha_scale,
            self.alpha_df,
            self.lengthscale_sd,
            self.sigma2_shape,
            self.sigma2_rate,
            self.gamma_sd,
            self.intercept_sd,
        ];
        if positive.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Config(
                "prior scales and shapes must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Log density (up to constants) and gradient of the half-Student-t prior on
/// `alpha`, evaluated in `u = log alpha` (Jacobian included).
fn half_t_log(u: f64, df: f64, scale: f64) -> (f64, f64) {
    let a = u.exp();
    let r = a * a / (df * scale * scale);
    let lp = -0.5 * (df + 1.0) * r.ln_1p() + u;
    let grad = 1.0 - (df + 1.0) * r / (1.0 + r);
    (lp, grad)
}

/// Normal log density (up to constants) and gradient in `x`.
fn normal_log(x: f64, mean: f64, sd: f64) -> (f64, f64) {
    let z = (x - mean) / sd;
    (-0.5 * z * z, -z / sd)
}

/// Inverse-Gamma(shape, rate) prior on `sigma^2`, evaluated in
/// `u = log sigma` with the transform Jacobian: log p = -2 shape u - rate e^{-2u}.
fn inv_gamma_log_sigma(u: f64, shape: f64, rate: f64) -> (f64, f64) {
    let inv_s2 = (-2.0 * u).exp();
    (
        -2.0 * shape * u - rate * inv_s2,
        -2.0 * shape + 2.0 * rate * inv_s2,
    )
}

/// Coordinate layout of the unconstrained parameter vector.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ParamLayout {
    pub num_features: usize,
    pub lengthscale_counts: Vec<usize>,
    pub obs: ObsKind,
}

impl ParamLayout {
    pub fn new(num_features: usize, lengthscale_counts: Vec<usize>, obs: ObsKind) -> Self {
        Self {
            num_features,
            lengthscale_counts,
            obs,
        }
    }

    pub fn num_terms(&self) -> usize {
        self.lengthscale_counts.len()
    }

    pub fn total_lengthscales(&self) -> usize {
        self.lengthscale_counts.iter().sum()
    }

    pub fn dim(&self) -> usize {
        self.num_features
            + self.num_terms()
            + self.total_lengthscales()
            + ObsModel::unconstrained_len(self.obs)
    }

    pub fn alpha_offset(&self) -> usize {
        self.num_features
    }

    pub fn ell_offset(&self) -> usize {
        self.num_features + self.num_terms()
    }

    pub fn obs_offset(&self) -> usize {
        self.ell_offset() + self.total_lengthscales()
    }

    /// Column names for draw tables: `xi.m`, `alpha.j`, `ell.j.q`, then the
    /// observation parameters.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.dim());
        for m in 1..=self.num_features {
            names.push(format!("xi.{m}"));
        }
        for j in 1..=self.num_terms() {
            names.push(format!("alpha.{j}"));
        }
        for (j, &q) in self.lengthscale_counts.iter().enumerate() {
            for qi in 1..=q {
                names.push(format!("ell.{}.{qi}", j + 1));
            }
        }
        for name in ObsModel::param_names(self.obs) {
            names.push((*name).to_string());
        }
        names
    }

    /// Constrained hyperparameters at an unconstrained position.
    pub fn hyperparams(&self, v: &DVector<f64>) -> HyperParams {
        let mut magnitudes = Vec::with_capacity(self.num_terms());
        for j in 0..self.num_terms() {
            magnitudes.push(v[self.alpha_offset() + j].exp());
        }
        let mut lengthscales = Vec::with_capacity(self.num_terms());
        let mut k = self.ell_offset();
        for &q in &self.lengthscale_counts {
            let mut row = Vec::with_capacity(q);
            for _ in 0..q {
                row.push(v[k].exp());
                k += 1;
            }
            lengthscales.push(row);
        }
        let o = self.obs_offset();
        let obs = match self.obs {
            ObsKind::Gaussian => ObsModel::Gaussian { sigma: v[o].exp() },
            ObsKind::BetaBinomial => ObsModel::BetaBinomial {
                gamma: v[o].exp(),
                intercept: v[o + 1],
            },
        };
        HyperParams {
            magnitudes,
            lengthscales,
            obs,
        }
    }

    /// Map an unconstrained position to the constrained scale draws are
    /// reported on (`xi` and `w0` pass through; log parameters exponentiate).
    pub fn constrain(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        let exp_until = match self.obs {
            // All coordinates from alpha up to (and including) sigma/gamma are
            // logs; w0, when present, stays as is.
            ObsKind::Gaussian => self.dim(),
            ObsKind::BetaBinomial => self.dim() - 1,
        };
        for i in self.alpha_offset()..exp_until {
            out[i] = out[i].exp();
        }
        out
    }

    /// Inverse of [`Self::constrain`]: log-transform the positive block.
    pub fn unconstrain(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        let ln_until = match self.obs {
            ObsKind::Gaussian => self.dim(),
            ObsKind::BetaBinomial => self.dim() - 1,
        };
        for i in self.alpha_offset()..ln_until {
            out[i] = out[i].ln();
        }
        out
    }

    /// Hyperparameters read off a constrained vector (no transform applied).
    pub fn hyperparams_from_constrained(&self, v: &DVector<f64>) -> HyperParams {
        let mut magnitudes = Vec::with_capacity(self.num_terms());
        for j in 0..self.num_terms() {
            magnitudes.push(v[self.alpha_offset() + j]);
        }
        let mut lengthscales = Vec::with_capacity(self.num_terms());
        let mut k = self.ell_offset();
        for &q in &self.lengthscale_counts {
            let mut row = Vec::with_capacity(q);
            for _ in 0..q {
                row.push(v[k]);
                k += 1;
            }
            lengthscales.push(row);
        }
        let o = self.obs_offset();
        let obs = match self.obs {
            ObsKind::Gaussian => ObsModel::Gaussian { sigma: v[o] },
            ObsKind::BetaBinomial => ObsModel::BetaBinomial {
                gamma: v[o],
                intercept: v[o + 1],
            },
        };
        HyperParams {
            magnitudes,
            lengthscales,
            obs,
        }
    }
}

fn term_of_column(fm: &FeatureMap, m: usize) -> usize {
    fm.basis.columns[m].term
}

/// The joint posterior over `(xi, theta)` for the low-rank model.
pub struct Posterior<'a> {
    fm: &'a FeatureMap,
    responses: Vec<Response>,
    layout: ParamLayout,
    priors: PriorSpec,
    /// `lambda[m][q]`: Laplacian eigenvalue behind column `m`'s `q`-th
    /// continuous factor (cached for lengthscale gradients).
    lambda: Vec<Vec<f64>>,
}

impl<'a> Posterior<'a> {
    pub fn new(
        fm: &'a FeatureMap,
        responses: Vec<Response>,
        obs: ObsKind,
        priors: PriorSpec,
    ) -> Result<Self> {
        priors.validate()?;
        if responses.len() != fm.num_points() {
            return Err(Error::Data(format!(
                "feature map has {} rows but {} responses given",
                fm.num_points(),
                responses.len()
            )));
        }
        let layout = ParamLayout::new(
            fm.basis.column_count(),
            fm.basis.terms.iter().map(|t| t.continuous.len()).collect(),
            obs,
        );
        let lambda = fm.basis.column_cont_eigenvalues();
        Ok(Self {
            fm,
            responses,
            layout,
            priors,
            lambda,
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// Log prior of the hyperparameter block (everything except `xi`),
    /// including transform Jacobians; gradient accumulated into `grad`.
    fn theta_prior(&self, v: &DVector<f64>, grad: &mut DVector<f64>) -> f64 {
        hyper_prior(&self.layout, &self.priors, v, grad)
    }
}

/// Log prior (with Jacobians) of the hyperparameter block of `layout`,
/// accumulated into `grad`. Shared by the joint and marginalized targets.
pub(crate) fn hyper_prior(
    layout: &ParamLayout,
    priors: &PriorSpec,
    v: &DVector<f64>,
    grad: &mut DVector<f64>,
) -> f64 {
    let mut lp = 0.0;
    for j in 0..layout.num_terms() {
        let i = layout.alpha_offset() + j;
        let (l, g) = half_t_log(v[i], priors.alpha_df, priors.alpha_scale);
        lp += l;
        grad[i] += g;
    }
    for k in 0..layout.total_lengthscales() {
        let i = layout.ell_offset() + k;
        let (l, g) = normal_log(v[i], priors.lengthscale_mean, priors.lengthscale_sd);
        lp += l;
        grad[i] += g;
    }
    let o = layout.obs_offset();
    match layout.obs {
        ObsKind::Gaussian => {
            let (l, g) = inv_gamma_log_sigma(v[o], priors.sigma2_shape, priors.sigma2_rate);
            lp += l;
            grad[o] += g;
        }
        ObsKind::BetaBinomial => {
            let (l, g) = normal_log(v[o], priors.gamma_mean, priors.gamma_sd);
            lp += l;
            grad[o] += g;
            let (l, g) = normal_log(v[o + 1], 0.0, priors.intercept_sd);
            lp += l;
            grad[o + 1] += g;
        }
    }
    lp
}

impl LogpGrad for Posterior<'_> {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn logp_grad(&self, v: &DVector<f64>, grad: &mut DVector<f64>) -> f64 {
        grad.fill(0.0);
        let layout = &self.layout;
        let m = layout.num_features;
        let params = layout.hyperparams(v);
        let delta = match self.fm.basis.delta(&params) {
            Ok(d) => d,
            Err(_) => return f64::NEG_INFINITY,
        };
        if delta.iter().any(|d| !d.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let sqrt_delta = delta.map(f64::sqrt);

        // Latent function: f = Psi_dagger (sqrt(delta) ∘ xi).
        let xi = v.rows(0, m);
        let weighted = DVector::from_fn(m, |i, _| sqrt_delta[i] * xi[i]);
        let f = &self.fm.psi_dagger * &weighted;

        // Likelihood and its pointwise derivative in f.
        let mut loglik = 0.0;
        let mut g = DVector::zeros(self.responses.len());
        let obs_len = ObsModel::unconstrained_len(layout.obs);
        let mut obs_grad = vec![0.0; obs_len];
        for (n, &y) in self.responses.iter().enumerate() {
            let l = match params.obs.loglik_point(y, f[n]) {
                Ok(l) => l,
                Err(_) => return f64::NEG_INFINITY,
            };
            if !l.is_finite() {
                return f64::NEG_INFINITY;
            }
            loglik += l;
            g[n] = params.obs.dloglik_df(y, f[n]).unwrap_or(0.0);
            match params.obs.dloglik_dobs(y, f[n]) {
                Ok(d) => {
                    for (acc, di) in obs_grad.iter_mut().zip(d) {
                        *acc += di;
                    }
                }
                Err(_) => return f64::NEG_INFINITY,
            }
        }

        // xi gradient and standard-normal prior.
        let t = self.fm.psi_dagger.transpose() * &g;
        let mut logp = loglik;
        for i in 0..m {
            grad[i] = sqrt_delta[i] * t[i] - xi[i];
            logp -= 0.5 * xi[i] * xi[i];
        }

        // Hyperparameter gradients chain through sqrt(delta):
        //   d sqrt(delta_m) / d log alpha_j  = sqrt(delta_m)
        //   d sqrt(delta_m) / d log ell_jq   = sqrt(delta_m) (1 - ell^2 lambda) / 2
        let ell_starts: Vec<usize> = {
            let mut starts = Vec::with_capacity(layout.num_terms());
            let mut acc = layout.ell_offset();
            for &q in &layout.lengthscale_counts {
                starts.push(acc);
                acc += q;
            }
            starts
        };
        for i in 0..m {
            let j = term_of_column(self.fm, i);
            let base = t[i] * xi[i] * sqrt_delta[i];
            grad[layout.alpha_offset() + j] += base;
            for (q, &lam) in self.lambda[i].iter().enumerate() {
                let ell = params.lengthscales[j][q];
                grad[ell_starts[j] + q] += base * 0.5 * (1.0 - ell * ell * lam);
            }
        }

        // Observation-parameter gradients from the likelihood.
        let o = layout.obs_offset();
        for (k, acc) in obs_grad.iter().enumerate() {
            grad[o + k] += acc;
        }

        logp += self.theta_prior(v, grad);
        if logp.is_finite() {
            logp
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// The conditional posterior over `xi` alone, at fixed hyperparameters.
/// Used by oracle comparisons where `theta` is pinned to a known value.
pub struct FixedThetaPosterior<'a> {
    fm: &'a FeatureMap,
    responses: Vec<Response>,
    obs: ObsModel,
    sqrt_delta: DVector<f64>,
}

impl<'a> FixedThetaPosterior<'a> {
    pub fn new(fm: &'a FeatureMap, responses: Vec<Response>, params: &HyperParams) -> Result<Self> {
        if responses.len() != fm.num_points() {
            return Err(Error::Data(format!(
                "feature map has {} rows but {} responses given",
                fm.num_points(),
                responses.len()
            )));
        }
        let sqrt_delta = fm.basis.delta(params)?.map(f64::sqrt);
        Ok(Self {
            fm,
            responses,
            obs: params.obs.clone(),
            sqrt_delta,
        })
    }

    pub fn sqrt_delta(&self) -> &DVector<f64> {
        &self.sqrt_delta
    }
}

impl LogpGrad for FixedThetaPosterior<'_> {
    fn dim(&self) -> usize {
        self.fm.basis.column_count()
    }

    fn logp_grad(&self, v: &DVector<f64>, grad: &mut DVector<f64>) -> f64 {
        let m = self.dim();
        let weighted = DVector::from_fn(m, |i, _| self.sqrt_delta[i] * v[i]);
        let f = &self.fm.psi_dagger * &weighted;
        let mut loglik = 0.0;
        let mut g = DVector::zeros(self.responses.len());
        for (n, &y) in self.responses.iter().enumerate() {
            let l = match self.obs.loglik_point(y, f[n]) {
                Ok(l) if l.is_finite() => l,
                _ => return f64::NEG_INFINITY,
            };
            loglik += l;
            g[n] = self.obs.dloglik_df(y, f[n]).unwrap_or(0.0);
        }
        let t = self.fm.psi_dagger.transpose() * g;
        let mut logp = loglik;
        for i in 0..m {
            grad[i] = self.sqrt_delta[i] * t[i] - v[i];
            logp -= 0.5 * v[i] * v[i];
        }
        logp
    }
}

/// Posterior draws on the constrained scale, with per-chain sampler stats.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub layout: ParamLayout,
    pub names: Vec<String>,
    /// One `kept x dim` matrix per chain.
    pub chains: Vec<DMatrix<f64>>,
    pub stats: Vec<ChainStats>,
}

impl PosteriorDraws {
    pub fn from_unconstrained(layout: &ParamLayout, output: SampleOutput) -> Self {
        let chains = output
            .chains
            .iter()
            .map(|raw| {
                let mut out = raw.clone();
                for r in 0..raw.nrows() {
                    let row = layout.constrain(&raw.row(r).transpose());
                    out.row_mut(r).copy_from(&row.transpose());
                }
                out
            })
            .collect();
        Self {
            layout: layout.clone(),
            names: layout.names(),
            chains,
            stats: output.stats,
        }
    }

    pub fn num_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn dim(&self) -> usize {
        self.chains.first().map_or(0, |c| c.ncols())
    }

    /// Total kept draws across chains.
    pub fn num_draws(&self) -> usize {
        self.chains.iter().map(|c| c.nrows()).sum()
    }

    /// All chains stacked into one `S x dim` matrix.
    pub fn stacked(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.num_draws(), self.dim());
        let mut r = 0;
        for c in &self.chains {
            out.rows_mut(r, c.nrows()).copy_from(c);
            r += c.nrows();
        }
        out
    }

    pub fn total_divergences(&self) -> usize {
        self.stats.iter().map(|s| s.divergences).sum()
    }

    pub fn diagnostics(&self) -> Result<Diagnostics> {
        compute_diagnostics(&self.chains, &self.stats)
    }
}

/// Fits the joint `(xi, theta)` posterior with the no-U-turn sampler and
/// returns constrained draws.
pub fn sample_posterior(
    fm: &FeatureMap,
    responses: Vec<Response>,
    obs: ObsKind,
    priors: PriorSpec,
    cfg: &SamplerConfig,
) -> Result<PosteriorDraws> {
    let post = Posterior::new(fm, responses, obs, priors)?;
    let out = nuts_sample(&post, cfg, None)?;
    Ok(PosteriorDraws::from_unconstrained(post.layout(), out))
}

/// Gaussian-only alternative: samples hyperparameters against the
/// marginalized likelihood, then reattaches exact conditional draws of the
/// latent coefficients so downstream prediction sees the full layout.
pub fn sample_posterior_marginalized(
    fm: &FeatureMap,
    y: &DVector<f64>,
    priors: PriorSpec,
    cfg: &SamplerConfig,
) -> Result<PosteriorDraws> {
    let post = MarginalizedPosterior::new(fm, y, priors)?;
    let out = nuts_sample(&post, cfg, None)?;
    let full = post.augment_with_latents(&out, cfg.seed)?;
    Ok(PosteriorDraws::from_unconstrained(
        &post.full_layout(),
        full,
    ))
}
