//! Marginalized Gaussian likelihood in feature space.
//!
//! For the Gaussian observation model the latent coefficients integrate out
//! analytically: `y ~ N(0, Psi Psi^T + sigma^2 I_N)` with `Psi = Psi_dagger
//! diag(sqrt(delta))`. The matrix-inversion and determinant lemmas move all
//! linear algebra into the `M x M` matrix
//!
//! ```text
//! Z = sigma^2 I_M + Psi^T Psi,
//! log|Psi Psi^T + sigma^2 I_N| = 2 (N - M) log sigma + log|Z|,
//! y^T (Psi Psi^T + sigma^2 I_N)^{-1} y = (y^T y - z^T Z^{-1} z) / sigma^2,
//! ```
//!
//! with `z = Psi^T y`, so one evaluation costs `O(N M^2)` once the
//! parameter-free products `G = Psi_dagger^T Psi_dagger` and
//! `t0 = Psi_dagger^T y` are cached. This powers the optional
//! hyperparameter-only sampling mode; the latent coefficients are recovered
//! afterwards from their exact Gaussian conditional `xi | theta, y`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::nuts::SampleOutput;
use super::{hyper_prior, LogpGrad, ParamLayout, PriorSpec};
use crate::basis::FeatureMap;
use crate::error::{Error, Result};
use crate::kernel::HyperParams;
use crate::obs::{ObsKind, ObsModel};

const LN_2PI: f64 = 1.837877066409345;

/// Cached data-dependent products for the marginalized Gaussian likelihood.
pub struct WoodburyState {
    /// `Psi_dagger^T Psi_dagger`, `M x M`.
    g: DMatrix<f64>,
    /// `Psi_dagger^T y`.
    t0: DVector<f64>,
    yty: f64,
    num_points: usize,
}

impl WoodburyState {
    pub fn new(fm: &FeatureMap, y: &DVector<f64>) -> Result<Self> {
        if y.len() != fm.num_points() {
            return Err(Error::Data(format!(
                "feature map has {} rows but {} responses given",
                fm.num_points(),
                y.len()
            )));
        }
        Ok(Self {
            g: fm.psi_dagger.transpose() * &fm.psi_dagger,
            t0: fm.psi_dagger.transpose() * y,
            yty: y.dot(y),
            num_points: y.len(),
        })
    }

    fn dim(&self) -> usize {
        self.g.nrows()
    }

    /// Factorization of `Z = sigma^2 I + S G S` with `S = diag(sqrt_delta)`,
    /// plus `z = S t0` and `u = Z^{-1} z`.
    fn factor(
        &self,
        sqrt_delta: &DVector<f64>,
        sigma: f64,
    ) -> Result<(Cholesky<f64, Dyn>, DVector<f64>, DVector<f64>)> {
        let m = self.dim();
        let s2 = sigma * sigma;
        let mut zmat =
            DMatrix::from_fn(m, m, |i, j| sqrt_delta[i] * self.g[(i, j)] * sqrt_delta[j]);
        for i in 0..m {
            zmat[(i, i)] += s2;
        }
        let chol = Cholesky::new(zmat).ok_or_else(|| {
            Error::Numerical(format!(
                "feature-space covariance Z failed to factor (sigma = {sigma:.3e})"
            ))
        })?;
        let z = DVector::from_fn(m, |i, _| sqrt_delta[i] * self.t0[i]);
        let u = chol.solve(&z);
        Ok((chol, z, u))
    }

    fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
        2.0 * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>()
    }

    /// `log N(y | 0, Psi Psi^T + sigma^2 I)` without forming any `N x N`
    /// object.
    pub fn loglik(&self, sqrt_delta: &DVector<f64>, sigma: f64) -> Result<f64> {
        let (chol, z, u) = self.factor(sqrt_delta, sigma)?;
        let n = self.num_points as f64;
        let m = self.dim() as f64;
        Ok(-0.5 * n * LN_2PI
            - (n - m) * sigma.ln()
            - 0.5 * Self::log_det(&chol)
            - 0.5 / (sigma * sigma) * (self.yty - z.dot(&u)))
    }

    /// Likelihood plus its gradient with respect to each `sqrt_delta[m]` and
    /// to `log sigma`.
    pub fn loglik_grad(
        &self,
        sqrt_delta: &DVector<f64>,
        sigma: f64,
    ) -> Result<(f64, DVector<f64>, f64)> {
        let (chol, z, u) = self.factor(sqrt_delta, sigma)?;
        let m = self.dim();
        let n = self.num_points as f64;
        let s2 = sigma * sigma;
        let quad = self.yty - z.dot(&u);
        let loglik = -0.5 * n * LN_2PI
            - (n - m as f64) * sigma.ln()
            - 0.5 * Self::log_det(&chol)
            - 0.5 / s2 * quad;

        let zinv = chol.inverse();
        // (G S)_{ij} = G_ij * s_j.
        let mut gs = self.g.clone();
        for j in 0..m {
            gs.column_mut(j).scale_mut(sqrt_delta[j]);
        }
        let gsu = &gs * &u;
        let mut d_sqrt_delta = DVector::zeros(m);
        for i in 0..m {
            let trace_term = -(gs.row(i) * zinv.column(i))[(0, 0)];
            d_sqrt_delta[i] = trace_term + u[i] * (self.t0[i] - gsu[i]) / s2;
        }
        let d_log_sigma = -(n - m as f64) - s2 * zinv.trace() + quad / s2 - u.dot(&u);
        Ok((loglik, d_sqrt_delta, d_log_sigma))
    }

    /// One draw from the exact conditional `xi | theta, y ~ N(Z^{-1} z,
    /// sigma^2 Z^{-1})`, used to reattach latent coefficients to
    /// hyperparameter-only draws.
    pub fn sample_xi(
        &self,
        sqrt_delta: &DVector<f64>,
        sigma: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<DVector<f64>> {
        let (chol, _z, u) = self.factor(sqrt_delta, sigma)?;
        let m = self.dim();
        let eta = DVector::from_fn(m, |_, _| StandardNormal.sample(rng));
        // With Z = L L^T, cov(sigma L^{-T} eta) = sigma^2 Z^{-1}.
        let mut w = eta;
        chol.l_dirty()
            .transpose()
            .solve_upper_triangular_mut(&mut w);
        Ok(u + sigma * w)
    }
}

/// Convenience wrapper: the marginalized Gaussian log likelihood at full
/// hyperparameters.
pub fn marginalized_loglik(fm: &FeatureMap, params: &HyperParams, y: &DVector<f64>) -> Result<f64> {
    let sigma = match params.obs {
        ObsModel::Gaussian { sigma } => sigma,
        ObsModel::BetaBinomial { .. } => {
            return Err(Error::Model(
                "the marginalized likelihood requires the Gaussian observation model".into(),
            ))
        }
    };
    let state = WoodburyState::new(fm, y)?;
    let sqrt_delta = fm.basis.delta(params)?.map(f64::sqrt);
    state.loglik(&sqrt_delta, sigma)
}

/// Hyperparameter-only posterior for the Gaussian model, with the latent
/// coefficients integrated out. Coordinates: `[log alpha | log ell | log
/// sigma]` (a `ParamLayout` with zero latent features).
pub struct MarginalizedPosterior<'a> {
    fm: &'a FeatureMap,
    state: WoodburyState,
    layout: ParamLayout,
    priors: PriorSpec,
    lambda: Vec<Vec<f64>>,
}

impl<'a> MarginalizedPosterior<'a> {
    pub fn new(fm: &'a FeatureMap, y: &DVector<f64>, priors: PriorSpec) -> Result<Self> {
        priors.validate()?;
        let state = WoodburyState::new(fm, y)?;
        let layout = ParamLayout::new(
            0,
            fm.basis.terms.iter().map(|t| t.continuous.len()).collect(),
            ObsKind::Gaussian,
        );
        let lambda = fm.basis.column_cont_eigenvalues();
        Ok(Self {
            fm,
            state,
            layout,
            priors,
            lambda,
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// The full-model layout (latent coefficients included) that augmented
    /// draws conform to.
    pub fn full_layout(&self) -> ParamLayout {
        ParamLayout::new(
            self.fm.basis.column_count(),
            self.layout.lengthscale_counts.clone(),
            ObsKind::Gaussian,
        )
    }

    /// Prepends an exact conditional draw of the latent coefficients to every
    /// hyperparameter draw, yielding chains in the full-model layout.
    pub fn augment_with_latents(&self, output: &SampleOutput, seed: u64) -> Result<SampleOutput> {
        let m = self.fm.basis.column_count();
        let theta_dim = self.layout.dim();
        let mut chains = Vec::with_capacity(output.chains.len());
        for (c, theta_chain) in output.chains.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1000 + c as u64);
            let mut full = DMatrix::zeros(theta_chain.nrows(), m + theta_dim);
            for r in 0..theta_chain.nrows() {
                let theta = theta_chain.row(r).transpose();
                let params = self.layout.hyperparams(&theta);
                let sigma = match params.obs {
                    ObsModel::Gaussian { sigma } => sigma,
                    ObsModel::BetaBinomial { .. } => unreachable!("layout is Gaussian"),
                };
                let sqrt_delta = self.fm.basis.delta(&params)?.map(f64::sqrt);
                let xi = self.state.sample_xi(&sqrt_delta, sigma, &mut rng)?;
                full.view_mut((r, 0), (1, m)).copy_from(&xi.transpose());
                full.view_mut((r, m), (1, theta_dim))
                    .copy_from(&theta_chain.row(r));
            }
            chains.push(full);
        }
        Ok(SampleOutput {
            chains,
            stats: output.stats.clone(),
        })
    }
}

impl LogpGrad for MarginalizedPosterior<'_> {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn logp_grad(&self, v: &DVector<f64>, grad: &mut DVector<f64>) -> f64 {
        grad.fill(0.0);
        let layout = &self.layout;
        let params = layout.hyperparams(v);
        let sigma = match params.obs {
            ObsModel::Gaussian { sigma } => sigma,
            ObsModel::BetaBinomial { .. } => unreachable!("layout is Gaussian"),
        };
        let delta = match self.fm.basis.delta(&params) {
            Ok(d) => d,
            Err(_) => return f64::NEG_INFINITY,
        };
        let sqrt_delta = delta.map(f64::sqrt);
        let (loglik, d_s, d_log_sigma) = match self.state.loglik_grad(&sqrt_delta, sigma) {
            Ok(r) => r,
            Err(_) => return f64::NEG_INFINITY,
        };

        let ell_starts: Vec<usize> = {
            let mut starts = Vec::with_capacity(layout.num_terms());
            let mut acc = layout.ell_offset();
            for &q in &layout.lengthscale_counts {
                starts.push(acc);
                acc += q;
            }
            starts
        };
        for i in 0..sqrt_delta.len() {
            let j = self.fm.basis.columns[i].term;
            // d sqrt_delta_i / d log alpha_j = sqrt_delta_i, and the
            // lengthscale chain picks up (1 - ell^2 lambda) / 2.
            let base = d_s[i] * sqrt_delta[i];
            grad[layout.alpha_offset() + j] += base;
            for (q, &lam) in self.lambda[i].iter().enumerate() {
                let ell = params.lengthscales[j][q];
                grad[ell_starts[j] + q] += base * 0.5 * (1.0 - ell * ell * lam);
            }
        }
        grad[layout.obs_offset()] += d_log_sigma;

        let logp = loglik + hyper_prior(layout, &self.priors, v, grad);
        if logp.is_finite() {
            logp
        } else {
            f64::NEG_INFINITY
        }
    }
}
