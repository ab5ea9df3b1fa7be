//! Observation models linking the latent function value `f(x_n)` to a response.
//!
//! Two likelihoods are supported:
//!
//! * **Gaussian**: `y_n ~ N(f_n, sigma^2)` for real responses.
//! * **Beta-binomial**: `y_n ~ BetaBinomial(trials_n, a_n, b_n)` for counts,
//!   with `rho_n = inv_logit(f_n + w0)`, `a_n = rho_n (1/gamma - 1)` and
//!   `b_n = (1 - rho_n)(1/gamma - 1)`. `gamma` controls overdispersion and
//!   `w0` is an intercept on the logit scale.
//!
//! All densities are evaluated pointwise; the full-data log likelihood is the
//! sum over points. Derivatives in `f` and in the unconstrained observation
//! parameters (`log sigma`, or `log gamma` and `w0`) are analytic, which is
//! what gradient-based samplers consume.

use rand::Rng;
use rand_distr::{Beta, Binomial, Distribution, Normal};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};

/// One observed response. Gaussian models use `Real`; beta-binomial models
/// use `Counts` with `successes <= trials`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Response {
    Real(f64),
    Counts { successes: u64, trials: u64 },
}

/// Which likelihood a model uses, without its parameter values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsKind {
    Gaussian,
    BetaBinomial,
}

/// An observation model together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum ObsModel {
    Gaussian { sigma: f64 },
    BetaBinomial { gamma: f64, intercept: f64 },
}

/// Numerically stable inverse logit: exact for large `|x|`, no overflow.
pub fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

fn ln_choose(n: f64, k: f64) -> f64 {
    ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0)
}

/// Beta shape parameters `(a, b)` for a beta-binomial point, or `None` when
/// they are not both positive (which happens for `gamma >= 1`, where the
/// density is zero everywhere and the log likelihood is `-inf`).
fn beta_shapes(gamma: f64, intercept: f64, f: f64) -> Option<(f64, f64, f64)> {
    let rho = inv_logit(f + intercept);
    let nu = 1.0 / gamma - 1.0;
    let a = rho * nu;
    let b = (1.0 - rho) * nu;
    if a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite() {
        Some((rho, a, b))
    } else {
        None
    }
}

impl ObsModel {
    pub fn kind(&self) -> ObsKind {
        match self {
            ObsModel::Gaussian { .. } => ObsKind::Gaussian,
            ObsModel::BetaBinomial { .. } => ObsKind::BetaBinomial,
        }
    }

    /// Names of the unconstrained observation parameters, in packing order.
    pub fn param_names(kind: ObsKind) -> &'static [&'static str] {
        match kind {
            ObsKind::Gaussian => &["sigma"],
            ObsKind::BetaBinomial => &["gamma", "w0"],
        }
    }

    pub fn unconstrained_len(kind: ObsKind) -> usize {
        Self::param_names(kind).len()
    }

    fn check(&self) -> Result<()> {
        let ok = match self {
            ObsModel::Gaussian { sigma } => *sigma > 0.0 && sigma.is_finite(),
            ObsModel::BetaBinomial { gamma, intercept } => {
                *gamma > 0.0 && gamma.is_finite() && intercept.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Model(format!(
                "invalid observation parameters: {self:?}"
            )))
        }
    }

    /// Log density/mass of one response given the latent value `f`.
    ///
    /// Returns `-inf` for parameter regions where the density is zero (for
    /// the beta-binomial this is `gamma >= 1`, where the Beta shapes are not
    /// positive); samplers treat such states as rejected.
    pub fn loglik_point(&self, y: Response, f: f64) -> Result<f64> {
        self.check()?;
        match (self, y) {
            (ObsModel::Gaussian { sigma }, Response::Real(y)) => {
                let z = (y - f) / sigma;
                Ok(-0.5 * (2.0 * std::f64::consts::PI).ln() - sigma.ln() - 0.5 * z * z)
            }
            (
                ObsModel::BetaBinomial { gamma, intercept },
                Response::Counts { successes, trials },
            ) => {
                if successes > trials {
                    return Err(Error::Data(format!(
                        "successes {successes} exceed trials {trials}"
                    )));
                }
                let (k, n) = (successes as f64, trials as f64);
                match beta_shapes(*gamma, *intercept, f) {
                    Some((_, a, b)) => {
                        Ok(ln_choose(n, k) + ln_beta(k + a, n - k + b) - ln_beta(a, b))
                    }
                    None => Ok(f64::NEG_INFINITY),
                }
            }
            (model, y) => Err(Error::Data(format!(
                "response {y:?} does not match observation model {:?}",
                model.kind()
            ))),
        }
    }

    /// Analytic `d loglik / d f` at one point. Zero where the log likelihood
    /// is `-inf` (the state is rejected anyway).
    pub fn dloglik_df(&self, y: Response, f: f64) -> Result<f64> {
        self.check()?;
        match (self, y) {
            (ObsModel::Gaussian { sigma }, Response::Real(y)) => Ok((y - f) / (sigma * sigma)),
            (
                ObsModel::BetaBinomial { gamma, intercept },
                Response::Counts { successes, trials },
            ) => {
                if successes > trials {
                    return Err(Error::Data(format!(
                        "successes {successes} exceed trials {trials}"
                    )));
                }
                let (k, n) = (successes as f64, trials as f64);
                match beta_shapes(*gamma, *intercept, f) {
                    // a + b does not depend on f, so the psi(n+a+b) and
                    // psi(a+b) terms cancel from the chain rule.
                    Some((rho, a, b)) => {
                        let nu = 1.0 / gamma - 1.0;
                        Ok(rho
                            * (1.0 - rho)
                            * nu
                            * (digamma(k + a) - digamma(a) - digamma(n - k + b) + digamma(b)))
                    }
                    None => Ok(0.0),
                }
            }
            (model, y) => Err(Error::Data(format!(
                "response {y:?} does not match observation model {:?}",
                model.kind()
            ))),
        }
    }

    /// Gradient of the pointwise log likelihood in the *unconstrained*
    /// observation parameters: `[d/d log sigma]` for Gaussian,
    /// `[d/d log gamma, d/d w0]` for beta-binomial.
    pub fn dloglik_dobs(&self, y: Response, f: f64) -> Result<Vec<f64>> {
        self.check()?;
        match (self, y) {
            (ObsModel::Gaussian { sigma }, Response::Real(y)) => {
                let z = (y - f) / sigma;
                Ok(vec![-1.0 + z * z])
            }
            (
                ObsModel::BetaBinomial { gamma, intercept },
                Response::Counts { successes, trials },
            ) => {
                if successes > trials {
                    return Err(Error::Data(format!(
                        "successes {successes} exceed trials {trials}"
                    )));
                }
                let (k, n) = (successes as f64, trials as f64);
                match beta_shapes(*gamma, *intercept, f) {
                    Some((rho, a, b)) => {
                        // d a / d log gamma = -rho / gamma, d b / d log gamma = -(1-rho) / gamma.
                        let dl_dloggamma = -(1.0 / gamma)
                            * (rho * (digamma(k + a) - digamma(a))
                                + (1.0 - rho) * (digamma(n - k + b) - digamma(b))
                                + digamma(a + b)
                                - digamma(n + a + b));
                        let dl_dw0 = self.dloglik_df(y, f)?;
                        Ok(vec![dl_dloggamma, dl_dw0])
                    }
                    None => Ok(vec![0.0, 0.0]),
                }
            }
            (model, y) => Err(Error::Data(format!(
                "response {y:?} does not match observation model {:?}",
                model.kind()
            ))),
        }
    }

    /// One draw from the predictive distribution `p(y | f, theta_obs)`.
    ///
    /// Beta-binomial predictions need a trials count for the new point;
    /// Gaussian predictions ignore `trials`.
    pub fn sample_predictive<R: Rng + ?Sized>(
        &self,
        f: f64,
        trials: Option<u64>,
        rng: &mut R,
    ) -> Result<Response> {
        self.check()?;
        match self {
            ObsModel::Gaussian { sigma } => {
                let d = Normal::new(f, *sigma)
                    .map_err(|e| Error::Numerical(format!("normal sampler: {e}")))?;
                Ok(Response::Real(d.sample(rng)))
            }
            ObsModel::BetaBinomial { gamma, intercept } => {
                let n = trials.ok_or_else(|| {
                    Error::Data("beta-binomial prediction needs a trials count".into())
                })?;
                let (_, a, b) = beta_shapes(*gamma, *intercept, f).ok_or_else(|| {
                    Error::Numerical(format!(
                        "beta-binomial shapes not positive (gamma = {gamma})"
                    ))
                })?;
                let p = Beta::new(a, b)
                    .map_err(|e| Error::Numerical(format!("beta sampler: {e}")))?
                    .sample(rng);
                let k = Binomial::new(n, p.clamp(0.0, 1.0))
                    .map_err(|e| Error::Numerical(format!("binomial sampler: {e}")))?
                    .sample(rng);
                Ok(Response::Counts {
                    successes: k,
                    trials: n,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn gaussian_loglik_at_mode_is_standard_normal_constant() {
        let m = ObsModel::Gaussian { sigma: 1.0 };
        let l = m.loglik_point(Response::Real(0.3), 0.3).unwrap();
        assert!((l - (-0.9189385332046727)).abs() < 1e-14, "got {l}");
    }

    #[test]
    fn gaussian_gradients_match_closed_form() {
        let m = ObsModel::Gaussian { sigma: 1.0 };
        assert_eq!(m.dloglik_df(Response::Real(0.5), 0.5).unwrap(), 0.0);
        assert!((m.dloglik_df(Response::Real(1.0), 0.0).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn beta_binomial_symmetric_at_even_odds() {
        // f + w0 = 0 makes rho = 1/2 and a = b, so the pmf is symmetric
        // in successes <-> trials - successes.
        let m = ObsModel::BetaBinomial {
            gamma: 0.23,
            intercept: 0.7,
        };
        for k in 0..=17u64 {
            let l1 = m
                .loglik_point(
                    Response::Counts {
                        successes: k,
                        trials: 17,
                    },
                    -0.7,
                )
                .unwrap();
            let l2 = m
                .loglik_point(
                    Response::Counts {
                        successes: 17 - k,
                        trials: 17,
                    },
                    -0.7,
                )
                .unwrap();
            assert!((l1 - l2).abs() < 1e-12, "k={k}: {l1} vs {l2}");
        }
    }

    #[test]
    fn beta_binomial_single_trial_even_odds_is_half() {
        for gamma in [0.05, 0.3, 0.9] {
            let m = ObsModel::BetaBinomial {
                gamma,
                intercept: 0.0,
            };
            for k in [0u64, 1u64] {
                let l = m
                    .loglik_point(
                        Response::Counts {
                            successes: k,
                            trials: 1,
                        },
                        0.0,
                    )
                    .unwrap();
                assert!((l - 0.5f64.ln()).abs() < 1e-12, "gamma={gamma} k={k}: {l}");
            }
        }
    }

    #[test]
    fn beta_binomial_pmf_sums_to_one() {
        for (gamma, rho) in [(0.1, 0.5), (0.45, 0.2), (0.8, 0.9)] {
            let m = ObsModel::BetaBinomial {
                gamma,
                intercept: 0.0,
            };
            let f = logit(rho);
            for trials in [1u64, 7, 50] {
                let total: f64 = (0..=trials)
                    .map(|k| {
                        m.loglik_point(
                            Response::Counts {
                                successes: k,
                                trials,
                            },
                            f,
                        )
                        .unwrap()
                        .exp()
                    })
                    .sum();
                assert!(
                    (total - 1.0).abs() < 1e-10,
                    "gamma={gamma} rho={rho} trials={trials}: sum {total}"
                );
            }
        }
    }

    #[test]
    fn beta_binomial_infeasible_gamma_has_zero_density() {
        let m = ObsModel::BetaBinomial {
            gamma: 1.5,
            intercept: 0.0,
        };
        let l = m
            .loglik_point(
                Response::Counts {
                    successes: 3,
                    trials: 10,
                },
                0.2,
            )
            .unwrap();
        assert_eq!(l, f64::NEG_INFINITY);
        assert_eq!(
            m.dloglik_df(
                Response::Counts {
                    successes: 3,
                    trials: 10
                },
                0.2
            )
            .unwrap(),
            0.0
        );
    }

    #[test]
    fn mismatched_response_is_an_error() {
        let m = ObsModel::Gaussian { sigma: 1.0 };
        assert!(m
            .loglik_point(
                Response::Counts {
                    successes: 1,
                    trials: 2
                },
                0.0
            )
            .is_err());
        let m = ObsModel::BetaBinomial {
            gamma: 0.2,
            intercept: 0.0,
        };
        assert!(m.loglik_point(Response::Real(0.5), 0.0).is_err());
    }

    /// Central finite difference of a scalar function.
    fn fd(mut g: impl FnMut(f64) -> f64, x: f64) -> f64 {
        let h = 1e-5;
        (g(x + h) - g(x - h)) / (2.0 * h)
    }

    fn rel_err(got: f64, want: f64) -> f64 {
        (got - want).abs() / want.abs().max(1.0)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(1401);
        for _ in 0..200 {
            // Gaussian: d/df and d/dlog sigma.
            let sigma = 0.2 + 1.8 * rng.random::<f64>();
            let y = 4.0 * rng.random::<f64>() - 2.0;
            let f = 4.0 * rng.random::<f64>() - 2.0;
            let m = ObsModel::Gaussian { sigma };
            let want_df = fd(|t| m.loglik_point(Response::Real(y), t).unwrap(), f);
            let got_df = m.dloglik_df(Response::Real(y), f).unwrap();
            assert!(
                rel_err(got_df, want_df) < 1e-5,
                "gaussian df: {got_df} vs {want_df}"
            );
            let want_ds = fd(
                |ls| {
                    ObsModel::Gaussian { sigma: ls.exp() }
                        .loglik_point(Response::Real(y), f)
                        .unwrap()
                },
                sigma.ln(),
            );
            let got_ds = m.dloglik_dobs(Response::Real(y), f).unwrap()[0];
            assert!(
                rel_err(got_ds, want_ds) < 1e-5,
                "gaussian dlogsigma: {got_ds} vs {want_ds}"
            );

            // Beta-binomial: d/df, d/dlog gamma, d/dw0.
            let gamma = 0.05 + 0.85 * rng.random::<f64>();
            let w0 = rng.random::<f64>() - 0.5;
            let trials = 1 + rng.random_range(0..60u64);
            let successes = rng.random_range(0..=trials);
            let yb = Response::Counts { successes, trials };
            let fb = 3.0 * rng.random::<f64>() - 1.5;
            let m = ObsModel::BetaBinomial {
                gamma,
                intercept: w0,
            };
            let want_df = fd(|t| m.loglik_point(yb, t).unwrap(), fb);
            let got_df = m.dloglik_df(yb, fb).unwrap();
            assert!(
                rel_err(got_df, want_df) < 1e-5,
                "bb df: {got_df} vs {want_df}"
            );
            let grads = m.dloglik_dobs(yb, fb).unwrap();
            let want_dg = fd(
                |lg| {
                    ObsModel::BetaBinomial {
                        gamma: lg.exp(),
                        intercept: w0,
                    }
                    .loglik_point(yb, fb)
                    .unwrap()
                },
                gamma.ln(),
            );
            assert!(
                rel_err(grads[0], want_dg) < 1e-5,
                "bb dloggamma: {} vs {want_dg}",
                grads[0]
            );
            let want_dw = fd(
                |w| {
                    ObsModel::BetaBinomial {
                        gamma,
                        intercept: w,
                    }
                    .loglik_point(yb, fb)
                    .unwrap()
                },
                w0,
            );
            assert!(
                rel_err(grads[1], want_dw) < 1e-5,
                "bb dw0: {} vs {want_dw}",
                grads[1]
            );
        }
    }

    #[test]
    fn gaussian_predictive_with_tiny_noise_returns_f() {
        let m = ObsModel::Gaussian { sigma: 1e-12 };
        let mut rng = StdRng::seed_from_u64(7);
        match m.sample_predictive(2.5, None, &mut rng).unwrap() {
            Response::Real(y) => assert!((y - 2.5).abs() < 1e-9, "got {y}"),
            other => panic!("unexpected response {other:?}"),
        }
    }

    #[test]
    fn gaussian_predictive_moments() {
        let m = ObsModel::Gaussian { sigma: 1.0 };
        let mut rng = StdRng::seed_from_u64(99);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            if let Response::Real(y) = m.sample_predictive(0.0, None, &mut rng).unwrap() {
                sum += y;
                sumsq += y * y;
            }
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn beta_binomial_predictive_mean() {
        let m = ObsModel::BetaBinomial {
            gamma: 0.1,
            intercept: 0.0,
        };
        let f = logit(0.3);
        let mut rng = StdRng::seed_from_u64(3);
        let n = 100_000;
        let mut sum = 0u64;
        for _ in 0..n {
            if let Response::Counts { successes, .. } =
                m.sample_predictive(f, Some(100), &mut rng).unwrap()
            {
                sum += successes;
            }
        }
        let mean = sum as f64 / n as f64;
        assert!((mean - 30.0).abs() < 1.0, "mean {mean}");
        assert!(
            m.sample_predictive(f, None, &mut rng).is_err(),
            "missing trials must fail"
        );
    }
}
