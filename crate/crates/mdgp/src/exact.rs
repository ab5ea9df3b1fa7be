//! Dense exact-GP reference implementation.
//!
//! Deliberately `O(N^3)` textbook linear algebra with no structure
//! exploitation: this module is the oracle the scalable path is checked
//! against (and the "exact model" side of small-data comparisons). Nothing
//! here may be called from the inference hot path.
//!
//! All operations factor `K_y = K + sigma^2 I` once by Cholesky; a failed
//! factorization is retried a single time with `1e-8 x mean diagonal` jitter
//! and then surfaces as an error rather than silently inflating noise.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Cholesky factorization with one jitter retry.
fn factor(sigma: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if sigma.nrows() != sigma.ncols() {
        return Err(Error::Numerical(format!(
            "covariance must be square, got {}x{}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    if let Some(chol) = Cholesky::new(sigma.clone()) {
        return Ok(chol);
    }
    let jitter = 1e-8 * sigma.diagonal().mean();
    let mut bumped = sigma.clone();
    for i in 0..sigma.nrows() {
        bumped[(i, i)] += jitter;
    }
    Cholesky::new(bumped).ok_or_else(|| {
        Error::Numerical(format!(
            "covariance is singular (Cholesky failed after {jitter:.3e} jitter)"
        ))
    })
}

/// A factored training covariance `K_y = K + sigma^2 I`, reusable across
/// solves.
pub struct TrainFactor {
    chol: Cholesky<f64, Dyn>,
}

impl TrainFactor {
    pub fn new(k: &DMatrix<f64>, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Numerical(format!(
                "noise sd must be positive, got {sigma}"
            )));
        }
        let mut ky = k.clone();
        for i in 0..k.nrows() {
            ky[(i, i)] += sigma * sigma;
        }
        Ok(Self { chol: factor(&ky)? })
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }
}

/// Log density of `N(y | 0, Sigma)` via Cholesky factorization.
pub fn mvn_logpdf(y: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    let n = y.len();
    if sigma.nrows() != n {
        return Err(Error::Numerical(format!(
            "covariance is {}x{} but y has {n} entries",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let chol = factor(sigma)?;
    let logdet: f64 = chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|d| d.ln())
        .sum::<f64>()
        * 2.0;
    let alpha = chol.solve(y);
    Ok(-0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * logdet - 0.5 * y.dot(&alpha))
}

/// Gaussian marginal likelihood `log N(y | 0, K + sigma^2 I)` with the
/// latent function integrated out.
pub fn marginal_loglik_gaussian(k: &DMatrix<f64>, sigma: f64, y: &DVector<f64>) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Numerical(format!(
            "noise sd must be positive, got {sigma}"
        )));
    }
    let mut ky = k.clone();
    for i in 0..k.nrows() {
        ky[(i, i)] += sigma * sigma;
    }
    mvn_logpdf(y, &ky)
}

/// Posterior of the latent function at the training points.
#[derive(Debug, Clone)]
pub struct ExactPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// `p(f | y, theta)` for the Gaussian model: mean `K K_y^{-1} y`, covariance
/// `K - K K_y^{-1} K`.
pub fn exact_posterior_f(k: &DMatrix<f64>, sigma: f64, y: &DVector<f64>) -> Result<ExactPosterior> {
    if k.nrows() != y.len() {
        return Err(Error::Numerical(format!(
            "kernel matrix is {}x{} but y has {} entries",
            k.nrows(),
            k.ncols(),
            y.len()
        )));
    }
    let factor = TrainFactor::new(k, sigma)?;
    let mean = k * factor.solve_vec(y);
    let cov = k - k * factor.solve_mat(k);
    Ok(ExactPosterior { mean, cov })
}

/// Posterior of the latent function at `P` new points, given the cross
/// kernel `K*` (`P x N`), the test kernel `K**` (`P x P`), and the factored
/// training covariance. The same formula serves full kernels and single
/// additive components — pass the component's `K*^(j)`, `K**^(j)`.
///
/// The *observation* predictive for the Gaussian model adds `sigma^2 I` to
/// the returned covariance.
pub fn exact_predict(
    k_star: &DMatrix<f64>,
    k_starstar: &DMatrix<f64>,
    train: &TrainFactor,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = k_star.nrows();
    if k_star.ncols() != y.len() || y.len() != train.dim() {
        return Err(Error::Numerical(format!(
            "cross kernel is {}x{} but training size is {}",
            p,
            k_star.ncols(),
            y.len()
        )));
    }
    if k_starstar.nrows() != p || k_starstar.ncols() != p {
        return Err(Error::Numerical(format!(
            "test kernel is {}x{}, expected {p}x{p}",
            k_starstar.nrows(),
            k_starstar.ncols()
        )));
    }
    let mean = k_star * train.solve_vec(y);
    let cov = k_starstar - k_star * train.solve_mat(&k_star.transpose());
    Ok((mean, cov))
}

/// One draw from `N(mean, cov)` (covariance factored with the usual jitter
/// retry, so slightly rank-deficient posteriors sample fine).
pub fn mvn_sample<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let chol = factor(cov)?;
    let eta = DVector::from_fn(mean.len(), |_, _| rng.sample(StandardNormal));
    Ok(mean + chol.l_dirty().lower_triangle() * eta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{
        kernel_cross_matrix, kernel_matrix, term_cross_matrix, BaseKernel, CovariateSpace, DimSpec,
        HyperParams, KernelExpr, KernelTerm, Value,
    };
    use crate::obs::ObsModel;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_spd(n: usize, rng: &mut StdRng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    fn random_vec(n: usize, rng: &mut StdRng) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn mvn_logpdf_closed_form_values() {
        let l = mvn_logpdf(&DVector::from_element(1, 0.0), &DMatrix::identity(1, 1)).unwrap();
        assert!((l - (-0.9189385332046727)).abs() < 1e-14, "got {l}");
        for n in [3usize, 10] {
            let l = mvn_logpdf(&DVector::zeros(n), &DMatrix::identity(n, n)).unwrap();
            let want = -0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
            assert!((l - want).abs() < 1e-12);
        }
    }

    #[test]
    fn mvn_logpdf_matches_naive_dense_inverse() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..30 {
            let n = 2 + rng.random_range(0..18usize);
            let sigma = random_spd(n, &mut rng);
            let y = random_vec(n, &mut rng);
            let got = mvn_logpdf(&y, &sigma).unwrap();
            let inv = sigma.clone().try_inverse().unwrap();
            let naive = -0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
                - 0.5 * sigma.determinant().ln()
                - 0.5 * y.dot(&(&inv * &y));
            assert!(
                (got - naive).abs() / naive.abs().max(1.0) < 1e-8,
                "{got} vs naive {naive}"
            );
        }
    }

    #[test]
    fn mvn_logpdf_normalizes_on_a_grid() {
        // 1-D quadrature of exp(logpdf) over [-8, 8].
        let sigma = DMatrix::from_element(1, 1, 1.44);
        let steps = 4000;
        let h = 16.0 / steps as f64;
        let mut total = 0.0;
        for i in 0..steps {
            let y = -8.0 + (i as f64 + 0.5) * h;
            total += mvn_logpdf(&DVector::from_element(1, y), &sigma)
                .unwrap()
                .exp()
                * h;
        }
        assert!((total - 1.0).abs() < 1e-4, "integral {total}");
    }

    #[test]
    fn jitter_retry_handles_rank_deficiency_once() {
        // Rank-1 PSD matrix: plain Cholesky fails, the jittered one succeeds.
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let rank1 = &v * v.transpose();
        let y = DVector::zeros(3);
        assert!(mvn_logpdf(&y, &rank1).is_ok());
        // Indefinite matrix: fails even after jitter.
        let neg = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(mvn_logpdf(&DVector::zeros(2), &neg).is_err());
    }

    #[test]
    fn marginal_loglik_closed_form_values() {
        let l = marginal_loglik_gaussian(&DMatrix::zeros(4, 4), 1.0, &DVector::zeros(4)).unwrap();
        assert!((l - (-2.0 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
        // N=1, K=1, sigma=1, y=1: N(1 | 0, 2) = -log(4 pi)/2 - 1/4.
        let l = marginal_loglik_gaussian(
            &DMatrix::from_element(1, 1, 1.0),
            1.0,
            &DVector::from_element(1, 1.0),
        )
        .unwrap();
        assert!((l - (-1.5155121234846454)).abs() < 1e-12, "got {l}");
    }

    #[test]
    fn marginal_loglik_is_permutation_invariant() {
        let mut rng = StdRng::seed_from_u64(4);
        let n = 9;
        let k = random_spd(n, &mut rng);
        let y = random_vec(n, &mut rng);
        let base = marginal_loglik_gaussian(&k, 0.7, &y).unwrap();
        let perm: Vec<usize> = vec![4, 0, 8, 2, 6, 1, 7, 3, 5];
        let kp = DMatrix::from_fn(n, n, |i, j| k[(perm[i], perm[j])]);
        let yp = DVector::from_fn(n, |i, _| y[perm[i]]);
        let permuted = marginal_loglik_gaussian(&kp, 0.7, &yp).unwrap();
        assert!((base - permuted).abs() < 1e-10);
    }

    #[test]
    fn posterior_limits_and_contraction() {
        let mut rng = StdRng::seed_from_u64(8);
        let n = 6;
        let k = random_spd(n, &mut rng);
        let mut y = random_vec(n, &mut rng);
        y /= y.norm();

        // Huge noise: prior dominates, mean shrinks to zero.
        let post = exact_posterior_f(&k, 1e4, &y).unwrap();
        assert!(post.mean.norm() < 1e-3, "mean norm {}", post.mean.norm());

        // K = I, sigma = 1: everything is scalar algebra.
        let post = exact_posterior_f(&DMatrix::identity(n, n), 1.0, &y).unwrap();
        assert!((&post.mean - &y * 0.5).norm() < 1e-12);
        assert!((&post.cov - DMatrix::identity(n, n) * 0.5).norm() < 1e-12);

        // Posterior variance never exceeds prior variance.
        let post = exact_posterior_f(&k, 0.5, &y).unwrap();
        for i in 0..n {
            assert!(post.cov[(i, i)] <= k[(i, i)] + 1e-12);
        }
    }

    fn eq_space_and_expr() -> (CovariateSpace, KernelExpr) {
        let space = CovariateSpace::new(vec![DimSpec::Continuous { name: "x".into() }]).unwrap();
        let expr = KernelExpr::new(
            vec![KernelTerm {
                continuous: vec![0],
                categorical: vec![],
            }],
            &space,
        )
        .unwrap();
        (space, expr)
    }

    #[test]
    fn predict_interpolates_training_data_at_low_noise() {
        let (space, expr) = eq_space_and_expr();
        let params = HyperParams {
            magnitudes: vec![1.0],
            lengthscales: vec![vec![1.0]],
            obs: ObsModel::Gaussian { sigma: 1.0 },
        };
        let train: Vec<Vec<Value>> = [-1.0, 0.0, 1.0]
            .iter()
            .map(|&x| vec![Value::Real(x)])
            .collect();
        let test = vec![vec![Value::Real(0.0)]];
        let y = DVector::from_vec(vec![0.3, -0.8, 0.5]);
        let k = kernel_matrix(&expr, &params, &space, &train).unwrap();
        let ks = kernel_cross_matrix(&expr, &params, &space, &test, &train).unwrap();
        let kss = kernel_matrix(&expr, &params, &space, &test).unwrap();
        let factor = TrainFactor::new(&k, 1e-4).unwrap();
        let (mu, _) = exact_predict(&ks, &kss, &factor, &y).unwrap();
        assert!(
            (mu[0] - (-0.8)).abs() < 1e-3,
            "interpolation miss: {}",
            mu[0]
        );
    }

    #[test]
    fn predict_with_zero_cross_kernel_returns_the_prior() {
        let mut rng = StdRng::seed_from_u64(15);
        let k = random_spd(5, &mut rng);
        let y = random_vec(5, &mut rng);
        let factor = TrainFactor::new(&k, 0.5).unwrap();
        let kss = random_spd(2, &mut rng);
        let (mu, cov) = exact_predict(&DMatrix::zeros(2, 5), &kss, &factor, &y).unwrap();
        assert!(mu.norm() < 1e-14);
        assert!((cov - kss).norm() < 1e-14);
    }

    #[test]
    fn predict_matches_naive_dense_inverse() {
        let (space, expr) = eq_space_and_expr();
        let params = HyperParams {
            magnitudes: vec![1.4],
            lengthscales: vec![vec![0.7]],
            obs: ObsModel::Gaussian { sigma: 1.0 },
        };
        let mut rng = StdRng::seed_from_u64(21);
        let train: Vec<Vec<Value>> = (0..3)
            .map(|_| vec![Value::Real(rng.random::<f64>() * 2.0 - 1.0)])
            .collect();
        let test: Vec<Vec<Value>> = (0..2)
            .map(|_| vec![Value::Real(rng.random::<f64>() * 2.0 - 1.0)])
            .collect();
        let y = random_vec(3, &mut rng);
        let sigma = 0.6;
        let k = kernel_matrix(&expr, &params, &space, &train).unwrap();
        let ks = kernel_cross_matrix(&expr, &params, &space, &test, &train).unwrap();
        let kss = kernel_matrix(&expr, &params, &space, &test).unwrap();
        let factor = TrainFactor::new(&k, sigma).unwrap();
        let (mu, cov) = exact_predict(&ks, &kss, &factor, &y).unwrap();

        let ky_inv = (k + DMatrix::identity(3, 3) * sigma * sigma)
            .try_inverse()
            .unwrap();
        let mu_naive = &ks * &ky_inv * &y;
        let cov_naive = &kss - &ks * &ky_inv * ks.transpose();
        assert!((mu - mu_naive).norm() < 1e-8);
        assert!((cov - cov_naive).norm() < 1e-8);
    }

    #[test]
    fn component_predictions_sum_to_the_total() {
        let space = CovariateSpace::new(vec![
            DimSpec::Continuous { name: "x".into() },
            DimSpec::Categorical {
                name: "z".into(),
                labels: vec!["1".into(), "2".into(), "3".into()],
            },
        ])
        .unwrap();
        let expr = KernelExpr::new(
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
            &space,
        )
        .unwrap();
        let params = HyperParams {
            magnitudes: vec![1.0, 0.8],
            lengthscales: vec![vec![1.0], vec![0.6]],
            obs: ObsModel::Gaussian { sigma: 1.0 },
        };
        let mut rng = StdRng::seed_from_u64(33);
        let train: Vec<Vec<Value>> = (0..9)
            .map(|i| {
                vec![
                    Value::Real(rng.random::<f64>() * 4.0 - 2.0),
                    Value::Cat(i % 3),
                ]
            })
            .collect();
        let y = random_vec(9, &mut rng);
        let sigma = 0.4;
        let k = kernel_matrix(&expr, &params, &space, &train).unwrap();
        let factor = TrainFactor::new(&k, sigma).unwrap();

        // Test points: one fixed x, every category.
        let test: Vec<Vec<Value>> = (0..3)
            .map(|z| vec![Value::Real(0.25), Value::Cat(z)])
            .collect();
        let ks = kernel_cross_matrix(&expr, &params, &space, &test, &train).unwrap();
        let kss = kernel_matrix(&expr, &params, &space, &test).unwrap();
        let (mu_total, _) = exact_predict(&ks, &kss, &factor, &y).unwrap();

        let mut mu_sum = DVector::zeros(3);
        let mut mu_zs = DVector::zeros(3);
        for j in 0..2 {
            let ksj = term_cross_matrix(&expr, j, &params, &space, &test, &train).unwrap();
            let kssj = {
                let mut m = DMatrix::zeros(3, 3);
                for a in 0..3 {
                    for b in 0..3 {
                        m[(a, b)] =
                            crate::kernel::eval_term(&expr, j, &params, &space, &test[a], &test[b])
                                .unwrap();
                    }
                }
                m
            };
            let (mu_j, _) = exact_predict(&ksj, &kssj, &factor, &y).unwrap();
            mu_sum += &mu_j;
            if j == 1 {
                mu_zs = mu_j;
            }
        }
        assert!(
            (mu_total - mu_sum).norm() < 1e-10,
            "components do not add up"
        );
        // The zero-sum component's means cancel across categories at fixed x.
        let s = mu_zs.sum();
        assert!(s.abs() < 1e-8, "zero-sum component sums to {s}");
    }

    #[test]
    fn mvn_sample_has_the_right_moments() {
        let mean = DVector::from_vec(vec![1.0, -2.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 0.5]);
        let mut rng = StdRng::seed_from_u64(100);
        let n = 40_000;
        let mut m = DVector::zeros(2);
        let mut c = DMatrix::zeros(2, 2);
        let draws: Vec<DVector<f64>> = (0..n)
            .map(|_| mvn_sample(&mean, &cov, &mut rng).unwrap())
            .collect();
        for d in &draws {
            m += d;
        }
        m /= n as f64;
        for d in &draws {
            let r = d - &m;
            c += &r * r.transpose();
        }
        c /= n as f64 - 1.0;
        assert!((m - &mean).amax() < 0.05, "sample mean off");
        assert!((c - &cov).amax() < 0.06, "sample covariance off");
    }
}
