//! Dynamic multinomial no-U-turn sampler.
//!
//! Each iteration doubles a leapfrog trajectory in a random direction until
//! the endpoints start moving toward each other, a divergence occurs, or the
//! maximum tree depth is reached; the next state is drawn from the visited
//! states with weights proportional to `exp(-H)` (multinomial sampling with
//! a bias toward the newer half of the trajectory).
//!
//! Warmup adapts the step size by dual averaging toward a target acceptance
//! statistic and a diagonal mass matrix from the sample variance, staged as
//! an initial step-size-only buffer (75 iterations), doubling variance
//! windows (25, 50, 100, ...), and a terminal step-size buffer (50); short
//! warmups fall back to a proportional 15% / 75% / 10% split. Chains run
//! concurrently (capped by the `MDGP_THREADS` environment variable) with
//! per-chain counter-based rng streams, so results are reproducible for a
//! fixed seed regardless of thread scheduling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::LogpGrad;
use crate::error::{Error, Result};

/// Energy gap above which a trajectory is declared divergent.
const DIVERGENCE_THRESHOLD: f64 = 1000.0;

/// Sampler settings. `iters` counts total iterations per chain, of which the
/// first `warmup` are discarded (adaptation) and the rest are kept.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub chains: usize,
    pub iters: usize,
    pub warmup: usize,
    pub target_accept: f64,
    pub max_treedepth: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            iters: 2000,
            warmup: 1000,
            target_accept: 0.95,
            max_treedepth: 10,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn kept(&self) -> usize {
        self.iters.saturating_sub(self.warmup)
    }

    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::Config("sampler needs at least one chain".into()));
        }
        if self.iters <= self.warmup {
            return Err(Error::Config(format!(
                "iters ({}) must exceed warmup ({})",
                self.iters, self.warmup
            )));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config("target_accept must lie in (0, 1)".into()));
        }
        if self.max_treedepth == 0 || self.max_treedepth > 16 {
            return Err(Error::Config("max_treedepth must lie in 1..=16".into()));
        }
        Ok(())
    }
}

/// Per-chain adaptation and mixing summary (post-warmup counts).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChainStats {
    pub divergences: usize,
    pub max_treedepth_hits: usize,
    pub step_size: f64,
    pub mean_accept: f64,
}

/// Kept draws (one `kept x dim` matrix per chain, unconstrained scale) plus
/// per-chain stats.
#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub chains: Vec<DMatrix<f64>>,
    pub stats: Vec<ChainStats>,
}

/// A point on the trajectory with everything needed to continue integrating.
#[derive(Clone)]
struct State {
    q: DVector<f64>,
    p: DVector<f64>,
    grad: DVector<f64>,
    logp: f64,
}

impl State {
    fn energy(&self, inv_mass: &DVector<f64>) -> f64 {
        -self.logp + kinetic(&self.p, inv_mass)
    }
}

fn kinetic(p: &DVector<f64>, inv_mass: &DVector<f64>) -> f64 {
    0.5 * p
        .iter()
        .zip(inv_mass.iter())
        .map(|(pi, mi)| mi * pi * pi)
        .sum::<f64>()
}

fn leapfrog<T: LogpGrad + ?Sized>(
    target: &T,
    from: &State,
    eps: f64,
    inv_mass: &DVector<f64>,
) -> State {
    let mut p = &from.p + (0.5 * eps) * &from.grad;
    let mut q = from.q.clone();
    for i in 0..q.len() {
        q[i] += eps * inv_mass[i] * p[i];
    }
    let mut grad = DVector::zeros(q.len());
    let logp = target.logp_grad(&q, &mut grad);
    if logp.is_finite() {
        p += (0.5 * eps) * &grad;
    }
    State { q, p, grad, logp }
}

/// Endpoint no-U-turn check: stop when the ends of the trajectory begin to
/// approach each other under the mass-matrix inner product.
fn is_turning(left: &State, right: &State, inv_mass: &DVector<f64>) -> bool {
    let mut toward_left = 0.0;
    let mut toward_right = 0.0;
    for i in 0..left.q.len() {
        let dq = right.q[i] - left.q[i];
        toward_left += dq * inv_mass[i] * left.p[i];
        toward_right += dq * inv_mass[i] * right.p[i];
    }
    toward_left < 0.0 || toward_right < 0.0
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

/// A balanced subtree of visited states.
struct Tree {
    /// Earliest state (in trajectory time) covered by this subtree.
    left: State,
    /// Latest state covered by this subtree.
    right: State,
    /// Multinomial proposal drawn from this subtree.
    sample: State,
    /// log of the total multinomial weight `sum exp(h0 - H)`.
    logw: f64,
    sum_accept: f64,
    leaves: usize,
    diverged: bool,
    turning: bool,
}

/// Builds a subtree of `2^depth` new states extending `from` with signed step
/// `eps` (negative = backward in trajectory time). `h0` is the energy at the
/// iteration's initial state.
#[allow(clippy::too_many_arguments)]
fn build_tree<T: LogpGrad + ?Sized>(
    target: &T,
    depth: usize,
    from: &State,
    eps: f64,
    h0: f64,
    inv_mass: &DVector<f64>,
    rng: &mut ChaCha8Rng,
) -> Tree {
    if depth == 0 {
        let state = leapfrog(target, from, eps, inv_mass);
        let h = state.energy(inv_mass);
        let delta = h - h0;
        let diverged = !(delta <= DIVERGENCE_THRESHOLD);
        let logw = -delta;
        let accept = if delta.is_nan() {
            0.0
        } else {
            (-delta).exp().min(1.0)
        };
        return Tree {
            left: state.clone(),
            right: state.clone(),
            sample: state,
            logw: if diverged { f64::NEG_INFINITY } else { logw },
            sum_accept: accept,
            leaves: 1,
            diverged,
            turning: false,
        };
    }

    let first = build_tree(target, depth - 1, from, eps, h0, inv_mass, rng);
    if first.diverged || first.turning {
        return first;
    }
    let grow_from = if eps > 0.0 { &first.right } else { &first.left };
    let second = build_tree(target, depth - 1, grow_from, eps, h0, inv_mass, rng);

    let logw = log_sum_exp(first.logw, second.logw);
    let sum_accept = first.sum_accept + second.sum_accept;
    let leaves = first.leaves + second.leaves;
    if second.diverged || second.turning {
        return Tree {
            left: first.left,
            right: first.right,
            sample: first.sample,
            logw,
            sum_accept,
            leaves,
            diverged: second.diverged,
            turning: second.turning,
        };
    }

    // Unbiased multinomial choice between the halves.
    let sample = if logw > f64::NEG_INFINITY && rng.random::<f64>() < (second.logw - logw).exp() {
        second.sample
    } else {
        first.sample
    };
    let (left, right) = if eps > 0.0 {
        (first.left, second.right)
    } else {
        (second.left, first.right)
    };
    let turning = is_turning(&left, &right, inv_mass);
    Tree {
        left,
        right,
        sample,
        logw,
        sum_accept,
        leaves,
        diverged: false,
        turning,
    }
}

/// Dual-averaging step-size adaptation toward a target acceptance statistic.
struct DualAveraging {
    mu: f64,
    log_eps_bar: f64,
    h_bar: f64,
    count: f64,
    target: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps0: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * eps0).ln(),
            log_eps_bar: 0.0,
            h_bar: 0.0,
            count: 0.0,
            target,
        }
    }

    fn update(&mut self, accept: f64) -> f64 {
        self.count += 1.0;
        let eta = 1.0 / (self.count + Self::T0);
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept);
        let log_eps = self.mu - self.count.sqrt() / Self::GAMMA * self.h_bar;
        let w = self.count.powf(-Self::KAPPA);
        self.log_eps_bar = w * log_eps + (1.0 - w) * self.log_eps_bar;
        log_eps.exp()
    }

    fn smoothed(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Online variance accumulator for mass-matrix windows.
struct RunningVariance {
    n: f64,
    mean: DVector<f64>,
    m2: DVector<f64>,
}

impl RunningVariance {
    fn new(dim: usize) -> Self {
        Self {
            n: 0.0,
            mean: DVector::zeros(dim),
            m2: DVector::zeros(dim),
        }
    }

    fn push(&mut self, q: &DVector<f64>) {
        self.n += 1.0;
        for i in 0..q.len() {
            let d = q[i] - self.mean[i];
            self.mean[i] += d / self.n;
            self.m2[i] += d * (q[i] - self.mean[i]);
        }
    }

    /// Shrunk variance estimate: `var * n/(n+5) + 1e-3 * 5/(n+5)`, guarding
    /// against wild early estimates and exact zeros.
    fn regularized(&self) -> Option<DVector<f64>> {
        if self.n < 2.0 {
            return None;
        }
        let w = self.n / (self.n + 5.0);
        Some(DVector::from_fn(self.mean.len(), |i, _| {
            w * self.m2[i] / (self.n - 1.0) + 1e-3 * (1.0 - w)
        }))
    }
}

/// Half-open iteration ranges (within warmup) over which the mass matrix is
/// estimated; the matrix updates when each window closes.
fn mass_windows(warmup: usize) -> Vec<(usize, usize)> {
    let (init_buffer, term_buffer, base_window) = if warmup >= 150 {
        (75, 50, 25)
    } else {
        let init = (warmup as f64 * 0.15) as usize;
        let term = (warmup as f64 * 0.10) as usize;
        (init, term, warmup.saturating_sub(init + term))
    };
    let adapt_end = warmup.saturating_sub(term_buffer);
    if base_window == 0 || init_buffer >= adapt_end {
        return Vec::new();
    }
    let mut windows = Vec::new();
    let mut start = init_buffer;
    let mut size = base_window;
    loop {
        let mut end = start + size;
        if end + 2 * size > adapt_end {
            end = adapt_end;
        }
        windows.push((start, end));
        if end >= adapt_end {
            break;
        }
        start = end;
        size *= 2;
    }
    windows
}

/// Hoffman–Gelman step-size initialization: double or halve until a single
/// leapfrog step crosses 0.5 acceptance.
fn find_reasonable_epsilon<T: LogpGrad + ?Sized>(
    target: &T,
    q: &DVector<f64>,
    grad: &DVector<f64>,
    logp: f64,
    inv_mass: &DVector<f64>,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let p = draw_momentum(q.len(), inv_mass, rng);
    let state = State {
        q: q.clone(),
        p,
        grad: grad.clone(),
        logp,
    };
    let h0 = state.energy(inv_mass);
    let mut eps = 1.0;
    let ratio = |eps: f64| -> f64 {
        let next = leapfrog(target, &state, eps, inv_mass);
        let delta = h0 - next.energy(inv_mass);
        if delta.is_nan() {
            0.0
        } else {
            delta.exp()
        }
    };
    let r0 = ratio(eps);
    let doubling = r0 > 0.5;
    for _ in 0..100 {
        let r = ratio(eps);
        if doubling {
            if r <= 0.5 {
                break;
            }
            eps *= 2.0;
        } else {
            if r > 0.5 {
                break;
            }
            eps *= 0.5;
        }
        if !(1e-10..=1e10).contains(&eps) {
            break;
        }
    }
    eps.clamp(1e-10, 1e10)
}

fn draw_momentum(dim: usize, inv_mass: &DVector<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(dim, |i, _| {
        let eta: f64 = rng.sample(StandardNormal);
        eta / inv_mass[i].sqrt()
    })
}

fn initial_state<T: LogpGrad + ?Sized>(
    target: &T,
    chain: usize,
    init: Option<&DVector<f64>>,
    rng: &mut ChaCha8Rng,
) -> Result<(DVector<f64>, DVector<f64>, f64)> {
    let dim = target.dim();
    let mut grad = DVector::zeros(dim);
    if let Some(q) = init {
        if q.len() != dim {
            return Err(Error::Sampler(format!(
                "chain {chain}: initial point has dimension {} but the target has {dim}",
                q.len()
            )));
        }
        let logp = target.logp_grad(q, &mut grad);
        if !logp.is_finite() {
            return Err(Error::Sampler(format!(
                "chain {chain}: supplied initial point has non-finite log density"
            )));
        }
        return Ok((q.clone(), grad, logp));
    }
    for _ in 0..100 {
        let q = DVector::from_fn(dim, |_, _| rng.random::<f64>() * 4.0 - 2.0);
        let logp = target.logp_grad(&q, &mut grad);
        if logp.is_finite() {
            return Ok((q, grad, logp));
        }
    }
    Err(Error::Sampler(format!(
        "chain {chain}: no feasible initial point found in 100 uniform(-2, 2) draws"
    )))
}

fn run_chain<T: LogpGrad + ?Sized>(
    target: &T,
    cfg: &SamplerConfig,
    init: Option<&DVector<f64>>,
    chain: usize,
) -> Result<(DMatrix<f64>, ChainStats)> {
    let dim = target.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chain as u64 + 1);

    let (q0, grad0, logp0) = initial_state(target, chain, init, &mut rng)?;
    let mut current = State {
        q: q0,
        p: DVector::zeros(dim),
        grad: grad0,
        logp: logp0,
    };
    let mut inv_mass = DVector::from_element(dim, 1.0);
    let mut eps = find_reasonable_epsilon(
        target,
        &current.q,
        &current.grad,
        current.logp,
        &inv_mass,
        &mut rng,
    );
    let mut da = DualAveraging::new(eps, cfg.target_accept);
    let windows = mass_windows(cfg.warmup);
    let mut next_window = 0;
    let mut variance = RunningVariance::new(dim);

    let kept = cfg.kept();
    let mut draws = DMatrix::zeros(kept, dim);
    let mut divergences = 0;
    let mut treedepth_hits = 0;
    let mut accept_sum = 0.0;

    for iter in 0..cfg.iters {
        current.p = draw_momentum(dim, &inv_mass, &mut rng);
        let h0 = current.energy(&inv_mass);
        let mut left = current.clone();
        let mut right = current.clone();
        let mut sample = current.clone();
        let mut logw = 0.0;
        let mut sum_accept = 0.0;
        let mut leaves = 0usize;
        let mut diverged = false;
        let mut exhausted_depth = true;
        for depth in 0..cfg.max_treedepth {
            let forward: bool = rng.random();
            let eps_signed = if forward { eps } else { -eps };
            let from = if forward { &right } else { &left };
            let subtree = build_tree(target, depth, from, eps_signed, h0, &inv_mass, &mut rng);
            sum_accept += subtree.sum_accept;
            leaves += subtree.leaves;
            if subtree.diverged {
                diverged = true;
                exhausted_depth = false;
                break;
            }
            if subtree.turning {
                exhausted_depth = false;
                break;
            }
            // Biased progressive sampling: favor the newer half so the chain
            // keeps moving along the trajectory.
            if rng.random::<f64>() < (subtree.logw - logw).exp() {
                sample = subtree.sample.clone();
            }
            logw = log_sum_exp(logw, subtree.logw);
            if forward {
                right = subtree.right;
            } else {
                left = subtree.left;
            }
            if is_turning(&left, &right, &inv_mass) {
                exhausted_depth = false;
                break;
            }
        }
        current = sample;
        let accept_stat = if leaves > 0 {
            sum_accept / leaves as f64
        } else {
            0.0
        };

        if iter < cfg.warmup {
            eps = da.update(accept_stat);
            if next_window < windows.len() && iter >= windows[next_window].0 {
                variance.push(&current.q);
                if iter + 1 == windows[next_window].1 {
                    if let Some(var) = variance.regularized() {
                        inv_mass = var;
                    }
                    variance = RunningVariance::new(dim);
                    next_window += 1;
                    eps = find_reasonable_epsilon(
                        target,
                        &current.q,
                        &current.grad,
                        current.logp,
                        &inv_mass,
                        &mut rng,
                    );
                    da = DualAveraging::new(eps, cfg.target_accept);
                }
            }
            if iter + 1 == cfg.warmup {
                eps = da.smoothed();
            }
        } else {
            let row = iter - cfg.warmup;
            draws.row_mut(row).copy_from(&current.q.transpose());
            if diverged {
                divergences += 1;
            }
            if exhausted_depth {
                treedepth_hits += 1;
            }
            accept_sum += accept_stat;
        }
    }

    if kept > 0 && divergences == kept {
        return Err(Error::Sampler(format!(
            "chain {chain}: every one of the {kept} post-warmup iterations diverged \
             (step size {eps:.3e}); the posterior geometry is not being integrated"
        )));
    }

    Ok((
        draws,
        ChainStats {
            divergences,
            max_treedepth_hits: treedepth_hits,
            step_size: eps,
            mean_accept: if kept > 0 {
                accept_sum / kept as f64
            } else {
                0.0
            },
        },
    ))
}

fn worker_count(chains: usize) -> usize {
    let cap = std::env::var("MDGP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        });
    cap.min(chains).max(1)
}

/// Runs `cfg.chains` independent chains and returns kept draws per chain.
///
/// `init` optionally pins per-chain starting points (length must equal the
/// chain count); otherwise each chain searches uniform(-2, 2) starts until
/// the target is finite. Chains are distributed over worker threads; each
/// chain's rng stream depends only on the seed and chain index, so output is
/// reproducible for a fixed seed and build.
pub fn nuts_sample<T: LogpGrad + ?Sized>(
    target: &T,
    cfg: &SamplerConfig,
    init: Option<&[DVector<f64>]>,
) -> Result<SampleOutput> {
    cfg.validate()?;
    if target.dim() == 0 {
        return Err(Error::Sampler("target has no coordinates".into()));
    }
    if let Some(points) = init {
        if points.len() != cfg.chains {
            return Err(Error::Sampler(format!(
                "{} initial points supplied for {} chains",
                points.len(),
                cfg.chains
            )));
        }
    }

    let workers = worker_count(cfg.chains);
    let mut results: Vec<Option<Result<(DMatrix<f64>, ChainStats)>>> =
        (0..cfg.chains).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(workers);
        for w in 0..workers {
            handles.push(scope.spawn(move || {
                let mut out = Vec::new();
                let mut c = w;
                while c < cfg.chains {
                    let chain_init = init.map(|p| &p[c]);
                    out.push((c, run_chain(target, cfg, chain_init, c)));
                    c += workers;
                }
                out
            }));
        }
        for handle in handles {
            for (c, res) in handle.join().expect("sampler worker panicked") {
                results[c] = Some(res);
            }
        }
    });

    let mut chains = Vec::with_capacity(cfg.chains);
    let mut stats = Vec::with_capacity(cfg.chains);
    for res in results {
        let (draws, stat) = res.expect("chain result missing")?;
        chains.push(draws);
        stats.push(stat);
    }
    Ok(SampleOutput { chains, stats })
}

/// Fixed-work HMC for timing studies: `iters` Metropolis-corrected
/// iterations of exactly `leapfrogs` leapfrog steps at a constant
/// `step_size` under an identity mass matrix. No adaptation and no early
/// termination, so every iteration costs the same `leapfrogs` gradient
/// evaluations and wall time measures evaluation cost alone — unlike the
/// adaptive sampler, whose per-iteration tree depth depends on the data.
/// Starts at the origin (which must have finite density) and returns the
/// `iters x dim` draws; output is fully determined by `seed`.
pub fn hmc_sample_fixed<T: LogpGrad + ?Sized>(
    target: &T,
    iters: usize,
    leapfrogs: usize,
    step_size: f64,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if iters == 0 || leapfrogs == 0 {
        return Err(Error::Sampler(format!(
            "fixed-length HMC needs positive iteration and leapfrog counts, got {iters} and {leapfrogs}"
        )));
    }
    if !(step_size.is_finite() && step_size > 0.0) {
        return Err(Error::Sampler(format!(
            "step size must be positive, got {step_size}"
        )));
    }
    let dim = target.dim();
    if dim == 0 {
        return Err(Error::Sampler("target has no coordinates".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = DVector::zeros(dim);
    let mut grad = DVector::zeros(dim);
    let logp = target.logp_grad(&q, &mut grad);
    if !logp.is_finite() {
        return Err(Error::Sampler(
            "fixed-length HMC starts at the origin, where the target density is not finite".into(),
        ));
    }
    let inv_mass = DVector::repeat(dim, 1.0);
    let mut current = State {
        q,
        p: DVector::zeros(dim),
        grad,
        logp,
    };
    let mut draws = DMatrix::zeros(iters, dim);
    for iter in 0..iters {
        current.p = draw_momentum(dim, &inv_mass, &mut rng);
        let energy = current.energy(&inv_mass);
        let mut proposal = current.clone();
        for _ in 0..leapfrogs {
            proposal = leapfrog(target, &proposal, step_size, &inv_mass);
        }
        let gap = energy - proposal.energy(&inv_mass);
        if proposal.logp.is_finite() && (gap >= 0.0 || rng.random::<f64>() < gap.exp()) {
            current = proposal;
        }
        draws.row_mut(iter).copy_from(&current.q.transpose());
    }
    Ok(draws)
}
