"""Random-walk Metropolis sampling of the emulator-smoothed posterior.

The negative log posterior (up to a constant) in decorrelated data
coordinates is

    phi(theta) = 1/2 ||y_t - m_t(theta)||^2_{Gamma_t(theta)}
               + 1/2 log det Gamma_t(theta)
               + 1/2 (theta - m)^T C^-1 (theta - m)

with m_t, and the input-dependent Gamma_t = diag(gp variance) + inflation,
coming from the emulator. Because Gamma_t varies with theta, the
log-determinant term is not a constant and must be included; dropping it
biases the chain toward regions where the emulator is uncertain. One Cholesky
factorization per evaluation serves both the quadratic form and the
determinant.

Proposals are Gaussian steps theta' = theta + step_scale * L eps with
L L^T = C the prior covariance. During burn-in the step scale adapts toward a
target acceptance rate by stochastic approximation and is frozen afterwards,
so the returned samples come from a proper (non-adaptive) Metropolis chain.
"""

import numpy as np
from scipy import linalg, stats

from .exceptions import DomainError, NumericalError

ADAPT_WINDOW = 500
ADAPT_GAIN = 0.5
MIN_STEP_SCALE = 1e-6
MAX_STEP_SCALE = 1e3
KDE_MAX_SAMPLES = 4000
RHAT_ADVISORY = 1.05
HPD_LEVELS = (0.50, 0.75, 0.99)


class ChainConfig:
    def __init__(self, n_burn, n_samples, step_scale=0.5, target_acceptance=0.25):
        if n_burn < 0 or n_samples < 1:
            raise DomainError("need n_burn >= 0 and n_samples >= 1")
        if not (step_scale > 0.0 and np.isfinite(step_scale)):
            raise DomainError("step_scale must be positive")
        if not (0.0 < target_acceptance < 1.0):
            raise DomainError("target_acceptance must lie in (0, 1)")
        self.n_burn = int(n_burn)
        self.n_samples = int(n_samples)
        self.step_scale = float(step_scale)
        self.target_acceptance = float(target_acceptance)


class Chain:
    """Post-burn-in states with their phi values and tuning diagnostics.

    states has one row per retained sample; phi the objective at each state;
    accept_count counts accepted proposals over burn-in plus sampling, while
    acceptance_rate covers only the frozen sampling phase. step_trace records
    (proposal index, step scale, window acceptance) per adaptation window.
    """

    def __init__(self, states, phi, accept_count, acceptance_rate, step_scale,
                 step_trace):
        self.states = states
        self.phi = phi
        self.accept_count = int(accept_count)
        self.acceptance_rate = float(acceptance_rate)
        self.step_scale = float(step_scale)
        self.step_trace = step_trace

    @property
    def log_posts(self):
        return -self.phi

    def __len__(self):
        return len(self.states)


def _factor_spd(matrix, what):
    try:
        return linalg.cho_factor(matrix, lower=True)
    except linalg.LinAlgError:
        pass
    jitter = 1e-10 * np.trace(matrix) / len(matrix)
    try:
        return linalg.cho_factor(
            matrix + jitter * np.eye(len(matrix)), lower=True)
    except linalg.LinAlgError:
        raise NumericalError(f"{what} is not positive definite")


def phi_mcmc(theta, y_tilde, emulator, noise, space):
    """Negative log posterior under the emulator, up to an additive constant."""
    mean_t, var_t = emulator.predict_tilde(np.asarray(theta, dtype=float))
    gamma_t = noise.gamma_tilde(var_t)
    resid = np.asarray(y_tilde, dtype=float) - mean_t
    cf = _factor_spd(gamma_t, "Gamma_tilde at the proposal")
    quad = resid @ linalg.cho_solve(cf, resid)
    logdet = 2.0 * np.log(np.diag(cf[0])).sum()
    return 0.5 * quad + 0.5 * logdet + 0.5 * space.prior_quad(theta)


def rwm_core(phi, x0, proposal_chol, config, rng):
    """Generic random-walk Metropolis with burn-in step adaptation.

    phi maps a state vector to the negative log density (smaller = more
    probable); proposal_chol is a lower-triangular factor of the unscaled
    proposal covariance.
    """
    x = np.asarray(x0, dtype=float).copy()
    p = x.shape[0]
    fx = float(phi(x))
    if not np.isfinite(fx):
        raise NumericalError("objective is not finite at the chain start")

    log_step = np.log(config.step_scale)
    log_min, log_max = np.log(MIN_STEP_SCALE), np.log(MAX_STEP_SCALE)
    states = np.empty((config.n_samples, p))
    phis = np.empty(config.n_samples)
    step_trace = []
    accept_count = 0
    sampling_accepts = 0
    window_accepts = 0
    window_size = 0

    for i in range(config.n_burn + config.n_samples):
        step = np.exp(log_step)
        prop = x + step * (proposal_chol @ rng.standard_normal(p))
        fp = float(phi(prop))
        # The uniform draw happens every step so replay stays aligned.
        u = rng.random()
        accepted = np.isfinite(fp) and u < np.exp(min(0.0, fx - fp))
        if accepted:
            x, fx = prop, fp
            accept_count += 1

        if i < config.n_burn:
            window_accepts += accepted
            window_size += 1
            if window_size == ADAPT_WINDOW:
                rate = window_accepts / ADAPT_WINDOW
                if rate == 0.0 and log_step <= log_min + 1e-12:
                    raise NumericalError(
                        "no proposals accepted over a full adaptation window "
                        "at the minimum step scale; the posterior and the "
                        "emulator likely disagree")
                log_step += ADAPT_GAIN * (rate - config.target_acceptance)
                log_step = min(max(log_step, log_min), log_max)
                step_trace.append((i + 1, float(np.exp(log_step)), rate))
                window_accepts = 0
                window_size = 0
        else:
            sampling_accepts += accepted
            j = i - config.n_burn
            states[j] = x
            phis[j] = fx

    return Chain(states, phis, accept_count,
                 sampling_accepts / config.n_samples, float(np.exp(log_step)),
                 step_trace)


def rwm_sample(config, y_tilde, emulator, noise, space, rng, x0=None):
    """Sample the emulator posterior; x0 defaults to the prior mean."""
    y_tilde = np.asarray(y_tilde, dtype=float)
    if y_tilde.shape != (noise.data_dim,):
        raise DomainError(f"y_tilde must have length {noise.data_dim}")
    if x0 is None:
        x0 = space.prior_mean
    phi = lambda theta: phi_mcmc(theta, y_tilde, emulator, noise, space)
    return rwm_core(phi, x0, space.prior_chol, config, rng)


class PosteriorSummary:
    """Moments plus KDE-based highest-density credible-region membership.

    Means and standard deviations are reported in computational space and in
    physical space (per-sample transform, never transformed moments). The
    credible regions are density superlevel sets of a Gaussian KDE (Scott's
    bandwidth) fit to at most kde_subsample states; a point belongs to the
    q-region when its density reaches the (1 - q) quantile of the densities
    at the fitted states.
    """

    def __init__(self, states, space, levels=HPD_LEVELS,
                 kde_subsample=KDE_MAX_SAMPLES, rng=None):
        states = np.atleast_2d(np.asarray(states, dtype=float))
        if len(states) < 100:
            raise DomainError(
                "credible-region estimation needs at least 100 samples")
        self.levels = tuple(sorted(levels))
        self.n_samples = len(states)
        self.mean_comp = states.mean(axis=0)
        self.std_comp = states.std(axis=0, ddof=1)
        phys = space.to_physical(states)
        self.mean_phys = phys.mean(axis=0)
        self.std_phys = phys.std(axis=0, ddof=1)

        if rng is None:
            rng = np.random.default_rng(0)
        if len(states) > kde_subsample:
            idx = rng.choice(len(states), size=kde_subsample, replace=False)
            sub = states[idx]
        else:
            sub = states
        self.degenerate = bool(np.all(sub == sub[0]))
        if self.degenerate:
            self._point = sub[0].copy()
            self._kde = None
            self._thresholds = None
        else:
            try:
                self._kde = stats.gaussian_kde(sub.T, bw_method="scott")
            except linalg.LinAlgError:
                raise NumericalError(
                    "sample covariance is singular; credible regions "
                    "are unavailable")
            dens = self._kde(sub.T)
            self._thresholds = {
                q: float(np.quantile(dens, 1.0 - q)) for q in self.levels}

    def hpd_membership(self, points):
        """Map (p,) or (n, p) query points to {level: bool or bool array}."""
        points = np.asarray(points, dtype=float)
        single = points.ndim == 1
        pts = np.atleast_2d(points)
        if self.degenerate:
            inside = np.all(pts == self._point, axis=1)
            result = {q: inside for q in self.levels}
        else:
            dens = self._kde(pts.T)
            result = {q: dens >= self._thresholds[q] for q in self.levels}
        if single:
            return {q: bool(v[0]) for q, v in result.items()}
        return result


def posterior_summary(states, space, levels=HPD_LEVELS,
                      kde_subsample=KDE_MAX_SAMPLES, rng=None):
    return PosteriorSummary(states, space, levels=levels,
                            kde_subsample=kde_subsample, rng=rng)


def split_rhat(chains):
    """Split-chain potential scale reduction factor, per dimension.

    Accepts one (n, p) chain or a list of chains of equal length; each chain
    is split in half, and R-hat compares between-half and within-half
    variances. Values near 1 indicate mixing; above RHAT_ADVISORY (1.05) the
    caller should warn. Advisory only.
    """
    if isinstance(chains, np.ndarray):
        chains = [chains]
    halves = []
    for chain in chains:
        chain = np.atleast_2d(np.asarray(chain, dtype=float))
        n = len(chain) // 2
        if n < 2:
            raise DomainError("each chain must have at least 4 states")
        halves.extend([chain[:n], chain[n:2 * n]])
    stacked = np.stack(halves)  # (m, n, p)
    m, n, _ = stacked.shape
    means = stacked.mean(axis=1)
    within = stacked.var(axis=1, ddof=1).mean(axis=0)
    between = n * means.var(axis=0, ddof=1)
    var_plus = (n - 1) / n * within + between / n
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = np.sqrt(var_plus / within)
    # A zero-variance (stuck) dimension is maximally unconverged unless the
    # halves agree exactly.
    rhat = np.where(within > 0.0, rhat,
                    np.where(between > 0.0, np.inf, 1.0))
    return rhat
