"""Ensemble Kalman inversion: derivative-free optimization toward the data.

Each iteration evaluates the forward model on every ensemble member, forms
empirical parameter-output covariances, and moves members along the Kalman
gain toward the observed data vector. Used here as an optimizer (no noise is
added to the data between iterations): the ensemble collapses near the misfit
minimizer, and every evaluated (parameter, output) pair is banked as emulator
training data.
"""

import numpy as np
from scipy import linalg

from .exceptions import DomainError, NumericalError

TRAINING_ITERATIONS = "iterations 0..n_iterations inclusive"


def eki_update(members, outputs, y, gamma):
    """One inversion step; returns the moved ensemble.

    members: (M, p) computational-space parameters; outputs: (M, d) model
    outputs; y: (d,) data; gamma: (d, d) SPD observational covariance.
    Covariances use the 1/(M-1) convention, and the gain solve goes through a
    Cholesky factorization of gamma + C_gg (never an explicit inverse).
    """
    members = np.asarray(members, dtype=float)
    outputs = np.asarray(outputs, dtype=float)
    y = np.asarray(y, dtype=float)
    m, p = members.shape
    if m < 2:
        raise DomainError("ensemble update needs at least 2 members")
    if outputs.shape[0] != m or outputs.shape[1] != len(y):
        raise DomainError("outputs must be (n_members, len(y))")
    if not (np.all(np.isfinite(members)) and np.all(np.isfinite(outputs))
            and np.all(np.isfinite(y))):
        raise DomainError("non-finite values in ensemble update")
    dth = members - members.mean(axis=0)
    dg = outputs - outputs.mean(axis=0)
    cross_cov = dth.T @ dg / (m - 1)
    output_cov = dg.T @ dg / (m - 1)
    a = gamma + output_cov
    a = 0.5 * (a + a.T)
    try:
        cf = linalg.cho_factor(a)
    except linalg.LinAlgError as exc:
        raise NumericalError("gamma + C_gg is not positive definite") from exc
    gain = linalg.cho_solve(cf, cross_cov.T)  # (d, p) = (gamma + C_gg)^-1 C_{theta g}^T
    return members + (y - outputs) @ gain


def residual(outputs, y, gamma):
    """Squared gamma-weighted misfit of the ensemble-mean output."""
    r = np.asarray(outputs, dtype=float).mean(axis=0) - np.asarray(y, dtype=float)
    cf = linalg.cho_factor(0.5 * (gamma + gamma.T))
    return float(r @ linalg.cho_solve(cf, r))


def ensemble_spread(members):
    """Per-parameter sample std across members (ddof=1)."""
    members = np.asarray(members, dtype=float)
    if members.shape[0] < 2:
        raise DomainError("spread needs at least 2 members")
    return members.std(axis=0, ddof=1)


class EkiResult:
    """Evaluated trajectory of an inversion run.

    train_mask selects the pairs belonging to the emulator training set
    (iterations 0..n_iterations); later iterations, if any, exist only for
    collapse diagnostics.
    """

    def __init__(self, thetas, outputs, iterations, members, seeds, retries,
                 ensembles, diagnostics, n_iterations):
        self.thetas = thetas
        self.outputs = outputs
        self.iterations = iterations
        self.members = members
        self.seeds = seeds
        self.retries = retries
        self.ensembles = ensembles
        self.diagnostics = diagnostics
        self.n_iterations = n_iterations

    @property
    def train_mask(self):
        return self.iterations <= self.n_iterations

    @property
    def final_ensemble(self):
        return self.ensembles[-1]

    def training_pairs(self):
        m = self.train_mask
        return self.thetas[m], self.outputs[m]


def eki_run(model, space, y, noise, n_members, n_iterations, init_rng,
            member_seed, window=None, scenario=None, extra_iterations=0,
            max_retries=5, initial_members=None, start_iteration=0,
            on_iteration=None):
    """Run the full inversion and collect training pairs and diagnostics.

    init_rng draws the initial ensemble from the prior; member_seed
    (iteration, member, retry) -> int provides forward-model seeds, fresh per
    member per iteration. A member whose evaluation fails is redrawn from the
    current ensemble's empirical Gaussian and re-evaluated, up to max_retries
    times; redraws use their own generator derived from member_seed, so the
    whole run is a function of the seeds alone. A crashed run resumes by
    passing the reconstructed ensemble as initial_members with
    start_iteration set to its iteration index; the returned rows then cover
    iterations start_iteration..N only. on_iteration, if given, is called as
    on_iteration(iteration, thetas, outputs, seeds, retries) after each
    iteration's evaluations complete (for persistence); the arrays are the
    run's own and must not be mutated.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (model.data_dim,):
        raise DomainError(f"data vector must have length {model.data_dim}")
    if n_members < 2:
        raise DomainError("need at least 2 ensemble members")
    total = int(n_iterations) + int(extra_iterations)
    if n_iterations < 1 or total < n_iterations:
        raise DomainError("n_iterations must be >= 1 and extra_iterations >= 0")

    gamma = noise.gamma
    if initial_members is None:
        if start_iteration != 0:
            raise DomainError("start_iteration > 0 requires initial_members")
        members = space.prior_sample(init_rng, size=n_members)
    else:
        members = np.array(initial_members, dtype=float)
        if members.shape != (n_members, space.dim):
            raise DomainError(
                f"initial_members must have shape ({n_members}, {space.dim})")
        if not 0 <= start_iteration <= total:
            raise DomainError("start_iteration outside the iteration range")
    ensembles = [members.copy()]
    rows_theta, rows_out, rows_iter, rows_member, rows_seed, rows_retry = \
        [], [], [], [], [], []
    diagnostics = []

    for it in range(int(start_iteration), total + 1):
        seeds = np.array([member_seed(it, m, 0) for m in range(n_members)],
                         dtype=np.int64)
        retries = np.zeros(n_members, dtype=int)
        thetas_it = members.copy()
        outputs, failures = model.evaluate_batch(
            space.to_physical(thetas_it), seeds, window=window, scenario=scenario)
        n_resampled = 0
        attempt = 0
        while failures:
            attempt += 1
            if attempt > max_retries:
                bad = [i for i, _ in failures]
                raise NumericalError(
                    f"iteration {it}: members {bad} still failing after "
                    f"{max_retries} resampling attempts")
            idx = np.array([i for i, _ in failures])
            n_resampled += len(idx)
            # Redraw failed members from the ensemble's empirical Gaussian.
            # Each redraw gets its own generator keyed off the member seed so
            # a resumed run reproduces the retries of an uninterrupted one.
            mean = members.mean(axis=0)
            cov = np.cov(members, rowvar=False, ddof=1).reshape(space.dim, space.dim)
            cov += 1e-12 * np.eye(space.dim)
            new_seeds = [member_seed(it, int(i), attempt) for i in idx]
            redraw = np.stack([
                np.random.default_rng([s, 1]).multivariate_normal(
                    mean, cov, method="cholesky")
                for s in new_seeds])
            thetas_it[idx] = redraw
            retries[idx] = attempt
            seeds[idx] = new_seeds
            re_out, re_fail = model.evaluate_batch(
                space.to_physical(redraw), seeds[idx], window=window,
                scenario=scenario)
            outputs[idx] = re_out
            failures = [(int(idx[local]), err) for local, err in re_fail]
        rows_theta.append(thetas_it)
        rows_out.append(outputs)
        rows_iter.append(np.full(n_members, it))
        rows_member.append(np.arange(n_members))
        rows_seed.append(seeds)
        rows_retry.append(retries)
        spread = ensemble_spread(thetas_it)
        diagnostics.append({
            "iteration": it,
            "residual": residual(outputs, y, gamma),
            "spread": spread,
            "spread_physical": space.to_physical(thetas_it).std(axis=0, ddof=1),
            "n_resampled": n_resampled,
        })
        if on_iteration is not None:
            on_iteration(it, thetas_it, outputs, seeds, retries)
        if it < total:
            members = eki_update(thetas_it, outputs, y, gamma)
            ensembles.append(members.copy())

    return EkiResult(
        thetas=np.concatenate(rows_theta),
        outputs=np.concatenate(rows_out),
        iterations=np.concatenate(rows_iter),
        members=np.concatenate(rows_member),
        seeds=np.concatenate(rows_seed),
        retries=np.concatenate(rows_retry),
        ensembles=ensembles,
        diagnostics=diagnostics,
        n_iterations=int(n_iterations),
    )
