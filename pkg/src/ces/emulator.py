"""Gaussian-process emulator of the parameter-to-statistics map.

One scalar GP per output dimension, trained on decorrelated outputs so the
dimensions are approximately independent. The kernel is an anisotropic squared
exponential plus white noise,

    k(x, x') = s^2 exp(-1/2 sum_k (x_k - x'_k)^2 / l_k^2) + noise_var 1[x == x'],

with inputs standardized per column and the per-dimension output mean
subtracted before training (and added back at prediction). Hyperparameters
(signal variance, one lengthscale per input, noise variance) maximize the
exact log marginal likelihood by multi-restart L-BFGS-B in log space with
analytic gradients. The white-noise term is what absorbs internal variability
of finite-window averages, so predictive variance is reported as latent GP
variance + learned noise variance.

Prediction contract (the closed-form reference): with K the kernel matrix on
the training inputs plus jitter j = JITTER_START_REL * mean(diag K) scaled up
by 10 on factorization failure (at most to JITTER_MAX_REL * mean(diag K)),

    mean(x*) = k*^T (K + jI)^-1 y + y_mean
    var(x*)  = s^2 + noise_var - k*^T (K + jI)^-1 k*

where k* carries no noise term (a query is a new point even at a training
input).
"""

import numpy as np
from scipy import linalg, optimize

from .exceptions import DomainError, EvaluationError, NumericalError

JITTER_START_REL = 1e-10
JITTER_MAX_REL = 1e-4
RESTART_LOG_RANGE = (np.log(1e-2), np.log(1e2))
MIN_TRAIN_POINTS = 10
# Relative floor keeping reported predictive variance strictly positive.
VAR_FLOOR_REL = 1e-12


def grid_points(bounds, shape):
    """Regular mesh over a computational-space box, row-major, (prod(shape), p)."""
    bounds = [tuple(map(float, b)) for b in bounds]
    shape = [int(s) for s in shape]
    if len(bounds) != len(shape):
        raise DomainError("one (lo, hi) pair per grid axis required")
    if any(s < 2 for s in shape):
        raise DomainError("grid needs at least 2 nodes per axis")
    if any(not (lo < hi) for lo, hi in bounds):
        raise DomainError("grid bounds must satisfy lo < hi")
    axes = [np.linspace(lo, hi, s) for (lo, hi), s in zip(bounds, shape)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def _pairwise_sq(z):
    # (p, n, n) stack of per-axis squared differences.
    return (z.T[:, :, None] - z.T[:, None, :]) ** 2


def _kernel_matrix(sqd, log_hypers):
    s2 = np.exp(log_hypers[0])
    inv2l2 = 0.5 * np.exp(-2.0 * log_hypers[1:-1])
    noise = np.exp(log_hypers[-1])
    e = np.exp(-np.tensordot(inv2l2, sqd, axes=1))
    k = s2 * e
    k[np.diag_indices_from(k)] += noise
    return k, e


def _neg_lml_and_grad(log_hypers, sqd, y, jitter):
    n = len(y)
    k, e = _kernel_matrix(sqd, log_hypers)
    k[np.diag_indices_from(k)] += jitter
    try:
        cf = linalg.cho_factor(k, lower=True)
    except linalg.LinAlgError:
        return np.inf, np.zeros_like(log_hypers)
    alpha = linalg.cho_solve(cf, y)
    lml = -0.5 * y @ alpha - np.log(np.diag(cf[0])).sum() - 0.5 * n * np.log(2.0 * np.pi)
    if not np.isfinite(lml):
        return np.inf, np.zeros_like(log_hypers)
    kinv = linalg.cho_solve(cf, np.eye(n))
    w = np.outer(alpha, alpha) - kinv
    s2 = np.exp(log_hypers[0])
    inv_l2 = np.exp(-2.0 * log_hypers[1:-1])
    grad = np.empty_like(log_hypers)
    ws2e = w * (s2 * e)
    grad[0] = 0.5 * ws2e.sum()
    for kdim in range(len(inv_l2)):
        grad[kdim + 1] = 0.5 * (ws2e * sqd[kdim]).sum() * inv_l2[kdim]
    grad[-1] = 0.5 * np.exp(log_hypers[-1]) * np.trace(w)
    return -lml, -grad


def _factor_with_escalation(build_k, n, dim_label):
    """Cholesky with jitter escalation; returns (factor, jitter_used)."""
    k0 = build_k()
    base = np.trace(k0) / n
    jitter = JITTER_START_REL * base
    while True:
        k = build_k()
        k[np.diag_indices_from(k)] += jitter
        try:
            return linalg.cho_factor(k, lower=True), jitter
        except linalg.LinAlgError:
            jitter *= 10.0
            if jitter > JITTER_MAX_REL * base:
                raise NumericalError(
                    f"training covariance for output dimension {dim_label} stays "
                    f"ill-conditioned up to jitter {JITTER_MAX_REL:g} * trace/n")


class GpEmulator:
    """Independent scalar GPs over all output dimensions of a data vector.

    fit() trains from (n, p) inputs and (n, d) outputs; predict_tilde()
    returns per-dimension means and variances at one point, vectorized
    internally across dimensions so a sampler can afford it per step.
    """

    def __init__(self):
        self.trained = False

    def fit(self, x, y, rng=None, restarts=5, fixed_hypers=None, maxiter=60):
        """Train all output dimensions.

        rng drives the restart draws (log-uniform multipliers on data scales);
        fixed_hypers, shape (d, p+2) of [signal_var, lengthscales..., noise_var],
        skips optimization entirely (used by equivalence oracles).
        """
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.ndim != 2 or y.ndim != 2 or len(x) != len(y):
            raise DomainError("x must be (n, p) and y (n, d) with matching n")
        n, p = x.shape
        d = y.shape[1]
        # Optimizing hyperparameters on a tiny set is meaningless; pinned
        # hyperparameters (oracles, reloads) may use any n >= 2.
        if fixed_hypers is None and n < MIN_TRAIN_POINTS:
            raise DomainError(f"need at least {MIN_TRAIN_POINTS} training pairs, got {n}")
        if n < 2:
            raise DomainError("need at least 2 training pairs")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DomainError("non-finite training data")
        x_std = x.std(axis=0)
        degenerate = np.flatnonzero(x_std == 0.0)
        if degenerate.size:
            raise DomainError(
                f"training inputs are degenerate along axes {degenerate.tolist()}")

        self.x_raw = x.copy()
        self.x_mean = x.mean(axis=0)
        self.x_std = x_std
        self.z = (x - self.x_mean) / self.x_std
        self.y_raw = y.copy()
        self.y_mean = y.mean(axis=0)
        self.n_train, self.input_dim, self.output_dim = n, p, d

        yc = y - self.y_mean
        y_var = yc.var(axis=0)
        if fixed_hypers is None and np.any(y_var == 0.0):
            bad = np.flatnonzero(y_var == 0.0).tolist()
            raise DomainError(f"constant training outputs in dimensions {bad}")

        sqd = _pairwise_sq(self.z)
        hypers = np.empty((d, p + 2))
        self.fit_info_ = []
        if fixed_hypers is not None:
            fixed_hypers = np.asarray(fixed_hypers, dtype=float)
            if fixed_hypers.shape != (d, p + 2):
                raise DomainError(f"fixed_hypers must have shape ({d}, {p + 2})")
            if np.any(fixed_hypers[:, :-1] <= 0.0) or np.any(fixed_hypers[:, -1] < 0.0):
                raise DomainError("signal variance and lengthscales must be positive")
            hypers = fixed_hypers.copy()
            self.fit_info_ = [{"optimized": False} for _ in range(d)]
        else:
            if rng is None:
                raise DomainError("rng is required when optimizing hyperparameters")
            for j in range(d):
                hypers[j], info = self._optimize_dim(
                    sqd, yc[:, j], y_var[j], rng, restarts, maxiter, j)
                self.fit_info_.append(info)

        self.hypers_ = hypers
        self._finalize(sqd, yc)
        self.trained = True
        return self

    def _optimize_dim(self, sqd, yj, y_var, rng, restarts, maxiter, dim_label):
        p = self.input_dim
        scales = np.concatenate([[y_var], np.ones(p), [y_var]])
        starts = [np.concatenate([[y_var], np.ones(p), [0.1 * y_var]])]
        for _ in range(max(0, restarts - 1)):
            mult = np.exp(rng.uniform(*RESTART_LOG_RANGE, size=p + 2))
            starts.append(scales * mult)
        lo = np.log(np.concatenate([[1e-8 * y_var], np.full(p, 1e-3), [1e-10 * y_var]]))
        hi = np.log(np.concatenate([[1e8 * y_var], np.full(p, 1e3), [1e4 * y_var]]))
        jitter = JITTER_START_REL * (y_var + 0.1 * y_var)

        best = None
        trace = []
        for start in starts:
            x0 = np.clip(np.log(start), lo, hi)
            f0, _ = _neg_lml_and_grad(x0, sqd, yj, jitter)
            res = optimize.minimize(
                _neg_lml_and_grad, x0, args=(sqd, yj, jitter), jac=True,
                method="L-BFGS-B", bounds=list(zip(lo, hi)),
                options={"maxiter": maxiter})
            trace.append({"start_lml": -f0, "final_lml": -res.fun,
                          "n_evals": int(res.nfev)})
            if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
                best = res
        if best is None:
            raise NumericalError(
                f"hyperparameter optimization failed in every restart for "
                f"output dimension {dim_label}")
        info = {"optimized": True, "lml": -float(best.fun), "restarts": trace}
        return np.exp(best.x), info

    def _finalize(self, sqd, yc):
        n, d = self.n_train, self.output_dim
        self.alpha_ = np.empty((d, n))
        self.linv_ = np.empty((d, n, n))
        self.jitter_ = np.empty(d)
        eye = np.eye(n)
        for j in range(d):
            log_h = np.log(np.maximum(self.hypers_[j], 1e-300))
            build = lambda lh=log_h: _kernel_matrix(sqd, lh)[0]
            cf, jitter = _factor_with_escalation(build, n, j)
            self.jitter_[j] = jitter
            self.alpha_[j] = linalg.cho_solve(cf, yc[:, j])
            # Inverse Cholesky factor, not the full inverse: the predictive
            # variance signal_var - ||L^-1 k*||^2 loses a factor sqrt(cond K)
            # less precision than signal_var - k*^T K^-1 k*, which matters in
            # the near-interpolation regime (tiny noise, large signal).
            self.linv_[j] = linalg.solve_triangular(
                np.tril(cf[0]), eye, lower=True)
        # Cached pieces for the fast predict path.
        self._signal_var = self.hypers_[:, 0]
        self._noise_var = self.hypers_[:, -1]
        self._inv2l2 = 0.5 / self.hypers_[:, 1:-1] ** 2  # (d, p)
        self._var_floor = VAR_FLOOR_REL * (self._signal_var + self._noise_var)

    def _k_star(self, theta):
        z = (np.asarray(theta, dtype=float) - self.x_mean) / self.x_std
        sq = (self.z - z) ** 2  # (n, p)
        expo = sq @ self._inv2l2.T  # (n, d)
        return self._signal_var[:, None] * np.exp(-expo.T)  # (d, n)

    def predict_tilde(self, theta):
        """Mean and variance per output dimension at one computational point."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.input_dim,):
            raise DomainError(f"expected parameter vector of length {self.input_dim}")
        if not np.all(np.isfinite(theta)):
            raise DomainError("non-finite prediction point")
        ks = self._k_star(theta)  # (d, n)
        mean = np.einsum("dn,dn->d", ks, self.alpha_) + self.y_mean
        v = np.matmul(self.linv_, ks[:, :, None])[:, :, 0]  # (d, n)
        quad = np.einsum("dn,dn->d", v, v)
        var = self._signal_var + self._noise_var - quad
        return mean, np.maximum(var, self._var_floor)

    def predict_tilde_many(self, thetas):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        means = np.empty((len(thetas), self.output_dim))
        variances = np.empty_like(means)
        for i in range(len(thetas)):
            means[i], variances[i] = self.predict_tilde(thetas[i])
        return means, variances

    def save(self, path):
        """Binary sidecar cache. Layout: arrays x_raw (n,p), y_raw (n,d),
        hypers (d,p+2) as [signal_var, lengthscales..., noise_var], jitter (d,)
        as used at fit time. Factorizations are rebuilt on load from the same
        bits, so reloaded predictions are bit-identical."""
        if not self.trained:
            raise NumericalError("cannot save an untrained emulator")
        np.savez(path, x_raw=self.x_raw, y_raw=self.y_raw, hypers=self.hypers_,
                 jitter=self.jitter_)

    @classmethod
    def load(cls, path):
        with np.load(path) as data:
            x, y = data["x_raw"], data["y_raw"]
            hypers, jitter = data["hypers"], data["jitter"]
        emu = cls()
        emu.fit(x, y, fixed_hypers=hypers)
        if not np.array_equal(emu.jitter_, jitter):
            raise NumericalError(
                "reloaded emulator needed different jitter than the saved fit")
        return emu


def predict_physical(emulator, noise, theta):
    """Emulator prediction mapped back to physical data coordinates.

    Returns (mean, cov): mean = V D mean_tilde, cov = V D diag(var) D V^T.
    """
    mean_t, var_t = emulator.predict_tilde(theta)
    return noise.recorrelate_mean(mean_t), noise.recorrelate_cov(var_t)


def gp_train(thetas, outputs, noise, rng, restarts=5, maxiter=60):
    """Train the emulator on decorrelated outputs of calibration pairs.

    thetas (n, p) live in computational space, outputs (n, d) in physical
    data coordinates; they are mapped through noise.decorrelate first.
    """
    outputs = np.asarray(outputs, dtype=float)
    if outputs.ndim != 2 or outputs.shape[1] != noise.data_dim:
        raise DomainError(f"outputs must be (n, {noise.data_dim})")
    y_tilde = noise.decorrelate(outputs.T).T
    return GpEmulator().fit(np.asarray(thetas, dtype=float), y_tilde,
                            rng=rng, restarts=restarts, maxiter=maxiter)


def benchmark_grid_train(model, space, noise, bounds, grid_shape, node_seed,
                         rng, window=None, scenario=None, restarts=5,
                         maxiter=60):
    """Grid-based training baseline: one forward run per mesh node.

    bounds/grid_shape define a regular mesh in computational space;
    node_seed(index) supplies a fresh forward-model seed per node. Returns
    (emulator, thetas, outputs) with thetas in computational space. A failed
    node evaluation is an error: the grid is fixed, so there is nothing to
    resample.
    """
    thetas = grid_points(bounds, grid_shape)
    seeds = np.array([node_seed(i) for i in range(len(thetas))], dtype=np.int64)
    outputs, failures = model.evaluate_batch(
        space.to_physical(thetas), seeds, window=window, scenario=scenario)
    if failures:
        idx = [i for i, _ in failures]
        raise EvaluationError(
            f"forward model failed at grid nodes {idx}", failures[0][1].theta)
    emulator = gp_train(thetas, outputs, noise, rng, restarts=restarts,
                        maxiter=maxiter)
    return emulator, thetas, outputs
