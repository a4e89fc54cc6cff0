"""Forward models mapping physical parameters to finite-time-averaged statistics.

Two models ship with the toolkit: a deterministic linear map used for analytic
oracles, and a cyclic 40-site chaotic ODE whose windowed statistics carry
internal variability, standing in for an expensive climate-like simulator.
Model outputs are "data vectors": fixed-length arrays whose indices are
described by a DataLayout (block name + site coordinate per index).
"""

import numpy as np

from .exceptions import DomainError, EvaluationError
from .parameters import ParameterDef

# State magnitudes beyond this are treated as integration blow-up.
BLOWUP_LIMIT = 1e6


class Scenario:
    """Named forcing scenario with free-form scalar knobs.

    The control scenario has no knobs; a perturbed scenario scales model
    forcing terms, e.g. Scenario("warm", forcing_scale=1.5). Models reject
    knobs they do not implement.
    """

    def __init__(self, name="control", **scales):
        self.name = str(name)
        self.scales = {k: float(v) for k, v in scales.items()}

    def get(self, key, default=1.0):
        return self.scales.get(key, default)

    def __repr__(self):
        inner = ", ".join(f"{k}={v}" for k, v in self.scales.items())
        return f"Scenario({self.name!r}{', ' if inner else ''}{inner})"


CONTROL = Scenario("control")


class DataLayout:
    """Index metadata for a data vector: block name and coordinate per index."""

    def __init__(self, blocks):
        # blocks: ordered list of (name, n_coords)
        self.blocks = [(str(name), int(n)) for name, n in blocks]
        if any(n <= 0 for _, n in self.blocks):
            raise DomainError("every data block needs at least one coordinate")
        names = [name for name, _ in self.blocks]
        if len(set(names)) != len(names):
            raise DomainError(f"duplicate block names in {names}")
        self.size = sum(n for _, n in self.blocks)
        self.block = np.concatenate([[name] * n for name, n in self.blocks])
        self.coord = np.concatenate([np.arange(n) for _, n in self.blocks])

    def block_slice(self, name):
        start = 0
        for bname, n in self.blocks:
            if bname == name:
                return slice(start, start + n)
            start += n
        raise DomainError(f"unknown data block {name!r}")

    def labels(self):
        return [f"{b}[{c}]" for b, c in zip(self.block, self.coord)]


class ForwardModel:
    """Base class: a seeded, window-averaged map from parameters to data vectors.

    Subclasses set `param_names`, `layout`, `default_window` and implement
    `evaluate`. `evaluate_batch` loops by default; models that can integrate
    many members at once override it and must return bitwise-identical rows.
    """

    param_names = ()
    layout = None
    default_window = None
    #: physical range per data block, used to inflate observation noise near
    #: hard limits of the statistic (e.g. frequencies live in [0, 1])
    block_bounds = None

    @property
    def param_dim(self):
        return len(self.param_names)

    @property
    def data_dim(self):
        return self.layout.size

    def parameter_defs(self):
        raise NotImplementedError

    def evaluate(self, theta, seed, window=None, scenario=None):
        raise NotImplementedError

    def evaluate_batch(self, thetas, seeds, window=None, scenario=None):
        """Evaluate many (theta, seed) pairs, preserving order.

        Returns (outputs, failures): outputs has one row per pair with NaN
        rows where evaluation failed, and failures is a list of
        (row index, EvaluationError).
        """
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        seeds = np.asarray(seeds)
        if len(seeds) != len(thetas):
            raise DomainError("evaluate_batch needs one seed per parameter vector")
        out = np.full((len(thetas), self.data_dim), np.nan)
        failures = []
        for i, (theta, seed) in enumerate(zip(thetas, seeds)):
            try:
                out[i] = self.evaluate(theta, seed, window=window, scenario=scenario)
            except EvaluationError as err:
                failures.append((i, err))
        return out, failures

    def evaluate_long(self, theta, seed, n_windows, window=None, scenario=None):
        """Consecutive window averages from one long run (single spin-up)."""
        raise NotImplementedError

    def _check_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.param_dim,):
            raise DomainError(
                f"expected parameter vector of length {self.param_dim}, got shape {theta.shape}"
            )
        if not np.all(np.isfinite(theta)):
            raise DomainError("non-finite parameter value")
        for value, d in zip(theta, self.parameter_defs()):
            if d.bounds is not None:
                lo, hi = d.bounds
                if not (lo < value < hi):
                    raise DomainError(
                        f"parameter {d.name!r} = {value} outside open domain ({lo}, {hi})"
                    )
        return theta

    @staticmethod
    def _check_window(window, default):
        window = default if window is None else float(window)
        if not window > 0.0:
            raise DomainError("averaging window must be positive")
        return window


class LinearModel(ForwardModel):
    """Deterministic linear map theta -> A theta, no internal variability.

    Useful because its posterior under Gaussian noise is available in closed
    form. The seed and window are accepted (and validated) but cannot change
    the output; scenarios with knobs are rejected.
    """

    def __init__(self, matrix, defs=None):
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2 or not np.all(np.isfinite(matrix)):
            raise DomainError("matrix must be a finite 2-D array")
        self.matrix = matrix
        d, p = matrix.shape
        if defs is None:
            defs = [ParameterDef(f"theta{j}", "identity") for j in range(p)]
        defs = list(defs)
        if len(defs) != p:
            raise DomainError(f"need {p} parameter definitions, got {len(defs)}")
        self._defs = defs
        self.param_names = tuple(d.name for d in defs)
        self.layout = DataLayout([("output", d)])
        self.default_window = 1.0
        self.block_bounds = {"output": (-np.inf, np.inf)}

    def parameter_defs(self):
        return list(self._defs)

    @staticmethod
    def _check_scenario(scenario):
        if scenario is not None and scenario.scales:
            raise DomainError(
                f"linear model supports no scenario knobs, got {sorted(scenario.scales)}"
            )

    def evaluate(self, theta, seed, window=None, scenario=None):
        theta = self._check_theta(theta)
        self._check_window(window, self.default_window)
        self._check_scenario(scenario)
        return self.matrix @ theta

    def evaluate_long(self, theta, seed, n_windows, window=None, scenario=None):
        out = self.evaluate(theta, seed, window=window, scenario=scenario)
        return np.tile(out, (int(n_windows), 1))


class CyclicChaosModel(ForwardModel):
    """Cyclic quadratic-advection ODE with damping and constant forcing.

    State x_i on a ring of n_sites obeys

        dx_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i / damping_time + forcing,

    integrated with fixed-step RK4. The map reported to calibration is the
    vector of per-site window statistics (time mean, time variance, and the
    frequency of exceeding a fixed threshold), computed after discarding one
    spin-up window. Chaos makes these finite-window averages noisy; the noise
    shrinks like 1/window, which is exactly the regime the toolkit targets.

    Parameters are physical: forcing on a bounded interval (logit transform),
    damping_time on the positive half-line (log transform). A scenario may
    carry `forcing_scale`, which multiplies the forcing after domain checks
    (perturbed climates may leave the calibration box on purpose).
    """

    forcing_bounds = (0.0, 20.0)

    def __init__(self, n_sites=40, dt=0.02, window=10.0, spinup=None,
                 exceed_threshold=6.0):
        if n_sites < 4:
            raise DomainError("cyclic advection needs at least 4 sites")
        if dt <= 0.0:
            raise DomainError("dt must be positive")
        self.n_sites = int(n_sites)
        self.dt = float(dt)
        self.default_window = float(window)
        self.spinup = self.default_window if spinup is None else float(spinup)
        if self.default_window <= 0.0 or self.spinup < 0.0:
            raise DomainError("window must be positive and spinup non-negative")
        self.exceed_threshold = float(exceed_threshold)
        self.param_names = ("forcing", "damping_time")
        self.layout = DataLayout(
            [("mean", self.n_sites), ("variance", self.n_sites), ("exceedance", self.n_sites)]
        )
        self.block_bounds = {
            "mean": (-np.inf, np.inf),
            "variance": (0.0, np.inf),
            "exceedance": (0.0, 1.0),
        }
        i = np.arange(self.n_sites)
        self._ip1 = (i + 1) % self.n_sites
        self._im1 = (i - 1) % self.n_sites
        self._im2 = (i - 2) % self.n_sites

    def parameter_defs(self):
        return [
            ParameterDef("forcing", "logit", bounds=self.forcing_bounds,
                         prior_mean=0.0, prior_std=1.0),
            ParameterDef("damping_time", "log", bounds=(0.0, np.inf),
                         prior_mean=0.2, prior_std=0.5),
        ]

    def _effective_params(self, theta, scenario):
        theta = self._check_theta(theta)
        scenario = CONTROL if scenario is None else scenario
        unknown = set(scenario.scales) - {"forcing_scale"}
        if unknown:
            raise DomainError(f"unsupported scenario knobs {sorted(unknown)}")
        forcing = theta[0] * scenario.get("forcing_scale")
        inv_tau = 1.0 / theta[1]
        return theta, forcing, inv_tau

    def _rhs(self, x, forcing, inv_tau):
        return (x[..., self._ip1] - x[..., self._im2]) * x[..., self._im1] \
            - x * inv_tau + forcing

    def _rk4_step(self, x, forcing, inv_tau):
        h = self.dt
        k1 = self._rhs(x, forcing, inv_tau)
        k2 = self._rhs(x + 0.5 * h * k1, forcing, inv_tau)
        k3 = self._rhs(x + 0.5 * h * k2, forcing, inv_tau)
        k4 = self._rhs(x + h * k3, forcing, inv_tau)
        return x + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)

    def _initial_state(self, seeds, batch):
        # Fresh initial condition per member; spin-up forgets everything else.
        states = np.empty((len(seeds), self.n_sites))
        for i, seed in enumerate(seeds):
            rng = np.random.default_rng(int(seed))
            states[i] = 2.0 + rng.standard_normal(self.n_sites)
        return states if batch else states[0]

    def _steps(self, span):
        n = int(round(span / self.dt))
        if n < 1:
            raise DomainError(f"window {span} shorter than one step (dt = {self.dt})")
        return n

    def _run_spinup(self, x, forcing, inv_tau):
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(self._steps(self.spinup) if self.spinup > 0.0 else 0):
                x = self._rk4_step(x, forcing, inv_tau)
        return x

    def _window_stats(self, x, n_steps, forcing, inv_tau):
        # Accumulate post-step states; mean/variance/exceedance are over the
        # n_steps states inside the window.
        s1 = np.zeros_like(x)
        s2 = np.zeros_like(x)
        ne = np.zeros_like(x)
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(n_steps):
                x = self._rk4_step(x, forcing, inv_tau)
                s1 += x
                s2 += x * x
                ne += x > self.exceed_threshold
        mean = s1 / n_steps
        var = s2 / n_steps - mean * mean
        freq = ne / n_steps
        return x, np.concatenate([mean, var, freq], axis=-1)

    @staticmethod
    def _blown_up(x):
        return ~(np.all(np.isfinite(x), axis=-1) & (np.max(np.abs(x), axis=-1) < BLOWUP_LIMIT))

    def evaluate(self, theta, seed, window=None, scenario=None):
        theta, forcing, inv_tau = self._effective_params(theta, scenario)
        n_steps = self._steps(self._check_window(window, self.default_window))
        x = self._initial_state([seed], batch=False)
        x = self._run_spinup(x, forcing, inv_tau)
        x, stats = self._window_stats(x, n_steps, forcing, inv_tau)
        if self._blown_up(x) or not np.all(np.isfinite(stats)):
            raise EvaluationError(
                f"integration blew up at forcing={theta[0]:g}, damping_time={theta[1]:g}",
                theta=theta,
            )
        return stats

    def evaluate_batch(self, thetas, seeds, window=None, scenario=None):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        seeds = np.asarray(seeds)
        if len(seeds) != len(thetas):
            raise DomainError("evaluate_batch needs one seed per parameter vector")
        n_steps = self._steps(self._check_window(window, self.default_window))
        forcing = np.empty((len(thetas), 1))
        inv_tau = np.empty((len(thetas), 1))
        for i, theta in enumerate(thetas):
            theta, f, it = self._effective_params(theta, scenario)
            forcing[i, 0] = f
            inv_tau[i, 0] = it
        x = self._initial_state(seeds, batch=True)
        x = self._run_spinup(x, forcing, inv_tau)
        x, stats = self._window_stats(x, n_steps, forcing, inv_tau)
        bad = self._blown_up(x) | ~np.all(np.isfinite(stats), axis=-1)
        failures = [
            (int(i), EvaluationError(
                f"integration blew up at forcing={thetas[i][0]:g}, "
                f"damping_time={thetas[i][1]:g}", theta=thetas[i]))
            for i in np.flatnonzero(bad)
        ]
        stats[bad] = np.nan
        return stats, failures

    def evaluate_long(self, theta, seed, n_windows, window=None, scenario=None):
        theta, forcing, inv_tau = self._effective_params(theta, scenario)
        n_windows = int(n_windows)
        if n_windows < 1:
            raise DomainError("n_windows must be >= 1")
        n_steps = self._steps(self._check_window(window, self.default_window))
        x = self._initial_state([seed], batch=False)
        x = self._run_spinup(x, forcing, inv_tau)
        out = np.empty((n_windows, self.data_dim))
        for w in range(n_windows):
            x, out[w] = self._window_stats(x, n_steps, forcing, inv_tau)
            if self._blown_up(x) or not np.all(np.isfinite(out[w])):
                raise EvaluationError(
                    f"integration blew up in window {w} at forcing={theta[0]:g}, "
                    f"damping_time={theta[1]:g}", theta=theta)
        return out

    def step_values(self, theta, seed, window=None, scenario=None):
        """Raw post-step states over one window, shape (n_steps, n_sites).

        This is the sub-window record that exceedance thresholds are defined
        on (the per-step analog of daily values inside an averaging window).
        """
        theta, forcing, inv_tau = self._effective_params(theta, scenario)
        n_steps = self._steps(self._check_window(window, self.default_window))
        x = self._initial_state([seed], batch=False)
        x = self._run_spinup(x, forcing, inv_tau)
        rec = np.empty((n_steps, self.n_sites))
        with np.errstate(over="ignore", invalid="ignore"):
            for t in range(n_steps):
                x = self._rk4_step(x, forcing, inv_tau)
                rec[t] = x
        if self._blown_up(x) or not np.all(np.isfinite(rec)):
            raise EvaluationError(
                f"integration blew up at forcing={theta[0]:g}, damping_time={theta[1]:g}",
                theta=theta,
            )
        return rec
