"""Posterior push-forward prediction with percentile bands.

Posterior parameter draws are thinned from the chain (stride at least the
integrated autocorrelation time, then uniform without replacement) and each
draw is pushed through the real forward model over a long averaging window.
One forward-model seed is attached per draw and shared across scenarios, and
the fixed-truth reference ensemble reuses the same seeds, so the posterior
band differs from the reference band only through parameter uncertainty; a
degenerate chain reproduces the reference band exactly.

Percentiles follow the Hazen rule (plotting position (i - 0.5)/n, linear
interpolation), the convention under which the sample {1..100} has
2.5th/50th/97.5th percentiles 3, 50.5, 98.
"""

import numpy as np

from .exceptions import DomainError, NumericalError
from .models import Scenario

PERCENTILES = (2.5, 50.0, 97.5)
DEFAULT_EXTREME_QUANTILE = 0.90


def percentile_bands(rows, percentiles=PERCENTILES):
    """Hazen-rule percentiles per column of (n, d) rows; returns (len(q), d)."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    return np.percentile(rows, percentiles, axis=0, method="hazen")


def exceedance_frequency(values, thresholds):
    """Fraction of rows strictly above the per-column threshold."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    thresholds = np.asarray(thresholds, dtype=float)
    if thresholds.shape != (values.shape[1],):
        raise DomainError(
            f"need one threshold per column, got {thresholds.shape} "
            f"for {values.shape[1]} columns")
    return np.mean(values > thresholds, axis=0)


def control_thresholds(step_values, quantile):
    """Per-column Hazen quantile of raw per-step values (the control run)."""
    if not 0.0 < quantile < 1.0:
        raise DomainError("quantile must lie in (0, 1)")
    return np.percentile(np.atleast_2d(np.asarray(step_values, dtype=float)),
                         100.0 * quantile, axis=0, method="hazen")


def integrated_autocorr_time(states, max_lag=1000):
    """Crude IACT: 1 + 2 sum of autocorrelations to the first drop below 0.05.

    Returns the maximum over dimensions; 1.0 for effectively white chains.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if states.shape[0] < 4:
        raise DomainError("need at least 4 states to estimate autocorrelation")
    n = states.shape[0]
    worst = 1.0
    for j in range(states.shape[1]):
        x = states[:, j] - states[:, j].mean()
        denom = x @ x
        if denom == 0.0:
            continue
        tau = 1.0
        for lag in range(1, min(max_lag, n - 1)):
            rho = (x[:-lag] @ x[lag:]) / denom
            if rho < 0.05:
                break
            tau += 2.0 * rho
        worst = max(worst, tau)
    return worst


def thin_indices(n_chain, n_draw, stride, rng):
    """Sorted draw of n_draw distinct indices from the strided index set."""
    if stride < 1:
        raise DomainError("stride must be >= 1")
    idx = np.arange(0, n_chain, stride)
    if len(idx) < n_draw:
        raise DomainError(
            f"chain supports only {len(idx)} draws at stride {stride}, "
            f"need {n_draw}")
    return np.sort(rng.choice(idx, size=n_draw, replace=False))


class PredictionSpec:
    def __init__(self, n_posterior_samples, long_window, scenarios=None,
                 extreme_quantile=DEFAULT_EXTREME_QUANTILE):
        if n_posterior_samples < 2:
            raise DomainError("need at least 2 posterior samples")
        if not (long_window > 0.0 and np.isfinite(long_window)):
            raise DomainError("long_window must be positive")
        if not 0.0 < extreme_quantile < 1.0:
            raise DomainError("extreme_quantile must lie in (0, 1)")
        self.n_posterior_samples = int(n_posterior_samples)
        self.long_window = float(long_window)
        self.scenarios = list(scenarios) if scenarios else [Scenario()]
        self.extreme_quantile = float(extreme_quantile)


class PredictionBands:
    """Per-scenario percentile bands for posterior and reference ensembles.

    bands[name] is a dict with keys lower/median/upper and ref_lower/
    ref_median/ref_upper, each an array over data indices. n_used counts the
    posterior draws surviving evaluation in every scenario (the same rows
    enter every band, keeping seeds paired); dropped lists
    (draw position, context, message) for each discarded draw.
    """

    def __init__(self, bands, scenario_names, n_requested, n_used, stride,
                 chain_indices, seeds, dropped):
        self.bands = bands
        self.scenario_names = list(scenario_names)
        self.n_requested = int(n_requested)
        self.n_used = int(n_used)
        self.stride = int(stride)
        self.chain_indices = chain_indices
        self.seeds = seeds
        self.dropped = dropped

    def __getitem__(self, name):
        return self.bands[name]


def predict_ensemble(states, model, space, theta_truth, spec, seeds, rng,
                     stride=None):
    """Push posterior draws and the fixed truth through the forward model.

    states: post-burn-in chain in computational space. theta_truth: physical
    parameter vector for the internal-variability reference. seeds: one
    forward-model seed per requested draw, shared across scenarios and with
    the reference. rng drives only the chain subsampling. A draw whose
    evaluation fails anywhere is dropped from all ensembles and logged.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if len(states) < spec.n_posterior_samples:
        raise DomainError("chain shorter than the requested number of draws")
    if spec.long_window < model.default_window:
        raise DomainError("long_window must cover the calibration window")
    seeds = np.asarray(seeds)
    if len(seeds) < spec.n_posterior_samples:
        raise DomainError("need one seed per posterior draw")
    seeds = seeds[:spec.n_posterior_samples]

    if stride is None:
        tau = integrated_autocorr_time(states)
        stride = int(np.ceil(tau))
        # Never thin so hard that too few points remain.
        stride = max(1, min(stride, len(states) // spec.n_posterior_samples))
    chain_indices = thin_indices(len(states), spec.n_posterior_samples,
                                 stride, rng)
    thetas_phys = space.to_physical(states[chain_indices])
    truth_rows = np.tile(np.asarray(theta_truth, dtype=float),
                         (spec.n_posterior_samples, 1))

    names = []
    raw = {}
    ok = np.ones(spec.n_posterior_samples, dtype=bool)
    dropped = []
    for scenario in spec.scenarios:
        if scenario.name in raw:
            raise DomainError(f"duplicate scenario name {scenario.name!r}")
        names.append(scenario.name)
        post, post_fail = model.evaluate_batch(
            thetas_phys, seeds, window=spec.long_window, scenario=scenario)
        ref, ref_fail = model.evaluate_batch(
            truth_rows, seeds, window=spec.long_window, scenario=scenario)
        for i, err in post_fail:
            ok[i] = False
            dropped.append((int(i), f"posterior/{scenario.name}", str(err)))
        for i, err in ref_fail:
            ok[i] = False
            dropped.append((int(i), f"reference/{scenario.name}", str(err)))
        raw[scenario.name] = (post, ref)

    n_used = int(ok.sum())
    if n_used < 2:
        raise NumericalError(
            "fewer than 2 posterior draws survived evaluation")

    bands = {}
    for name in names:
        post, ref = raw[name]
        lo, med, hi = percentile_bands(post[ok])
        rlo, rmed, rhi = percentile_bands(ref[ok])
        bands[name] = {"lower": lo, "median": med, "upper": hi,
                       "ref_lower": rlo, "ref_median": rmed, "ref_upper": rhi}
    return PredictionBands(bands, names, spec.n_posterior_samples, n_used,
                           stride, chain_indices, seeds, dropped)
