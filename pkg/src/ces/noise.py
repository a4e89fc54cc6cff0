"""Noise model for window-averaged observations.

The total observational covariance is Gamma = Sigma + Delta: Sigma is the
internal-variability covariance of finite-window averages, estimated from
consecutive windows of a long control run at the true parameters, and Delta is
a diagonal synthetic measurement covariance diag(delta_i^2) whose magnitudes
are tied to the distance of each statistic from its physical boundary. The
eigendecomposition Sigma = V diag(scales^2) V^T also defines the decorrelated
coordinates the emulator is trained in.
"""

import os
import warnings

import numpy as np

from . import tables
from .exceptions import DomainError, NumericalError

DEFAULT_C_INFL = 0.2
DEFAULT_REL_FLOOR = 1e-8
# Relative flooring degenerates when the sample covariance is exactly zero
# (a deterministic model makes all windows identical); this keeps D invertible.
ABS_FLOOR = 1e-12


def estimate_sigma(window_means, rel_floor=DEFAULT_REL_FLOOR, abs_floor=ABS_FLOOR):
    """Unbiased covariance of window means, symmetrized and eigenvalue-floored.

    Returns (sigma, eigenvalues, modes, info): eigenvalues descend, modes are
    the matching orthonormal columns (sign-fixed so each mode's largest
    component is positive), and sigma is reassembled from the floored spectrum.
    info records flooring and rank-deficiency diagnostics.
    """
    w = np.asarray(window_means, dtype=float)
    if w.ndim != 2:
        raise DomainError("window_means must be (n_windows, data_dim)")
    n, d = w.shape
    if n < 2:
        raise DomainError("need at least 2 windows to estimate a covariance")
    if not np.all(np.isfinite(w)):
        raise DomainError("non-finite window means")
    sample = np.cov(w, rowvar=False, ddof=1).reshape(d, d)
    sample = 0.5 * (sample + sample.T)
    eigvals, eigvecs = np.linalg.eigh(sample)
    # Stable descending sort: tied eigenvalues keep eigh's order, so e.g.
    # sigma = I decorrelates with the identity basis.
    order = np.argsort(-eigvals, kind="stable")
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    # Deterministic sign convention, so frozen decorrelation oracles are stable.
    flip = eigvecs[np.argmax(np.abs(eigvecs), axis=0), np.arange(d)] < 0.0
    eigvecs[:, flip] *= -1.0
    floor = max(rel_floor * max(eigvals[0], 0.0), abs_floor)
    floored = np.maximum(eigvals, floor)
    sigma = (eigvecs * floored) @ eigvecs.T
    sigma = 0.5 * (sigma + sigma.T)
    info = {
        "n_windows": n,
        "rank_deficient": n < d + 1,
        "n_floored": int(np.sum(eigvals < floor)),
        "floor": floor,
    }
    if info["rank_deficient"]:
        warnings.warn(
            f"covariance from {n} windows of dimension {d} is rank-deficient; "
            "eigenvalue flooring applied", stacklevel=2)
    return sigma, floored, eigvecs, info


def bounds_from_layout(layout, block_bounds):
    """Expand per-block (lower, upper) pairs to per-index bounds.

    block_bounds maps block name -> (lower, upper) with None for an absent
    bound, or None for an unbounded block. Blocks not mentioned are unbounded.
    """
    unknown = set(block_bounds) - {name for name, _ in layout.blocks}
    if unknown:
        raise DomainError(f"bounds given for unknown blocks {sorted(unknown)}")
    out = []
    for name, n in layout.blocks:
        pair = block_bounds.get(name)
        if pair is None:
            out.extend([(None, None)] * n)
        else:
            lo, hi = pair
            lo = None if lo is not None and not np.isfinite(lo) else lo
            hi = None if hi is not None and not np.isfinite(hi) else hi
            out.extend([(lo, hi)] * n)
    return out


def build_delta(mu, sigma_diag, bounds, c_infl=DEFAULT_C_INFL, unbounded_dist=None):
    """Synthetic measurement stds delta_i = c_infl * boundary headroom.

    The headroom is the smaller signed distance of mu_i +- 2 sqrt(Sigma_ii)
    to the boundary set of index i, so inflation never pushes plausible data
    outside physical ranges. Negative headroom (the 2-sigma point already
    left the domain) clamps to zero with a warning. Unbounded indices use
    |mu_i| + 2 sqrt(Sigma_ii) unless an explicit distance is supplied.

    Returns (delta, clamped): per-index stds and the clamp mask.
    """
    mu = np.asarray(mu, dtype=float)
    sigma_diag = np.asarray(sigma_diag, dtype=float)
    d = len(mu)
    if len(sigma_diag) != d or len(bounds) != d:
        raise DomainError("mu, sigma_diag and bounds must have equal length")
    if np.any(sigma_diag < 0.0):
        raise DomainError("negative variance in sigma_diag")
    if c_infl < 0.0:
        raise DomainError("c_infl must be non-negative")
    if unbounded_dist is not None:
        unbounded_dist = np.broadcast_to(np.asarray(unbounded_dist, float), (d,))

    delta = np.empty(d)
    clamped = np.zeros(d, dtype=bool)
    for i in range(d):
        s = np.sqrt(sigma_diag[i])
        lo, hi = bounds[i]
        if lo is None and hi is None:
            dist = unbounded_dist[i] if unbounded_dist is not None else abs(mu[i]) + 2.0 * s
        else:
            dist = np.inf
            for point in (mu[i] + 2.0 * s, mu[i] - 2.0 * s):
                if lo is not None:
                    dist = min(dist, point - lo)
                if hi is not None:
                    dist = min(dist, hi - point)
        if dist < 0.0:
            clamped[i] = True
            dist = 0.0
        delta[i] = c_infl * dist
    if np.any(clamped):
        warnings.warn(
            f"{int(clamped.sum())} indices had 2-sigma points outside their "
            "physical range; delta clamped to 0 there", stacklevel=2)
    return delta, clamped


class NoiseModel:
    """Bundles Sigma, Delta, Gamma and the decorrelation basis.

    Construct with `from_window_means` (the estimation path) or
    `from_matrices` (explicit covariances, e.g. for analytic test problems).
    """

    def __init__(self, sigma, eigvals, modes, delta, mu=None, info=None):
        d = sigma.shape[0]
        if np.any(eigvals <= 0.0):
            raise NumericalError("decorrelation needs strictly positive eigenvalues")
        if len(delta) != d:
            raise DomainError("delta length does not match sigma")
        if np.any(delta < 0.0):
            raise DomainError("delta entries are standard deviations, must be >= 0")
        self.sigma = sigma
        self.modes = modes
        self.scales = np.sqrt(eigvals)
        self.delta = np.diag(delta**2)
        self.delta_std = np.asarray(delta, dtype=float)
        self.gamma = self.sigma + self.delta
        self.mu = None if mu is None else np.asarray(mu, dtype=float)
        self.info = dict(info or {})
        # Whitening map W = D^-1 V^T, cached with Delta in tilde coordinates.
        self._whiten = self.modes.T / self.scales[:, None]
        self.delta_tilde = (self._whiten * np.diag(self.delta)) @ self._whiten.T

    @classmethod
    def from_window_means(cls, window_means, bounds, c_infl=DEFAULT_C_INFL,
                          rel_floor=DEFAULT_REL_FLOOR, unbounded_dist=None):
        sigma, eigvals, modes, info = estimate_sigma(window_means, rel_floor=rel_floor)
        mu = np.asarray(window_means, dtype=float).mean(axis=0)
        delta, clamped = build_delta(mu, np.diag(sigma), bounds, c_infl=c_infl,
                                     unbounded_dist=unbounded_dist)
        info["n_clamped"] = int(clamped.sum())
        info["c_infl"] = c_infl
        return cls(sigma, eigvals, modes, delta, mu=mu, info=info)

    @classmethod
    def from_matrices(cls, sigma, delta):
        """Explicit construction: sigma SPD (d, d), delta per-index stds (d,)."""
        sigma = np.asarray(sigma, dtype=float)
        if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
            raise DomainError("sigma must be square")
        if not np.allclose(sigma, sigma.T, rtol=0.0, atol=1e-12):
            raise DomainError("sigma must be symmetric")
        sigma = 0.5 * (sigma + sigma.T)
        eigvals, modes = np.linalg.eigh(sigma)
        order = np.argsort(-eigvals, kind="stable")
        eigvals, modes = eigvals[order], modes[:, order]
        flip = modes[np.argmax(np.abs(modes), axis=0), np.arange(sigma.shape[0])] < 0.0
        modes[:, flip] *= -1.0
        if np.any(eigvals <= 0.0):
            raise NumericalError("sigma must be positive definite")
        return cls(sigma, eigvals, modes, np.asarray(delta, dtype=float))

    @property
    def data_dim(self):
        return self.sigma.shape[0]

    @property
    def inflation_ratio(self):
        """Mean over indices of sqrt(Gamma_ii) / sqrt(Sigma_ii); >= 1 always."""
        return float(np.mean(np.sqrt(np.diag(self.gamma) / np.diag(self.sigma))))

    def decorrelate(self, y):
        """Map data vectors into unit-variance coordinates: D^-1 V^T y.

        Accepts shape (d,) or (d, n) with vectors in columns.
        """
        y = np.asarray(y, dtype=float)
        if y.shape[0] != self.data_dim:
            raise DomainError(f"leading dimension must be {self.data_dim}")
        return self._whiten @ y

    def recorrelate_mean(self, g_tilde):
        """Inverse of decorrelate for points: V D g_tilde.

        Accepts shape (d,) or (d, n) with vectors in columns.
        """
        g_tilde = np.asarray(g_tilde, dtype=float)
        if g_tilde.shape[0] != self.data_dim:
            raise DomainError(f"leading dimension must be {self.data_dim}")
        if g_tilde.ndim == 1:
            return self.modes @ (self.scales * g_tilde)
        return self.modes @ (self.scales[:, None] * g_tilde)

    def recorrelate_cov(self, cov_tilde):
        """Map a tilde-space covariance back: V D S D V^T; accepts diag vector."""
        cov_tilde = np.asarray(cov_tilde, dtype=float)
        if cov_tilde.ndim == 1:
            cov_tilde = np.diag(cov_tilde)
        scaled = self.scales[:, None] * cov_tilde * self.scales[None, :]
        return self.modes @ scaled @ self.modes.T

    def gamma_tilde(self, sigma_gp_diag):
        """Sampling-time covariance in tilde space: diag(GP variance) + Delta~."""
        v = np.asarray(sigma_gp_diag, dtype=float)
        if v.shape != (self.data_dim,):
            raise DomainError(f"expected {self.data_dim} per-dimension variances")
        if np.any(~np.isfinite(v)) or np.any(v < 0.0):
            raise DomainError("GP variances must be finite and non-negative")
        out = self.delta_tilde.copy()
        out[np.diag_indices_from(out)] += v
        return out

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        for name, m in [("sigma", self.sigma), ("delta", self.delta),
                        ("gamma", self.gamma), ("modes", self.modes)]:
            tables.write_matrix(os.path.join(directory, f"{name}.txt"), m)
        cols = ["scales", "delta_std"]
        arrays = [self.scales, self.delta_std]
        if self.mu is not None:
            cols.append("mu")
            arrays.append(self.mu)
        tables.write_table(os.path.join(directory, "vectors.txt"), cols, arrays)
        tables.write_json(os.path.join(directory, "noise_info.json"), self.info)

    @classmethod
    def load(cls, directory):
        read = lambda name: tables.read_matrix(os.path.join(directory, f"{name}.txt"))
        sigma = read("sigma")
        modes = read("modes")
        vecs = tables.read_table(os.path.join(directory, "vectors.txt"))
        info = tables.read_json(os.path.join(directory, "noise_info.json"))
        return cls(sigma, vecs["scales"] ** 2, modes, vecs["delta_std"],
                   mu=vecs.get("mu"), info=info)
