"""Parameter-space transforms and Gaussian priors in computational coordinates.

Every algorithm in the toolkit (optimization, emulation, sampling) works in an
unbounded computational space; physical parameters live on intervals or
half-lines and are mapped back only for forward-model runs and reporting.
"""

import numpy as np
from scipy import linalg

from .exceptions import ConfigError, DomainError

# Saturation guards: sigmoid(+-36) already differs from {0,1} by ~2e-16, and
# exp() overflows just above 709, so clipping keeps inverses finite and
# strictly inside the open physical domain.
LOGIT_CLIP = 36.0
LOG_CLIP = 700.0

TRANSFORMS = ("logit", "log", "identity")


class ParameterDef:
    """Definition of one physical parameter.

    Parameters
    ----------
    name : str
        Unique identifier, used in artifacts and error messages.
    transform : {"logit", "log", "identity"}
        Map from the physical domain to the computational axis:
        logit((x - a) / (b - a)) for an interval (a, b), log(x - a) for a
        half-line (a, inf), or the identity for an unbounded parameter.
    bounds : pair of floats or None
        Open physical domain. Required finite (a, b) for "logit", (a, inf)
        for "log", and None (or (-inf, inf)) for "identity".
    prior_mean, prior_std : float
        Gaussian prior on the computational axis.
    """

    def __init__(self, name, transform, bounds=None, prior_mean=0.0, prior_std=1.0):
        if transform not in TRANSFORMS:
            raise ConfigError(
                f"parameter {name!r}: unknown transform {transform!r}, "
                f"expected one of {TRANSFORMS}"
            )
        if prior_std <= 0.0 or not np.isfinite(prior_std):
            raise ConfigError(f"parameter {name!r}: prior_std must be finite and > 0")
        if not np.isfinite(prior_mean):
            raise ConfigError(f"parameter {name!r}: prior_mean must be finite")

        if bounds is not None:
            bounds = (float(bounds[0]), float(bounds[1]))
        if transform == "logit":
            if bounds is None or not np.isfinite(bounds).all() or bounds[0] >= bounds[1]:
                raise ConfigError(
                    f"parameter {name!r}: logit transform needs finite bounds (a, b) with a < b"
                )
        elif transform == "log":
            if bounds is None:
                bounds = (0.0, np.inf)
            if not np.isfinite(bounds[0]) or not np.isinf(bounds[1]):
                raise ConfigError(
                    f"parameter {name!r}: log transform needs bounds (a, inf) with finite a"
                )
        else:
            if bounds is not None and (np.isfinite(bounds[0]) or np.isfinite(bounds[1])):
                raise ConfigError(
                    f"parameter {name!r}: identity transform takes no finite bounds"
                )
            bounds = None

        self.name = str(name)
        self.transform = transform
        self.bounds = bounds
        self.prior_mean = float(prior_mean)
        self.prior_std = float(prior_std)

    def to_computational(self, x):
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise DomainError(f"parameter {self.name!r}: non-finite physical value")
        if self.transform == "identity":
            return x + 0.0
        a, b = self.bounds
        if self.transform == "log":
            if np.any(x <= a):
                raise DomainError(
                    f"parameter {self.name!r}: value outside open domain ({a}, inf)"
                )
            return np.log(x - a)
        u = (x - a) / (b - a)
        if np.any(u <= 0.0) or np.any(u >= 1.0):
            raise DomainError(
                f"parameter {self.name!r}: value outside open domain ({a}, {b})"
            )
        return np.log(u) - np.log1p(-u)

    def to_physical(self, z):
        z = np.asarray(z, dtype=float)
        if not np.all(np.isfinite(z)):
            raise DomainError(f"parameter {self.name!r}: non-finite computational value")
        if self.transform == "identity":
            return z + 0.0
        if self.transform == "log":
            return self.bounds[0] + np.exp(np.clip(z, -LOG_CLIP, LOG_CLIP))
        a, b = self.bounds
        u = 1.0 / (1.0 + np.exp(-np.clip(z, -LOGIT_CLIP, LOGIT_CLIP)))
        return a + (b - a) * u


class ParameterSpace:
    """Ordered collection of parameters with a joint Gaussian prior.

    The prior is N(m, C) on the computational axes: m stacks the per-parameter
    prior means and C defaults to the diagonal of squared prior stds, but any
    symmetric positive-definite covariance may be supplied.
    """

    def __init__(self, defs, prior_cov=None):
        defs = list(defs)
        if not defs:
            raise ConfigError("parameter space needs at least one parameter")
        names = [d.name for d in defs]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate parameter names in {names}")
        self.defs = defs
        self.names = names
        self.dim = len(defs)
        self.prior_mean = np.array([d.prior_mean for d in defs])
        if prior_cov is None:
            prior_cov = np.diag([d.prior_std**2 for d in defs])
        prior_cov = np.asarray(prior_cov, dtype=float)
        if prior_cov.shape != (self.dim, self.dim):
            raise ConfigError(
                f"prior covariance shape {prior_cov.shape} != ({self.dim}, {self.dim})"
            )
        if not np.allclose(prior_cov, prior_cov.T, rtol=0.0, atol=1e-12):
            raise ConfigError("prior covariance must be symmetric")
        try:
            self._cov_chol = linalg.cholesky(prior_cov, lower=True)
        except linalg.LinAlgError as exc:
            raise ConfigError("prior covariance must be positive definite") from exc
        self.prior_cov = prior_cov
        self._logdet_cov = 2.0 * np.sum(np.log(np.diag(self._cov_chol)))

    @property
    def prior_chol(self):
        """Lower-triangular factor L with L L^T = prior covariance."""
        return self._cov_chol

    def _apply(self, values, method):
        values = np.asarray(values, dtype=float)
        if values.shape[-1] != self.dim:
            raise DomainError(
                f"expected trailing dimension {self.dim}, got shape {values.shape}"
            )
        cols = [method(self.defs[j])(values[..., j]) for j in range(self.dim)]
        return np.stack(cols, axis=-1)

    def to_computational(self, theta_phys):
        """Map physical values, shape (..., dim), onto computational axes."""
        return self._apply(theta_phys, lambda d: d.to_computational)

    def to_physical(self, theta_comp):
        """Map computational values, shape (..., dim), back to physical units."""
        return self._apply(theta_comp, lambda d: d.to_physical)

    def prior_sample(self, rng, size=None):
        """Draw from N(m, C); returns shape (dim,) or (size, dim)."""
        n = 1 if size is None else int(size)
        z = rng.standard_normal((n, self.dim))
        draws = self.prior_mean + z @ self._cov_chol.T
        return draws[0] if size is None else draws

    def prior_quad(self, theta_comp):
        """Squared Mahalanobis distance (theta - m)^T C^-1 (theta - m)."""
        theta_comp = np.asarray(theta_comp, dtype=float)
        dev = theta_comp - self.prior_mean
        w = linalg.cho_solve((self._cov_chol, True), np.atleast_2d(dev).T)
        quad = np.sum(np.atleast_2d(dev).T * w, axis=0)
        return float(quad[0]) if theta_comp.ndim == 1 else quad

    def prior_logpdf(self, theta_comp):
        const = self.dim * np.log(2.0 * np.pi) + self._logdet_cov
        return -0.5 * (self.prior_quad(theta_comp) + const)
