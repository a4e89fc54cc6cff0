"""Run configuration: TOML schema, validation, and canonical hashing.

A run is defined by one TOML file. Loading merges the file with the defaults
below, rejects unknown keys (typos fail loudly, with their dotted path), and
freezes the effective values. The SHA-256 of a canonical JSON encoding of the
effective configuration is recorded in the run manifest, so any semantic
change -- including a changed default -- marks existing artifacts stale.

Sections and defaults::

    [run]        realizations = 4, master_seed (required)
    [model]      name = "cyclic_chaos" | "linear", plus model arguments
    [truth]      parameters (required, physical units)
    [[parameters]]  optional per-name prior_mean / prior_std overrides
    [noise]      n_windows = 600, c_infl = 0.2
    [eki]        members = 100, iterations = 5, extra_iterations = 0,
                 max_retries = 5
    [gp]         restarts = 5, maxiter = 60
    [mcmc]       n_burn = 10000, n_samples = 190000, step_scale = 0.5,
                 target_acceptance = 0.25, store_stride = 1
    [predict]    n_samples = 100, long_window = 2400.0,
                 extreme_quantile = 0.9, [[predict.scenarios]]
    [benchmark]  grid = [20, 20], bounds optional (computational space;
                 default prior_mean +- 1.5 prior_std per parameter)
"""

import hashlib
import json

import numpy as np

try:
    import tomllib as tomli
except ModuleNotFoundError:
    import tomli

from .exceptions import ConfigError, DomainError
from .models import CyclicChaosModel, LinearModel, Scenario
from .parameters import ParameterDef, ParameterSpace

_REQUIRED = object()


def _as_int(value, minimum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"must be >= {minimum}, got {value}")
    return int(value)


def _as_float(value, minimum=None, maximum=None, open_ends=True):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"expected a number, got {value!r}")
    value = float(value)
    if not np.isfinite(value):
        raise ConfigError(f"must be finite, got {value}")
    if minimum is not None and (value <= minimum if open_ends else value < minimum):
        raise ConfigError(f"must be > {minimum}, got {value}")
    if maximum is not None and (value >= maximum if open_ends else value > maximum):
        raise ConfigError(f"must be < {maximum}, got {value}")
    return value


def _as_float_list(value):
    if not isinstance(value, list) or not value:
        raise ConfigError(f"expected a non-empty list of numbers, got {value!r}")
    return [_as_float(v) for v in value]


class _Section:
    """One TOML table: tracked key access plus unknown-key rejection."""

    def __init__(self, data, path):
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(f"[{path}] must be a table")
        self.data = data
        self.path = path
        self.used = set()

    def take(self, key, default=_REQUIRED, conv=None):
        self.used.add(key)
        if key not in self.data:
            if default is _REQUIRED:
                raise ConfigError(f"{self.path}.{key} is required")
            return default
        value = self.data[key]
        if conv is None:
            return value
        try:
            return conv(value)
        except ConfigError as err:
            raise ConfigError(f"{self.path}.{key}: {err}") from None

    def finish(self):
        extra = sorted(set(self.data) - self.used)
        if extra:
            raise ConfigError(f"unknown key(s) {extra} in [{self.path}]")


class PipelineConfig:
    """Effective (defaults-merged, validated) configuration for one run."""

    def __init__(self, data):
        if not isinstance(data, dict):
            raise ConfigError("configuration root must be a table")
        known = {"run", "model", "truth", "parameters", "noise", "eki", "gp",
                 "mcmc", "predict", "benchmark"}
        extra = sorted(set(data) - known)
        if extra:
            raise ConfigError(f"unknown section(s) {extra}")

        run = _Section(data.get("run"), "run")
        self.realizations = run.take("realizations", 4, lambda v: _as_int(v, 1))
        self.master_seed = run.take("master_seed", conv=lambda v: _as_int(v, 0))
        run.finish()

        model = _Section(data.get("model"), "model")
        self.model_name = model.take("name", "cyclic_chaos")
        if self.model_name == "cyclic_chaos":
            self.model_kwargs = {
                "n_sites": model.take("n_sites", 40, lambda v: _as_int(v, 4)),
                "dt": model.take("dt", 0.02, lambda v: _as_float(v, 0.0)),
                "window": model.take("window", 10.0, lambda v: _as_float(v, 0.0)),
                "spinup": model.take(
                    "spinup", None,
                    lambda v: _as_float(v, 0.0, open_ends=False)),
                "exceed_threshold": model.take("exceed_threshold", 6.0, _as_float),
            }
        elif self.model_name == "linear":
            matrix = model.take("matrix")
            try:
                matrix = np.array(matrix, dtype=float)
            except (TypeError, ValueError):
                raise ConfigError("model.matrix must be a rectangular "
                                  "array of numbers") from None
            if matrix.ndim != 2:
                raise ConfigError("model.matrix must be 2-D")
            self.model_kwargs = {"matrix": matrix}
        else:
            raise ConfigError(
                f"model.name must be 'cyclic_chaos' or 'linear', "
                f"got {self.model_name!r}")
        model.finish()

        truth = _Section(data.get("truth"), "truth")
        self.truth_parameters = np.array(truth.take("parameters",
                                                    conv=_as_float_list))
        truth.finish()

        overrides = data.get("parameters", [])
        if not isinstance(overrides, list):
            raise ConfigError("[[parameters]] must be an array of tables")
        self.param_overrides = {}
        for k, entry in enumerate(overrides):
            sec = _Section(entry, f"parameters[{k}]")
            name = sec.take("name")
            if name in self.param_overrides:
                raise ConfigError(f"duplicate [[parameters]] entry for {name!r}")
            self.param_overrides[name] = {
                "prior_mean": sec.take("prior_mean", None, _as_float),
                "prior_std": sec.take("prior_std", None,
                                      lambda v: _as_float(v, 0.0)),
            }
            sec.finish()

        noise = _Section(data.get("noise"), "noise")
        self.n_windows = noise.take("n_windows", 600, lambda v: _as_int(v, 2))
        self.c_infl = noise.take("c_infl", 0.2,
                                 lambda v: _as_float(v, 0.0, open_ends=False))
        noise.finish()

        eki = _Section(data.get("eki"), "eki")
        self.eki_members = eki.take("members", 100, lambda v: _as_int(v, 2))
        self.eki_iterations = eki.take("iterations", 5, lambda v: _as_int(v, 1))
        self.eki_extra_iterations = eki.take("extra_iterations", 0,
                                             lambda v: _as_int(v, 0))
        self.eki_max_retries = eki.take("max_retries", 5, lambda v: _as_int(v, 1))
        eki.finish()

        gp = _Section(data.get("gp"), "gp")
        self.gp_restarts = gp.take("restarts", 5, lambda v: _as_int(v, 1))
        self.gp_maxiter = gp.take("maxiter", 60, lambda v: _as_int(v, 1))
        gp.finish()

        mcmc = _Section(data.get("mcmc"), "mcmc")
        self.mcmc_n_burn = mcmc.take("n_burn", 10000, lambda v: _as_int(v, 0))
        self.mcmc_n_samples = mcmc.take("n_samples", 190000,
                                        lambda v: _as_int(v, 1))
        self.mcmc_step_scale = mcmc.take("step_scale", 0.5,
                                         lambda v: _as_float(v, 0.0))
        self.mcmc_target_acceptance = mcmc.take(
            "target_acceptance", 0.25, lambda v: _as_float(v, 0.0, 1.0))
        self.mcmc_store_stride = mcmc.take("store_stride", 1,
                                           lambda v: _as_int(v, 1))
        mcmc.finish()

        predict = _Section(data.get("predict"), "predict")
        self.predict_n_samples = predict.take("n_samples", 100,
                                              lambda v: _as_int(v, 2))
        self.predict_long_window = predict.take("long_window", 2400.0,
                                                lambda v: _as_float(v, 0.0))
        self.extreme_quantile = predict.take("extreme_quantile", 0.9,
                                             lambda v: _as_float(v, 0.0, 1.0))
        raw_scenarios = predict.take("scenarios", None)
        predict.finish()
        if raw_scenarios is None:
            self.scenarios = [Scenario("control")]
        else:
            if not isinstance(raw_scenarios, list) or not raw_scenarios:
                raise ConfigError(
                    "[[predict.scenarios]] must be a non-empty array of tables")
            self.scenarios = []
            for k, entry in enumerate(raw_scenarios):
                sec = _Section(entry, f"predict.scenarios[{k}]")
                name = str(sec.take("name"))
                # Scenario names become artifact file names.
                if not name.replace("-", "").replace("_", "").isalnum():
                    raise ConfigError(
                        f"scenario name {name!r} must use only letters, "
                        "digits, '-' and '_'")
                knobs = {key: sec.take(key, conv=_as_float)
                         for key in list(sec.data) if key != "name"}
                sec.finish()
                self.scenarios.append(Scenario(name, **knobs))
            names = [s.name for s in self.scenarios]
            if len(set(names)) != len(names):
                raise ConfigError(f"duplicate scenario names in {names}")

        bench = _Section(data.get("benchmark"), "benchmark")
        self.benchmark_grid = tuple(
            bench.take("grid", [20, 20],
                       lambda v: [_as_int(g, 2) for g in v]))
        self.benchmark_bounds_raw = bench.take("bounds", None)
        bench.finish()

        self._validate_against_model()

    def _validate_against_model(self):
        model = self.build_model()
        if len(self.truth_parameters) != model.param_dim:
            raise ConfigError(
                f"truth.parameters needs {model.param_dim} values for model "
                f"{self.model_name!r}, got {len(self.truth_parameters)}")
        unknown = set(self.param_overrides) - set(model.param_names)
        if unknown:
            raise ConfigError(
                f"[[parameters]] overrides for unknown names {sorted(unknown)}; "
                f"model has {list(model.param_names)}")
        if len(self.benchmark_grid) != model.param_dim:
            raise ConfigError(
                f"benchmark.grid needs one size per parameter "
                f"({model.param_dim}), got {list(self.benchmark_grid)}")
        if self.benchmark_bounds_raw is not None:
            bounds = self.benchmark_bounds_raw
            ok = (isinstance(bounds, list) and len(bounds) == model.param_dim
                  and all(isinstance(b, list) and len(b) == 2 for b in bounds))
            if not ok:
                raise ConfigError(
                    f"benchmark.bounds must be {model.param_dim} [low, high] "
                    "pairs (computational space)")
            for lo, hi in bounds:
                if not _as_float(lo) < _as_float(hi):
                    raise ConfigError(
                        f"benchmark.bounds pair [{lo}, {hi}] needs low < high")
        # Validate the truth point and any prior overrides end to end.
        space = self.build_space(model)
        try:
            space.to_computational(self.truth_parameters)
        except DomainError as err:
            raise ConfigError(f"truth.parameters: {err}") from None

    def build_model(self):
        if self.model_name == "cyclic_chaos":
            return CyclicChaosModel(**self.model_kwargs)
        return LinearModel(self.model_kwargs["matrix"])

    def build_space(self, model=None):
        """Parameter space from the model's definitions plus prior overrides."""
        model = self.build_model() if model is None else model
        defs = []
        for d in model.parameter_defs():
            over = self.param_overrides.get(d.name, {})
            mean = over.get("prior_mean")
            std = over.get("prior_std")
            defs.append(ParameterDef(
                d.name, d.transform, bounds=d.bounds,
                prior_mean=d.prior_mean if mean is None else mean,
                prior_std=d.prior_std if std is None else std))
        return ParameterSpace(defs)

    def benchmark_bounds(self, space):
        """Computational-space box for the benchmark grid."""
        if self.benchmark_bounds_raw is not None:
            return np.array(self.benchmark_bounds_raw, dtype=float)
        mean = np.array([d.prior_mean for d in space.defs])
        std = np.array([d.prior_std for d in space.defs])
        return np.column_stack([mean - 1.5 * std, mean + 1.5 * std])

    def normalized(self):
        """Effective configuration as plain JSON-serializable data."""
        model_kwargs = dict(self.model_kwargs)
        if "matrix" in model_kwargs:
            model_kwargs["matrix"] = model_kwargs["matrix"].tolist()
        return {
            "run": {"realizations": self.realizations,
                    "master_seed": self.master_seed},
            "model": {"name": self.model_name, **model_kwargs},
            "truth": {"parameters": self.truth_parameters.tolist()},
            "parameters": {name: dict(over) for name, over
                           in sorted(self.param_overrides.items())},
            "noise": {"n_windows": self.n_windows, "c_infl": self.c_infl},
            "eki": {"members": self.eki_members,
                    "iterations": self.eki_iterations,
                    "extra_iterations": self.eki_extra_iterations,
                    "max_retries": self.eki_max_retries},
            "gp": {"restarts": self.gp_restarts, "maxiter": self.gp_maxiter},
            "mcmc": {"n_burn": self.mcmc_n_burn,
                     "n_samples": self.mcmc_n_samples,
                     "step_scale": self.mcmc_step_scale,
                     "target_acceptance": self.mcmc_target_acceptance,
                     "store_stride": self.mcmc_store_stride},
            "predict": {"n_samples": self.predict_n_samples,
                        "long_window": self.predict_long_window,
                        "extreme_quantile": self.extreme_quantile,
                        "scenarios": [{"name": s.name, **s.scales}
                                      for s in self.scenarios]},
            "benchmark": {"grid": list(self.benchmark_grid),
                          "bounds": self.benchmark_bounds_raw},
        }

    @property
    def hash(self):
        blob = json.dumps(self.normalized(), sort_keys=True,
                          separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def load_config(path):
    """Parse and validate a TOML configuration file."""
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"configuration file not found: {path}") from None
    except tomli.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}") from None
    return PipelineConfig(data)
