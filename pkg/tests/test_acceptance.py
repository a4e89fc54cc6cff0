"""Acceptance suite: one test per shipped criterion, at stated tolerances.

Each test prints a single "criterion NN (name): PASS/FAIL [detail]" line
(visible with -s, or in captured output on failure) and asserts the same
condition. The surrogate-pipeline criteria share one module-scoped run of
configs/acceptance.toml; the linear-Gaussian criteria share one in-process
problem with a closed-form posterior.
"""

import os
import time
import warnings

import numpy as np
import pytest
from scipy import linalg

try:
    import tomllib as toml
except ModuleNotFoundError:
    import tomli as toml

from ces import tables
from ces.config import PipelineConfig, load_config
from ces.eki import eki_run, eki_update
from ces.emulator import GpEmulator, gp_train
from ces.mcmc import ChainConfig, phi_mcmc, rwm_core, rwm_sample
from ces.models import LinearModel
from ces.noise import NoiseModel
from ces.parameters import ParameterDef, ParameterSpace
from ces.pipeline import load_manifest, run_stage
from ces.predict import integrated_autocorr_time

CONFIG_PATH = os.path.join(os.path.dirname(__file__), os.pardir,
                           "configs", "acceptance.toml")
PIPELINE_STAGES = ("generate-truth", "calibrate", "emulate", "sample")


def _verdict(num, name, ok, detail=""):
    line = f"criterion {num:02d} ({name}): {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f" [{detail}]"
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# Shared fixtures


@pytest.fixture(scope="module")
def acceptance_run(tmp_path_factory):
    """Full pipeline on the reduced surrogate instance, with stage timings."""
    config = load_config(CONFIG_PATH)
    run_dir = str(tmp_path_factory.mktemp("acceptance"))
    times = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        for command in PIPELINE_STAGES + ("predict", "report"):
            t0 = time.perf_counter()
            run_stage(command, config, run_dir)
            times[command] = time.perf_counter() - t0
        t0 = time.perf_counter()
        run_stage("benchmark", config, run_dir, realization=1)
        times["benchmark"] = time.perf_counter() - t0
    times["posterior"] = sum(times[c] for c in PIPELINE_STAGES)
    return config, run_dir, times


@pytest.fixture(scope="module")
def linear_problem():
    """Linear forward map with an exactly known Gaussian posterior.

    The model is deterministic, so observations carry structural noise Delta
    only and the trained GP's noise variance tends to zero; the chain then
    targets the conjugate posterior computed with Delta. Sigma = I enters
    solely as the (trivial) decorrelation basis.
    """
    t0 = time.perf_counter()
    a = np.array([[1.0, 0.4],
                  [0.0, 1.0],
                  [0.7, -0.3],
                  [0.2, 0.9]])
    model = LinearModel(a)
    space = ParameterSpace(model.parameter_defs())
    delta_std = 0.1
    noise = NoiseModel.from_matrices(np.eye(4), np.full(4, delta_std))
    theta_truth = np.array([1.0, -0.5])
    rng = np.random.default_rng(20260401)
    y = a @ theta_truth + delta_std * rng.standard_normal(4)

    # Conjugate posterior under noise Delta and the N(0, I) prior.
    prec = a.T @ a / delta_std**2 + np.linalg.inv(space.prior_cov)
    post_cov = np.linalg.inv(prec)
    post_mean = post_cov @ (a.T @ y / delta_std**2)

    result = eki_run(model, space, y, noise, n_members=30, n_iterations=4,
                     init_rng=np.random.default_rng(11),
                     member_seed=lambda it, m, r: 1000 * it + 10 * m + r)
    thetas, outputs = result.training_pairs()
    emulator = gp_train(thetas, outputs, noise, np.random.default_rng(5),
                        restarts=3, maxiter=60)
    build_time = time.perf_counter() - t0
    return {
        "space": space, "noise": noise, "y": y, "emulator": emulator,
        "post_mean": post_mean, "post_std": np.sqrt(np.diag(post_cov)),
        "x0": result.final_ensemble.mean(axis=0), "build_time": build_time,
    }


def _hpd_counts(run_dir, realizations):
    n50 = n99 = 0
    for k in range(realizations):
        member = tables.read_json(os.path.join(
            run_dir, "sample", f"r{k}", "posterior_summary.json"))
        flags = member["theta_truth_in_hpd"]
        n50 += bool(flags["0.5"])
        n99 += bool(flags["0.99"])
    return n50, n99


# ---------------------------------------------------------------------------
# Criteria


def test_criterion_01_linear_gaussian_end_to_end(linear_problem):
    lp = linear_problem
    t0 = time.perf_counter()
    chain = rwm_sample(ChainConfig(4000, 40000), lp["noise"].decorrelate(lp["y"]),
                       lp["emulator"], lp["noise"], lp["space"],
                       np.random.default_rng(17), x0=lp["x0"])
    elapsed = lp["build_time"] + time.perf_counter() - t0
    mean_err = np.abs(chain.states.mean(axis=0) / lp["post_mean"] - 1.0)
    std_err = np.abs(chain.states.std(axis=0, ddof=1) / lp["post_std"] - 1.0)
    ok = (mean_err < 0.02).all() and (std_err < 0.05).all() and elapsed < 120.0
    _verdict(1, "linear-gaussian end-to-end", ok,
             f"mean err {mean_err.max():.4f} < 0.02, std err "
             f"{std_err.max():.4f} < 0.05, {elapsed:.1f}s < 120s")


def test_criterion_02_eki_worked_example():
    # Scalar map G(theta) = 2 theta, members {0, 1, 2}, y = 4, Gamma = 1.
    thetas = np.array([[0.0], [1.0], [2.0]])
    outputs = 2.0 * thetas
    updated = eki_update(thetas, outputs, np.array([4.0]), np.array([[1.0]]))
    example_ok = np.allclose(updated[:, 0], [1.6, 1.8, 2.0], atol=1e-12,
                             rtol=0.0)

    # Updates stay in the affine span of the initial ensemble deviations.
    rng = np.random.default_rng(3)
    wide = rng.standard_normal((3, 5))
    mapped = np.tanh(wide @ rng.standard_normal((5, 4)))
    new = eki_update(wide, mapped, rng.standard_normal(4), np.eye(4))
    basis = linalg.orth((wide - wide.mean(axis=0)).T)
    dev = new - new.mean(axis=0)
    span_gap = np.abs(dev - (dev @ basis) @ basis.T).max()

    # Zero innovation leaves every member exactly unchanged.
    y = np.array([0.5, -1.0, 2.0, 0.0])
    frozen = eki_update(wide, np.tile(y, (3, 1)), y, np.eye(4))
    zero_ok = np.array_equal(frozen, wide)

    ok = example_ok and span_gap < 1e-8 and zero_ok
    _verdict(2, "eki worked example", ok,
             f"update {updated[:, 0].round(12).tolist()}, span gap "
             f"{span_gap:.2e} < 1e-8, zero-innovation exact: {zero_ok}")


def test_criterion_03_surrogate_calibration_recovery(acceptance_run):
    config, run_dir, times = acceptance_run
    truth = config.truth_parameters
    hits = 0
    decreasing = True
    worst = 0.0
    for k in range(config.realizations):
        meta = tables.read_json(os.path.join(
            run_dir, "calibrate", f"r{k}", "calibrate_meta.json"))
        relerr = np.abs(np.array(meta["theta_mean_phys"]) / truth - 1.0)
        hits += (relerr <= 0.10).all()
        worst = max(worst, relerr.max())
        diag = tables.read_table(os.path.join(
            run_dir, "calibrate", f"r{k}", "diagnostics.txt"))
        res = diag["residual"]
        decreasing &= res[config.eki_iterations] < res[0]
    ok = hits >= 3 and decreasing and times["calibrate"] < 300.0
    _verdict(3, "surrogate calibration recovery", ok,
             f"{hits}/4 realizations within 10% (worst {worst:.3f}), residual "
             f"decreased: {decreasing}, {times['calibrate']:.1f}s < 300s")


def test_criterion_04_ensemble_collapse_vs_posterior(acceptance_run):
    config, run_dir, _ = acceptance_run
    worst = 0.0
    for k in range(config.realizations):
        meta = tables.read_json(os.path.join(
            run_dir, "calibrate", f"r{k}", "calibrate_meta.json"))
        summary = tables.read_json(os.path.join(
            run_dir, "sample", f"r{k}", "posterior_summary.json"))
        ratio = np.array(meta["final_spread"]) / np.array(summary["std_comp"])
        worst = max(worst, ratio.max())
    ok = worst < 0.5
    _verdict(4, "ensemble collapse vs posterior", ok,
             f"max spread/posterior-std {worst:.3f} < 0.5")


def test_criterion_05_gp_closed_form_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    x = rng.uniform(-2.0, 2.0, size=(14, 2))
    y = np.column_stack([np.sin(x @ [1.0, 0.7]), np.cos(x @ [-0.4, 1.1])])
    hypers = np.array([[1.2, 0.8, 1.1, 1e-6],
                       [0.9, 1.3, 0.7, 1e-6]])
    emulator = GpEmulator().fit(x, y, fixed_hypers=hypers)

    # Dense-inverse oracle on the standardized inputs the emulator uses.
    xs = (x - emulator.x_mean) / emulator.x_std
    test = rng.uniform(-2.0, 2.0, size=(25, 2))
    ts = (test - emulator.x_mean) / emulator.x_std
    mean_o = np.empty((25, 2))
    var_o = np.empty((25, 2))
    for j in range(2):
        sv, ls, nv = hypers[j, 0], hypers[j, 1:3], hypers[j, 3]
        k = (sv * np.exp(-0.5 * (((xs[:, None] - xs[None]) / ls) ** 2)
                         .sum(axis=-1))
             + (nv + emulator.jitter_[j]) * np.eye(14))
        ks = sv * np.exp(-0.5 * (((ts[:, None] - xs[None]) / ls) ** 2)
                         .sum(axis=-1))
        kinv = np.linalg.inv(k)
        yc = y[:, j] - y[:, j].mean()
        mean_o[:, j] = ks @ kinv @ yc + y[:, j].mean()
        var_o[:, j] = sv + nv - np.einsum("ij,jk,ik->i", ks, kinv, ks)
    mean, var = emulator.predict_tilde_many(test)
    gap = max(np.abs(mean - mean_o).max(), np.abs(var - var_o).max())

    # Near-noiseless GP interpolates its training targets.
    interp_mean, _ = emulator.predict_tilde_many(x)
    interp_gap = np.abs(interp_mean - y).max()

    # Far from the data the prediction reverts to the per-dimension prior.
    far_mean, far_var = emulator.predict_tilde(np.array([80.0, -75.0]))
    revert_gap = max(np.abs(far_mean - y.mean(axis=0)).max(),
                     np.abs(far_var - (hypers[:, 0] + hypers[:, 3])).max())

    elapsed = time.perf_counter() - t0
    ok = (gap < 1e-10 and interp_gap < 1e-4 and revert_gap < 1e-8
          and elapsed < 30.0)
    _verdict(5, "gp closed-form equivalence", ok,
             f"oracle gap {gap:.2e} < 1e-10, interpolation {interp_gap:.2e}, "
             f"prior reversion {revert_gap:.2e}, {elapsed:.1f}s < 30s")


def test_criterion_06_long_run_coverage(acceptance_run):
    config, run_dir, _ = acceptance_run
    model = config.build_model()
    reference = model.evaluate_long(config.truth_parameters, 424242,
                                    n_windows=600).mean(axis=0)
    coverage = []
    for k in range(config.realizations):
        bands = tables.read_table(os.path.join(
            run_dir, "predict", f"r{k}", "bands_control.txt"))
        inside = (bands["lower"] <= reference) & (reference <= bands["upper"])
        coverage.append(inside.mean())
    worst = min(coverage)
    ok = worst >= 0.90
    _verdict(6, "long-run coverage", ok,
             f"per-realization coverage {[round(c, 3) for c in coverage]}, "
             f"min {worst:.3f} >= 0.90")


def test_criterion_07_chain_moments_and_logdet(linear_problem):
    # Exact 2-D Gaussian target: moment errors within 3 Monte-Carlo SEs.
    mu = np.array([1.0, -2.0])
    cov = np.array([[1.0, 0.6], [0.6, 2.0]])
    prec = np.linalg.inv(cov)
    sig = np.sqrt(np.diag(cov))
    chain = rwm_core(lambda x: 0.5 * (x - mu) @ prec @ (x - mu), mu.copy(),
                     np.linalg.cholesky(cov), ChainConfig(10000, 190000),
                     np.random.default_rng(77))
    tau = integrated_autocorr_time(chain.states)
    n_eff = len(chain) / tau
    mean_z = np.abs(chain.states.mean(axis=0) - mu) / (sig / np.sqrt(n_eff))
    std_z = (np.abs(chain.states.std(axis=0, ddof=1) - sig)
             / (sig / np.sqrt(2.0 * n_eff)))
    moments_ok = (mean_z < 3.0).all() and (std_z < 3.0).all()
    rate_ok = abs(chain.acceptance_rate - 0.25) <= 0.10

    # The objective must include 1/2 log det Gamma_tilde(theta): with a
    # zero-residual stub whose predictive variance is exp(theta), the phi
    # difference between two points has a known closed form.
    class _VarStub:
        def predict_tilde(self, theta):
            return np.zeros(2), np.exp(theta)

    space2 = ParameterSpace([ParameterDef("a", "identity"),
                             ParameterDef("b", "identity")])
    noise2 = NoiseModel.from_matrices(np.eye(2), np.zeros(2))
    t1, t2 = np.array([0.3, -0.2]), np.array([-0.5, 0.8])
    got = (phi_mcmc(t1, np.zeros(2), _VarStub(), noise2, space2)
           - phi_mcmc(t2, np.zeros(2), _VarStub(), noise2, space2))
    want = 0.5 * (t1.sum() - t2.sum()) + 0.5 * (t1 @ t1 - t2 @ t2)
    logdet_ok = abs(got - want) < 1e-12

    ok = moments_ok and rate_ok and logdet_ok
    _verdict(7, "chain moments and logdet", ok,
             f"moment z-scores mean {mean_z.round(2).tolist()} / std "
             f"{std_z.round(2).tolist()} < 3, acceptance "
             f"{chain.acceptance_rate:.3f} in 0.25 +- 0.10, logdet term "
             f"gap {abs(got - want):.1e}")


def test_criterion_07b_emulator_chain_speed(linear_problem):
    lp = linear_problem
    t0 = time.perf_counter()
    chain = rwm_sample(ChainConfig(10000, 190000),
                       lp["noise"].decorrelate(lp["y"]), lp["emulator"],
                       lp["noise"], lp["space"], np.random.default_rng(3),
                       x0=lp["x0"])
    elapsed = time.perf_counter() - t0
    ok = elapsed < 60.0 and len(chain) == 190000
    _verdict(7, "190k emulator-backed draws", ok,
             f"{elapsed:.1f}s < 60s, acceptance {chain.acceptance_rate:.3f}")


def test_criterion_08_truth_in_credible_regions(acceptance_run, tmp_path):
    config, run_dir, times = acceptance_run
    n50, n99 = _hpd_counts(run_dir, config.realizations)
    detail = f"99%: {n99}/4, 50%: {n50}/4"
    retried = False
    if not (n99 == 4 and n50 >= 2):
        # The criterion allows one retry with fresh seeds.
        retried = True
        with open(CONFIG_PATH, "rb") as fh:
            data = toml.load(fh)
        data["run"]["master_seed"] += 1
        retry_config = PipelineConfig(data)
        retry_dir = str(tmp_path / "retry")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            for command in PIPELINE_STAGES:
                run_stage(command, retry_config, retry_dir)
        n50, n99 = _hpd_counts(retry_dir, retry_config.realizations)
        detail += f"; after retry 99%: {n99}/4, 50%: {n50}/4"
    ok = n99 == 4 and n50 >= 2 and times["posterior"] < 600.0
    _verdict(8, "truth in credible regions", ok,
             detail + f", retried: {retried}, posterior pipeline "
             f"{times['posterior']:.0f}s < 600s")


def test_criterion_09_benchmark_grid_agreement(acceptance_run):
    _, run_dir, _ = acceptance_run
    sample = tables.read_json(os.path.join(
        run_dir, "sample", "r1", "posterior_summary.json"))
    bench = tables.read_json(os.path.join(
        run_dir, "benchmark", "r1", "posterior_summary.json"))
    rel = np.abs(np.array(sample["std_comp"])
                 / np.array(bench["std_comp"]) - 1.0)
    ok = (rel <= 0.5).all()
    _verdict(9, "benchmark grid agreement", ok,
             f"per-parameter |std ratio - 1| {rel.round(3).tolist()} <= 0.5")


def test_criterion_10_evaluation_accounting(acceptance_run):
    config, run_dir, _ = acceptance_run
    report = tables.read_json(os.path.join(run_dir, "report", "report.json"))
    ratios = [report["realizations"][str(k)]["evaluations_avoided_ratio"]
              for k in range(config.realizations)]
    ok = min(ratios) >= 100.0
    _verdict(10, "evaluation accounting", ok,
             f"avoided-evaluation ratios {[round(r, 1) for r in ratios]} "
             f">= 100")


def test_criterion_11_prediction_bands_and_extremes(acceptance_run):
    config, run_dir, _ = acceptance_run
    ordered = dominated = True
    freq_gap = 0.0
    for k in range(config.realizations):
        for name in ("control", "warm"):
            bands = tables.read_table(os.path.join(
                run_dir, "predict", f"r{k}", f"bands_{name}.txt"))
            ordered &= bool(np.all(bands["lower"] <= bands["median"])
                            and np.all(bands["median"] <= bands["upper"]))
            width = bands["upper"] - bands["lower"]
            ref_width = bands["ref_upper"] - bands["ref_lower"]
            dominated &= bool(np.all(width >= ref_width))
        exceed = tables.read_table(os.path.join(
            run_dir, "predict", f"r{k}", "exceedance.txt"))
        freq_gap = max(freq_gap, np.abs(exceed["freq_control"] - 0.1).max())
    ok = ordered and dominated and freq_gap < 0.005
    _verdict(11, "prediction bands and extremes", ok,
             f"ordered: {ordered}, posterior bands contain fixed-truth "
             f"bands: {dominated}, control exceedance gap {freq_gap:.4f} "
             f"< 0.005 at q=0.9")


def test_criterion_12_bit_identical_reruns(acceptance_run):
    config, run_dir, _ = acceptance_run
    stages = ["emulate/r0", "sample/r0", "predict/r0"]
    manifest = load_manifest(run_dir)
    before = {}
    for key in stages:
        for rel in manifest["stages"][key]["outputs"]:
            before[rel] = tables.sha256_file(os.path.join(run_dir, rel))
    for command in ("emulate", "sample", "predict"):
        run_stage(command, config, run_dir, realization=0)
    after = {rel: tables.sha256_file(os.path.join(run_dir, rel))
             for rel in before}
    changed = sorted(rel for rel in before if before[rel] != after[rel])
    ok = not changed
    _verdict(12, "bit-identical reruns", ok,
             f"{len(before)} artifacts across {stages} rerun unchanged"
             + (f"; changed: {changed}" if changed else ""))
