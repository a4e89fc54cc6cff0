import numpy as np
import pytest
from scipy import linalg

from ces.eki import eki_run, eki_update, ensemble_spread, residual
from ces.exceptions import DomainError, EvaluationError, NumericalError
from ces.models import ForwardModel, LinearModel
from ces.noise import NoiseModel
from ces.parameters import ParameterDef, ParameterSpace


def make_seed_fn(base):
    def member_seed(iteration, member, retry=0):
        ss = np.random.SeedSequence(base, spawn_key=(iteration, member, retry))
        return int(ss.generate_state(1, np.uint32)[0])
    return member_seed


def identity_space(p, prior_mean=None, prior_std=None):
    mean = np.zeros(p) if prior_mean is None else prior_mean
    std = np.ones(p) if prior_std is None else prior_std
    return ParameterSpace([
        ParameterDef(f"t{j}", "identity", prior_mean=mean[j], prior_std=std[j])
        for j in range(p)])


def test_scalar_worked_example_exact():
    # Hand oracle with members {0,1,2}, map g = 2 theta, y = 4, gamma = 1:
    # deviations (-1,0,1) and (-2,0,2) give C_tg = 4/2 = 2, C_gg = 8/2 = 4,
    # gain 2/(1+4) = 0.4, so theta_m + 0.4 (4 - 2 theta_m) = {1.6, 1.8, 2.0}.
    members = np.array([[0.0], [1.0], [2.0]])
    outputs = 2.0 * members
    updated = eki_update(members, outputs, np.array([4.0]), np.array([[1.0]]))
    np.testing.assert_allclose(updated.ravel(), [1.6, 1.8, 2.0], atol=1e-12)


def test_update_matches_dense_linear_algebra_oracle():
    rng = np.random.default_rng(0)
    m, p, d = 12, 3, 5
    members = rng.normal(size=(m, p))
    a = rng.normal(size=(d, p))
    outputs = members @ a.T + 0.1 * rng.normal(size=(m, d))
    y = rng.normal(size=d)
    g = rng.normal(size=(d, d))
    gamma = g @ g.T + d * np.eye(d)
    # Oracle: explicit covariance sums and np.linalg.inv (different path).
    dth = members - members.mean(axis=0)
    dg = outputs - outputs.mean(axis=0)
    c_tg = sum(np.outer(dth[i], dg[i]) for i in range(m)) / (m - 1)
    c_gg = sum(np.outer(dg[i], dg[i]) for i in range(m)) / (m - 1)
    kal = c_tg @ np.linalg.inv(gamma + c_gg)
    expected = members + (y - outputs) @ kal.T
    np.testing.assert_allclose(eki_update(members, outputs, y, gamma), expected,
                               atol=1e-10)


def test_zero_innovation_zero_spread_is_identity():
    theta = np.array([0.7, -1.2])
    members = np.tile(theta, (5, 1))
    y = np.array([2.0, 1.0, 0.5])
    outputs = np.tile(y, (5, 1))
    updated = eki_update(members, outputs, y, np.eye(3))
    assert np.array_equal(updated, members)


def test_updates_stay_in_initial_ensemble_span():
    # With fewer members than parameters the update cannot leave the span of
    # the initial deviations (plus mean): project and check the residual.
    rng = np.random.default_rng(1)
    p, m, d = 5, 4, 3
    members = rng.normal(size=(m, p))
    a = rng.normal(size=(d, p))
    y = rng.normal(size=d)
    gamma = np.eye(d)
    basis = members.T  # span of the initial members (linear span)
    current = members
    for _ in range(4):
        outputs = current @ a.T
        current = eki_update(current, outputs, y, gamma)
        coeffs, res, *_ = np.linalg.lstsq(basis, current.T, rcond=None)
        recon = basis @ coeffs
        assert np.max(np.abs(recon - current.T)) < 1e-8


def test_single_step_approaches_kalman_update():
    # One EKI step from a large prior ensemble reproduces the Kalman mean of
    # the conjugate linear problem. Because no noise is added to the data
    # (optimization mode), the ensemble covariance contracts beyond the
    # Bayesian posterior, to (I - SA) C (I - SA)^T; that over-collapse is the
    # reason sampling is delegated to MCMC on the emulator.
    rng = np.random.default_rng(2)
    a = np.array([[1.0, 0.5], [-0.2, 1.5], [0.7, 0.1]])
    prior_mean = np.array([0.4, -0.3])
    prior_cov = np.array([[1.0, 0.3], [0.3, 2.0]])
    gamma = np.diag([0.3, 0.5, 0.2])
    y = np.array([1.0, 0.2, 0.6])
    m = 20_000
    members = rng.multivariate_normal(prior_mean, prior_cov, size=m,
                                      method="cholesky")
    updated = eki_update(members, members @ a.T, y, gamma)
    s = prior_cov @ a.T @ np.linalg.inv(gamma + a @ prior_cov @ a.T)
    kal_mean = prior_mean + s @ (y - a @ prior_mean)
    contraction = (np.eye(2) - s @ a) @ prior_cov @ (np.eye(2) - s @ a).T
    np.testing.assert_allclose(updated.mean(axis=0), kal_mean,
                               atol=0.02 * np.abs(kal_mean).max())
    np.testing.assert_allclose(np.cov(updated.T), contraction,
                               atol=0.05 * np.abs(contraction).max())


def test_residual_and_spread_worked_examples():
    # Mean output 3 against y = 1 with gamma = 4: (3-1)^2 / 4 = 1.
    outputs = np.array([[2.0], [3.0], [4.0]])
    assert residual(outputs, np.array([1.0]), np.array([[4.0]])) == pytest.approx(1.0, abs=1e-14)
    # Members {0, 2}: sample std with ddof=1 is sqrt(2).
    assert ensemble_spread(np.array([[0.0], [2.0]]))[0] == pytest.approx(np.sqrt(2.0), abs=1e-14)


def test_update_validation():
    good = np.zeros((3, 2))
    with pytest.raises(DomainError):
        eki_update(good[:1], np.zeros((1, 2)), np.zeros(2), np.eye(2))
    with pytest.raises(DomainError):
        eki_update(good, np.zeros((2, 2)), np.zeros(2), np.eye(2))
    with pytest.raises(DomainError):
        eki_update(good, np.full((3, 2), np.nan), np.zeros(2), np.eye(2))
    with pytest.raises(NumericalError):
        eki_update(np.random.default_rng(0).normal(size=(3, 2)),
                   np.random.default_rng(1).normal(size=(3, 2)),
                   np.zeros(2), -np.eye(2))


def linear_setup(seed=3):
    a = np.array([[1.0, 0.4], [-0.3, 1.2], [0.5, 0.8]])
    model = LinearModel(a)
    space = identity_space(2, prior_mean=np.array([0.5, 0.3]))
    noise = NoiseModel.from_matrices(0.05 * np.eye(3), np.full(3, 0.1))
    rng = np.random.default_rng(seed)
    theta_truth = np.array([1.2, 0.7])
    y = a @ theta_truth + 0.1 * rng.standard_normal(3)
    return model, space, noise, y, a


def test_run_on_linear_model_converges_and_collects_pairs():
    model, space, noise, y, a = linear_setup()
    result = eki_run(model, space, y, noise, n_members=30, n_iterations=5,
                     init_rng=np.random.default_rng(4),
                     member_seed=make_seed_fn(10), extra_iterations=3)
    # Training pairs: (N+1) * M from iterations 0..5 only.
    thetas, outputs = result.training_pairs()
    assert thetas.shape == (6 * 30, 2)
    assert result.iterations.max() == 8 and len(result.ensembles) == 9
    res = [d["residual"] for d in result.diagnostics]
    assert res[5] < 0.01 * res[0]
    # Optimizer limit: near the gamma-weighted least-squares solution (the
    # collapsed ensemble's shrinking gain stalls just short of it).
    gamma_inv = np.linalg.inv(noise.gamma)
    lsq = np.linalg.solve(a.T @ gamma_inv @ a, a.T @ gamma_inv @ y)
    np.testing.assert_allclose(result.final_ensemble.mean(axis=0), lsq, atol=0.08)
    # Collapse.
    assert np.all(ensemble_spread(result.final_ensemble)
                  < 0.5 * ensemble_spread(result.ensembles[0]))
    # Pair bookkeeping.
    assert np.array_equal(np.unique(result.members), np.arange(30))
    assert np.all(result.retries[result.train_mask] == 0)


def test_run_is_deterministic():
    model, space, noise, y, _ = linear_setup()
    kw = dict(n_members=12, n_iterations=3, member_seed=make_seed_fn(11))
    r1 = eki_run(model, space, y, noise, init_rng=np.random.default_rng(5), **kw)
    r2 = eki_run(model, space, y, noise, init_rng=np.random.default_rng(5), **kw)
    assert np.array_equal(r1.thetas, r2.thetas)
    assert np.array_equal(r1.outputs, r2.outputs)
    assert np.array_equal(r1.seeds, r2.seeds)


class FlakyModel(ForwardModel):
    """Linear model that fails whenever theta[0] exceeds a cutoff."""

    def __init__(self, cutoff):
        self.cutoff = cutoff
        self.inner = LinearModel(np.array([[1.0, 0.0], [0.0, 1.0]]))
        self.param_names = self.inner.param_names
        self.layout = self.inner.layout
        self.default_window = 1.0
        self.n_failures = 0

    def parameter_defs(self):
        return self.inner.parameter_defs()

    def evaluate(self, theta, seed, window=None, scenario=None):
        if theta[0] > self.cutoff:
            self.n_failures += 1
            raise EvaluationError("unstable region", theta=theta)
        return self.inner.evaluate(theta, seed, window=window, scenario=scenario)


def test_failed_members_are_resampled():
    model = FlakyModel(cutoff=1.0)
    space = identity_space(2)
    noise = NoiseModel.from_matrices(np.eye(2), np.zeros(2))
    y = np.array([0.0, 0.0])
    result = eki_run(model, space, y, noise, n_members=40, n_iterations=2,
                     init_rng=np.random.default_rng(6),
                     member_seed=make_seed_fn(12))
    assert model.n_failures > 0  # prior draws beyond the cutoff did occur
    assert np.all(np.isfinite(result.outputs))
    assert np.all(result.thetas[:, 0] <= 1.0)
    assert sum(d["n_resampled"] for d in result.diagnostics) == model.n_failures
    assert np.any(result.retries > 0)


def test_resumed_run_matches_uninterrupted_run():
    # Replay the updates from the first two iterations' stored pairs, then
    # restart at iteration 2: every row must match the uninterrupted run,
    # including members that needed resampling (redraws are seed-derived).
    space = identity_space(2)
    noise = NoiseModel.from_matrices(np.eye(2), np.zeros(2))
    y = np.array([0.0, 0.0])
    kw = dict(n_members=30, n_iterations=3, member_seed=make_seed_fn(21))
    full = eki_run(FlakyModel(cutoff=1.0), space, y, noise,
                   init_rng=np.random.default_rng(9), **kw)
    assert np.any(full.retries > 0)  # the redraw path is actually exercised

    members = None
    for it in (0, 1):
        sel = full.iterations == it
        members = eki_update(full.thetas[sel], full.outputs[sel], y, noise.gamma)
    part = eki_run(FlakyModel(cutoff=1.0), space, y, noise,
                   init_rng=np.random.default_rng(123),  # unused when resuming
                   initial_members=members, start_iteration=2, **kw)
    tail = full.iterations >= 2
    assert np.array_equal(part.iterations, full.iterations[tail])
    assert np.array_equal(part.thetas, full.thetas[tail])
    assert np.array_equal(part.outputs, full.outputs[tail])
    assert np.array_equal(part.seeds, full.seeds[tail])
    assert np.array_equal(part.retries, full.retries[tail])


def test_resume_arguments_validated():
    model, space, noise, y, _ = linear_setup()
    kw = dict(n_members=5, n_iterations=2, member_seed=make_seed_fn(1),
              init_rng=np.random.default_rng(0))
    with pytest.raises(DomainError, match="initial_members"):
        eki_run(model, space, y, noise, start_iteration=1, **kw)
    with pytest.raises(DomainError, match="shape"):
        eki_run(model, space, y, noise, initial_members=np.zeros((4, 2)), **kw)
    with pytest.raises(DomainError, match="iteration range"):
        eki_run(model, space, y, noise, initial_members=np.zeros((5, 2)),
                start_iteration=7, **kw)


def test_unrecoverable_failures_raise():
    model = FlakyModel(cutoff=-np.inf)  # nothing ever succeeds
    space = identity_space(2)
    noise = NoiseModel.from_matrices(np.eye(2), np.zeros(2))
    with pytest.raises(NumericalError, match="resampling"):
        eki_run(model, space, np.zeros(2), noise, n_members=5, n_iterations=1,
                init_rng=np.random.default_rng(7), member_seed=make_seed_fn(13),
                max_retries=3)


def test_run_validation():
    model, space, noise, y, _ = linear_setup()
    with pytest.raises(DomainError):
        eki_run(model, space, y[:2], noise, n_members=5, n_iterations=1,
                init_rng=np.random.default_rng(0), member_seed=make_seed_fn(1))
    with pytest.raises(DomainError):
        eki_run(model, space, y, noise, n_members=1, n_iterations=1,
                init_rng=np.random.default_rng(0), member_seed=make_seed_fn(1))
    with pytest.raises(DomainError):
        eki_run(model, space, y, noise, n_members=5, n_iterations=0,
                init_rng=np.random.default_rng(0), member_seed=make_seed_fn(1))
