import numpy as np
import pytest

from ces.config import PipelineConfig, load_config
from ces.exceptions import ConfigError
from ces.models import CyclicChaosModel, LinearModel


def minimal():
    return {"run": {"master_seed": 7}, "truth": {"parameters": [8.0, 1.4]}}


def test_defaults_mirror_reference_scale():
    cfg = PipelineConfig(minimal())
    assert cfg.realizations == 4
    assert cfg.model_name == "cyclic_chaos"
    assert cfg.model_kwargs["n_sites"] == 40
    assert cfg.n_windows == 600
    assert cfg.c_infl == 0.2
    assert cfg.eki_members == 100
    assert cfg.eki_iterations == 5
    assert cfg.eki_extra_iterations == 0
    assert cfg.gp_restarts == 5
    assert cfg.mcmc_n_burn == 10000
    assert cfg.mcmc_n_samples == 190000
    assert cfg.mcmc_target_acceptance == 0.25
    assert cfg.predict_n_samples == 100
    assert cfg.predict_long_window == 2400.0
    assert cfg.extreme_quantile == 0.9
    assert [s.name for s in cfg.scenarios] == ["control"]
    assert cfg.benchmark_grid == (20, 20)
    model = cfg.build_model()
    assert isinstance(model, CyclicChaosModel)
    assert model.data_dim == 120


def test_master_seed_is_required():
    with pytest.raises(ConfigError, match="run.master_seed"):
        PipelineConfig({"truth": {"parameters": [8.0, 1.4]}})


def test_unknown_keys_are_rejected_with_dotted_path():
    data = minimal()
    data["eki"] = {"memvers": 10}
    with pytest.raises(ConfigError, match=r"memvers.*\[eki\]"):
        PipelineConfig(data)
    with pytest.raises(ConfigError, match=r"section\(s\).*nois"):
        PipelineConfig({**minimal(), "nois": {}})


def test_type_and_range_validation():
    bad = minimal()
    bad["eki"] = {"members": 1}
    with pytest.raises(ConfigError, match="eki.members"):
        PipelineConfig(bad)
    bad = minimal()
    bad["mcmc"] = {"target_acceptance": 1.5}
    with pytest.raises(ConfigError, match="mcmc.target_acceptance"):
        PipelineConfig(bad)
    bad = minimal()
    bad["run"] = {"master_seed": True}
    with pytest.raises(ConfigError, match="integer"):
        PipelineConfig(bad)


def test_linear_model_requires_matching_truth():
    data = {"run": {"master_seed": 1},
            "model": {"name": "linear", "matrix": [[1.0, 0.0], [0.0, 2.0]]},
            "truth": {"parameters": [0.5, -0.5]}}
    cfg = PipelineConfig(data)
    model = cfg.build_model()
    assert isinstance(model, LinearModel)
    data["truth"]["parameters"] = [0.5]
    with pytest.raises(ConfigError, match="truth.parameters"):
        PipelineConfig(data)


def test_unknown_model_name():
    data = minimal()
    data["model"] = {"name": "spectral"}
    with pytest.raises(ConfigError, match="spectral"):
        PipelineConfig(data)


def test_truth_outside_physical_domain_is_config_error():
    data = minimal()
    data["truth"] = {"parameters": [25.0, 1.4]}  # forcing domain is (0, 20)
    with pytest.raises(ConfigError, match="truth.parameters"):
        PipelineConfig(data)


def test_prior_overrides_apply_and_validate():
    data = minimal()
    data["parameters"] = [{"name": "forcing", "prior_mean": 0.3,
                           "prior_std": 2.0}]
    cfg = PipelineConfig(data)
    space = cfg.build_space()
    assert space.defs[0].prior_mean == 0.3
    assert space.defs[0].prior_std == 2.0
    assert space.defs[1].prior_mean == 0.2  # model default untouched

    data["parameters"] = [{"name": "viscosity"}]
    with pytest.raises(ConfigError, match="viscosity"):
        PipelineConfig(data)
    data["parameters"] = [{"name": "forcing"}, {"name": "forcing"}]
    with pytest.raises(ConfigError, match="duplicate"):
        PipelineConfig(data)


def test_scenarios_parse_and_reject_bad_names():
    data = minimal()
    data["predict"] = {"scenarios": [
        {"name": "control"}, {"name": "warm", "forcing_scale": 1.5}]}
    cfg = PipelineConfig(data)
    assert [s.name for s in cfg.scenarios] == ["control", "warm"]
    assert cfg.scenarios[1].get("forcing_scale") == 1.5

    data["predict"] = {"scenarios": [{"name": "a/b"}]}
    with pytest.raises(ConfigError, match="letters"):
        PipelineConfig(data)
    data["predict"] = {"scenarios": [{"name": "x"}, {"name": "x"}]}
    with pytest.raises(ConfigError, match="duplicate"):
        PipelineConfig(data)


def test_benchmark_grid_and_bounds_validation():
    data = minimal()
    data["benchmark"] = {"grid": [10]}
    with pytest.raises(ConfigError, match="benchmark.grid"):
        PipelineConfig(data)
    data["benchmark"] = {"bounds": [[0.0, 1.0]]}
    with pytest.raises(ConfigError, match="benchmark.bounds"):
        PipelineConfig(data)
    data["benchmark"] = {"bounds": [[1.0, 0.0], [0.0, 1.0]]}
    with pytest.raises(ConfigError, match="low < high"):
        PipelineConfig(data)

    cfg = PipelineConfig(minimal())
    space = cfg.build_space()
    bounds = cfg.benchmark_bounds(space)
    # Default box: prior mean +- 1.5 prior std on each computational axis.
    np.testing.assert_allclose(bounds[0], [0.0 - 1.5, 0.0 + 1.5])
    np.testing.assert_allclose(bounds[1], [0.2 - 0.75, 0.2 + 0.75])

    data = minimal()
    data["benchmark"] = {"bounds": [[-1.0, 1.0], [0.0, 0.5]]}
    cfg = PipelineConfig(data)
    np.testing.assert_array_equal(cfg.benchmark_bounds(space),
                                  [[-1.0, 1.0], [0.0, 0.5]])


def test_hash_tracks_semantics_not_formatting(tmp_path):
    a = tmp_path / "a.toml"
    b = tmp_path / "b.toml"
    a.write_text('[run]\nmaster_seed = 7\n[truth]\nparameters = [8.0, 1.4]\n')
    b.write_text('# a comment\n[truth]\nparameters = [ 8.0 , 1.4 ]\n'
                 '[run]\nmaster_seed = 7\n')
    assert load_config(a).hash == load_config(b).hash
    c = tmp_path / "c.toml"
    c.write_text('[run]\nmaster_seed = 8\n[truth]\nparameters = [8.0, 1.4]\n')
    assert load_config(c).hash != load_config(a).hash


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[run\nmaster_seed = 1\n")
    with pytest.raises(ConfigError, match="bad.toml"):
        load_config(bad)
