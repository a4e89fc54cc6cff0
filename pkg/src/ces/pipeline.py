"""Pipeline stages over a run directory, with a manifest as the ledger.

Stage isolation: every stage reads its inputs from persisted artifacts only,
never from in-process state, so any stage can rerun alone. All randomness
descends from the configured master seed through `derive_seed`, artifacts are
written as %.17e text or deterministic binary, and JSON is key-sorted, so
rerunning a completed stage rewrites byte-identical files.

Run directory layout (K realizations of the synthetic data)::

    manifest.json             stage ledger: config hash, artifact checksums
    truth/                    long control run, noise model, data realizations
    calibrate/r{k}/           ensemble inversion pairs and diagnostics
    emulate/r{k}/             trained emulator and its hyperparameters
    sample/r{k}/              posterior chain and summary
    predict/r{k}/             push-forward bands and exceedance table
    benchmark/r{k}/           grid-trained emulator baseline and its chain
    report/                   cross-realization aggregation (no recomputation)
    locks/                    in-progress markers, one per stage invocation

The manifest records, per completed stage, the checksums of the inputs it
read and the outputs it wrote. A stage whose recorded upstream artifacts are
missing or no longer match their checksums refuses to run (DependencyError)
and names the command to rerun. Calibration is the one resumable stage: its
pairs file is appended after every completed iteration, and a rerun replays
the persisted updates before continuing, reproducing an uninterrupted run
bit for bit. Sampling is atomic by design: a crashed chain is rerun from its
seed instead of being checkpointed mid-stream.
"""

import os
import time
from contextlib import contextmanager

import numpy as np

from . import tables
from .eki import eki_run, eki_update, ensemble_spread, residual
from .emulator import GpEmulator, benchmark_grid_train, gp_train
from .exceptions import ConfigError, DependencyError
from .mcmc import ChainConfig, PosteriorSummary, rwm_sample, split_rhat
from .noise import NoiseModel, bounds_from_layout
from .predict import PredictionSpec, control_thresholds, exceedance_frequency, \
    predict_ensemble

(STAGE_TRUTH, STAGE_CALIBRATE, STAGE_EMULATE, STAGE_SAMPLE, STAGE_PREDICT,
 STAGE_BENCHMARK) = range(6)

# Files NoiseModel.load actually reads, relative to the run directory.
NOISE_INPUTS = ("truth/noise/sigma.txt", "truth/noise/modes.txt",
                "truth/noise/vectors.txt", "truth/noise/noise_info.json")


def derive_seed(master_seed, stage, *path):
    """Deterministic 32-bit seed for one consumer of randomness.

    Everything random in a run descends from (master_seed, stage code, path)
    through a SeedSequence, so stages and realizations rerun independently
    and in any order without sharing generator state.
    """
    ss = np.random.SeedSequence(master_seed, spawn_key=(stage,) + tuple(path))
    return int(ss.generate_state(1, np.uint32)[0])


# ---------------------------------------------------------------------------
# Manifest and locking


def load_manifest(run_dir):
    path = os.path.join(run_dir, "manifest.json")
    if not os.path.exists(path):
        return {"config_hash": None, "stages": {}}
    return tables.read_json(path)


def _check_config(manifest, config, run_dir):
    recorded = manifest.get("config_hash")
    if recorded is not None and recorded != config.hash:
        raise DependencyError(
            f"configuration does not match the one that produced {run_dir} "
            f"(hash {config.hash[:12]} vs recorded {recorded[:12]}); use a "
            "fresh run directory or restore the original configuration")


@contextmanager
def _lock(run_dir, name, what):
    lock_dir = os.path.join(run_dir, "locks")
    os.makedirs(lock_dir, exist_ok=True)
    path = os.path.join(lock_dir, name + ".lock")
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DependencyError(
            f"{what} appears to be running already (lock file {path}); "
            "remove the file if that process is gone") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        os.unlink(path)


def _record_stage(run_dir, config, key, inputs, output_paths, info):
    """Checksum outputs and replace this stage's manifest record atomically."""
    outputs = {rel: tables.sha256_file(os.path.join(run_dir, rel))
               for rel in sorted(output_paths)}
    lock_path = os.path.join(run_dir, "locks", "manifest.lock")
    os.makedirs(os.path.dirname(lock_path), exist_ok=True)
    for _ in range(400):
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            time.sleep(0.025)
    else:
        raise DependencyError(
            f"manifest lock {lock_path} is stuck; remove it if no other "
            "process is writing to this run")
    try:
        os.close(fd)
        manifest = load_manifest(run_dir)
        _check_config(manifest, config, run_dir)
        manifest["config_hash"] = config.hash
        manifest["stages"][key] = {"inputs": dict(sorted(inputs.items())),
                                   "outputs": outputs, "info": info}
        tmp = os.path.join(run_dir, "manifest.json.tmp")
        tables.write_json(tmp, manifest)
        os.replace(tmp, os.path.join(run_dir, "manifest.json"))
    finally:
        os.unlink(lock_path)


def _producing_command(rel):
    parts = rel.split("/")
    command = "generate-truth" if parts[0] == "truth" else parts[0]
    if len(parts) > 1 and parts[1].startswith("r") and parts[1][1:].isdigit():
        command += f" --realization {parts[1][1:]}"
    return command


def require_inputs(manifest, run_dir, rel_paths):
    """Verify upstream artifacts exist and match their recorded checksums.

    Returns {path: checksum} for recording in the consuming stage's manifest
    entry. Any missing or stale artifact raises DependencyError naming the
    command that produces it.
    """
    stages = manifest.get("stages", {})
    found = {}
    for key, record in stages.items():
        for rel, digest in record.get("outputs", {}).items():
            found[rel] = digest
    inputs = {}
    for rel in rel_paths:
        hint = _producing_command(rel)
        if rel not in found:
            raise DependencyError(
                f"missing upstream artifact {rel}; run `ces {hint}` first")
        path = os.path.join(run_dir, rel)
        if not os.path.exists(path):
            raise DependencyError(
                f"{rel} is recorded in the manifest but missing on disk; "
                f"rerun `ces {hint}`")
        digest = tables.sha256_file(path)
        if digest != found[rel]:
            raise DependencyError(
                f"{rel} changed since it was recorded (stale checksum); "
                f"rerun `ces {hint}` and the stages that depend on it")
        inputs[rel] = digest
    return inputs


def _start_stage(config, run_dir):
    os.makedirs(run_dir, exist_ok=True)
    manifest = load_manifest(run_dir)
    _check_config(manifest, config, run_dir)
    return manifest


def _check_realization(config, k):
    if not 0 <= k < config.realizations:
        raise ConfigError(
            f"realization {k} outside 0..{config.realizations - 1}")
    return int(k)


# ---------------------------------------------------------------------------
# Artifact helpers


def _pair_columns(space, model):
    return (["iteration", "member", "retry", "seed"]
            + [f"theta_{name}" for name in space.names]
            + model.layout.labels())


def _append_pairs(path, columns, iteration, thetas, outputs, seeds, retries):
    fresh = not os.path.exists(path)
    with open(path, "a") as fh:
        if fresh:
            fh.write(" ".join(columns) + "\n")
        for m in range(len(thetas)):
            cells = [iteration, m, retries[m], seeds[m], *thetas[m], *outputs[m]]
            fh.write(" ".join("%.17e" % float(v) for v in cells) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def _load_pairs(path, columns, n_members, n_params):
    """Read the pairs file, keeping only its complete-iteration prefix.

    A crash can leave a torn final line or a partially written iteration;
    both are dropped (and the file rewritten without them). Returns
    (fields dict or None, last complete iteration or -1).
    """
    if not os.path.exists(path):
        return None, -1
    with open(path) as fh:
        header = fh.readline().split()
        if header != columns:
            raise DependencyError(
                f"{path} has unexpected columns; delete it to restart "
                "calibration from scratch")
        raw, torn = [], False
        for line in fh:
            parts = line.split()
            if len(parts) != len(columns):
                torn = True
                break
            try:
                raw.append([float(c) for c in parts])
            except ValueError:
                torn = True
                break
    arr = np.array(raw, dtype=float) if raw else np.empty((0, len(columns)))
    keep, last = 0, -1
    while keep + n_members <= len(arr):
        block = arr[keep:keep + n_members]
        if not (np.all(block[:, 0] == last + 1)
                and np.array_equal(block[:, 1], np.arange(n_members))):
            break
        keep += n_members
        last += 1
    if keep == 0:
        os.unlink(path)
        return None, -1
    # A torn trailing line must be cut even when every parsed row survives;
    # appending the next iteration after it would corrupt the file.
    if torn or keep < len(arr):
        with open(path, "w") as fh:
            fh.write(" ".join(columns) + "\n")
            for row in arr[:keep]:
                fh.write(" ".join("%.17e" % v for v in row) + "\n")
        arr = arr[:keep]
    return {
        "iterations": arr[:, 0].astype(int),
        "members": arr[:, 1].astype(int),
        "retries": arr[:, 2].astype(int),
        "seeds": arr[:, 3],
        "thetas": arr[:, 4:4 + n_params],
        "outputs": arr[:, 4 + n_params:],
    }, last


def _read_chain_states(run_dir, k, space, subdir="sample"):
    cols = tables.read_table(os.path.join(run_dir, subdir, f"r{k}", "chain.txt"))
    return np.column_stack([cols[f"theta_{name}"] for name in space.names])


def _summary_json(summary, membership, space, theta_truth_comp,
                  theta_truth_phys):
    return {
        "n_samples": int(summary.n_samples),
        "param_names": list(space.names),
        "mean_comp": summary.mean_comp.tolist(),
        "std_comp": summary.std_comp.tolist(),
        "mean_phys": summary.mean_phys.tolist(),
        "std_phys": summary.std_phys.tolist(),
        "levels": [float(q) for q in summary.levels],
        "degenerate": bool(summary.degenerate),
        "theta_truth_comp": np.asarray(theta_truth_comp).tolist(),
        "theta_truth_phys": np.asarray(theta_truth_phys).tolist(),
        "theta_truth_in_hpd": {f"{q:g}": bool(v) for q, v in membership.items()},
    }


# ---------------------------------------------------------------------------
# Stages


def generate_truth(config, run_dir):
    """Long control run, noise model, and synthetic data realizations."""
    _start_stage(config, run_dir)  # config guard; no upstream inputs
    model = config.build_model()
    space = config.build_space(model)
    theta_phys = config.truth_parameters
    theta_comp = space.to_computational(theta_phys)
    out_dir = os.path.join(run_dir, "truth")

    with _lock(run_dir, "truth", "generate-truth"):
        os.makedirs(out_dir, exist_ok=True)
        window_seed = derive_seed(config.master_seed, STAGE_TRUTH, 0)
        window_means = model.evaluate_long(theta_phys, window_seed,
                                           config.n_windows)
        noise = NoiseModel.from_window_means(
            window_means,
            bounds_from_layout(model.layout, model.block_bounds),
            c_infl=config.c_infl)

        run_seeds, noise_seeds, rows = [], [], []
        for k in range(config.realizations):
            run_seeds.append(derive_seed(config.master_seed, STAGE_TRUTH, 1, k))
            noise_seeds.append(derive_seed(config.master_seed, STAGE_TRUTH, 2, k))
            clean = model.evaluate(theta_phys, run_seeds[-1])
            eps = np.random.default_rng(noise_seeds[-1]).standard_normal(
                model.data_dim)
            rows.append(clean + noise.delta_std * eps)
        rows = np.array(rows)

        labels = model.layout.labels()
        tables.write_table(os.path.join(out_dir, "window_means.txt"),
                           labels, list(window_means.T))
        tables.write_table(os.path.join(out_dir, "realizations.txt"),
                           labels, list(rows.T))
        noise.save(os.path.join(out_dir, "noise"))
        info = {
            "forward_evaluations": config.n_windows + config.realizations,
            "n_windows": config.n_windows,
            "realizations": config.realizations,
        }
        tables.write_json(os.path.join(out_dir, "truth_meta.json"), {
            "theta_phys": theta_phys.tolist(),
            "theta_comp": theta_comp.tolist(),
            "param_names": list(space.names),
            "labels": labels,
            "truth_mean": window_means.mean(axis=0).tolist(),
            "window_seed": window_seed,
            "run_seeds": run_seeds,
            "noise_seeds": noise_seeds,
            **info,
        })
        outputs = ["truth/window_means.txt", "truth/realizations.txt",
                   "truth/truth_meta.json",
                   "truth/noise/sigma.txt", "truth/noise/delta.txt",
                   "truth/noise/gamma.txt", "truth/noise/modes.txt",
                   "truth/noise/vectors.txt", "truth/noise/noise_info.json"]
        _record_stage(run_dir, config, "truth", {}, outputs, info)
    return (f"truth: {config.n_windows} windows, "
            f"{config.realizations} data realizations")


def _load_truth(manifest, run_dir):
    inputs = require_inputs(manifest, run_dir,
                            ("truth/realizations.txt",) + NOISE_INPUTS)
    noise = NoiseModel.load(os.path.join(run_dir, "truth", "noise"))
    realizations = tables.read_matrix(
        os.path.join(run_dir, "truth", "realizations.txt"))
    return inputs, noise, realizations


def calibrate(config, run_dir, k):
    """Ensemble inversion against realization k; resumable per iteration."""
    k = _check_realization(config, k)
    manifest = _start_stage(config, run_dir)
    inputs, noise, realizations = _load_truth(manifest, run_dir)
    model = config.build_model()
    space = config.build_space(model)
    y = realizations[k]
    out_dir = os.path.join(run_dir, "calibrate", f"r{k}")
    pairs_path = os.path.join(out_dir, "pairs.txt")
    columns = _pair_columns(space, model)
    ms = config.master_seed
    total = config.eki_iterations + config.eki_extra_iterations

    with _lock(run_dir, f"calibrate_r{k}", f"calibrate --realization {k}"):
        os.makedirs(out_dir, exist_ok=True)
        fields, last = _load_pairs(pairs_path, columns, config.eki_members,
                                   space.dim)
        resumed = last >= 0
        if last < total:
            initial, start = None, 0
            if last >= 0:
                members = None
                for it in range(last + 1):
                    sel = fields["iterations"] == it
                    members = eki_update(fields["thetas"][sel],
                                         fields["outputs"][sel], y, noise.gamma)
                initial, start = members, last + 1
            eki_run(
                model, space, y, noise,
                n_members=config.eki_members,
                n_iterations=config.eki_iterations,
                init_rng=np.random.default_rng(
                    derive_seed(ms, STAGE_CALIBRATE, k)),
                member_seed=lambda it, m, r: derive_seed(
                    ms, STAGE_CALIBRATE, k, it, m, r),
                extra_iterations=config.eki_extra_iterations,
                max_retries=config.eki_max_retries,
                initial_members=initial, start_iteration=start,
                on_iteration=lambda it, th, g, s, r: _append_pairs(
                    pairs_path, columns, it, th, g, s, r))
            fields, last = _load_pairs(pairs_path, columns,
                                       config.eki_members, space.dim)

        # Diagnostics and the final ensemble are regenerated from the pairs
        # file, so a resumed run writes the same bytes as an unbroken one.
        diag_rows = []
        for it in range(total + 1):
            sel = fields["iterations"] == it
            thetas_it, outputs_it = fields["thetas"][sel], fields["outputs"][sel]
            diag_rows.append((
                it, residual(outputs_it, y, noise.gamma),
                int(fields["retries"][sel].sum()),
                ensemble_spread(thetas_it),
                space.to_physical(thetas_it).std(axis=0, ddof=1)))
        diag_cols = (["iteration", "residual", "n_resampled"]
                     + [f"spread_{n}" for n in space.names]
                     + [f"spread_phys_{n}" for n in space.names])
        tables.write_table(
            os.path.join(out_dir, "diagnostics.txt"), diag_cols,
            [np.array([r[0] for r in diag_rows]),
             np.array([r[1] for r in diag_rows]),
             np.array([r[2] for r in diag_rows])]
            + [np.array([r[3][j] for r in diag_rows]) for j in range(space.dim)]
            + [np.array([r[4][j] for r in diag_rows]) for j in range(space.dim)])

        final = fields["thetas"][fields["iterations"] == total]
        tables.write_table(os.path.join(out_dir, "ensemble_final.txt"),
                           [f"theta_{n}" for n in space.names], list(final.T))
        info = {
            "forward_evaluations": int((1 + fields["retries"]).sum()),
            "n_pairs": int(len(fields["thetas"])),
            "members": config.eki_members,
            "iterations": config.eki_iterations,
            "extra_iterations": config.eki_extra_iterations,
            "final_residual": diag_rows[-1][1],
            "resumed": bool(resumed),
        }
        tables.write_json(os.path.join(out_dir, "calibrate_meta.json"), {
            **{key: info[key] for key in info if key != "resumed"},
            "theta_mean_comp": final.mean(axis=0).tolist(),
            "theta_mean_phys": space.to_physical(final).mean(axis=0).tolist(),
            "final_spread": diag_rows[-1][3].tolist(),
            "final_spread_phys": diag_rows[-1][4].tolist(),
        })
        rel = f"calibrate/r{k}"
        _record_stage(run_dir, config, rel, inputs,
                      [f"{rel}/pairs.txt", f"{rel}/diagnostics.txt",
                       f"{rel}/ensemble_final.txt",
                       f"{rel}/calibrate_meta.json"], info)
    return (f"calibrate r{k}: {info['n_pairs']} pairs, final residual "
            f"{info['final_residual']:.4g}")


def emulate(config, run_dir, k):
    """Train the emulator on realization k's calibration pairs."""
    k = _check_realization(config, k)
    manifest = _start_stage(config, run_dir)
    inputs = require_inputs(
        manifest, run_dir,
        (f"calibrate/r{k}/pairs.txt",) + NOISE_INPUTS)
    noise = NoiseModel.load(os.path.join(run_dir, "truth", "noise"))
    model = config.build_model()
    space = config.build_space(model)
    out_dir = os.path.join(run_dir, "emulate", f"r{k}")

    with _lock(run_dir, f"emulate_r{k}", f"emulate --realization {k}"):
        os.makedirs(out_dir, exist_ok=True)
        fields, _ = _load_pairs(
            os.path.join(run_dir, "calibrate", f"r{k}", "pairs.txt"),
            _pair_columns(space, model), config.eki_members, space.dim)
        train = fields["iterations"] <= config.eki_iterations
        emulator = gp_train(
            fields["thetas"][train], fields["outputs"][train], noise,
            rng=np.random.default_rng(derive_seed(config.master_seed,
                                                  STAGE_EMULATE, k)),
            restarts=config.gp_restarts, maxiter=config.gp_maxiter)
        emulator.save(os.path.join(out_dir, "emulator.npz"))
        info = {"forward_evaluations": 0, "n_train": int(train.sum()),
                "restarts": config.gp_restarts, "maxiter": config.gp_maxiter}
        tables.write_json(os.path.join(out_dir, "emulate_meta.json"), {
            **info,
            "hypers": emulator.hypers_.tolist(),
            "jitter": emulator.jitter_.tolist(),
        })
        rel = f"emulate/r{k}"
        _record_stage(run_dir, config, rel, inputs,
                      [f"{rel}/emulator.npz", f"{rel}/emulate_meta.json"], info)
    return f"emulate r{k}: trained on {info['n_train']} pairs"


def sample(config, run_dir, k):
    """Random-walk Metropolis on the emulated posterior for realization k."""
    k = _check_realization(config, k)
    manifest = _start_stage(config, run_dir)
    inputs = require_inputs(
        manifest, run_dir,
        ("truth/realizations.txt", "truth/truth_meta.json") + NOISE_INPUTS
        + (f"calibrate/r{k}/ensemble_final.txt", f"emulate/r{k}/emulator.npz"))
    noise = NoiseModel.load(os.path.join(run_dir, "truth", "noise"))
    model = config.build_model()
    space = config.build_space(model)
    y = tables.read_matrix(
        os.path.join(run_dir, "truth", "realizations.txt"))[k]
    truth_meta = tables.read_json(
        os.path.join(run_dir, "truth", "truth_meta.json"))
    emulator = GpEmulator.load(
        os.path.join(run_dir, "emulate", f"r{k}", "emulator.npz"))
    x0 = tables.read_matrix(os.path.join(
        run_dir, "calibrate", f"r{k}", "ensemble_final.txt")).mean(axis=0)
    out_dir = os.path.join(run_dir, "sample", f"r{k}")
    ms = config.master_seed

    with _lock(run_dir, f"sample_r{k}", f"sample --realization {k}"):
        os.makedirs(out_dir, exist_ok=True)
        chain = rwm_sample(
            ChainConfig(config.mcmc_n_burn, config.mcmc_n_samples,
                        step_scale=config.mcmc_step_scale,
                        target_acceptance=config.mcmc_target_acceptance),
            noise.decorrelate(y), emulator, noise, space,
            rng=np.random.default_rng(derive_seed(ms, STAGE_SAMPLE, k, 0)),
            x0=x0)
        stored = chain.states[::config.mcmc_store_stride]
        tables.write_table(
            os.path.join(out_dir, "chain.txt"),
            [f"theta_{n}" for n in space.names] + ["phi"],
            list(stored.T) + [chain.phi[::config.mcmc_store_stride]])

        summary = PosteriorSummary(
            stored, space,
            rng=np.random.default_rng(derive_seed(ms, STAGE_SAMPLE, k, 1)))
        membership = summary.hpd_membership(
            np.array(truth_meta["theta_comp"]))
        tables.write_json(
            os.path.join(out_dir, "posterior_summary.json"),
            _summary_json(summary, membership, space,
                          truth_meta["theta_comp"], truth_meta["theta_phys"]))
        info = {
            "forward_evaluations": 0,
            "emulator_evaluations": config.mcmc_n_burn + config.mcmc_n_samples,
            "acceptance_rate": float(chain.acceptance_rate),
        }
        tables.write_json(os.path.join(out_dir, "sample_meta.json"), {
            **info,
            "n_burn": config.mcmc_n_burn,
            "n_samples": config.mcmc_n_samples,
            "store_stride": config.mcmc_store_stride,
            "n_stored": int(len(stored)),
            "step_scale_final": float(chain.step_scale),
            "accept_count": int(chain.accept_count),
            "rhat": [float(r) for r in split_rhat(stored)],
            "start_point": x0.tolist(),
        })
        rel = f"sample/r{k}"
        _record_stage(run_dir, config, rel, inputs,
                      [f"{rel}/chain.txt", f"{rel}/sample_meta.json",
                       f"{rel}/posterior_summary.json"], info)
    return (f"sample r{k}: acceptance {chain.acceptance_rate:.3f}, "
            f"{len(stored)} states stored")


def predict(config, run_dir, k):
    """Push posterior draws (and the truth reference) through the model."""
    k = _check_realization(config, k)
    manifest = _start_stage(config, run_dir)
    inputs = require_inputs(
        manifest, run_dir,
        (f"sample/r{k}/chain.txt", "truth/truth_meta.json"))
    model = config.build_model()
    space = config.build_space(model)
    states = _read_chain_states(run_dir, k, space)
    truth_meta = tables.read_json(
        os.path.join(run_dir, "truth", "truth_meta.json"))
    out_dir = os.path.join(run_dir, "predict", f"r{k}")
    ms = config.master_seed
    spec = PredictionSpec(config.predict_n_samples, config.predict_long_window,
                          scenarios=config.scenarios,
                          extreme_quantile=config.extreme_quantile)
    seeds = [derive_seed(ms, STAGE_PREDICT, k, 2, j)
             for j in range(spec.n_posterior_samples)]

    with _lock(run_dir, f"predict_r{k}", f"predict --realization {k}"):
        os.makedirs(out_dir, exist_ok=True)
        bands = predict_ensemble(
            states, model, space, np.array(truth_meta["theta_phys"]), spec,
            seeds, rng=np.random.default_rng(derive_seed(ms, STAGE_PREDICT,
                                                         k, 0)))
        outputs = []
        labels = np.array(model.layout.labels(), dtype=object)
        for name in bands.scenario_names:
            b = bands[name]
            rel = f"predict/r{k}/bands_{name}.txt"
            tables.write_table(
                os.path.join(run_dir, rel),
                ["index", "lower", "median", "upper",
                 "ref_lower", "ref_median", "ref_upper"],
                [labels, b["lower"], b["median"], b["upper"],
                 b["ref_lower"], b["ref_median"], b["ref_upper"]])
            outputs.append(rel)

        # Extreme-event table: thresholds are the per-site quantile of the
        # first (reference) scenario's raw step record at the posterior mean,
        # then each scenario's exceedance frequency against those thresholds.
        if hasattr(model, "step_values"):
            theta_hat = space.to_physical(states.mean(axis=0))
            step_seed = derive_seed(ms, STAGE_PREDICT, k, 1)
            steps = {s.name: model.step_values(theta_hat, step_seed,
                                               window=spec.long_window,
                                               scenario=s)
                     for s in spec.scenarios}
            ref_name = spec.scenarios[0].name
            thresholds = control_thresholds(steps[ref_name],
                                            spec.extreme_quantile)
            cols = ["site", "threshold"]
            arrays = [np.arange(len(thresholds)), thresholds]
            for s in spec.scenarios:
                cols.append(f"freq_{s.name}")
                arrays.append(exceedance_frequency(steps[s.name], thresholds))
            rel = f"predict/r{k}/exceedance.txt"
            tables.write_table(os.path.join(run_dir, rel), cols, arrays)
            outputs.append(rel)

        info = {
            "forward_evaluations": 2 * spec.n_posterior_samples
            * len(spec.scenarios),
            "n_used": bands.n_used,
            "stride": bands.stride,
        }
        tables.write_json(os.path.join(out_dir, "predict_meta.json"), {
            **info,
            "n_requested": bands.n_requested,
            "scenarios": bands.scenario_names,
            "extreme_quantile": spec.extreme_quantile,
            "long_window": spec.long_window,
            "chain_indices": [int(i) for i in bands.chain_indices],
            "seeds": [int(s) for s in bands.seeds],
            "dropped": [[int(i), ctx, msg] for i, ctx, msg in bands.dropped],
        })
        outputs.append(f"predict/r{k}/predict_meta.json")
        _record_stage(run_dir, config, f"predict/r{k}", inputs, outputs, info)
    return (f"predict r{k}: {bands.n_used}/{bands.n_requested} draws over "
            f"{len(spec.scenarios)} scenario(s)")


def benchmark(config, run_dir, k):
    """Grid-trained emulator baseline and its posterior for realization k."""
    k = _check_realization(config, k)
    manifest = _start_stage(config, run_dir)
    inputs = require_inputs(
        manifest, run_dir,
        ("truth/realizations.txt", "truth/truth_meta.json") + NOISE_INPUTS)
    noise = NoiseModel.load(os.path.join(run_dir, "truth", "noise"))
    model = config.build_model()
    space = config.build_space(model)
    y = tables.read_matrix(
        os.path.join(run_dir, "truth", "realizations.txt"))[k]
    truth_meta = tables.read_json(
        os.path.join(run_dir, "truth", "truth_meta.json"))
    bounds = config.benchmark_bounds(space)
    out_dir = os.path.join(run_dir, "benchmark", f"r{k}")
    ms = config.master_seed

    with _lock(run_dir, f"benchmark_r{k}", f"benchmark --realization {k}"):
        os.makedirs(out_dir, exist_ok=True)
        emulator, thetas, outputs_grid = benchmark_grid_train(
            model, space, noise, bounds, config.benchmark_grid,
            node_seed=lambda i: derive_seed(ms, STAGE_BENCHMARK, k, 0, i),
            rng=np.random.default_rng(derive_seed(ms, STAGE_BENCHMARK, k, 1)),
            restarts=config.gp_restarts, maxiter=config.gp_maxiter)
        emulator.save(os.path.join(out_dir, "emulator.npz"))
        tables.write_table(
            os.path.join(out_dir, "training_pairs.txt"),
            [f"theta_{n}" for n in space.names] + model.layout.labels(),
            list(thetas.T) + list(outputs_grid.T))

        chain = rwm_sample(
            ChainConfig(config.mcmc_n_burn, config.mcmc_n_samples,
                        step_scale=config.mcmc_step_scale,
                        target_acceptance=config.mcmc_target_acceptance),
            noise.decorrelate(y), emulator, noise, space,
            rng=np.random.default_rng(derive_seed(ms, STAGE_BENCHMARK, k, 2)))
        stored = chain.states[::config.mcmc_store_stride]
        tables.write_table(
            os.path.join(out_dir, "chain.txt"),
            [f"theta_{n}" for n in space.names] + ["phi"],
            list(stored.T) + [chain.phi[::config.mcmc_store_stride]])
        summary = PosteriorSummary(
            stored, space,
            rng=np.random.default_rng(derive_seed(ms, STAGE_BENCHMARK, k, 3)))
        membership = summary.hpd_membership(np.array(truth_meta["theta_comp"]))
        tables.write_json(
            os.path.join(out_dir, "posterior_summary.json"),
            _summary_json(summary, membership, space,
                          truth_meta["theta_comp"], truth_meta["theta_phys"]))
        info = {
            "forward_evaluations": int(len(thetas)),
            "grid": list(config.benchmark_grid),
            "acceptance_rate": float(chain.acceptance_rate),
        }
        tables.write_json(os.path.join(out_dir, "benchmark_meta.json"), {
            **info,
            "bounds": bounds.tolist(),
            "rhat": [float(r) for r in split_rhat(stored)],
            "n_stored": int(len(stored)),
        })
        rel = f"benchmark/r{k}"
        _record_stage(run_dir, config, rel, inputs,
                      [f"{rel}/emulator.npz", f"{rel}/training_pairs.txt",
                       f"{rel}/chain.txt", f"{rel}/posterior_summary.json",
                       f"{rel}/benchmark_meta.json"], info)
    return (f"benchmark r{k}: {len(thetas)} grid nodes, acceptance "
            f"{chain.acceptance_rate:.3f}")


def report(config, run_dir):
    """Aggregate persisted artifacts across realizations; no recomputation."""
    manifest = _start_stage(config, run_dir)
    stages = manifest["stages"]
    model = config.build_model()
    space = config.build_space(model)

    if not stages:
        return ("report: no completed stages in this run directory; run "
                "`ces generate-truth` and the downstream stages first")
    have = lambda key: key in stages

    with _lock(run_dir, "report", "report"):
        out_dir = os.path.join(run_dir, "report")
        os.makedirs(out_dir, exist_ok=True)
        inputs = {}
        per_real = {}
        table_rows = []
        residual_rows = []
        truth_evals = (stages["truth"]["info"]["forward_evaluations"]
                       if have("truth") else None)

        for k in range(config.realizations):
            entry = {}
            if have(f"calibrate/r{k}"):
                rels = [f"calibrate/r{k}/diagnostics.txt",
                        f"calibrate/r{k}/calibrate_meta.json"]
                inputs.update(require_inputs(manifest, run_dir, rels))
                meta = tables.read_json(os.path.join(
                    run_dir, "calibrate", f"r{k}", "calibrate_meta.json"))
                diag = tables.read_table(os.path.join(
                    run_dir, "calibrate", f"r{k}", "diagnostics.txt"))
                entry["calibrate"] = {
                    "forward_evaluations": meta["forward_evaluations"],
                    "final_residual": meta["final_residual"],
                    "first_residual": float(diag["residual"][0]),
                    "final_spread": meta["final_spread"],
                    "final_spread_phys": meta["final_spread_phys"],
                    "theta_mean_phys": meta["theta_mean_phys"],
                }
                for it, r in zip(diag["iteration"], diag["residual"]):
                    residual_rows.append((k, int(it), float(r)))
            if have(f"sample/r{k}"):
                rels = [f"sample/r{k}/sample_meta.json",
                        f"sample/r{k}/posterior_summary.json"]
                inputs.update(require_inputs(manifest, run_dir, rels))
                meta = tables.read_json(os.path.join(
                    run_dir, "sample", f"r{k}", "sample_meta.json"))
                summ = tables.read_json(os.path.join(
                    run_dir, "sample", f"r{k}", "posterior_summary.json"))
                entry["sample"] = {
                    "acceptance_rate": meta["acceptance_rate"],
                    "rhat": meta["rhat"],
                    "mean_phys": summ["mean_phys"],
                    "std_phys": summ["std_phys"],
                    "std_comp": summ["std_comp"],
                    "theta_truth_in_hpd": summ["theta_truth_in_hpd"],
                }
                if "calibrate" in entry and truth_evals is not None:
                    cost = (entry["calibrate"]["forward_evaluations"]
                            + truth_evals)
                    entry["evaluations_avoided_ratio"] = (
                        (meta["n_burn"] + meta["n_samples"]) / cost)
            if have(f"benchmark/r{k}"):
                rels = [f"benchmark/r{k}/posterior_summary.json",
                        f"benchmark/r{k}/benchmark_meta.json"]
                inputs.update(require_inputs(manifest, run_dir, rels))
                bsum = tables.read_json(os.path.join(
                    run_dir, "benchmark", f"r{k}", "posterior_summary.json"))
                bmeta = tables.read_json(os.path.join(
                    run_dir, "benchmark", f"r{k}", "benchmark_meta.json"))
                entry["benchmark"] = {
                    "std_comp": bsum["std_comp"],
                    "std_phys": bsum["std_phys"],
                    "mean_phys": bsum["mean_phys"],
                    "forward_evaluations": bmeta["forward_evaluations"],
                    "theta_truth_in_hpd": bsum["theta_truth_in_hpd"],
                }
            if have(f"predict/r{k}"):
                rels = [f"predict/r{k}/predict_meta.json"]
                inputs.update(require_inputs(manifest, run_dir, rels))
                pmeta = tables.read_json(os.path.join(
                    run_dir, "predict", f"r{k}", "predict_meta.json"))
                entry["predict"] = {"n_used": pmeta["n_used"],
                                    "stride": pmeta["stride"],
                                    "dropped": len(pmeta["dropped"])}
            if {"calibrate", "sample"} <= entry.keys():
                for j, name in enumerate(space.names):
                    bench_std = (entry["benchmark"]["std_comp"][j]
                                 if "benchmark" in entry else np.nan)
                    table_rows.append((
                        k, name,
                        entry["calibrate"]["final_spread"][j],
                        entry["sample"]["std_comp"][j],
                        entry["calibrate"]["final_spread_phys"][j],
                        entry["sample"]["std_phys"][j],
                        bench_std))
            if entry:
                per_real[str(k)] = entry

        if table_rows:
            tables.write_table(
                os.path.join(out_dir, "calibration_table.txt"),
                ["realization", "parameter", "eki_spread", "mcmc_std",
                 "eki_spread_phys", "mcmc_std_phys", "benchmark_std"],
                [np.array([r[0] for r in table_rows]),
                 np.array([r[1] for r in table_rows], dtype=object)]
                + [np.array([r[i] for r in table_rows]) for i in range(2, 7)])
        if residual_rows:
            tables.write_table(
                os.path.join(out_dir, "residuals.txt"),
                ["realization", "iteration", "residual"],
                [np.array([r[i] for r in residual_rows]) for i in range(3)])

        hpd_counts = {}
        for entry in per_real.values():
            for level, hit in entry.get("sample", {}).get(
                    "theta_truth_in_hpd", {}).items():
                hits, total = hpd_counts.get(level, (0, 0))
                hpd_counts[level] = (hits + int(hit), total + 1)
        report_data = {
            "config_hash": config.hash,
            "realizations": per_real,
            "truth_forward_evaluations": truth_evals,
            "hpd_hits": {level: {"hits": h, "of": t}
                         for level, (h, t) in sorted(hpd_counts.items())},
        }
        tables.write_json(os.path.join(out_dir, "report.json"), report_data)
        outputs = ["report/report.json"]
        if table_rows:
            outputs.append("report/calibration_table.txt")
        if residual_rows:
            outputs.append("report/residuals.txt")
        _record_stage(run_dir, config, "report", inputs, outputs,
                      {"forward_evaluations": 0,
                       "realizations_reported": len(per_real)})
    return f"report: aggregated {len(per_real)} realization(s)"


# ---------------------------------------------------------------------------
# Command dispatch (used by the CLI)

_GLOBAL_COMMANDS = {"generate-truth": generate_truth, "report": report}
_PER_REALIZATION_COMMANDS = {"calibrate": calibrate, "emulate": emulate,
                             "sample": sample, "predict": predict,
                             "benchmark": benchmark}


def run_stage(command, config, run_dir, realization=None):
    """Run one pipeline command; returns its status line(s)."""
    if command in _GLOBAL_COMMANDS:
        if realization is not None:
            raise ConfigError(f"`ces {command}` takes no --realization")
        return _GLOBAL_COMMANDS[command](config, run_dir)
    if command not in _PER_REALIZATION_COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    fn = _PER_REALIZATION_COMMANDS[command]
    ks = (range(config.realizations) if realization is None
          else [_check_realization(config, realization)])
    return "\n".join(fn(config, run_dir, k) for k in ks)
