"""Experiment front end: config-driven runs of the solver, the analytic
two-layer branch, and the Langevin sampler, plus a comparison report.

One JSON config (``version: 1``, schema-validated, unknown keys
rejected) describes the model, the data draw, and the solver/sampler
knobs; each subcommand consumes the sections it needs and writes its
artifacts into an output directory:

* ``eoskit eos-solve -c cfg.json -o out``  -- summary JSON, kernel
  files, residual-trace CSV, optional per-channel-count sweep CSV.
* ``eoskit analytic -c cfg.json -o out``   -- closed-form two-layer
  table (CSV + JSON), one summary line per channel count on stdout.
* ``eoskit langevin -c cfg.json -o out``   -- equilibrium stats JSON,
  per-seed trajectory log, empirical kernel files.
* ``eoskit compare -a theory -b oracle --tol-file tol.json`` -- CSV
  report with empirical/predicted/GP columns and pass/fail verdicts.

Outputs carry no timestamps and all JSON is written with sorted keys,
so a rerun with the same config and seeds reproduces every artifact
byte for byte.  ``EOSKIT_THREADS`` caps the worker pool used for
independent sub-runs (the sweep's channel counts); results are
aggregated in sorted order so the row content does not depend on the
thread count.  Exit codes: 0 success, 2 config error, 3 numerical
failure, 4 comparison failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import math
import os
import sys

import jsonschema
import numpy as np

from . import data as datasets
from . import eos
from . import io
from . import kernels
from . import langevin
from . import two_layer
from .gp import ek_gram_size, ek_spectrum, posterior_mean
from .networks import NetworkSpec

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_COMPARE = 4

_FORMATS = ("json", "csv", "kernels")

_CHANNEL_ENTRY = {
    "anyOf": [
        {"type": "number", "exclusiveMinimum": 0},
        {"type": "null"},
        {"const": "inf"},
    ]
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["version", "model", "data"],
    "properties": {
        "version": {"const": 1},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["arch", "input_dim", "widths", "layer_vars"],
            "properties": {
                "arch": {"enum": ["fcn", "conv2", "conv3"]},
                "input_dim": {"type": "integer", "minimum": 1},
                "widths": {"type": "array", "minItems": 1,
                           "items": {"type": "integer", "minimum": 1}},
                "layer_vars": {"type": "array", "minItems": 2,
                               "items": {"type": "number",
                                         "exclusiveMinimum": 0}},
                "windows": {"type": "array",
                            "items": {"type": "integer", "minimum": 1}},
                "activation": {"enum": ["erf", "relu", "linear"]},
                "mean_field_readout": {"type": "boolean"},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "required": ["n", "dim", "seed", "noise_var"],
            "properties": {
                "n": {"type": "integer", "minimum": 0},
                "dim": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "noise_var": {"type": "number", "exclusiveMinimum": 0},
                "teacher": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind"],
                    "properties": {
                        "kind": {"enum": list(datasets.TEACHER_KINDS)},
                        "seed": {"type": "integer", "minimum": 0},
                        "window": {"type": "integer", "minimum": 1},
                        "normalized": {"type": "boolean"},
                        "hidden": {"type": "array", "minItems": 1,
                                   "items": {"type": "integer",
                                             "minimum": 1}},
                        "teacher_channels": {"type": "integer",
                                             "minimum": 1},
                    },
                },
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "damping": {"type": "number", "exclusiveMinimum": 0,
                            "maximum": 1},
                "max_iters": {"type": "integer", "minimum": 1},
                "residual_tol": {"type": "number", "exclusiveMinimum": 0},
                "schedule": {"anyOf": [{"type": "null"},
                                       {"type": "array", "minItems": 1,
                                        "items": {"type": "integer",
                                                  "minimum": 1}}]},
                "update_mode": {"enum": ["gauss-seidel", "jacobi"]},
                "include_output_covariance": {"type": "boolean"},
                "newton_krylov": {"type": "boolean"},
            },
        },
        "oracle": {
            "type": "object",
            "additionalProperties": False,
            "required": ["learning_rate", "epochs", "burn_in"],
            "properties": {
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "epochs": {"type": "integer", "minimum": 1},
                "burn_in": {"type": "integer", "minimum": 0},
                "sample_stride": {"type": "integer", "minimum": 1},
                "seeds": {"type": "array", "minItems": 1,
                          "items": {"type": "integer", "minimum": 0}},
                "scheduler": {"enum": ["fixed", "adaptive"]},
                "warmup_epochs": {"type": "integer", "minimum": 0},
                "warmup_factor": {"type": "number", "exclusiveMinimum": 0},
                "spike_window": {"type": "integer", "minimum": 2},
                "spike_factor": {"type": "number", "exclusiveMinimum": 0},
                "spike_cut": {"type": "number", "exclusiveMinimum": 0,
                              "maximum": 1},
                "quiet_epochs": {"type": "integer", "minimum": 1},
                "probe_points": {"type": "integer", "minimum": 1},
                "kernel_stride": {"anyOf": [{"type": "null"},
                                            {"type": "integer",
                                             "minimum": 1}]},
                "collect_kernels": {"type": "boolean"},
                "weight_sample_stride": {"type": "integer", "minimum": 1},
                "divergence_factor": {"type": "number",
                                      "exclusiveMinimum": 1},
            },
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "required": ["channels"],
            "properties": {
                "channels": {"type": "array", "minItems": 1,
                             "items": {"type": "integer", "minimum": 1}},
            },
        },
        "analytic": {
            "type": "object",
            "additionalProperties": False,
            "required": ["channels"],
            "properties": {
                "channels": {"type": "array", "minItems": 1,
                             "items": _CHANNEL_ENTRY},
                "measure_seed": {"type": "integer", "minimum": 0},
                "include_fluctuation": {"type": "boolean"},
            },
        },
        "outputs": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "directory": {"type": "string", "minLength": 1},
                "formats": {"type": "array", "minItems": 1,
                            "items": {"enum": list(_FORMATS)}},
            },
        },
    },
}

TOL_DEFAULTS = {"alpha": 0.15, "train_mse": 0.15, "sigma_top": 0.15}


class ConfigError(Exception):
    """Anything wrong with the config or tolerance file (exit code 2)."""


# ---------------------------------------------------------------------------
# config plumbing


def load_config(path) -> dict:
    try:
        cfg = io.read_json(path)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except ValueError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "top level"
        raise ConfigError(f"config error at {where}: {exc.message}")
    return cfg


def thread_count() -> int:
    raw = os.environ.get("EOSKIT_THREADS", "1")
    try:
        t = int(raw)
    except ValueError:
        raise ConfigError(f"EOSKIT_THREADS must be an integer, got {raw!r}")
    return max(1, t)


def build_spec(cfg: dict) -> NetworkSpec:
    try:
        return NetworkSpec(**cfg["model"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model section: {exc}")


def build_dataset(cfg: dict):
    """Realize the configured data draw; ``None`` for a prior-only run
    (``n = 0``)."""
    sec = cfg["data"]
    if sec["n"] == 0:
        return None
    if "teacher" not in sec:
        raise ConfigError("data.teacher is required when n > 0")
    try:
        teacher = datasets.TeacherSpec(**sec["teacher"])
        return datasets.make_dataset(sec["n"], sec["dim"], sec["seed"],
                                     teacher)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"data section: {exc}")


def build_solver_options(cfg: dict) -> eos.SolverOptions:
    sec = dict(cfg.get("solver", {}))
    if sec.get("schedule") is not None:
        sec["schedule"] = tuple(sec["schedule"])
    try:
        return eos.SolverOptions(**sec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"solver section: {exc}")


def build_langevin_config(cfg: dict, spec: NetworkSpec) -> langevin.LangevinConfig:
    if "oracle" not in cfg:
        raise ConfigError("langevin command needs an oracle section")
    sec = dict(cfg["oracle"])
    if "seeds" in sec:
        sec["seeds"] = tuple(sec["seeds"])
    try:
        return langevin.LangevinConfig(spec=spec,
                                       noise_var=cfg["data"]["noise_var"],
                                       **sec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"oracle section: {exc}")


def _resolve_outdir(cfg: dict, override) -> str:
    directory = override or cfg.get("outputs", {}).get("directory")
    if not directory:
        raise ConfigError("no output directory (set outputs.directory "
                          "or pass -o)")
    os.makedirs(directory, exist_ok=True)
    return directory


def _formats(cfg: dict) -> frozenset:
    return frozenset(cfg.get("outputs", {}).get("formats", _FORMATS))


def _fmt(value) -> str:
    return f"{value:.12g}"


def _write_csv(path, header, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(v if isinstance(v, str) else _fmt(v)
                              for v in row))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# theory-side observables


def _equilibrium_train_mse(Q_f, y, noise_var):
    """Mean equilibrium train error: squared bias of the posterior mean
    plus the average posterior variance on the training points."""
    summary = posterior_mean(Q_f, y, noise_var)
    n = y.size
    B = np.linalg.solve(Q_f + noise_var * np.eye(n), Q_f)
    post_var = np.diag(Q_f) - np.einsum("ij,ji->i", Q_f, B)
    post_var = np.clip(post_var, 0.0, None)
    return summary, float(summary.train_mse + post_var.mean())


def _gp_block(spec, X, y, noise_var):
    sigma0, pres0 = eos._initial_state(spec, X)
    _, Q_f0, _, _ = eos._gp_refresh(spec, X, y, noise_var, sigma0, pres0,
                                    False)
    summary, mse_eq = _equilibrium_train_mse(Q_f0, y, noise_var)
    return {
        "alpha": summary.alpha,
        "train_mse": summary.train_mse,
        "train_mse_equilibrium": mse_eq,
        "sigma_top_eigenvalue": float(np.linalg.eigvalsh(sigma0)[-1]),
    }


def _state_summary(state, X, y):
    scale = eos.emergent_scale(state, X)
    summary, mse_eq = _equilibrium_train_mse(state.Q_f, y, state.noise_var)
    return {
        "alpha": state.alpha,
        "train_mse": state.posterior.train_mse,
        "train_mse_equilibrium": mse_eq,
        "sigma_top_eigenvalue": float(np.linalg.eigvalsh(state.sigma)[-1]),
        "chi": scale.chi,
        "width_at_unity": scale.width_at_unity,
        "residual": state.residual,
        "iterations": state.iterations,
        "converged": bool(state.converged),
        "clip_count": int(state.clip_count),
    }


# ---------------------------------------------------------------------------
# eos-solve


def cmd_eos_solve(cfg: dict, outdir) -> int:
    ds = build_dataset(cfg)
    if ds is None:
        raise ConfigError("eos-solve needs data.n > 0")
    spec = build_spec(cfg)
    options = build_solver_options(cfg)
    noise_var = cfg["data"]["noise_var"]
    formats = _formats(cfg)

    state = eos.solve(spec, ds.X, ds.y, noise_var, options)
    summary = {
        "command": "eos-solve",
        "version": 1,
        "model": cfg["model"],
        "noise_var": noise_var,
        "data_digest": ds.digest(),
        "n": ds.n,
        "gp": _gp_block(spec, ds.X, ds.y, noise_var),
        "partial": not state.converged,
    }
    summary.update(_state_summary(state, ds.X, ds.y))

    all_converged = state.converged
    sweep_rows = []
    if "sweep" in cfg:
        if spec.arch != "conv2":
            raise ConfigError("sweep.channels needs a two-layer "
                              "convolutional model")
        values = _dedup(cfg["sweep"]["channels"], "sweep channel")
        states = _solve_many(spec, values, ds, noise_var, options)
        for c in sorted(values):
            st = states[c]
            row = _state_summary(st, ds.X, ds.y)
            sweep_rows.append((c, row["alpha"], row["sigma_top_eigenvalue"],
                               row["chi"], "yes" if row["converged"]
                               else "no"))
            all_converged &= st.converged
        summary["sweep"] = {"channels": sorted(values),
                            "converged": bool(all_converged)}
        summary["partial"] = not all_converged

    io.write_json(os.path.join(outdir, "summary.json"), summary)
    if "csv" in formats:
        _write_csv(os.path.join(outdir, "residual_trace.csv"),
                   ["iteration", "residual"],
                   [(i + 1, r) for i, r in enumerate(state.history)])
        if sweep_rows:
            _write_csv(os.path.join(outdir, "sweep.csv"),
                       ["channels", "alpha_train", "l_star", "chi2",
                        "converged"], sweep_rows)
    if "kernels" in formats:
        io.write_matrix(os.path.join(outdir, "sigma.mat"), state.sigma)
        io.write_kernel(os.path.join(outdir, "q_f.kern"), state.Q_f,
                        pixels=state.Q_f.shape[0] // ds.n)
        for i, (K, Q) in enumerate(zip(state.pre_kernels,
                                       state.post_kernels)):
            io.write_kernel(os.path.join(outdir, f"pre_kernel_{i}.kern"),
                            K, pixels=K.shape[0] // ds.n)
            io.write_kernel(os.path.join(outdir, f"post_kernel_{i}.kern"),
                            Q, pixels=Q.shape[0] // ds.n)
    if not all_converged:
        print("eos-solve: not converged (partial outputs written)",
              file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _solve_many(spec, values, ds, noise_var, options):
    """Independent per-channel-count solves, optionally threaded."""
    def _one(c):
        spec_c = dataclasses.replace(spec, widths=(int(c),))
        return c, eos.solve(spec_c, ds.X, ds.y, noise_var, options)

    workers = min(thread_count(), len(values))
    if workers <= 1:
        return dict(_one(c) for c in sorted(values))
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        return dict(pool.map(_one, sorted(values)))


def _dedup(values, label):
    seen, out, dropped = set(), [], []
    for v in values:
        if v in seen:
            dropped.append(v)
        else:
            seen.add(v)
            out.append(v)
    if dropped:
        print(f"warning: duplicate {label} values deduplicated: "
              + ", ".join(str(v) for v in dropped), file=sys.stderr)
    return out


# ---------------------------------------------------------------------------
# analytic


def _parse_channels(raw):
    return [math.inf if (v is None or v == "inf") else float(v)
            for v in raw]


def cmd_analytic(cfg: dict, outdir) -> int:
    spec = build_spec(cfg)
    if spec.arch != "conv2" or spec.activation != "erf":
        raise ConfigError("analytic command needs a two-layer erf "
                          "convolutional model")
    sec = cfg.get("analytic")
    if sec is None:
        raise ConfigError("analytic command needs an analytic section")
    data_sec = cfg["data"]
    if data_sec["n"] == 0:
        raise ConfigError("analytic command needs data.n > 0")
    formats = _formats(cfg)

    window = spec.windows[0]
    pixels = spec.input_dim // window
    norms = _teacher_norms(cfg)
    base = dict(n=data_sec["n"], window=window, pixels=pixels,
                readout_var=spec.layer_vars[1],
                weight_var=spec.layer_vars[0],
                noise_var=data_sec["noise_var"], **norms)

    channels = _dedup(_parse_channels(sec["channels"]), "channel")
    if math.inf not in channels:
        channels.append(math.inf)

    measure_seed = sec.get("measure_seed", 7)
    spectrum = _lazy_spectrum(base, spec, measure_seed)
    include_fluct = sec.get("include_fluctuation", False)

    solutions = {}
    for c in channels:
        tl_cfg = two_layer.TwoLayerConfig(channels=c, **base)
        solutions[c] = two_layer.solve_alpha(
            tl_cfg, cbar_n=spectrum.cbar_n,
            include_fluctuation=include_fluct)
    alpha_inf = solutions[math.inf].alpha

    rows = []
    for c in sorted(channels):
        sol = solutions[c]
        scaled = sol.l_star * window / spec.layer_vars[0]
        rows.append((c, sol.alpha, sol.alpha / alpha_inf, scaled,
                     sol.chi2, sol.root_count))
        print(f"C={_fmt(c)} alpha={sol.alpha:.6g} "
              f"alpha_ratio={sol.alpha / alpha_inf:.6g} "
              f"l*S/sw2={scaled:.6g} chi2={sol.chi2:.6g}")

    lam = two_layer.lambda_inf(two_layer.TwoLayerConfig(channels=1.0,
                                                        **base))
    report = {
        "command": "analytic",
        "version": 1,
        "model": cfg["model"],
        "noise_var": data_sec["noise_var"],
        "n": data_sec["n"],
        "alpha_inf": alpha_inf,
        "lambda_inf": lam,
        "cbar_n": spectrum.cbar_n,
        "lambda_y_measure": spectrum.lambda_y,
        "gram_size": spectrum.gram_size,
        "measure_seed": measure_seed,
        "include_fluctuation": include_fluct,
        "chi2_coefficient": alpha_inf ** 2 * data_sec["n"] ** 2 * lam
        * norms["a_norm_sq"] * norms["w_norm_sq"],
        "channels": [_fmt(c) for c in sorted(channels)],
    }
    io.write_json(os.path.join(outdir, "analytic.json"), report)
    if "csv" in formats:
        _write_csv(os.path.join(outdir, "analytic.csv"),
                   ["channels", "alpha", "alpha_ratio", "l_star_scaled",
                    "chi2", "root_count"], rows)
    return EXIT_OK


def _teacher_norms(cfg: dict) -> dict:
    teacher = cfg["data"].get("teacher")
    if teacher is None:
        return {"a_norm_sq": 1.0, "w_norm_sq": 1.0}
    if teacher["kind"] != "linear_cnn":
        raise ConfigError("analytic command needs a linear_cnn teacher")
    ds = build_dataset(cfg)
    return {"a_norm_sq": float(ds.meta["a_norm_sq"]),
            "w_norm_sq": float(ds.meta["w_norm_sq"])}


def _lazy_spectrum(base, spec, measure_seed):
    """Operator spectrum of the infinite-width kernel under the input
    measure, restricted to the linear sector."""
    M = ek_gram_size(base["n"])
    X = datasets.gaussian_inputs(M, spec.input_dim, measure_seed)
    window, pixels = base["window"], base["pixels"]
    patches = kernels.extract_patches(X, window).reshape(M, 1, pixels,
                                                         window)
    sigma0 = (base["weight_var"] / window) * np.eye(window)
    gram = kernels.strided_post_kernel(patches, sigma0, "erf",
                                       base["readout_var"])
    return ek_spectrum(gram, base["n"], base["noise_var"],
                       retain=pixels * window)


# ---------------------------------------------------------------------------
# langevin


def cmd_langevin(cfg: dict, outdir) -> int:
    spec = build_spec(cfg)
    lcfg = build_langevin_config(cfg, spec)
    ds = build_dataset(cfg)
    formats = _formats(cfg)
    log_path = os.path.join(outdir, "trajectory.log")

    try:
        stats = langevin.sample_equilibrium(lcfg, ds, log_path=log_path)
    except langevin.DivergenceError as exc:
        io.write_json(os.path.join(outdir, "stability_report.json"),
                      {"event": "divergence", "seed": int(exc.seed),
                       "epoch": int(exc.epoch),
                       "last_stable_rate": float(exc.last_stable_rate),
                       "message": str(exc)})
        print(f"langevin: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL

    out = stats.to_json()
    out["command"] = "langevin"
    out["version"] = 1
    out["model"] = cfg["model"]
    out["noise_var"] = cfg["data"]["noise_var"]
    out["data_digest"] = None if ds is None else ds.digest()
    out["n"] = 0 if ds is None else ds.n

    if stats.weight_samples.size:
        tops = _per_seed_top_eigs(stats)
        out["sigma_hat_top_eigenvalue_per_seed"] = [float(v) for v in tops]
        out["sigma_hat_top_eigenvalue_se"] = (
            float(np.std(tops, ddof=1) / math.sqrt(len(tops)))
            if len(tops) > 1 else 0.0)

    ok = True
    if ds is None:
        checks = []
        for name, v, se, prior in zip(stats.layer_names,
                                      stats.per_weight_variance,
                                      stats.per_weight_variance_se,
                                      stats.prior_weight_variance):
            good = abs(v - prior) <= 5.0 * max(se, 1e-300)
            checks.append({"layer": name, "variance": v, "se": se,
                           "prior": prior, "ok": bool(good)})
            ok &= good
        out["variance_check"] = {"pass": bool(ok), "layers": checks}

    io.write_json(os.path.join(outdir, "stats.json"), out)
    if "kernels" in formats:
        io.write_matrix(os.path.join(outdir, "sigma_hat.mat"),
                        stats.sigma_hat)
        probe = 1 if stats.probe_index is None else stats.probe_index.size
        for name in stats.pre_kernels:
            K, Q = stats.pre_kernels[name], stats.post_kernels[name]
            io.write_kernel(
                os.path.join(outdir, f"pre_kernel_{name}.kern"), K,
                pixels=K.shape[0] // probe)
            io.write_kernel(
                os.path.join(outdir, f"post_kernel_{name}.kern"), Q,
                pixels=Q.shape[0] // probe)
    if not ok:
        print("langevin: prior variance check failed", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _per_seed_top_eigs(stats):
    nseeds = len(stats.seeds)
    samples = stats.weight_samples.reshape(nseeds, -1,
                                           stats.weight_samples.shape[1])
    tops = []
    for k in range(nseeds):
        cov = samples[k].T @ samples[k] / samples[k].shape[0]
        tops.append(np.linalg.eigvalsh(cov)[-1])
    return np.asarray(tops)


# ---------------------------------------------------------------------------
# compare


def _load_results(path):
    for name in ("summary.json", "stats.json"):
        full = os.path.join(path, name)
        if os.path.exists(full):
            return io.read_json(full)
    raise ConfigError(f"no summary.json or stats.json under {path}")


def _load_tolerances(path):
    if path is None:
        return dict(TOL_DEFAULTS)
    try:
        raw = io.read_json(path)
    except FileNotFoundError:
        raise ConfigError(f"tolerance file not found: {path}")
    except ValueError as exc:
        raise ConfigError(f"tolerance file is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError("tolerance file must be a JSON object")
    tol = dict(TOL_DEFAULTS)
    for key, value in raw.items():
        if key not in TOL_DEFAULTS:
            raise ConfigError(f"unknown tolerance key: {key}")
        if not isinstance(value, (int, float)) or value <= 0:
            raise ConfigError(f"tolerance {key} must be a positive number")
        tol[key] = float(value)
    return tol


def _observables(results):
    """(value, stderr) per compared quantity, from either side's files."""
    noise = results["noise_var"]
    if results["command"] == "eos-solve":
        return {
            "alpha": (results["alpha"], 0.0),
            "train_mse": (results["train_mse_equilibrium"] / noise, 0.0),
            "sigma_top": (results["sigma_top_eigenvalue"], 0.0),
        }
    if results["command"] != "langevin":
        raise ConfigError(f"unrecognized results kind "
                          f"{results['command']!r}")
    mse = np.asarray(results["train_mse_mean"], dtype=float) / noise
    mse_se = (float(np.std(mse, ddof=1) / math.sqrt(mse.size))
              if mse.size > 1 else 0.0)
    return {
        "alpha": (results["alpha_hat"], results.get("alpha_hat_se", 0.0)),
        "train_mse": (float(mse.mean()), mse_se),
        "sigma_top": (results["sigma_hat_top_eigenvalue"],
                      results.get("sigma_hat_top_eigenvalue_se", 0.0)),
    }


def cmd_compare(dir_a, dir_b, tol_file, out_path) -> int:
    theory = _load_results(dir_a)
    other = _load_results(dir_b)
    if theory["command"] != "eos-solve":
        raise ConfigError("side -a must hold eos-solve results")
    tol = _load_tolerances(tol_file)

    dig_a, dig_b = theory.get("data_digest"), other.get("data_digest")
    if not dig_a or not dig_b or dig_a != dig_b:
        print(f"compare: data digests disagree ({dig_a} vs {dig_b}); "
              "refusing to compare", file=sys.stderr)
        return EXIT_COMPARE

    predicted = _observables(theory)
    empirical = _observables(other)
    gp = theory["gp"]
    gp_values = {
        "alpha": gp["alpha"],
        "train_mse": gp["train_mse_equilibrium"] / theory["noise_var"],
        "sigma_top": gp["sigma_top_eigenvalue"],
    }

    rows = []
    all_pass = True
    for name in ("train_mse", "sigma_top", "alpha"):
        emp, se = empirical[name]
        pred, _ = predicted[name]
        ref = gp_values[name]
        good = abs(emp - pred) <= tol[name] * abs(pred)
        all_pass &= good
        rows.append((name, emp, pred, ref, emp / ref, pred / ref, se,
                     "pass" if good else "fail"))

    header = ["quantity", "empirical", "predicted", "gp_value",
              "empirical_over_gp", "predicted_over_gp", "stderr",
              "status"]
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(v if isinstance(v, str) else _fmt(v)
                              for v in row))
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if out_path:
        with open(out_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return EXIT_OK if all_pass else EXIT_COMPARE


# ---------------------------------------------------------------------------
# entry point


def _add_config_command(sub, name, func, help_text):
    p = sub.add_parser(name, help=help_text)
    p.add_argument("-c", "--config", required=True,
                   help="experiment config (JSON, version 1)")
    p.add_argument("-o", "--output-dir", default=None,
                   help="output directory (overrides outputs.directory)")
    p.set_defaults(func=func)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="eoskit",
        description="Self-consistent kernel theory runs and their "
                    "Langevin-oracle validation.")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_config_command(sub, "eos-solve", cmd_eos_solve,
                        "solve the layer equations of state")
    _add_config_command(sub, "analytic", cmd_analytic,
                        "closed-form two-layer channel sweep")
    _add_config_command(sub, "langevin", cmd_langevin,
                        "equilibrium sampler run")
    cmp_p = sub.add_parser("compare", help="theory-vs-oracle report")
    cmp_p.add_argument("-a", "--dir-a", required=True,
                       help="theory results directory (eos-solve)")
    cmp_p.add_argument("-b", "--dir-b", required=True,
                       help="oracle (or second theory) results directory")
    cmp_p.add_argument("--tol-file", default=None,
                       help="JSON relative tolerances per quantity")
    cmp_p.add_argument("-o", "--output", default=None,
                       help="also write the CSV report to this file")

    args = parser.parse_args(argv)
    try:
        if args.command == "compare":
            return cmd_compare(args.dir_a, args.dir_b, args.tol_file,
                               args.output)
        cfg = load_config(args.config)
        outdir = _resolve_outdir(cfg, args.output_dir)
        return args.func(cfg, outdir)
    except ConfigError as exc:
        print(f"eoskit: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except np.linalg.LinAlgError as exc:
        print(f"eoskit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
