"""Config-driven experiment pipelines and run directories.

A run directory collects the outputs of ``simulate``, ``map``, ``mcmc``,
``leadfield`` and ``summarize`` for one configuration, plus
``manifest.json`` listing every file with its SHA-256.  Numeric outputs are
byte-identical for a fixed configuration and seed; timings live only in
the manifest.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import platform
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .hypermodel import HyperModel, NoiseModel, VarianceGrouping, group_amplitudes, update_theta
from .ias import IasConfig, ias_map
from .io import (
    file_sha256,
    read_json,
    read_matrix,
    read_vector_csv,
    run_lock,
    write_chain_csv,
    write_json,
    write_matrix,
    write_table_csv,
    write_vector_csv,
)
from .mcmc import ChainConfig, RoiSpec, sample_roi
from .planar import (
    CM,
    DEFAULT_SOURCE_MOMENT,
    DEFAULT_SOURCE_XY,
    build_planar_leadfield,
    geometry_to_dict,
    make_paper_planar_setup,
    simulate_data,
)
from .solver import SolverConfig

__all__ = [
    "ConfigError",
    "RunError",
    "CONFIG_SCHEMA",
    "PRESETS",
    "load_config",
    "load_preset",
    "resolve_config",
    "cmd_simulate",
    "cmd_map",
    "cmd_mcmc",
    "cmd_leadfield",
    "cmd_summarize",
]

log = logging.getLogger(__name__)

PRESETS = ("planar_gamma", "planar_invgamma", "sphere")


class ConfigError(ValueError):
    """Invalid configuration or missing inputs (exit code 2)."""


class RunError(RuntimeError):
    """Failure while running a valid configuration (exit code 1)."""


_NUM = {"type": "number"}
_VEC3 = {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["forward", "hypermodel"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "forward": {
            "oneOf": [
                {
                    "type": "object",
                    "required": ["kind"],
                    "additionalProperties": False,
                    "properties": {
                        "kind": {"const": "planar"},
                        "source_depth": {"type": "number", "minimum": 0},
                        "source_xy": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
                        "moment": _NUM,
                    },
                },
                {
                    "type": "object",
                    "required": ["kind", "source"],
                    "additionalProperties": False,
                    "properties": {
                        "kind": {"const": "sphere"},
                        "mesh": {"type": "string"},
                        "generator": {
                            "type": "object",
                            "additionalProperties": False,
                            "required": ["radii", "conductivities"],
                            "properties": {
                                "radii": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                                          "minItems": 1},
                                "conductivities": {"type": "array",
                                                   "items": {"type": "number", "exclusiveMinimum": 0},
                                                   "minItems": 1},
                                "resolution": {"type": "integer", "minimum": 1, "maximum": 10},
                                "n_electrodes": {"type": "integer", "minimum": 2},
                                "sensors_per_ring": {"type": "integer", "minimum": 1},
                                "impedance": {"type": "number", "exclusiveMinimum": 0},
                            },
                        },
                        "modality": {"enum": ["meg", "eeg"]},
                        "source": {
                            "type": "object",
                            "required": ["position", "moment"],
                            "additionalProperties": False,
                            "properties": {"position": _VEC3, "moment": _VEC3},
                        },
                    },
                },
            ]
        },
        "hypermodel": {
            "type": "object",
            "required": ["r", "beta", "theta0"],
            "additionalProperties": False,
            "properties": {
                "r": _NUM,
                "beta": {"type": "number", "exclusiveMinimum": 0},
                "theta0": {"type": "number", "exclusiveMinimum": 0},
                "paper_exact_planar": {"type": "boolean"},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "noise_fraction": {"type": "number", "minimum": 0},
                "add_noise": {"type": "boolean"},
                "sigma": {"type": ["number", "null"], "exclusiveMinimum": 0},
            },
        },
        "ias": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "iterations": {"type": "integer", "minimum": 1},
                "exact_mode": {"type": "boolean"},
                "solver": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "max_iters": {"type": ["integer", "null"], "minimum": 1},
                        "rel_residual_tol": {"type": "number", "exclusiveMinimum": 0},
                        "mode": {"enum": ["tikhonov", "truncated"]},
                        "method": {"enum": ["cgls", "direct"]},
                    },
                },
            },
        },
        "mcmc": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "sample_size": {"type": "integer", "minimum": 1},
                "thinning": {"type": "integer", "minimum": 1},
                "discard": {"type": "integer", "minimum": 0},
                "csv_export": {"type": "boolean"},
                "roi": {
                    "oneOf": [
                        {"type": "object", "required": ["kind"], "additionalProperties": False,
                         "properties": {"kind": {"const": "preset"}}},
                        {"type": "object", "required": ["kind", "groups"], "additionalProperties": False,
                         "properties": {"kind": {"const": "groups"},
                                        "groups": {"type": "array", "items": {"type": "integer", "minimum": 0},
                                                   "minItems": 1}}},
                        {"type": "object", "required": ["kind", "radius"], "additionalProperties": False,
                         "properties": {"kind": {"const": "ball"},
                                        "center": {"oneOf": [{"enum": ["map", "truth"]}, _VEC3]},
                                        "radius": {"type": "number", "exclusiveMinimum": 0}}},
                    ]
                },
            },
        },
    },
}

_DEFAULTS = {
    "name": "run",
    "seed": 0,
    "data": {"noise_fraction": 0.05, "add_noise": False, "sigma": None},
    "ias": {"iterations": 15, "exact_mode": False,
            "solver": {"max_iters": None, "rel_residual_tol": 1e-6, "mode": "tikhonov", "method": "cgls"}},
    "mcmc": {"sample_size": 1000, "thinning": 1, "discard": 0, "csv_export": True, "roi": {"kind": "preset"}},
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and "kind" not in v:
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _line_of(text, path):
    """Best-effort line number of the JSON element at ``path`` in ``text``."""
    pos = 0
    for part in path:
        if isinstance(part, str):
            j = text.find(f'"{part}"', pos)
            if j < 0:
                break
            pos = j
    return text.count("\n", 0, pos) + 1


def _validate(doc, text=None, source="config"):
    errors = sorted(jsonschema.Draft202012Validator(CONFIG_SCHEMA).iter_errors(doc), key=lambda e: list(e.path))
    if not errors:
        return
    msgs = []
    for e in errors:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        line = f" (line {_line_of(text, list(e.absolute_path))})" if text is not None else ""
        msg = e.message if len(e.message) < 200 else e.message[:200] + "..."
        msgs.append(f"{source}: '{where}'{line}: {msg}")
    raise ConfigError("\n".join(msgs))


def load_preset(name) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("hbloc.presets").joinpath(f"{name}.json").read_text(encoding="utf-8")
    return json.loads(text)


def load_config(path) -> tuple[dict, str]:
    """Parse a JSON config file; returns ``(document, text)``."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text(encoding="utf-8")
    try:
        return json.loads(text), text
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def resolve_config(preset=None, config_path=None, seed=None) -> dict:
    """Preset, then file overrides, then ``seed``; validated and filled with defaults."""
    doc = load_preset(preset) if preset else {}
    text = None
    source = f"preset {preset}" if preset else "config"
    if config_path is not None:
        over, text = load_config(config_path)
        if not preset:
            _validate(over, text, str(config_path))
        doc = _merge(doc, over)
        source = str(config_path)
    if not doc:
        raise ConfigError("no configuration given (use --preset or --config)")
    if seed is not None:
        doc["seed"] = int(seed)
    _validate(doc, text if not preset else None, source)
    cfg = _merge(_DEFAULTS, doc)
    fw = cfg["forward"]
    if fw["kind"] == "sphere":
        if "mesh" in fw:
            mp = Path(fw["mesh"])
            if not mp.is_file():
                raise ConfigError(f"forward/mesh: file {mp} does not exist")
        elif "generator" not in fw:
            raise ConfigError("forward: sphere model needs 'mesh' or 'generator'")
        g = fw.get("generator")
        if g is not None and len(g["radii"]) != len(g["conductivities"]):
            raise ConfigError("forward/generator: one conductivity per radius required")
    hm = cfg["hypermodel"]
    try:
        # construction plus one update catches families rejected at dispatch
        update_theta(np.ones(1), HyperModel(hm["r"], hm["beta"], hm["theta0"]))
    except ValueError as exc:
        raise ConfigError(f"hypermodel: {exc}") from exc
    if cfg["mcmc"]["discard"] >= cfg["mcmc"]["sample_size"]:
        raise ConfigError("mcmc: discard must be smaller than sample_size")
    return cfg


def config_hash(cfg) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


# forward models


@dataclass
class Problem:
    """Lead field with group geometry, shared by all commands."""

    M: np.ndarray
    grouping: VarianceGrouping
    group_positions: np.ndarray      # (G, 3)
    group_layer: np.ndarray          # (G,) layer index or -1
    moment_scale: np.ndarray         # (K,) dipole moment per unit coefficient
    preset_roi: np.ndarray | None
    extra: dict

    @property
    def n_groups(self):
        return self.grouping.n_groups


def _planar_setup(fw):
    return make_paper_planar_setup(
        source_depth=fw.get("source_depth", 3.5 * CM),
        moment=fw.get("moment", DEFAULT_SOURCE_MOMENT),
        source_xy=tuple(fw.get("source_xy", DEFAULT_SOURCE_XY)),
    )


def _sphere_mesh(fw):
    from .fem import load_mesh, make_sphere_mesh

    if "mesh" in fw:
        return load_mesh(fw["mesh"])
    g = fw["generator"]
    return make_sphere_mesh(
        g["radii"], g["conductivities"], g.get("resolution", 4),
        n_electrodes=g.get("n_electrodes", 32), n_sensors=g.get("sensors_per_ring", 16), impedance=g.get("impedance", 1.0),
    )


def build_problem(cfg) -> Problem:
    fw = cfg["forward"]
    if fw["kind"] == "planar":
        setup = _planar_setup(fw)
        M = build_planar_leadfield(setup.sensors, setup.dipoles).matrix
        grouping = setup.dipoles.grouping()
        extra = {"setup": setup}
        return Problem(M, grouping, setup.dipoles.locations, setup.dipoles.layer_of,
                       np.ones(M.shape[1]), setup.roi_groups, extra)
    from .fem import FemForwardModel
    from .fem.mesh import MeshError

    try:
        mesh = _sphere_mesh(fw)
        fm = FemForwardModel(mesh)
        M = fm.magnetic_lead_field() if fw.get("modality", "meg") == "meg" else fm.electric_lead_field()
    except MeshError as exc:
        raise ConfigError(f"forward: {exc}") from exc
    rt = fm.sys.rt
    mom = np.linalg.norm(rt.moments(mesh.nodes), axis=1)
    grouping = VarianceGrouping.identity(rt.size)
    return Problem(M, grouping, rt.centers(mesh.nodes), np.full(rt.size, -1), mom, None,
                   {"mesh": mesh, "model": fm})


def _truth(cfg, prob: Problem):
    """True source position and moment vector."""
    fw = cfg["forward"]
    if fw["kind"] == "planar":
        s = prob.extra["setup"]
        return s.source_position, s.source_moment
    return np.array(fw["source"]["position"], float), np.array(fw["source"]["moment"], float)


def _simulate_b(cfg, prob: Problem):
    fw, dcfg = cfg["forward"], cfg["data"]
    if fw["kind"] == "planar":
        s = prob.extra["setup"]
        grid, coeffs = s.source_dipoles()
        Msrc = build_planar_leadfield(s.sensors, grid).matrix
    else:
        from .fem import dipole_to_rt

        mesh, fm = prob.extra["mesh"], prob.extra["model"]
        coeffs = dipole_to_rt(mesh, fm.sys.rt, fw["source"]["position"], fw["source"]["moment"])
        Msrc = prob.M
    if dcfg.get("sigma") is not None:
        b, _ = simulate_data(Msrc, coeffs, 0.0)
        sigma = float(dcfg["sigma"])
        if dcfg["add_noise"]:
            b = b + sigma * np.random.default_rng(cfg["seed"]).standard_normal(b.size)
    else:
        try:
            b, sigma = simulate_data(Msrc, coeffs, dcfg["noise_fraction"], dcfg["add_noise"], cfg["seed"])
        except ValueError as exc:
            raise ConfigError(f"data: {exc}; set data/sigma explicitly") from exc
    return b, sigma


# run directory helpers

_LOCAL_FILES = {"manifest.json", ".lock"}


def _rel_files(run_dir: Path):
    return sorted(str(p.relative_to(run_dir)) for p in run_dir.rglob("*")
                  if p.is_file() and p.name not in _LOCAL_FILES)


def _update_manifest(run_dir: Path, cfg, command, elapsed, outputs):
    mpath = run_dir / "manifest.json"
    man = read_json(mpath) if mpath.exists() else {"commands": {}}
    import numba
    import scipy

    man["config_sha256"] = config_hash(cfg)
    man["versions"] = {"hbloc": __version__, "python": platform.python_version(), "numpy": np.__version__,
                       "scipy": scipy.__version__, "numba": numba.__version__}
    man["commands"][command] = {"seconds": round(elapsed, 3), "seed": cfg["seed"], "outputs": sorted(outputs)}
    man["files"] = {f: file_sha256(run_dir / f) for f in _rel_files(run_dir)}
    write_json(mpath, man)
    return man


def _require(run_dir: Path, *names):
    missing = [n for n in names if not (run_dir / n).exists()]
    if missing:
        raise ConfigError(f"{run_dir}: missing {', '.join(missing)} (run the earlier commands first)")


def _load_problem_from_run(run_dir: Path):
    M, hdr = read_matrix(run_dir / "leadfield")
    gi = read_json(run_dir / "groups.json")
    grouping = VarianceGrouping(np.array(gi["group_of"], dtype=np.intp), gi["n_groups"])
    return M, hdr, grouping, gi


def _group_table(run_dir, name, prob_pos, layer, values: dict):
    header = ["group", "x", "y", "z", "layer"] + list(values)
    rows = []
    for k in range(prob_pos.shape[0]):
        rows.append([k, float(prob_pos[k, 0]), float(prob_pos[k, 1]), float(prob_pos[k, 2]), int(layer[k])]
                    + [float(v[k]) for v in values.values()])
    write_table_csv(run_dir / name, header, rows)


def _layer_slices(run_dir: Path, prefix, pos, layer, amp, theta, groups=None):
    """One CSV per depth layer (planar) with x, y, amplitude, theta."""
    out = []
    groups = np.arange(amp.size) if groups is None else np.asarray(groups)
    lay = layer[groups]
    if np.all(lay < 0):
        return out
    sdir = run_dir / "slices"
    sdir.mkdir(exist_ok=True)
    for L in np.unique(lay):
        sel = np.flatnonzero(lay == L)
        rows = [[int(groups[i]), float(pos[groups[i], 0]), float(pos[groups[i], 1]), float(amp[i]),
                 float(theta[i])] for i in sel]
        name = f"slices/{prefix}_layer{int(L)}.csv"
        write_table_csv(run_dir / name, ["group", "x", "y", "amplitude", "theta"], rows)
        out.append(name)
    return out


def _amplitudes(alpha, grouping, moment_scale):
    """Dipole amplitude per group, ``||q_k||``."""
    return np.sqrt(group_amplitudes(np.asarray(alpha) * moment_scale, grouping))


def _per_layer(amp, layer, depth_of_layer):
    rows = []
    for L in np.unique(layer[layer >= 0]):
        sel = layer == L
        rows.append([int(L), float(depth_of_layer[int(L)]), float(amp[sel].max()), float((amp[sel] ** 2).sum())])
    return rows


# commands


def cmd_simulate(cfg, run_dir) -> dict:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with run_lock(run_dir):
        t0 = time.perf_counter()
        prob = build_problem(cfg)
        b, sigma = _simulate_b(cfg, prob)
        pos, mom = _truth(cfg, prob)
        write_json(run_dir / "config.json", cfg)
        write_vector_csv(run_dir / "data.csv", b, name="b")
        write_json(run_dir / "truth.json", {
            "source_position": pos, "source_moment": mom, "sigma": sigma,
            "noise_fraction": cfg["data"]["noise_fraction"], "add_noise": cfg["data"]["add_noise"],
            "seed": cfg["seed"],
        })
        kind = cfg["forward"]["kind"]
        units = "T per A m" if kind == "planar" else ("T per A" if cfg["forward"].get("modality", "meg") == "meg"
                                                       else "V per A")
        write_matrix(run_dir / "leadfield", prob.M, units=units, meta={"kind": kind})
        depths = None
        if kind == "planar":
            s = prob.extra["setup"]
            write_json(run_dir / "geometry.json", geometry_to_dict(s))
            depths = [float(d) for d in s.dipoles.depths]
        else:
            from .fem import mesh_to_document

            write_json(run_dir / "mesh.json", mesh_to_document(prob.extra["mesh"]))
        write_json(run_dir / "groups.json", {
            "n_groups": prob.n_groups, "group_of": prob.grouping.group_of,
            "positions": prob.group_positions, "layer": prob.group_layer, "moment_scale": prob.moment_scale,
            "preset_roi": prob.preset_roi, "layer_depths": depths,
        })
        outs = ["config.json", "data.csv", "truth.json", "leadfield.bin", "leadfield.json", "groups.json",
                "geometry.json" if kind == "planar" else "mesh.json"]
        man = _update_manifest(run_dir, cfg, "simulate", time.perf_counter() - t0, outs)
    return {"outputs": outs, "sigma": sigma, "n_data": int(b.size), "manifest": man}


def _hm(cfg):
    h = cfg["hypermodel"]
    return HyperModel(h["r"], h["beta"], h["theta0"], paper_exact_planar=h.get("paper_exact_planar", False))


def _ias_config(cfg):
    ic = cfg["ias"]
    s = ic["solver"]
    return IasConfig(iterations=ic["iterations"], exact_mode=ic["exact_mode"],
                     solver=SolverConfig(max_iters=s["max_iters"], rel_residual_tol=s["rel_residual_tol"],
                                         mode=s["mode"], method=s["method"]))


def _argmax_record(amp, gi, truth):
    pos = np.asarray(gi["positions"], float)
    k = int(np.argmax(amp))
    p = pos[k]
    rec = {"group": k, "position": p, "amplitude": float(amp[k])}
    if truth is not None:
        t = np.asarray(truth["source_position"], float)
        rec["horizontal_error"] = float(np.linalg.norm(p[:2] - t[:2]))
        rec["depth"] = float(-p[2]) if gi.get("layer_depths") else None
        rec["depth_error"] = float(abs(p[2] - t[2])) if gi.get("layer_depths") else None
        rec["distance_error"] = float(np.linalg.norm(p - t))
    return rec


def cmd_map(cfg, run_dir) -> dict:
    run_dir = Path(run_dir)
    _require(run_dir, "data.csv", "truth.json", "leadfield.bin", "groups.json")
    with run_lock(run_dir):
        t0 = time.perf_counter()
        M, _, grouping, gi = _load_problem_from_run(run_dir)
        b = read_vector_csv(run_dir / "data.csv")
        truth = read_json(run_dir / "truth.json")
        sigma = truth["sigma"]
        if not sigma > 0:
            raise ConfigError("truth.json: sigma must be positive (set data/sigma for zero data)")
        try:
            res = ias_map(M, b, NoiseModel(sigma), _hm(cfg), grouping, _ias_config(cfg))
        except Exception as exc:  # surfaced with the module diagnostic
            raise RunError(f"IAS failed: {exc}") from exc
        alpha, theta = res.state.alpha, res.state.theta
        scale = np.array(gi["moment_scale"], float)
        amp = _amplitudes(alpha, grouping, scale)
        write_vector_csv(run_dir / "alpha_map.csv", alpha, name="alpha")
        write_vector_csv(run_dir / "theta_map.csv", theta, name="theta")
        write_table_csv(run_dir / "log_posterior.csv", ["iteration", "log_posterior"],
                        [[i, float(v)] for i, v in enumerate(res.log_posterior_history)])
        pos = np.asarray(gi["positions"], float)
        layer = np.asarray(gi["layer"], int)
        outs = ["alpha_map.csv", "theta_map.csv", "log_posterior.csv"]
        if gi.get("layer_depths"):
            write_table_csv(run_dir / "layers_map.csv", ["layer", "depth", "max_amplitude", "energy"],
                            _per_layer(amp, layer, gi["layer_depths"]))
            outs.append("layers_map.csv")
        outs += _layer_slices(run_dir, "map", pos, layer, amp, theta)
        summary = {
            "argmax": _argmax_record(amp, gi, truth),
            "iterations": int(res.inner_iters.size),
            "inner_iterations": res.inner_iters,
            "floored_components": int(res.flags.sum()),
            "log_posterior_final": float(res.log_posterior_history[-1]) if res.log_posterior_history.size else None,
        }
        write_json(run_dir / "map.json", summary)
        outs.append("map.json")
        _update_manifest(run_dir, cfg, "map", time.perf_counter() - t0, outs)
    return summary


def _roi_groups(cfg, gi, run_dir, truth):
    roi = cfg["mcmc"]["roi"]
    G = gi["n_groups"]
    if roi["kind"] == "preset":
        if gi.get("preset_roi") is None:
            raise ConfigError("mcmc/roi: this forward model has no preset ROI; use 'groups' or 'ball'")
        return np.array(gi["preset_roi"], dtype=np.intp)
    if roi["kind"] == "groups":
        g = np.array(roi["groups"], dtype=np.intp)
        if g.max() >= G:
            raise ConfigError(f"mcmc/roi/groups: index {int(g.max())} out of range [0, {G})")
        return np.unique(g)
    center = roi.get("center", "map")
    pos = np.asarray(gi["positions"], float)
    if center == "truth":
        c = np.asarray(truth["source_position"], float)
    elif center == "map":
        if not (run_dir / "map.json").exists():
            raise ConfigError("mcmc/roi: center 'map' needs the map command to run first")
        c = np.asarray(read_json(run_dir / "map.json")["argmax"]["position"], float)
    else:
        c = np.asarray(center, float)
    g = np.flatnonzero(np.linalg.norm(pos - c, axis=1) <= roi["radius"])
    if g.size == 0:
        raise ConfigError("mcmc/roi: ball contains no source groups")
    return g


def cmd_mcmc(cfg, run_dir, progress=None) -> dict:
    run_dir = Path(run_dir)
    _require(run_dir, "data.csv", "truth.json", "leadfield.bin", "groups.json")
    with run_lock(run_dir):
        t0 = time.perf_counter()
        M, _, grouping, gi = _load_problem_from_run(run_dir)
        b = read_vector_csv(run_dir / "data.csv")
        truth = read_json(run_dir / "truth.json")
        if not truth["sigma"] > 0:
            raise ConfigError("truth.json: sigma must be positive")
        roi_groups = _roi_groups(cfg, gi, run_dir, truth)
        mc = cfg["mcmc"]
        try:
            ch = sample_roi(M, b, NoiseModel(truth["sigma"]), _hm(cfg), grouping, RoiSpec(roi_groups),
                            ChainConfig(mc["sample_size"], seed=cfg["seed"], thinning=mc["thinning"],
                                        discard=mc["discard"]), progress=progress)
        except Exception as exc:
            raise RunError(f"sampler failed: {exc}") from exc
        s = ch.summary
        scale = np.array(gi["moment_scale"], float)[ch.roi_coeffs]
        amp = _amplitudes(s.alpha_cm, ch.roi_grouping, scale)
        # amplitude variance in moment units
        dev_scale = np.bincount(ch.roi_grouping.group_of, weights=scale**2, minlength=ch.roi_grouping.n_groups) \
            / ch.roi_grouping.group_size
        var = s.amplitude_variance * dev_scale
        outs = []
        write_vector_csv(run_dir / "alpha_cm.csv", s.alpha_cm, name="alpha")
        write_vector_csv(run_dir / "theta_cm.csv", s.theta_cm, name="theta")
        write_vector_csv(run_dir / "amplitude_variance.csv", var, name="variance")
        write_vector_csv(run_dir / "roi_groups.csv", roi_groups, name="group")
        outs += ["alpha_cm.csv", "theta_cm.csv", "amplitude_variance.csv", "roi_groups.csv"]
        write_matrix(run_dir / "chain_theta", ch.theta, rows=ch.iterations.tolist(), cols=roi_groups.tolist(),
                     units="coefficient^2", meta={"thinning": mc["thinning"]})
        write_matrix(run_dir / "chain_alpha", ch.alpha, rows=ch.iterations.tolist(), cols=ch.roi_coeffs.tolist(),
                     units="coefficient", meta={"thinning": mc["thinning"]})
        outs += ["chain_theta.bin", "chain_theta.json", "chain_alpha.bin", "chain_alpha.json"]
        if mc["csv_export"]:
            write_chain_csv(run_dir / "chain_theta.csv", ch.iterations, ch.theta, roi_groups)
            outs.append("chain_theta.csv")
        # trace of the component with the largest theta_CM
        j = int(np.argmax(s.theta_cm))
        cj = ch.roi_grouping.group_of == j
        tr_amp = np.sqrt(((ch.alpha[:, cj] * scale[cj]) ** 2).sum(axis=1))
        write_table_csv(run_dir / "trace_max_theta.csv", ["iteration", "amplitude", "theta"],
                        [[int(i), float(a), float(t)] for i, a, t in zip(ch.iterations, tr_amp, ch.theta[:, j])])
        outs.append("trace_max_theta.csv")
        pos = np.asarray(gi["positions"], float)
        layer = np.asarray(gi["layer"], int)
        full_amp = np.zeros(gi["n_groups"])
        full_amp[roi_groups] = amp
        if gi.get("layer_depths"):
            write_table_csv(run_dir / "layers_cm.csv", ["layer", "depth", "max_amplitude", "energy"],
                            _per_layer(amp, layer[roi_groups], gi["layer_depths"]))
            outs.append("layers_cm.csv")
        outs += _layer_slices(run_dir, "cm", pos, layer, amp, s.theta_cm, roi_groups)
        summary = {
            "argmax": _argmax_record(full_amp, gi, truth),
            "max_theta_group": int(roi_groups[j]),
            "n_samples": int(s.n_samples),
            "roi_size": int(roi_groups.size),
            "grid_widenings": int(ch.widenings),
        }
        write_json(run_dir / "mcmc.json", summary)
        outs.append("mcmc.json")
        _update_manifest(run_dir, cfg, "mcmc", time.perf_counter() - t0, outs)
    summary["elapsed"] = ch.elapsed
    return summary


def cmd_leadfield(cfg, run_dir) -> dict:
    """Electric and magnetic lead fields of a sphere (or mesh-file) model."""
    from .fem import FemForwardModel
    from .fem.mesh import MeshError

    fw = cfg["forward"]
    if fw["kind"] != "sphere":
        raise ConfigError("leadfield: forward/kind must be 'sphere' (a mesh model)")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with run_lock(run_dir):
        t0 = time.perf_counter()
        try:
            mesh = _sphere_mesh(fw)
            fm = FemForwardModel(mesh)
            Me = fm.electric_lead_field()
            Mm = fm.magnetic_lead_field() if mesh.n_sensors else None
        except MeshError as exc:
            raise ConfigError(f"forward: {exc}") from exc
        cols = list(range(fm.sys.n_sources))
        write_matrix(run_dir / "Me", Me, rows=[f"electrode{i}" for i in range(Me.shape[0])], cols=cols,
                     units="V per A", meta={"n_tets": mesh.n_tets})
        outs = ["Me.bin", "Me.json"]
        if Mm is not None:
            write_matrix(run_dir / "Mm", Mm, rows=[f"sensor{i}" for i in range(Mm.shape[0])], cols=cols,
                         units="T per A", meta={"n_tets": mesh.n_tets})
            outs += ["Mm.bin", "Mm.json"]
        col = np.abs(Me.sum(axis=0))
        report = {"n_tets": mesh.n_tets, "n_nodes": mesh.n_nodes, "n_sources": fm.sys.n_sources,
                  "n_electrodes": mesh.n_electrodes, "n_sensors": mesh.n_sensors,
                  "kirchhoff_max_abs_column_sum": float(col.max()),
                  "kirchhoff_relative": float(col.max() / max(np.abs(Me).max(), 1e-300))}
        write_json(run_dir / "leadfield_report.json", report)
        outs.append("leadfield_report.json")
        _update_manifest(run_dir, cfg, "leadfield", time.perf_counter() - t0, outs)
    return report


def _checks(cfg, mp, mc, lf):
    """Acceptance-style pass/fail table from whatever results are present."""
    rows = []
    hm = cfg["hypermodel"]
    planar = cfg["forward"]["kind"] == "planar"
    if planar and mp is not None:
        a = mp["argmax"]
        rows.append(("map_surface_biased", a["depth"] <= 1.0 * CM + 1e-12 and a["horizontal_error"] <= 1.0 * CM + 1e-12,
                     f"depth {a['depth'] / CM:.2f} cm, horizontal {a['horizontal_error'] / CM:.2f} cm"))
    if planar and mc is not None:
        a = mc["argmax"]
        if hm["r"] < 0:
            tol = 1.0 * CM if mc["n_samples"] >= 50000 else 1.5 * CM
            rows.append(("cm_depth_recovered", a["depth_error"] <= tol + 1e-12,
                         f"depth {a['depth'] / CM:.2f} cm, error {a['depth_error'] / CM:.2f} cm, tol {tol / CM:.1f} cm"))
        else:
            rows.append(("cm_surface_biased", a["depth"] <= 1.0 * CM + 1e-12, f"depth {a['depth'] / CM:.2f} cm"))
    if lf is not None:
        rows.append(("kirchhoff", lf["kirchhoff_relative"] <= 1e-10, f"{lf['kirchhoff_relative']:.2e}"))
    return rows


def cmd_summarize(cfg, run_dir) -> dict:
    run_dir = Path(run_dir)
    if not run_dir.is_dir() or not (run_dir / "manifest.json").exists():
        raise ConfigError(f"{run_dir}: no manifest.json (empty or foreign run directory)")
    man = read_json(run_dir / "manifest.json")
    missing = [f for f in man.get("files", {}) if not (run_dir / f).exists()]
    if missing:
        raise ConfigError(f"{run_dir}: manifest lists missing files: {', '.join(missing)}")
    with run_lock(run_dir):
        t0 = time.perf_counter()
        if cfg is None:
            cfg = read_json(run_dir / "config.json")
        mp = read_json(run_dir / "map.json") if (run_dir / "map.json").exists() else None
        mc = read_json(run_dir / "mcmc.json") if (run_dir / "mcmc.json").exists() else None
        lf = read_json(run_dir / "leadfield_report.json") if (run_dir / "leadfield_report.json").exists() else None
        if mp is None and mc is None and lf is None:
            raise ConfigError(f"{run_dir}: nothing to summarize (no map, mcmc or leadfield results)")
        layers = {}
        for tag in ("map", "cm"):
            p = run_dir / f"layers_{tag}.csv"
            if p.exists():
                rows = np.loadtxt(p, delimiter=",", skiprows=1, ndmin=2)
                layers[tag] = [{"layer": int(r[0]), "depth": r[1], "max_amplitude": r[2], "energy": r[3]} for r in rows]
        checks = _checks(cfg, mp, mc, lf)
        report = {
            "name": cfg.get("name"),
            "map": mp["argmax"] if mp else None,
            "cm": mc["argmax"] if mc else None,
            "leadfield": lf,
            "layers": layers,
            "checks": [{"check": c, "passed": bool(p), "detail": d} for c, p, d in checks],
        }
        write_json(run_dir / "report.json", report)
        rows = []
        for tag, rec in (("map", report["map"]), ("cm", report["cm"])):
            if rec:
                for key in ("horizontal_error", "depth", "depth_error", "distance_error"):
                    if rec.get(key) is not None:
                        rows.append(["localization", f"{tag}_{key}", float(rec[key])])
        for tag, lst in layers.items():
            for r in lst:
                rows.append(["layer_energy", f"{tag}_layer{r['layer']}", float(r["energy"])])
        for c, p, d in checks:
            rows.append(["check", c, "pass" if p else "fail"])
        write_table_csv(run_dir / "report.csv", ["section", "item", "value"], rows)
        _update_manifest(run_dir, cfg, "summarize", time.perf_counter() - t0, ["report.json", "report.csv"])
    return report
