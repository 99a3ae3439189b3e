"""Scenario runner: ``westervelt-fem run <config>`` and ``westervelt-fem list``.

Configs are INI files (``key = value`` under ``[section]`` headers). Every
key is validated before any output is written. See the README for the
format, CSV schemas and exit codes.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import math
import os
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import assembly as asm
from .assembly import MaterialSpec
from .constants import l2_error, lp_norm
from .energy import CHECKS, check_energy_inequality, decay_fit, energy_report, tol_energy
from .mesh import Mesh, Tag, box_mesh, interval_mesh, read_mesh_text, rect_mesh
from .models import (DegeneracyError, Model, ModelKind, State, manufactured_forcing,
                     manufactured_solution)
from .stepper import SolverError, Trajectory, check_admissibility, fixed_point_outer, integrate

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_DEGENERACY = 3
EXIT_SOLVER = 4

PROFILES = ("ZERO", "SINE", "SINE2", "TENT", "GAUSSIAN_BUMP", "RANDOM", "MANUFACTURED", "FILE")
MATERIAL_KEYS = ("c2", "b", "delta", "k", "eps", "p", "q", "rho", "lam", "mu", "b_hat")
SECTIONS = {
    "model": {"kind", "floor"},
    "mesh": {"dim", "n", "nx", "ny", "nz", "length", "lx", "ly", "lz", "file"},
    "tags": {t.name.lower() for t in Tag},
    "material": set(MATERIAL_KEYS),
    "initial": {"profile", "amplitude", "velocity_profile", "velocity_amplitude", "width",
                "center", "file", "gradient", "project_gradients"},
    "forcing": {"kind", "amplitude"},
    "time": {"t", "dt"},
    "solver": {"mode", "max_outer", "tol", "freeze_damping", "newton_atol", "newton_rtol",
               "newton_maxiter"},
    "admissibility": {"m_bar", "m_bar_upper", "kappa"},
    "study": {"kind", "levels", "window"},
    "output": {"snapshot_times", "checks"},
}
CHECKS_BY_KIND = {
    ModelKind.PRESSURE_VISCOSITY: ["ENEST"],
    ModelKind.ACOUSTIC_COUPLED: ["ENEST"],
    ModelKind.PRESSURE_PLAPLACE: ["W1_DECAY"],
    ModelKind.POTENTIAL_VISCOSITY: ["ENEST0"],
    ModelKind.ELASTIC_COUPLED: ["ELASTIC"],
}


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration


@dataclass
class ScenarioConfig:
    name: str
    base_dir: Path
    kind: ModelKind
    floor: float
    mesh: dict
    tags: list
    material: dict
    material_per_tag: dict
    initial: dict
    forcing: dict
    T: float
    dt: float
    mode: str
    max_outer: int
    tol: float
    freeze_damping: bool
    newton: dict
    bounds: dict | None
    study: dict
    snapshot_times: list
    checks: list = field(default_factory=list)


def _float(sec, key, default=None):
    raw = sec.get(key)
    if raw is None:
        if default is None:
            raise ConfigError(f"missing key [{sec.name}] {key}")
        return default
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"[{sec.name}] {key}: not a number: {raw!r}") from None


def _int(sec, key, default=None):
    v = _float(sec, key, None if default is None else float(default))
    if v != int(v):
        raise ConfigError(f"[{sec.name}] {key}: not an integer")
    return int(v)


def _bool(sec, key, default=False):
    if key not in sec:
        return default
    try:
        return sec.getboolean(key)
    except ValueError:
        raise ConfigError(f"[{sec.name}] {key}: not a boolean") from None


def _floats(raw: str, what: str) -> list:
    try:
        return [float(v) for v in raw.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"{what}: expected numbers, got {raw!r}") from None


def load_config(path) -> ScenarioConfig:
    """Parse and validate a scenario file; raises :class:`ConfigError`."""
    path = Path(path)
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as err:
        raise ConfigError(f"cannot read {path}: {err}") from None
    for name in cp.sections():
        base = name.split(".", 1)[0]
        if base not in SECTIONS or (name != base and base != "material"):
            raise ConfigError(f"unknown section [{name}]")
        if name != base:
            tag = name.split(".", 1)[1].upper()
            if tag not in Tag.__members__:
                raise ConfigError(f"unknown tag in section [{name}]")
        unknown = set(cp[name]) - SECTIONS[base]
        if unknown:
            raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    for req in ("model", "mesh", "time"):
        if req not in cp:
            raise ConfigError(f"missing section [{req}]")

    def sec(name):
        if name not in cp:
            cp.add_section(name)
        return cp[name]

    try:
        kind = ModelKind(sec("model").get("kind", "").strip().upper())
    except ValueError:
        raise ConfigError(f"unknown model kind {sec('model').get('kind')!r}") from None
    ms = sec("mesh")
    mesh = {"dim": _int(ms, "dim", 1)}
    if "file" in ms:
        mesh["file"] = ms["file"]
    else:
        d = mesh["dim"]
        if d not in (1, 2, 3):
            raise ConfigError("[mesh] dim must be 1, 2 or 3")
        names = ["nx", "ny", "nz"][:d]
        lens = ["lx", "ly", "lz"][:d]
        if d == 1:
            mesh["counts"] = [_int(ms, "n", _int(ms, "nx", 16) if "nx" in ms else None)]
            mesh["lengths"] = [_float(ms, "length", _float(ms, "lx", 1.0))]
        else:
            mesh["counts"] = [_int(ms, k) for k in names]
            mesh["lengths"] = [_float(ms, k, 1.0) for k in lens]
        if any(c < 1 for c in mesh["counts"]) or any(L <= 0 for L in mesh["lengths"]):
            raise ConfigError("[mesh] counts and lengths must be positive")
    tags = []
    for key, raw in sec("tags").items():
        box = _floats(raw, f"[tags] {key}")
        if len(box) != 2 * mesh["dim"]:
            raise ConfigError(f"[tags] {key}: expected {2 * mesh['dim']} bounds")
        tags.append((Tag[key.upper()], box))
    material = {k: _float(sec("material"), k) for k in sec("material")}
    per_tag = {}
    for name in cp.sections():
        if name.startswith("material."):
            per_tag[name.split(".", 1)[1].upper()] = {k: _float(cp[name], k) for k in cp[name]}
    ini = sec("initial")
    initial = {
        "profile": ini.get("profile", "ZERO").strip().upper(),
        "amplitude": _float(ini, "amplitude", 1.0),
        "velocity_profile": ini.get("velocity_profile", "ZERO").strip().upper(),
        "velocity_amplitude": _float(ini, "velocity_amplitude", 0.0),
        "width": _float(ini, "width", 0.1),
        "center": _floats(ini["center"], "[initial] center") if "center" in ini else None,
        "file": ini.get("file"),
        "gradient": _bool(ini, "gradient"),
        "project_gradients": _bool(ini, "project_gradients"),
    }
    for key in ("profile", "velocity_profile"):
        if initial[key] not in PROFILES:
            raise ConfigError(f"[initial] {key}: unknown profile {initial[key]!r}")
    if "FILE" in (initial["profile"], initial["velocity_profile"]) and not initial["file"]:
        raise ConfigError("[initial] file is required for FILE profiles")
    if initial["width"] <= 0:
        raise ConfigError("[initial] width must be positive")
    fs = sec("forcing")
    forcing = {"kind": fs.get("kind", "NONE").strip().upper(), "amplitude": _float(fs, "amplitude", 1.0)}
    if forcing["kind"] not in ("NONE", "MANUFACTURED"):
        raise ConfigError(f"[forcing] kind: unknown value {forcing['kind']!r}")
    ts = sec("time")
    T, dt = _float(ts, "t"), _float(ts, "dt")
    if not (T > 0 and dt > 0) or abs(round(T / dt) * dt - T) > 1e-9 * T:
        raise ConfigError("[time] T and dt must be positive with T a multiple of dt")
    ss = sec("solver")
    mode = ss.get("mode", "MONOLITHIC").strip().upper()
    if mode not in ("MONOLITHIC", "FIXED_POINT"):
        raise ConfigError(f"[solver] mode: unknown value {mode!r}")
    newton = {}
    if "newton_atol" in ss:
        newton["atol"] = _float(ss, "newton_atol")
    if "newton_rtol" in ss:
        newton["rtol"] = _float(ss, "newton_rtol")
    if "newton_maxiter" in ss:
        newton["maxiter"] = _int(ss, "newton_maxiter")
    bounds = None
    if "admissibility" in cp:
        a = cp["admissibility"]
        bounds = {"m_bar": _float(a, "m_bar"), "M_bar": _float(a, "m_bar_upper"),
                  "kappa": _float(a, "kappa")}
    st = sec("study")
    study = {"kind": st.get("kind", "NONE").strip().upper(), "levels": _int(st, "levels", 3),
             "window": _floats(st["window"], "[study] window") if "window" in st else None}
    if study["kind"] not in ("NONE", "SPATIAL_REFINEMENT", "DECAY"):
        raise ConfigError(f"[study] kind: unknown value {study['kind']!r}")
    if study["window"] is not None and len(study["window"]) != 2:
        raise ConfigError("[study] window needs two numbers")
    if study["levels"] < 2 and study["kind"] == "SPATIAL_REFINEMENT":
        raise ConfigError("[study] levels must be >= 2")
    out = sec("output")
    snaps = _floats(out.get("snapshot_times", ""), "[output] snapshot_times")
    default_checks = "" if "forcing" in cp and cp["forcing"].get("kind", "NONE").strip().upper() != "NONE" \
        else " ".join(CHECKS_BY_KIND[kind])
    checks = out.get("checks", default_checks).replace(",", " ").split()
    cfg = ScenarioConfig(path.stem, path.parent, kind, _float(sec("model"), "floor", 0.05), mesh,
                         tags, material, per_tag, initial, forcing, T, dt, mode,
                         _int(ss, "max_outer", 20), _float(ss, "tol", 1e-9),
                         _bool(ss, "freeze_damping"), newton, bounds, study, snaps,
                         [c.upper() for c in checks])
    _validate(cfg)
    return cfg


def _validate(cfg: ScenarioConfig) -> None:
    if cfg.kind is ModelKind.ELASTIC_COUPLED and cfg.mesh["dim"] < 2:
        raise ConfigError("ELASTIC_COUPLED requires dim >= 2")
    m = cfg.material
    for key, lo in (("eps", 0.0), ("p", 1.0), ("q", 1.0)):
        if key in m and m[key] < lo:
            raise ConfigError(f"[material] {key} must be >= {lo}")
    if cfg.forcing["kind"] == "MANUFACTURED" and (cfg.kind is not ModelKind.PRESSURE_VISCOSITY
                                                  or cfg.mesh["dim"] != 1):
        raise ConfigError("MANUFACTURED forcing is defined for the 1D PRESSURE_VISCOSITY model")
    if cfg.study["kind"] == "DECAY" and cfg.study["window"] is None:
        raise ConfigError("[study] DECAY needs a window")
    for c in cfg.checks:
        if c not in CHECKS:
            raise ConfigError(f"[output] checks: unknown check {c!r}")
        if cfg.forcing["kind"] != "NONE":
            raise ConfigError("[output] energy inequality checks need an unforced run")


# --------------------------------------------------------------------------
# building blocks


def build_mesh(cfg: ScenarioConfig, level: int = 0) -> Mesh:
    if "file" in cfg.mesh:
        try:
            mesh = read_mesh_text(cfg.base_dir / cfg.mesh["file"])
        except (OSError, ValueError) as err:
            raise ConfigError(str(err)) from None
    else:
        counts = [c * 2 ** level for c in cfg.mesh["counts"]]
        L = cfg.mesh["lengths"]
        d = cfg.mesh["dim"]
        mesh = (interval_mesh(counts[0], L[0]) if d == 1 else rect_mesh(*counts, *L) if d == 2
                else box_mesh(*counts, *L))
    if cfg.tags:
        tags = mesh.element_tags.copy()
        c = mesh.centroids
        for tag, box in cfg.tags:
            lo, hi = np.array(box[0::2]), np.array(box[1::2])
            inside = np.all((c >= lo) & (c <= hi), axis=1)
            tags[inside] = int(tag)
        mesh = mesh.with_tags(tags)
    return mesh


def build_material(cfg: ScenarioConfig, mesh: Mesh) -> MaterialSpec:
    try:
        return MaterialSpec.from_tags(mesh, cfg.material, cfg.material_per_tag)
    except ValueError as err:
        raise ConfigError(f"material: {err}") from None


def _profile(name: str, mesh: Mesh, cfg: ScenarioConfig, seed: int, column: int):
    """Profile values and analytic gradient at the nodes (gradient may be None)."""
    x = mesh.nodes
    L = np.asarray(mesh.lengths) if mesh.lengths else x.max(axis=0)
    xi = x / L
    n, d = mesh.n_nodes, mesh.dim
    if name == "ZERO":
        return np.zeros(n), np.zeros((n, d))
    if name == "SINE" or name == "MANUFACTURED":
        s = np.sin(np.pi * xi)
        v = np.prod(s, axis=1)
        g = np.stack([np.pi / L[i] * np.cos(np.pi * xi[:, i]) * np.prod(np.delete(s, i, 1), axis=1)
                      for i in range(d)], axis=1)
        return v, g
    if name == "SINE2":
        s = np.sin(np.pi * xi) ** 2
        v = np.prod(s, axis=1)
        g = np.stack([np.pi / L[i] * np.sin(2 * np.pi * xi[:, i]) * np.prod(np.delete(s, i, 1), axis=1)
                      for i in range(d)], axis=1)
        return v, g
    if name == "TENT":
        from .constants import tent_field
        v = tent_field(mesh)
        return v / max(v.max(), 1e-300), None
    if name == "GAUSSIAN_BUMP":
        c = np.asarray(cfg.initial["center"] if cfg.initial["center"] else L / 2)
        w = cfg.initial["width"]
        r = x - c
        v = np.exp(-np.sum(r ** 2, axis=1) / (2 * w * w))
        return v, -r / (w * w) * v[:, None]
    if name == "RANDOM":
        rng = np.random.default_rng([seed, column])
        return rng.uniform(-1, 1, n), None
    if name == "FILE":
        data = np.loadtxt(cfg.base_dir / cfg.initial["file"], delimiter=",", skiprows=1, ndmin=2)
        return data[:, column], None
    raise ConfigError(f"unknown profile {name!r}")


def build_initial(cfg: ScenarioConfig, model: Model, seed: int = 0) -> State:
    mesh = model.mesh
    ini = cfg.initial
    fields = []
    for col, (pname, amp) in enumerate(((ini["profile"], ini["amplitude"]),
                                        (ini["velocity_profile"], ini["velocity_amplitude"]))):
        if pname == "FILE" and model.is_vector:
            data = np.loadtxt(cfg.base_dir / ini["file"], delimiter=",", skiprows=1, ndmin=2)
            v = data[:, col]
            if len(v) != model.ndof:
                raise ConfigError("initial file has the wrong number of rows")
        else:
            v, g = _profile(pname, mesh, cfg, seed, col)
            if len(v) != mesh.n_nodes:
                raise ConfigError("initial file has the wrong number of rows")
            if model.is_vector:
                if not ini["gradient"] and pname != "ZERO":
                    raise ConfigError("ELASTIC_COUPLED profiles need gradient = true (U = grad profile)")
                if g is None:
                    raise ConfigError(f"profile {pname} has no analytic gradient")
                v = g.T.ravel()
        v = amp * np.asarray(v, float)
        v[model.dirichlet_mask] = 0.0
        if model.is_vector and ini["project_gradients"]:
            v = asm.gradient_projection(mesh, asm.poisson_solve(mesh, v))
        fields.append(v)
    return State(0.0, fields[0], fields[1])


def build_model(cfg: ScenarioConfig, level: int = 0) -> Model:
    mesh = build_mesh(cfg, level)
    mat = build_material(cfg, mesh)
    forcing = None
    if cfg.forcing["kind"] == "MANUFACTURED":
        m = cfg.material
        forcing = manufactured_forcing(m.get("c2", 1.0), m.get("b", 1.0), m.get("delta", 0.0),
                                       m.get("k", 0.0), m.get("q", 1.0), cfg.forcing["amplitude"])
    try:
        return Model(cfg.kind, mesh, mat, forcing, cfg.floor)
    except ValueError as err:
        raise ConfigError(f"model: {err}") from None


def solve(cfg: ScenarioConfig, model: Model, initial: State, dt: float | None = None) -> Trajectory:
    dt = cfg.dt if dt is None else dt
    if cfg.mode == "FIXED_POINT":
        return fixed_point_outer(model, initial, cfg.T, dt, cfg.max_outer, cfg.tol,
                                 cfg.freeze_damping, **cfg.newton)
    return integrate(model, initial, cfg.T, dt, **cfg.newton)


# --------------------------------------------------------------------------
# SVG


def svg_line_plot(series, title: str, xlabel: str, ylabel: str, logy: bool = False,
                  width: int = 640, height: int = 400) -> str:
    """Standalone SVG 1.1 line plot; ``series`` is a list of ``(x, y, label)``."""
    ml, mr, mt, mb = 70, 20, 40, 50
    pw, ph = width - ml - mr, height - mt - mb
    pts = []
    for x, y, label in series:
        x, y = np.asarray(x, float), np.asarray(y, float)
        ok = np.isfinite(x) & np.isfinite(y) & ((y > 0) if logy else True)
        pts.append((x[ok], np.log10(y[ok]) if logy else y[ok], label))
    allx = np.concatenate([p[0] for p in pts]) if pts else np.array([])
    ally = np.concatenate([p[1] for p in pts]) if pts else np.array([])
    if len(allx) == 0:
        allx, ally = np.array([0.0, 1.0]), np.array([0.0, 1.0])
    x0, x1 = float(allx.min()), float(allx.max())
    y0, y1 = float(ally.min()), float(ally.max())
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5

    def sx(v):
        return ml + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return mt + ph - (v - y0) / (y1 - y0) * ph

    def esc(s):
        return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    out = ['<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
           '<!DOCTYPE svg PUBLIC "-//W3C//DTD SVG 1.1//EN" '
           '"http://www.w3.org/Graphics/SVG/1.1/DTD/svg11.dtd">',
           f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2}" y="22" text-anchor="middle" font-family="sans-serif" '
           f'font-size="15">{esc(title)}</text>',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for i in range(5):
        xv = x0 + i * (x1 - x0) / 4
        yv = y0 + i * (y1 - y0) / 4
        ylab = f"1e{yv:.1f}" if logy else f"{yv:.3g}"
        out.append(f'<line x1="{sx(xv):.2f}" y1="{mt + ph}" x2="{sx(xv):.2f}" y2="{mt + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{sx(xv):.2f}" y="{mt + ph + 18}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="11">{xv:.3g}</text>')
        out.append(f'<line x1="{ml - 5}" y1="{sy(yv):.2f}" x2="{ml}" y2="{sy(yv):.2f}" stroke="black"/>')
        out.append(f'<text x="{ml - 8}" y="{sy(yv) + 4:.2f}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="11">{ylab}</text>')
    out.append(f'<text x="{ml + pw / 2}" y="{height - 10}" text-anchor="middle" '
               f'font-family="sans-serif" font-size="12">{esc(xlabel)}</text>')
    out.append(f'<text x="16" y="{mt + ph / 2}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="12" transform="rotate(-90 16 {mt + ph / 2})">{esc(ylabel)}</text>')
    for i, (x, y, label) in enumerate(pts):
        if len(x) == 0:
            continue
        step = max(1, len(x) // 2000)
        coords = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x[::step], y[::step]))
        c = colors[i % len(colors)]
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{coords}"/>')
        out.append(f'<text x="{ml + pw - 8}" y="{mt + 16 + 14 * i}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="11" fill="{c}">{esc(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# outputs


def _write_solve_report(traj: Trajectory, path: Path) -> None:
    rep = traj.report
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "t", "newton_iters", "newton_residual", "degeneracy_margin"])
        w.writerow([0, repr(float(traj.times[0])), 0, "", repr(float(rep.degeneracy_margin[0]))])
        for n, (it, hist) in enumerate(zip(rep.newton_iters, rep.newton_residuals), start=1):
            w.writerow([n, repr(float(traj.times[n])), it, repr(float(hist[-1])),
                        repr(float(rep.degeneracy_margin[n]))])


def _write_contraction(traj: Trajectory, path: Path) -> None:
    rep = traj.report
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["outer_iteration", "difference", "ratio"])
        for m, d in enumerate(rep.fixed_point_diffs):
            ratio = rep.fixed_point_ratios[m - 1] if m >= 1 and m - 1 < len(rep.fixed_point_ratios) else ""
            w.writerow([m, repr(float(d)), "" if ratio == "" else repr(float(ratio))])


def _write_snapshots(traj: Trajectory, model: Model, times, path: Path) -> None:
    mesh = model.mesh
    nc = mesh.dim if model.is_vector else 1
    nn = mesh.n_nodes
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "node", "component"] + [f"x{i}" for i in range(mesh.dim)] + ["u", "ut"])
        for ts in times:
            n = int(np.argmin(np.abs(traj.times - ts)))
            for c in range(nc):
                for i in range(nn):
                    w.writerow([repr(float(traj.times[n])), i, c]
                               + [repr(float(v)) for v in mesh.nodes[i]]
                               + [repr(float(traj.u[n, c * nn + i])), repr(float(traj.ut[n, c * nn + i]))])


def _write_summary(rows, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quantity", "value"])
        for k, v in rows:
            w.writerow([k, repr(float(v)) if isinstance(v, (float, np.floating)) else v])


@dataclass
class RunResult:
    exit_code: int
    summary: list
    message: str = ""


def _refinement_study(cfg: ScenarioConfig, seed: int, summary: list) -> None:
    levels = cfg.study["levels"]
    errors, hs = [], []
    exact = None
    if cfg.forcing["kind"] == "MANUFACTURED":
        exact = manufactured_solution(cfg.forcing["amplitude"])[0]
    trajs = []
    for lev in range(levels):
        model = build_model(cfg, lev)
        initial = build_initial(cfg, model, seed)
        traj = solve(cfg, model, initial, cfg.dt / 2 ** lev)
        hs.append(float(np.max(model.mesh.diameters())))
        if exact is not None:
            errors.append(max(l2_error(model.mesh, traj.u[n], lambda x, t=t: exact(x, t))
                              for n, t in enumerate(traj.times)))
        trajs.append((model, traj))
    if exact is None:
        fine_model, fine = trajs[-1]
        for model, traj in trajs[:-1]:
            errors.append(_nested_error(model, traj, fine_model, fine))
        hs = hs[:-1]
    for i, (h, e) in enumerate(zip(hs, errors)):
        summary.append((f"h_level{i}", h))
        summary.append((f"error_level{i}", e))
        if i > 0 and e > 0 and errors[i - 1] > 0:
            summary.append((f"rate_level{i}", math.log(errors[i - 1] / e) / math.log(hs[i - 1] / h)))


def _nested_error(model, traj, fine_model, fine) -> float:
    """L_inf(L_2)-type nodal error against a finer nested solution."""
    key = {tuple(np.round(x, 12)): i for i, x in enumerate(fine_model.mesh.nodes)}
    idx = np.array([key[tuple(np.round(x, 12))] for x in model.mesh.nodes])
    if model.is_vector:
        nn_f = fine_model.mesh.n_nodes
        idx = np.concatenate([idx + c * nn_f for c in range(model.mesh.dim)])
    stride = int(round((len(fine.times) - 1) / (len(traj.times) - 1)))
    err = 0.0
    for n in range(len(traj.times)):
        diff = traj.u[n] - fine.u[n * stride, idx]
        err = max(err, lp_norm(model.mesh, diff))
    return err


def run_scenario(cfg: ScenarioConfig, out: Path, seed: int = 0, threads: int = 1) -> RunResult:
    """Run a validated scenario and write all artifacts into ``out``."""
    t_start = time.perf_counter()
    model = build_model(cfg)
    initial = build_initial(cfg, model, seed)
    summary = [("scenario", cfg.name), ("kind", cfg.kind.value), ("mode", cfg.mode),
               ("n_nodes", model.mesh.n_nodes), ("n_elements", model.mesh.n_elements),
               ("T", cfg.T), ("dt", cfg.dt), ("seed", seed), ("threads", threads)]
    out.mkdir(parents=True, exist_ok=True)
    try:
        traj = solve(cfg, model, initial)
    except DegeneracyError as err:
        summary += [("status", "degeneracy"), ("abort_time", err.t), ("abort_margin", err.margin)]
        _write_summary(summary, out / "summary.csv")
        return RunResult(EXIT_DEGENERACY, summary,
                         f"degeneracy abort at t={err.t:.6g}: margin {err.margin:.6g} <= {err.floor}")
    except SolverError as err:
        summary += [("status", "solver_failure"), ("abort_time", err.t)]
        _write_summary(summary, out / "summary.csv")
        return RunResult(EXIT_SOLVER, summary, str(err))
    checks = [c for c in cfg.checks]
    rep = energy_report(traj, model, checks)
    rep.write_csv(out / "energy.csv")
    _write_solve_report(traj, out / "solve_report.csv")
    snaps = cfg.snapshot_times or [traj.times[0], traj.times[-1]]
    _write_snapshots(traj, model, snaps, out / "snapshots.csv")
    r = traj.report
    summary += [("status", "ok"), ("steps", len(traj.times) - 1),
                ("min_degeneracy_margin", float(np.min(r.degeneracy_margin))),
                ("max_newton_iters", int(max(r.newton_iters, default=0))),
                ("E0_initial", rep.E0[0]), ("E0_final", rep.E0[-1]),
                ("E0_max_relative_drift", float(np.max(np.abs(rep.E0 - rep.E0[0])) / rep.E0[0])
                 if rep.E0[0] > 0 else 0.0),
                ("EW1_initial", rep.EW1[0]), ("EW1_final", rep.EW1[-1]),
                ("tol_energy", tol_energy(model))]
    for c in checks:
        chk = check_energy_inequality(traj, model, c)
        summary += [(f"check_{c}_margin", chk.margin), (f"check_{c}_passed", str(chk.passed))]
        if chk.constant is not None:
            summary.append((f"check_{c}_constant", chk.constant))
    if cfg.mode == "FIXED_POINT":
        summary += [("outer_iterations", r.outer_iterations), ("outer_converged", str(r.converged)),
                    ("max_contraction_ratio", max(r.fixed_point_ratios, default=0.0))]
        _write_contraction(traj, out / "contraction.csv")
        Path(out / "contraction.svg").write_text(svg_line_plot(
            [(np.arange(len(r.fixed_point_ratios)) + 1, r.fixed_point_ratios, "ratio"),
             (np.arange(len(r.fixed_point_diffs)), r.fixed_point_diffs, "|||v(m+1) - v(m)|||")],
            "fixed-point contraction", "outer iteration", "value (log)", logy=True))
    if cfg.bounds is not None:
        adm = check_admissibility(traj, model, cfg.bounds["m_bar"], cfg.bounds["M_bar"],
                                  cfg.bounds["kappa"], seed)
        summary += [(f"admissibility_{k}", v) for k, v in adm.observed.items()]
        summary += [("admissibility_member", str(adm.member)),
                    ("smallness_lhs", adm.smallness_lhs),
                    ("smallness_lhs_bound", adm.smallness_lhs_bound)]
    if cfg.study["kind"] == "DECAY":
        fit = decay_fit(traj.times, rep.EW1, tuple(cfg.study["window"]))
        summary += [("omega", fit.omega), ("r_squared", fit.r_squared),
                    ("window_start", fit.window[0]), ("window_end", fit.window[1])]
    elif cfg.study["kind"] == "SPATIAL_REFINEMENT":
        _refinement_study(cfg, seed, summary)
    Path(out / "energy.svg").write_text(svg_line_plot(
        [(rep.t, rep.E0, "E0"), (rep.t, rep.EW1, "EW1")], f"{cfg.name}: energy", "t",
        "energy (log)", logy=True))
    summary.append(("runtime_seconds", time.perf_counter() - t_start))
    _write_summary(summary, out / "summary.csv")
    return RunResult(EXIT_OK, summary)


# --------------------------------------------------------------------------
# entry points


def scenario_dir() -> Path:
    return Path(str(resources.files("westervelt_fem") / "scenarios"))


def list_scenarios() -> list[Path]:
    return sorted(scenario_dir().glob("*.ini"))


def _resolve(config: str) -> Path:
    p = Path(config)
    if p.exists():
        return p
    bundled = scenario_dir() / (config if config.endswith(".ini") else config + ".ini")
    return bundled if bundled.exists() else p


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="westervelt-fem",
                                     description="Damped Westervelt finite element scenarios")
    sub = parser.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="run a scenario config (path or bundled name)")
    run_p.add_argument("config")
    run_p.add_argument("--out", default=None, help="output directory (default out/<name>)")
    run_p.add_argument("--threads", type=int, default=1)
    run_p.add_argument("--seed", type=int, default=0)
    sub.add_parser("list", help="list bundled scenarios")
    args = parser.parse_args(argv)
    if args.command == "list":
        for p in list_scenarios():
            first = p.read_text().splitlines()[0].lstrip("#; ").strip()
            print(f"{p.stem:28s} {first}")
        return EXIT_OK
    if args.threads < 1 or not 0 <= args.seed < 2 ** 64:
        print("error: --threads must be >= 1 and --seed a u64", file=sys.stderr)
        return EXIT_CONFIG
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(args.threads)
    try:
        cfg = load_config(_resolve(args.config))
        out = Path(args.out) if args.out else Path("out") / cfg.name
        result = run_scenario(cfg, out, args.seed, args.threads)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # noqa: BLE001
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_OTHER
    if result.message:
        print(result.message, file=sys.stderr)
    print(f"{cfg.name}: exit {result.exit_code}, outputs in {out}")
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
