"""Command-line front end: expand, verify, sweep, selftest.

`thinrod <command> --config <path> [--out <dir>]` reads a strict JSON
config, runs the requested computation, and writes diff-able CSV / JSON
outputs (no binary formats).  All floating-point values are printed with
17 significant digits, so files round-trip exactly and reruns are
byte-identical.  Exit code 0 means every enabled check passed; failures
are printed as a machine-readable JSON list and yield exit code 1
(2 for configuration or solver errors).

Config schema (unknown fields are rejected, naming the offending path):

    {
      "curve":   {"kind": "straight" | "circular_arc" | "helix" | "sampled",
                  "s0": float, "radius": float, "a": float, "b": float,
                  "points": [[x,y,z], ...],
                  "twist": "none" | "linear" | "tabulated",
                  "twist_rate": float, "twist_values": [float, ...]},
      "section": {"kind": "square" | "disk" | "mask", "side": float,
                  "radius": float, "n": int, "center": [float, float],
                  "path": "mask-file"},
      "M_s":     int   (default 256, grid nodes along the curve),
      "modes":   [[n, m], ...]  (default [[1, 1]]),
      "order":   int   (default 4, expansion order N),
      "epsilon": float or [float, ...]  (required by verify/sweep),
      "solver":  {"tol": float, "dense_cutoff": int, "maxiter": int,
                  "count": int  (direct eigenpairs; default auto)},
      "output":  {"prefix": str  (default "thinrod")},
      "dump_matrix": bool  (write the assembled matrix per epsilon),
      "thresholds": {"slope_min": 1.5, "slope_max": 2.5,
                     "rho_slope_min": 1.5},
      "rng_free": true  (informational; anything else is rejected)
    }

Heavy per-epsilon solves run on a small thread pool over immutable
contexts; comparison, checks, and all file writing happen serially in a
fixed order afterwards.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import asymptotic_engine as engine
from . import direct_oracle as oracle
from .cross_section import disk_grid, mask_grid, solve_section, square_grid
from .curve_operator import solve_reduced
from .errors import ConfigError, ThinRodError, UnderresolvedWindow
from .geometry import CurveSpec, build_frame

_DEFAULT_ORDER = 4
_DEFAULT_M_S = 256
_DEFAULT_SECTION_N = 96
_DEFAULT_THRESHOLDS = {"slope_min": 1.5, "slope_max": 2.5, "rho_slope_min": 1.5}

_VERIFY_HEADER = "eps,m,lambda_direct,lambda_partial,abs_gap,residual_rho,sin_angle"
_EXPAND_HEADER = "n,m,i,lambda_i"


def _f17(x) -> str:
    x = float(x)
    if x == 0.0:  # canonicalize -0.0 so exact zeros print as "0"
        x = 0.0
    return format(x, ".17g")


# ----------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------


@dataclass
class RunConfig:
    """Parsed, validated run description with the geometry prebuilt."""

    raw: dict
    curve: CurveSpec
    frame: object
    grid: object
    M_s: int
    modes: list
    order: int
    epsilons: list | None
    epsilon_is_list: bool
    solver: dict
    prefix: str
    dump_matrix: bool
    thresholds: dict


def _reject_unknown(d: dict, allowed, path: str) -> None:
    for key in d:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown field")


def _get(d, key, kind, path, default=None, required=False):
    if key not in d:
        if required:
            raise ConfigError(f"{path}.{key}" if path else key, "missing field")
        return default
    v = d[key]
    if kind is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{path}.{key}" if path else key, "expected a number")
        return float(v)
    if kind is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{path}.{key}" if path else key, "expected an integer")
        return v
    if not isinstance(v, kind):
        raise ConfigError(
            f"{path}.{key}" if path else key, f"expected {kind.__name__}"
        )
    return v


def _parse_curve(d: dict) -> CurveSpec:
    _reject_unknown(
        d,
        {"kind", "s0", "radius", "a", "b", "points", "twist", "twist_rate",
         "twist_values"},
        "curve",
    )
    kind = _get(d, "kind", str, "curve", required=True)
    if kind not in ("straight", "circular_arc", "helix", "sampled"):
        raise ConfigError("curve.kind", f"unknown curve kind {kind!r}")
    twist = _get(d, "twist", str, "curve", default="none")
    points = d.get("points")
    if points is not None:
        points = np.asarray(points, dtype=float)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ConfigError("curve.points", "expected a list of [x, y, z]")
    tv = d.get("twist_values")
    if tv is not None:
        tv = np.asarray(tv, dtype=float)
    return CurveSpec(
        kind=kind,
        s0=_get(d, "s0", float, "curve", default=0.0),
        radius=_get(d, "radius", float, "curve"),
        a=_get(d, "a", float, "curve"),
        b=_get(d, "b", float, "curve"),
        points=points,
        twist=twist,
        twist_rate=_get(d, "twist_rate", float, "curve", default=0.0),
        twist_values=tv,
    )


def _parse_section(d: dict):
    _reject_unknown(d, {"kind", "side", "radius", "n", "center", "path"}, "section")
    kind = _get(d, "kind", str, "section", required=True)
    n = _get(d, "n", int, "section", default=_DEFAULT_SECTION_N)
    center = d.get("center", [0.0, 0.0])
    if not (isinstance(center, list) and len(center) == 2):
        raise ConfigError("section.center", "expected [c2, c3]")
    center = (float(center[0]), float(center[1]))
    if kind == "square":
        return square_grid(_get(d, "side", float, "section", default=1.0), n, center)
    if kind == "disk":
        return disk_grid(_get(d, "radius", float, "section", default=0.5), n, center)
    if kind == "mask":
        return mask_grid(_get(d, "path", str, "section", required=True))
    raise ConfigError("section.kind", f"unknown section kind {kind!r}")


def parse_config(path) -> RunConfig:
    """Read and validate a JSON run config; build the geometry it names.

    Any schema violation raises ConfigError carrying the offending field
    path; epsilon values are checked against the geometry (the transformed
    weight 1 - eps q must stay above 1/2).
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(str(path), f"cannot read config: {e}") from e
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(str(path), f"invalid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(str(path), "top level must be an object")
    _reject_unknown(
        raw,
        {"curve", "section", "M_s", "modes", "order", "epsilon", "solver",
         "output", "dump_matrix", "thresholds", "rng_free"},
        "",
    )
    if "curve" not in raw:
        raise ConfigError("curve", "missing field")
    if "section" not in raw:
        raise ConfigError("section", "missing field")
    if raw.get("rng_free", True) is not True:
        raise ConfigError("rng_free", "runs are always deterministic; must be true")

    curve = _parse_curve(_get(raw, "curve", dict, "", required=True))
    grid = _parse_section(_get(raw, "section", dict, "", required=True))
    M_s = _get(raw, "M_s", int, "", default=_DEFAULT_M_S)
    order = _get(raw, "order", int, "", default=_DEFAULT_ORDER)
    if order < 1:
        raise ConfigError("order", "expansion order must be >= 1")

    modes = raw.get("modes", [[1, 1]])
    if not isinstance(modes, list) or not modes:
        raise ConfigError("modes", "expected a non-empty list of [n, m]")
    parsed_modes = []
    for k, nm in enumerate(modes):
        if (
            not isinstance(nm, list)
            or len(nm) != 2
            or not all(isinstance(v, int) and not isinstance(v, bool) for v in nm)
            or nm[0] < 1
            or nm[1] < 1
        ):
            raise ConfigError(f"modes[{k}]", "expected [n >= 1, m >= 1]")
        parsed_modes.append((nm[0], nm[1]))

    eps_raw = raw.get("epsilon")
    eps_is_list = isinstance(eps_raw, list)
    if eps_raw is None:
        epsilons = None
    else:
        values = eps_raw if eps_is_list else [eps_raw]
        epsilons = []
        for k, v in enumerate(values):
            if isinstance(v, bool) or not isinstance(v, (int, float)) or v <= 0:
                raise ConfigError(f"epsilon[{k}]" if eps_is_list else "epsilon",
                                  "expected a positive number")
            epsilons.append(float(v))
        if len(set(epsilons)) != len(epsilons):
            raise ConfigError("epsilon", "values must be distinct")

    solver = _get(raw, "solver", dict, "", default={})
    _reject_unknown(solver, {"tol", "dense_cutoff", "maxiter", "count"}, "solver")
    solver = {
        "tol": _get(solver, "tol", float, "solver", default=1e-8),
        "dense_cutoff": _get(solver, "dense_cutoff", int, "solver", default=2048),
        "maxiter": _get(solver, "maxiter", int, "solver", default=150),
        "count": _get(solver, "count", int, "solver", default=0),
    }
    output = _get(raw, "output", dict, "", default={})
    _reject_unknown(output, {"prefix"}, "output")
    prefix = _get(output, "prefix", str, "output", default="thinrod")
    thresholds = dict(_DEFAULT_THRESHOLDS)
    user_thr = _get(raw, "thresholds", dict, "", default={})
    _reject_unknown(user_thr, set(_DEFAULT_THRESHOLDS), "thresholds")
    for key in user_thr:
        thresholds[key] = _get(user_thr, key, float, "thresholds")
    dump = raw.get("dump_matrix", False)
    if not isinstance(dump, bool):
        raise ConfigError("dump_matrix", "expected true or false")

    try:
        frame = build_frame(curve, M_s)
    except ThinRodError as e:
        raise ConfigError("curve", str(e)) from e
    if epsilons:
        q = (
            frame.kappa1[:, None] * grid.xi2[None, :]
            - frame.kappa2[:, None] * grid.xi3[None, :]
        )
        for v in epsilons:
            try:
                engine.check_epsilon(q, v)
            except ThinRodError as e:
                raise ConfigError("epsilon", str(e)) from e

    return RunConfig(
        raw=raw,
        curve=curve,
        frame=frame,
        grid=grid,
        M_s=M_s,
        modes=parsed_modes,
        order=order,
        epsilons=epsilons,
        epsilon_is_list=eps_is_list,
        solver=solver,
        prefix=prefix,
        dump_matrix=dump,
        thresholds=thresholds,
    )


# ----------------------------------------------------------------------
# shared pipeline pieces
# ----------------------------------------------------------------------


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write(text)


def _write_json(path: Path, obj) -> None:
    _write_text(path, json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    return x


def _solve_spectrum(cfg: RunConfig):
    count = max(2, max(n for n, _ in cfg.modes) + 1)
    return solve_section(cfg.grid, count)


def _run_states(cfg: RunConfig, spectrum):
    states = []
    for n, m in cfg.modes:
        try:
            states.append(engine.run_recurrence(cfg.frame, spectrum, n, m, cfg.order))
        except ThinRodError as e:
            if hasattr(e, "add_note"):
                e.add_note(f"while expanding mode (n={n}, m={m})")
            raise
    return states


def _auto_count(cfg: RunConfig, spectrum) -> int:
    """Direct eigenpairs needed to cover the requested modes, plus guards."""
    if cfg.solver["count"] > 0:
        return cfg.solver["count"]
    eps = min(cfg.epsilons)
    hs, s0 = cfg.frame.h, cfg.frame.s0
    surrogate = []
    for k in range(spectrum.count):
        for m in range(1, cfg.M_s - 1):
            theta = (4 / hs**2) * np.sin(m * np.pi * hs / (2 * s0)) ** 2
            surrogate.append((eps**-2.0 * spectrum.lam[k] + theta, k + 1, m))
    surrogate.sort()
    top = 0
    for n, m in cfg.modes:
        for rank, (_, kn, km) in enumerate(surrogate):
            if (kn, km) == (n, m):
                top = max(top, rank + 1)
                break
        else:
            raise ConfigError("modes", f"mode ({n}, {m}) beyond the resolvable window")
    return top + 2


def _verify_one_epsilon(cfg: RunConfig, spectrum, states, eps: float, out_dir, K):
    op = oracle.assemble(cfg.frame, spectrum, eps)
    sol = oracle.solve_direct(
        op,
        K,
        tol=cfg.solver["tol"],
        dense_cutoff=cfg.solver["dense_cutoff"],
        maxiter=cfg.solver["maxiter"],
    )
    if cfg.dump_matrix:
        oracle.dump_matrix(op, Path(out_dir) / f"{cfg.prefix}_H_eps{eps:g}.mtx")
    return sol


def _report_rows(cfg, sol, states, eps):
    captured = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rep = oracle.compare(sol, states, eps)
    for c in caught:
        if issubclass(c.category, UnderresolvedWindow):
            captured.append(str(c.message))
    return rep, captured


def _row_failures(eps, rep):
    failures = []
    for r in rep.rows:
        if "pairing" in r.flags:
            failures.append(
                {"kind": "pairing", "eps": eps, "n": r.n, "m": r.m,
                 "message": "nearest-eigenvalue matching not injective"}
            )
        if r.bound_ok is False:
            failures.append(
                {"kind": "certificate", "eps": eps, "n": r.n, "m": r.m,
                 "message": "nearest computed eigenvalue farther than rho"}
            )
    return failures


def _csv_line(eps, r) -> str:
    return ",".join(
        [
            _f17(eps),
            str(r.m),
            _f17(r.lambda_direct),
            _f17(r.lambda_partial),
            _f17(r.abs_gap),
            _f17(r.rho),
            _f17(r.sin_angle),
        ]
    )


def _row_json(eps, r) -> dict:
    return {
        "eps": eps,
        "n": r.n,
        "m": r.m,
        "match_index": r.match_index,
        "lambda_direct": r.lambda_direct,
        "lambda_partial": r.lambda_partial,
        "abs_gap": r.abs_gap,
        "residual_rho": r.rho,
        "sin_angle": r.sin_angle,
        "neighbor_gap": r.neighbor_gap,
        "bound_ok": r.bound_ok,
        "flags": list(r.flags),
    }


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------


def cmd_expand(cfg: RunConfig, out_dir) -> list:
    """Expansion coefficients for every configured mode.

    Writes `<prefix>_coefficients.csv` with rows n,m,i,lambda_i for
    i = -2 .. N-2, and a JSON sidecar with the per-mode section data
    (rotational coefficient, moments, spectral gaps), solvability defects,
    and grid metadata.  Returns the failure list (always empty unless an
    engine invariant is violated, which raises instead).
    """
    out_dir = Path(out_dir)
    spectrum = _solve_spectrum(cfg)
    states = _run_states(cfg, spectrum)
    lines = [_EXPAND_HEADER]
    sidecar_modes = []
    for st in states:
        for i in range(-2, st.N - 1):
            lines.append(f"{st.n},{st.m},{i},{_f17(st.lam_i(i))}")
        k = st.n - 1
        reduced_modes = solve_reduced(st.ctx.reduced, st.m + 1)
        lam0_next = reduced_modes[st.m].lam0
        sidecar_modes.append(
            {
                "n": st.n,
                "m": st.m,
                "C_n": float(spectrum.C[k]),
                "C_n_interior": float(spectrum.C_int[k]),
                "moments": {
                    "m2": float(spectrum.m2[k]),
                    "m3": float(spectrum.m3[k]),
                    "a2": float(spectrum.a2[k]),
                    "a3": float(spectrum.a3[k]),
                },
                "gaps": {
                    "section": float(spectrum.lam[k + 1] - spectrum.lam[k])
                    if k + 1 < spectrum.count
                    else None,
                    "reduced": float(lam0_next - st.lam0),
                },
                "lambda_diag": float(st.lam_diag),
                "max_solve_defect": float(st.max_defect),
                "solve_defects": [[label, float(v)] for label, v in st.solve_defects],
            }
        )
    sidecar = {
        "command": "expand",
        "config": cfg.raw,
        "order": cfg.order,
        "grid": _grid_metadata(cfg),
        "modes": sidecar_modes,
    }
    _write_text(out_dir / f"{cfg.prefix}_coefficients.csv", "\n".join(lines) + "\n")
    _write_json(out_dir / f"{cfg.prefix}_expand.json", sidecar)
    return []


def _grid_metadata(cfg: RunConfig) -> dict:
    return {
        "M_s": cfg.M_s,
        "h_s": float(cfg.frame.h),
        "s0": float(cfg.frame.s0),
        "section_kind": cfg.grid.kind,
        "section_h": float(cfg.grid.h),
        "section_interior_nodes": int(cfg.grid.n_interior),
    }


def cmd_verify(cfg: RunConfig, out_dir) -> list:
    """Single-epsilon comparison of the expansion against the direct solve.

    Writes the per-mode table `<prefix>_verify.csv` and a JSON report with
    certificates and any window warnings.  Returns the failure list.
    """
    if not cfg.epsilons or len(cfg.epsilons) != 1:
        raise ConfigError("epsilon", "verify needs exactly one epsilon value")
    out_dir = Path(out_dir)
    eps = cfg.epsilons[0]
    spectrum = _solve_spectrum(cfg)
    states = _run_states(cfg, spectrum)
    K = _auto_count(cfg, spectrum)
    sol = _verify_one_epsilon(cfg, spectrum, states, eps, out_dir, K)
    rep, window_warnings = _report_rows(cfg, sol, states, eps)
    failures = _row_failures(eps, rep)
    lines = [_VERIFY_HEADER] + [_csv_line(eps, r) for r in rep.rows]
    report = {
        "command": "verify",
        "config": cfg.raw,
        "grid": _grid_metadata(cfg),
        "eigenpairs_computed": K,
        "rows": [_row_json(eps, r) for r in rep.rows],
        "warnings": window_warnings,
        "failures": failures,
        "ok": not failures,
    }
    _write_text(out_dir / f"{cfg.prefix}_verify.csv", "\n".join(lines) + "\n")
    _write_json(out_dir / f"{cfg.prefix}_verify.json", report)
    return failures


def _fit_slope(eps_list, values):
    """log-log least-squares slope, or None when the signal sits at noise."""
    v = np.asarray(values)
    if np.any(v <= 0):
        return None
    x, y = np.log(np.asarray(eps_list)), np.log(v)
    slope = float(np.polyfit(x, y, 1)[0])
    return slope


def cmd_sweep(cfg: RunConfig, out_dir) -> list:
    """Epsilon sweep: per-epsilon comparison tables plus fitted rates.

    Needs at least two epsilon values.  Fits log-log slopes of the
    eigenvalue gap and of the residual certificate per mode; slopes are
    reported as null when the gaps sit at solver noise (a terminating
    expansion leaves nothing to fit).  Returns the failure list.
    """
    if not cfg.epsilons or len(cfg.epsilons) < 2:
        raise ConfigError("epsilon", "sweep needs a list of at least two values")
    out_dir = Path(out_dir)
    spectrum = _solve_spectrum(cfg)
    states = _run_states(cfg, spectrum)
    K = _auto_count(cfg, spectrum)
    eps_order = sorted(cfg.epsilons, reverse=True)

    with ThreadPoolExecutor(max_workers=min(3, len(eps_order))) as pool:
        sols = list(
            pool.map(
                lambda e: _verify_one_epsilon(cfg, spectrum, states, e, out_dir, K),
                eps_order,
            )
        )

    lines = [_VERIFY_HEADER]
    rows_json, failures, window_warnings = [], [], []
    reports = []
    for eps, sol in zip(eps_order, sols):
        rep, caught = _report_rows(cfg, sol, states, eps)
        window_warnings.extend(caught)
        failures.extend(_row_failures(eps, rep))
        for r in rep.rows:
            lines.append(_csv_line(eps, r))
            rows_json.append(_row_json(eps, r))
        reports.append(rep)

    noise = 1e-9 * max(abs(r.lambda_direct) for rep in reports for r in rep.rows)
    slopes = {}
    for idx, (n, m) in enumerate(cfg.modes):
        gaps = [rep.rows[idx].abs_gap for rep in reports]
        rhos = [rep.rows[idx].rho for rep in reports]
        gap_slope = None if min(gaps) <= noise else _fit_slope(eps_order, gaps)
        rho_slope = None if min(rhos) <= noise else _fit_slope(eps_order, rhos)
        slopes[f"n{n}_m{m}"] = {"gap": gap_slope, "rho": rho_slope}
        thr = cfg.thresholds
        if gap_slope is not None and not (
            thr["slope_min"] <= gap_slope <= thr["slope_max"]
        ):
            failures.append(
                {"kind": "rate", "n": n, "m": m, "slope": gap_slope,
                 "message": "eigenvalue gap rate outside configured window"}
            )
        if rho_slope is not None and rho_slope < thr["rho_slope_min"]:
            failures.append(
                {"kind": "rate", "n": n, "m": m, "slope": rho_slope,
                 "message": "residual certificate rate below threshold"}
            )

    report = {
        "command": "sweep",
        "config": cfg.raw,
        "grid": _grid_metadata(cfg),
        "eigenpairs_computed": K,
        "rows": rows_json,
        "slopes": slopes,
        "thresholds": cfg.thresholds,
        "warnings": window_warnings,
        "failures": failures,
        "ok": not failures,
    }
    _write_text(out_dir / f"{cfg.prefix}_sweep.csv", "\n".join(lines) + "\n")
    _write_json(out_dir / f"{cfg.prefix}_sweep.json", report)
    return failures


# ----------------------------------------------------------------------
# selftest
# ----------------------------------------------------------------------


def _selftest_checks():
    """Quick end-to-end checks of the documented exact invariants."""
    checks = []

    def check(name):
        def wrap(fn):
            checks.append((name, fn))
            return fn

        return wrap

    @check("straight rod expansion terminates at order zero")
    def _(tmp):
        fr = build_frame(CurveSpec("straight", s0=np.pi), 20)
        spec = solve_section(square_grid(1.0, 10), 2)
        st = engine.run_recurrence(fr, spec, 1, 1, 4)
        assert st.lam_i(-1) == 0.0, "lambda_{-1} must vanish identically"
        assert all(st.lam_i(i) == 0.0 for i in range(1, st.N - 1)), (
            "corrections above order zero must vanish"
        )
        assert st.max_defect == 0.0

    @check("lambda_{-1} vanishes identically on a curved rod")
    def _(tmp):
        fr = build_frame(CurveSpec("circular_arc", s0=2.0, radius=1.5), 20)
        spec = solve_section(square_grid(1.0, 10, center=(0.1, 0.0)), 2)
        st = engine.run_recurrence(fr, spec, 1, 1, 3)
        assert st.lam_i(-1) == 0.0

    @check("assembled pencil is exactly symmetric and positive")
    def _(tmp):
        fr = build_frame(
            CurveSpec("helix", s0=3.0, a=1.0, b=0.5, twist="linear", twist_rate=0.6),
            20,
        )
        op = oracle.assemble(fr, square_grid(1.0, 10, center=(0.1, 0.0)), 0.2)
        res = oracle.operator_checks(op)
        assert res["symmetry_defect"] == 0.0
        assert res["positive_definite"]
        lo, hi = res["b_range"]
        assert 0.5 < lo <= hi < 1.5

    @check("direct solve reproduces the separable spectrum")
    def _(tmp):
        fr = build_frame(CurveSpec("straight", s0=np.pi), 20)
        spec = solve_section(square_grid(1.0, 10), 3)
        op = oracle.assemble(fr, spec, 0.2)
        sol = oracle.solve_direct(op, 3)
        ref = [v for v, _, _ in oracle.separable_eigenvalues(op, 3)]
        err = np.abs(sol.lam - np.asarray(ref)) / np.asarray(ref)
        assert err.max() < 1e-8, f"relative error {err.max():.3e}"

    @check("residual certificate bounds the nearest eigenvalue")
    def _(tmp):
        fr = build_frame(CurveSpec("straight", s0=np.pi, twist="linear",
                                   twist_rate=0.8), 20)
        spec = solve_section(square_grid(1.0, 10), 2)
        op = oracle.assemble(fr, spec, 0.2)
        sol = oracle.solve_direct(op, 3)
        rho, ok = oracle.residual_certificate(
            op, float(sol.lam[0]), sol.vectors[:, 0], sol
        )
        assert rho < 1e-8 and ok is True

    @check("closed-form lambda_1 matches the recurrence")
    def _(tmp):
        fr = build_frame(CurveSpec("circular_arc", s0=2.0, radius=1.5), 24)
        spec = solve_section(square_grid(1.0, 10, center=(0.15, 0.0)), 2)
        st = engine.run_recurrence(fr, spec, 1, 1, 3)
        closed = engine.lambda1_closed(st.ctx, st.Psi[0], st.lam0)
        scale = max(abs(st.lam_i(1)), abs(st.lam_i(0)), 1.0)
        assert abs(st.lam_i(1) - closed) < 1e-10 * scale, (
            f"recurrence {st.lam_i(1)!r} vs closed form {closed!r}"
        )

    @check("coefficient series matches the assembled operator")
    def _(tmp):
        fr = build_frame(
            CurveSpec("helix", s0=3.0, a=1.0, b=0.5, twist="linear", twist_rate=0.6),
            20,
        )
        spec = solve_section(square_grid(1.0, 10, center=(0.1, 0.0)), 2)
        op = oracle.assemble(fr, spec, 0.2)
        assert oracle.series_defect(op, 12) < 1e-9

    @check("expansion output is byte-identical across reruns")
    def _(tmp):
        cfg = {
            "curve": {"kind": "circular_arc", "s0": 2.0, "radius": 1.5},
            "section": {"kind": "square", "side": 1.0, "n": 10,
                        "center": [0.1, 0.0]},
            "M_s": 20,
            "order": 3,
            "modes": [[1, 1]],
        }
        cfg_path = tmp / "selftest.json"
        _write_json(cfg_path, cfg)
        paths = []
        for run in ("a", "b"):
            run_cfg = parse_config(cfg_path)
            cmd_expand(run_cfg, tmp / run)
            paths.append((tmp / run / "thinrod_coefficients.csv").read_bytes())
        assert paths[0] == paths[1], "reruns differ"

    return checks


def cmd_selftest(out_dir) -> list:
    """Run the built-in invariant checks; one PASS/FAIL line each."""
    import tempfile

    failures = []
    results = []
    with tempfile.TemporaryDirectory() as tmp:
        for name, fn in _selftest_checks():
            try:
                fn(Path(tmp))
            except Exception as e:  # noqa: BLE001 - report, do not abort
                failures.append({"kind": "selftest", "name": name, "message": str(e)})
                results.append((name, f"FAIL ({e})"))
            else:
                results.append((name, "PASS"))
    for name, status in results:
        print(f"{status:4s} {name}" if status == "PASS" else f"{status} {name}")
    if out_dir is not None:
        _write_json(
            Path(out_dir) / "thinrod_selftest.json",
            {"command": "selftest",
             "results": [{"name": n, "status": s} for n, s in results],
             "failures": failures, "ok": not failures},
        )
    return failures


# ----------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="thinrod",
        description="Asymptotic eigenvalue expansions for thin curved twisted "
        "rods, verified against a direct sparse eigensolve.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_config in (
        ("expand", True),
        ("verify", True),
        ("sweep", True),
        ("selftest", False),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", required=needs_config)
        p.add_argument("--out", default=".")
    args = parser.parse_args(argv)

    try:
        if args.command == "selftest":
            failures = cmd_selftest(args.out)
        else:
            cfg = parse_config(args.config)
            failures = {
                "expand": cmd_expand,
                "verify": cmd_verify,
                "sweep": cmd_sweep,
            }[args.command](cfg, args.out)
    except ConfigError as e:
        print(json.dumps({"failures": [
            {"kind": "config", "path": e.path, "message": str(e)}
        ]}))
        return 2
    except ThinRodError as e:
        print(json.dumps({"failures": [
            {"kind": type(e).__name__, "message": str(e)}
        ]}))
        return 2

    if failures:
        print(json.dumps({"failures": _jsonable(failures)}))
        return 1
    print(json.dumps({"failures": []}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
