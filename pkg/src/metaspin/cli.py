"""Command-line front end: sweeps, figure data, derivation printout, checks.

Every data subcommand writes CSV (header row, LF line endings) or a JSON
mirror of the same rows. Settings come from built-in defaults, then an
optional INI file (``--config``; keys in a ``[run]`` section named like the
long flags with underscores), then command-line flags.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

log = logging.getLogger("metaspin")

CACHE_ENV = "METASPIN_CACHE_DIR"
COMMANDS = ("steady-sweep", "barriers", "gap-scaling", "portrait", "instanton", "derive", "verify")


class ConfigError(ValueError):
    pass


def artifact_version() -> str:
    try:
        from importlib.metadata import version

        return version("artifact")
    except Exception:  # not installed
        return "0+unknown"


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    command: str
    omega: float = 0.25
    gamma_min: float = 1.0
    gamma_max: float = 10.0
    gamma_step: float = 1.0
    spin_j: tuple[float, ...] = (32.0,)
    precision: str = "auto"
    g: float = 1.0
    e_index: int | None = None
    tau: float = 1.0
    ds: float = 1e-3
    s_max: float = 50.0
    out: str | None = None
    format: str = "csv"
    cache_dir: str | None = None
    jobs: int = 1
    grid_n: int = 21
    v_range: tuple[float, float] = (-2.0, 2.0)
    w_range: tuple[float, float] = (-2.0, 2.0)
    stride: int = 10

    def validate(self) -> "RunConfig":
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if not self.gamma_step > 0:
            raise ConfigError("--gamma-step must be positive")
        if self.gamma_max < self.gamma_min:
            raise ConfigError("empty Gamma grid: --gamma-max is below --gamma-min")
        if not self.spin_j:
            raise ConfigError("empty J list")
        for j in self.spin_j:
            if j <= 0 or abs(2 * j - round(2 * j)) > 1e-12:
                raise ConfigError(f"J={j} is not a positive multiple of 1/2")
        for name in ("tau", "ds", "s_max", "g"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.precision not in ("auto", "double", "extended"):
            raise ConfigError(f"unknown precision mode {self.precision!r}")
        if self.format not in ("csv", "json", "text"):
            raise ConfigError(f"unknown format {self.format!r}")
        if self.jobs < 1 or self.grid_n < 2 or self.stride < 1:
            raise ConfigError("--jobs and --stride must be >= 1, --grid-n >= 2")
        return self

    def gamma_grid(self) -> list[float]:
        n = int(math.floor((self.gamma_max - self.gamma_min) / self.gamma_step + 1e-9)) + 1
        return [round(self.gamma_min + i * self.gamma_step, 12) for i in range(n)]

    def params(self, big_gamma: float, spin_j: float = 8.0):
        from .model import ModelParams

        return ModelParams(omega=self.omega, gamma=1.0, big_gamma=big_gamma, spin_j=spin_j)

    def trace_options(self):
        from .instanton import TraceOptions

        return TraceOptions(tau=self.tau, ds=self.ds, s_max=self.s_max)


_FLOAT_KEYS = {"omega", "gamma_min", "gamma_max", "gamma_step", "g", "tau", "ds", "s_max"}
_INT_KEYS = {"e_index", "jobs", "grid_n", "stride"}
_STR_KEYS = {"precision", "out", "format", "cache_dir"}
_PAIR_KEYS = {"v_range", "w_range"}


def read_config_file(path: str) -> dict:
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ConfigError(f"cannot read config file {path}")
    if "run" not in parser:
        raise ConfigError(f"{path} has no [run] section")
    out = {}
    for key, raw in parser["run"].items():
        key = key.replace("-", "_")
        if key in _FLOAT_KEYS:
            out[key] = float(raw)
        elif key in _INT_KEYS:
            out[key] = int(raw)
        elif key in _STR_KEYS:
            out[key] = raw
        elif key in _PAIR_KEYS:
            a, b = (float(x) for x in raw.split(","))
            out[key] = (a, b)
        elif key == "spin_j":
            out[key] = tuple(float(x) for x in raw.replace(",", " ").split())
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return out


# ---------------------------------------------------------------------------
# cache


def _canon(x) -> str:
    if isinstance(x, float):
        return repr(x)
    if isinstance(x, (list, tuple)):
        return "[" + ",".join(_canon(y) for y in x) + "]"
    if isinstance(x, dict):
        return "{" + ",".join(f"{k}:{_canon(x[k])}" for k in sorted(x)) + "}"
    return str(x)


class ResultCache:
    """JSON records keyed by a hash of the canonical parameter rendering."""

    def __init__(self, directory: str | None):
        self.dir = Path(directory) if directory else None
        if self.dir:
            self.dir.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(kind: str, params: dict) -> str:
        return hashlib.sha256(f"{kind}|{_canon(params)}".encode()).hexdigest()

    def get(self, kind: str, params: dict) -> dict | None:
        if not self.dir:
            return None
        path = self.dir / f"{self.key(kind, params)}.json"
        if not path.exists():
            return None
        self.hits += 1
        return json.loads(path.read_text())["outputs"]

    def put(self, kind: str, params: dict, outputs: dict, precision: str = "double") -> None:
        self.misses += 1
        if not self.dir:
            return
        record = {
            "kind": kind,
            "params": params,
            "outputs": outputs,
            "provenance": {"version": artifact_version(), "precision": precision, "created": time.time()},
        }
        path = self.dir / f"{self.key(kind, params)}.json"
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(record, sort_keys=True))
        tmp.replace(path)


def _cached_map(cfg: RunConfig, cache: ResultCache, kind: str, keys: list[dict], worker: Callable):
    """Look up ``keys`` in the cache, compute the rest in a pool, keep order."""
    results: list = [cache.get(kind, k) for k in keys]
    todo = [i for i, r in enumerate(results) if r is None]
    if todo:
        pending = [keys[i] for i in todo]
        if cfg.jobs > 1 and len(pending) > 1:
            with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
                fresh = list(pool.map(worker, pending))
        else:
            fresh = [worker(k) for k in pending]
        for i, out in zip(todo, fresh):
            results[i] = out
            cache.put(kind, keys[i], out, out.get("precision", cfg.precision))
    return results


# ---------------------------------------------------------------------------
# output


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_table(cfg: RunConfig, columns: Sequence[str], rows: Iterable[Sequence], extra: dict | None = None):
    rows = [list(r) for r in rows]
    if cfg.format == "json":
        payload = {"columns": list(columns), "rows": [dict(zip(columns, r)) for r in rows]}
        if extra:
            payload.update(extra)
        text = json.dumps(payload, indent=1, default=float) + "\n"
    else:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(columns)
        for r in rows:
            writer.writerow([_fmt(x) for x in r])
        text = buf.getvalue()
    _emit(cfg, text)


def _emit(cfg: RunConfig, text: str):
    if cfg.out:
        with open(cfg.out, "w", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _note(msg: str):
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# workers (top level so they pickle)


def _steady_worker(key: dict) -> dict:
    from .liouvillian import build_reduced_generator, magnetization_z, steady_state
    from .model import ModelParams

    p = ModelParams(key["omega"], 1.0, key["gamma"], key["two_j"] / 2)
    W = build_reduced_generator(p)
    st = steady_state(W, g=key["g"], e_index=key["e_index"], precision=key["precision"])
    return {"m_z": magnetization_z(st), "precision": st.precision}


def _gap_worker(key: dict) -> dict:
    from .liouvillian import PrecisionError, EigenError, build_reduced_generator, liouvillian_gap_report
    from .model import ModelParams

    p = ModelParams(key["omega"], 1.0, key["gamma"], key["two_j"] / 2)
    try:
        rep = liouvillian_gap_report(
            build_reduced_generator(p), precision=key["precision"], g=key["g"], e_index=key["e_index"])
    except (PrecisionError, EigenError) as exc:
        return {"lambda": None, "error": str(exc), "precision": key["precision"]}
    return {"lambda": rep.gap, "method": rep.method,
            "precision": "extended" if rep.method.startswith("extended") else "double"}


def _barrier_worker(key: dict) -> dict:
    from .instanton import InstantonError, TraceOptions, activation_barriers, sw_barriers
    from .model import ModelParams

    p = ModelParams(key["omega"], 1.0, key["gamma"])
    opts = TraceOptions(tau=key["tau"], ds=key["ds"], s_max=key["s_max"])
    out = {"a_lu": None, "a_ul": None, "a_lu_sw": None, "a_ul_sw": None}
    try:
        q = activation_barriers(p, opts=opts)
        s = sw_barriers(p)
    except InstantonError as exc:
        out["error"] = str(exc)
        return out
    out.update(a_lu=q.a_lu, a_ul=q.a_ul, a_lu_sw=s.a_lu, a_ul_sw=s.a_ul)
    return out


# ---------------------------------------------------------------------------
# commands


def _solver_key(cfg: RunConfig) -> dict:
    return {"precision": cfg.precision, "g": float(cfg.g), "e_index": cfg.e_index}


def cmd_steady_sweep(cfg: RunConfig, cache: ResultCache) -> int:
    from .model import fixed_point_map

    grid = cfg.gamma_grid()
    keys = [dict(omega=float(cfg.omega), gamma=float(G), two_j=round(2 * j), **_solver_key(cfg))
            for G in grid for j in cfg.spin_j]
    try:
        outs = _cached_map(cfg, cache, "steady", keys, _steady_worker)
    except ArithmeticError as exc:
        raise RuntimeError(f"steady state failed: {exc}") from exc
    rows = []
    for key, out in zip(keys, outs):
        fps = fixed_point_map(cfg.params(key["gamma"]))
        upper = fps["u"].mz if "u" in fps else None
        lower = fps["l"].mz if "l" in fps else None
        rows.append([key["gamma"], key["two_j"] / 2, out["m_z"], upper, lower])
    write_table(cfg, ["gamma_ratio", "J", "m_z_qme", "m_z_mf_upper", "m_z_mf_lower"], rows)
    return 0


def _crossings(cfg: RunConfig, grid, diffs, method: str) -> list[float]:
    from .instanton import TransitionError, transition_point

    found = []
    for (g0, d0), (g1, d1) in zip(zip(grid, diffs), zip(grid[1:], diffs[1:])):
        if d0 is None or d1 is None or np.sign(d0) == np.sign(d1):
            continue
        try:
            found.append(transition_point(cfg.omega, (g0, g1), method=method, step=g1 - g0,
                                          p_template=cfg.params(g0), opts=cfg.trace_options()))
        except TransitionError as exc:
            _note(f"crossing refinement failed on [{g0}, {g1}]: {exc}")
    return found


def cmd_barriers(cfg: RunConfig, cache: ResultCache) -> int:
    grid = cfg.gamma_grid()
    keys = [dict(omega=float(cfg.omega), gamma=float(G), tau=float(cfg.tau), ds=float(cfg.ds),
                 s_max=float(cfg.s_max)) for G in grid]
    outs = _cached_map(cfg, cache, "barriers", keys, _barrier_worker)
    rows, dq, dsw = [], [], []
    for G, out in zip(grid, outs):
        if out.get("error"):
            _note(f"Gamma={G}: {out['error']}")
        rows.append([G, out["a_lu"], out["a_ul"], out["a_lu_sw"], out["a_ul_sw"]])
        dq.append(None if out["a_lu"] is None else out["a_lu"] - out["a_ul"])
        dsw.append(None if out["a_lu_sw"] is None else out["a_lu_sw"] - out["a_ul_sw"])
    cross = {"gamma_c": _crossings(cfg, grid, dq, "H"), "gamma_c_sw": _crossings(cfg, grid, dsw, "SW")}
    for name, vals in cross.items():
        _note(f"{name}: " + (", ".join(f"{v:.4f}" for v in vals) if vals else "none in grid"))
    write_table(cfg, ["gamma_ratio", "A_lu", "A_ul", "A_lu_sw", "A_ul_sw"], rows, {"crossings": cross})
    return 0


def fit_slope(js, lams) -> tuple[float, float]:
    """Least-squares slope of ``ln lambda`` against ``J`` and its standard error."""
    x = np.asarray(js, dtype=float)
    y = np.log(np.asarray(lams, dtype=float))
    A = np.vstack([x, np.ones_like(x)]).T
    coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
    dof = len(x) - 2
    resid = y - A @ coef
    s2 = float(resid @ resid) / dof if dof > 0 else float("nan")
    se = math.sqrt(s2 / float(((x - x.mean()) ** 2).sum()))
    return float(coef[0]), se


def cmd_gap_scaling(cfg: RunConfig, cache: ResultCache) -> int:
    from .liouvillian import gap_estimator

    js = sorted(cfg.spin_j)
    if len(js) < 3 or any(abs(b - a - 4) > 1e-12 for a, b in zip(js, js[1:])):
        raise ConfigError("gap-scaling needs at least three J values spaced by 4")
    grid = cfg.gamma_grid()
    keys = [dict(omega=float(cfg.omega), gamma=float(G), two_j=round(2 * j), **_solver_key(cfg))
            for G in grid for j in js]
    outs = _cached_map(cfg, cache, "gap", keys, _gap_worker)
    rows, slopes = [], {}
    for gi, G in enumerate(grid):
        lams = [outs[gi * len(js) + i]["lambda"] for i in range(len(js))]
        for i, (j, lam) in enumerate(zip(js, lams)):
            err = outs[gi * len(js) + i].get("error")
            if err:
                _note(f"Gamma={G}, J={j}: {err}")
            est = gap_estimator(lams[i - 1], lam) if i and lam and lams[i - 1] else None
            rows.append([G, j, lam, est])
        ok = [(j, lam) for j, lam in zip(js, lams) if lam]
        if len(ok) >= 3:
            slope, se = fit_slope(*zip(*ok))
            slopes[repr(G)] = {"slope": slope, "stderr": se}
            _note(f"Gamma={G}: d ln(lambda)/dJ = {slope:.6f} +- {se:.2e}")
    write_table(cfg, ["gamma_ratio", "J", "lambda", "A_min_est"], rows, {"slopes": slopes})
    return 0


def cmd_portrait(cfg: RunConfig, cache: ResultCache) -> int:
    from .model import StereoPoint, find_axis_fixed_points, mf_rhs_stereo

    p = cfg.params(cfg.gamma_min)
    vs = np.linspace(*cfg.v_range, cfg.grid_n)
    ws = np.linspace(*cfg.w_range, cfg.grid_n)
    rows = []
    for vv in vs:
        for ww in ws:
            vd, wd = mf_rhs_stereo(StereoPoint(vv, ww), p)
            rows.append(["grid", "", "", vv, ww, vd, wd])
    for fp in find_axis_fixed_points(p):
        rows.append(["fixed_point", fp.label, fp.kind, fp.location.v, fp.w, 0.0, 0.0])
    write_table(cfg, ["kind", "label", "stability", "v", "w", "v_dot", "w_dot"], rows)
    return 0


def _sw_samples(start, target, p, n=400):
    from .instanton import sw_momentum
    from scipy.integrate import cumulative_trapezoid

    ws = np.linspace(start.w, target.w, n)
    pis = sw_momentum(ws, p)
    pis[0] = pis[-1] = 0.0
    s = np.concatenate(([0.0], np.cumsum(np.hypot(np.diff(ws), np.diff(pis)))))
    return s, ws, pis, cumulative_trapezoid(pis, ws, initial=0.0)


def cmd_instanton(cfg: RunConfig, cache: ResultCache) -> int:
    from .instanton import InstantonError, relaxation_basins, trace_instanton
    from .model import find_axis_fixed_points

    p = cfg.params(cfg.gamma_min)
    fps = find_axis_fixed_points(p)
    stable = [fp for fp in fps if fp.is_stable]
    rows = []
    for alpha in ("H", "P"):
        for start in stable:
            for branch in (1, -1):
                try:
                    tr = trace_instanton(alpha, start, branch, p, cfg.trace_options(), fps)
                except InstantonError as exc:
                    _note(f"{alpha} {start.label} {branch:+d}: {exc}")
                    continue
                keep = np.unique(np.r_[np.arange(0, len(tr.s), cfg.stride), len(tr.s) - 1])
                for i in keep:
                    rows.append([alpha, start.label, branch, tr.terminal_fp.label,
                                 tr.s[i], tr.w[i], tr.pi_w[i], tr.action_profile[i]])
    for i, start in enumerate(fps):
        if not start.is_stable:
            continue
        for j in (i - 1, i + 1):
            if 0 <= j < len(fps) and not fps[j].is_stable:
                try:
                    if not relaxation_basins(fps[j], p) - {start.label}:
                        continue
                except InstantonError:
                    continue
                s, ws, pis, act = _sw_samples(start, fps[j], p)
                for k in range(0, len(s), max(1, cfg.stride // 10)):
                    rows.append(["SW", start.label, int(np.sign(fps[j].w - start.w)), fps[j].label,
                                 s[k], ws[k], pis[k], act[k]])
    write_table(cfg, ["method", "start", "branch", "terminal", "s", "w", "pi_w", "action"], rows)
    return 0


def _monomial_name(a: int, b: int) -> str:
    parts = [f"pi_v^{a}" if a > 1 else "pi_v" if a else "", f"pi_w^{b}" if b > 1 else "pi_w" if b else ""]
    return "*".join(x for x in parts if x) or "1"


def cmd_derive(cfg: RunConfig, cache: ResultCache) -> int:
    from .symham import derive_hamiltonian

    out = {}
    for rep in ("H", "P"):
        ham = derive_hamiltonian(rep)
        out[rep] = {_monomial_name(a, b): str(c) for (a, b), c in ham.coefficients().items()}
    if cfg.format == "json":
        _emit(cfg, json.dumps(out, indent=1, sort_keys=True) + "\n")
    else:
        lines = []
        for rep, coeffs in out.items():
            lines.append(f"H_{rep} =")
            lines.extend(f"  + [{expr}] * {mono}" for mono, expr in coeffs.items())
        _emit(cfg, "\n".join(lines) + "\n")
    return 0


def cmd_verify(cfg: RunConfig, cache: ResultCache) -> int:
    from .checks import run_all

    results = run_all()
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        line = f"{status}  {r.name:<{width}}"
        print((line + (f"  {r.detail}" if r.detail else "")).rstrip())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


HANDLERS = {
    "steady-sweep": cmd_steady_sweep,
    "barriers": cmd_barriers,
    "gap-scaling": cmd_gap_scaling,
    "portrait": cmd_portrait,
    "instanton": cmd_instanton,
    "derive": cmd_derive,
    "verify": cmd_verify,
}


# ---------------------------------------------------------------------------
# argument parsing


def _pair(text: str) -> tuple[float, float]:
    a, b = (float(x) for x in text.split(","))
    return a, b


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with a [run] section")
    common.add_argument("--omega", type=float, help="drive strength in units of gamma")
    common.add_argument("--gamma-min", type=float)
    common.add_argument("--gamma-max", type=float)
    common.add_argument("--gamma-step", type=float)
    common.add_argument("--spin-j", type=float, action="append", help="repeatable")
    common.add_argument("--precision", choices=("auto", "double", "extended"))
    common.add_argument("--g", type=float, help="weighting factor of the bordered steady-state system")
    common.add_argument("--e-index", type=int, help="population index used as the pivot")
    common.add_argument("--tau", type=float)
    common.add_argument("--ds", type=float)
    common.add_argument("--s-max", type=float)
    common.add_argument("--out", help="output path (default: stdout)")
    common.add_argument("--format", choices=("csv", "json", "text"))
    common.add_argument("--cache-dir", help=f"result cache (default: ${CACHE_ENV})")
    common.add_argument("--jobs", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="metaspin", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("steady-sweep", parents=[common], help="QME and mean-field m_z over a Gamma grid")
    sub.add_parser("barriers", parents=[common], help="instanton and SW barriers with crossings")
    sub.add_parser("gap-scaling", parents=[common], help="Liouvillian gap against J")
    por = sub.add_parser("portrait", parents=[common], help="mean-field velocity grid and fixed points")
    por.add_argument("--grid-n", type=int)
    por.add_argument("--v-range", type=_pair)
    por.add_argument("--w-range", type=_pair)
    ins = sub.add_parser("instanton", parents=[common], help="trajectory samples with running action")
    ins.add_argument("--stride", type=int, help="keep every n-th sample")
    sub.add_parser("derive", parents=[common], help="print the derived Hamiltonians")
    sub.add_parser("verify", parents=[common], help="run the verification suite")
    return parser


def config_from_args(argv: Sequence[str] | None = None) -> tuple[RunConfig, bool]:
    ns = build_parser().parse_args(argv)
    values: dict = {}
    if ns.config:
        values.update(read_config_file(ns.config))
    if ns.command == "derive" and "format" not in values:
        values["format"] = "text"
    if ns.command in ("portrait", "instanton") and ns.gamma_min is None and "gamma_min" not in values:
        values["gamma_min"] = 9.0
    for key, val in vars(ns).items():
        if key in ("command", "config", "verbose") or val is None:
            continue
        values[key] = tuple(val) if key == "spin_j" else val
    if values.get("cache_dir") is None and os.environ.get(CACHE_ENV):
        values["cache_dir"] = os.environ[CACHE_ENV]
    cfg = RunConfig(command=ns.command, **values)
    if ns.command == "derive" and cfg.format == "csv":
        cfg = replace(cfg, format="text")
    return cfg.validate(), ns.verbose


def main(argv: Sequence[str] | None = None) -> int:
    try:
        cfg, verbose = config_from_args(argv)
    except ConfigError as exc:
        print(f"metaspin: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
    cache = ResultCache(cfg.cache_dir)
    try:
        code = HANDLERS[cfg.command](cfg, cache)
    except ConfigError as exc:
        print(f"metaspin: error: {exc}", file=sys.stderr)
        return 2
    if cfg.cache_dir:
        _note(f"cache: {cache.hits} hits, {cache.misses} computed")
    return code


if __name__ == "__main__":
    sys.exit(main())
