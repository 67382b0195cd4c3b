"""Instantons of the auxiliary Hamiltonians on the (w, pi_w) plane.

On the invariant plane v = pi_v = 0 the auxiliary Hamiltonian factorizes as
``H(w, pi) = pi * C(w, pi)`` with ``C`` cubic in the momentum. The escape
path from a stable fixed point is the branch of the level set ``C = 0``
that leaves ``(w_i, 0)``; it is traced by arclength continuation until the
momentum returns to zero at an unstable fixed point. The barrier is the
integral of ``pi dw`` along that curve.

The semiclassical-Wigner (SW) baseline replaces ``C`` by the linear
``h_w + pi D_ww`` so that its instanton is explicit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, NamedTuple

import numpy as np
from scipy.integrate import cumulative_simpson, quad, solve_ivp
from scipy.optimize import brentq

from .model import (
    FixedPoint,
    ModelParams,
    StereoPoint,
    find_axis_fixed_points,
    integrate_mf,
    mf_rhs_stereo,
)

log = logging.getLogger(__name__)

REPRESENTATIONS = ("H", "P")


class InstantonError(RuntimeError):
    pass


class OpenTrajectoryError(InstantonError):
    """The continuation never returned to pi_w = 0."""


class ConsistencyError(InstantonError):
    pass


class CubicCoeffs(NamedTuple):
    c0: float
    c1: float
    c2: float
    c3: float


def _coeffs_and_slopes(alpha: str, w, p: ModelParams):
    """Coefficients of C and their w-derivatives (plain arithmetic, vectorizes)."""
    om, g, G = p.omega, p.gamma, p.big_gamma
    u = w * w
    q = u + 1
    um = u - 1
    c0 = 0.5 * om * q + g * w - G * w * um * um / (q * q)
    d0 = om * w + g - G * (um * um / (q * q) + 8 * u * um / (q * q * q))
    if alpha == "H":
        num = 5 * u * u - 6 * u + 1
        c1 = 0.25 * g * u * q + 0.25 * G * num / q
        d1 = 0.5 * g * w * (2 * u + 1) + 0.25 * G * ((20 * u - 12) * w * q - 2 * w * num) / (q * q)
        c2 = 0.25 * G * (w - 2 * w * u)
        d2 = 0.25 * G * (1 - 6 * u)
        c3 = G / 16 * u * q
        d3 = G / 16 * (4 * u * w + 2 * w)
    elif alpha == "P":
        num = u * (u * u - 6 * u + 5)
        c1 = 0.25 * g * q + 0.25 * G * num / q
        d1 = 0.5 * g * w + 0.25 * G * ((6 * u * u - 24 * u + 10) * w * q - 2 * w * num) / (q * q)
        c2 = 0.25 * G * w * u * (u - 2)
        d2 = 0.25 * G * (5 * u * u - 6 * u)
        c3 = G / 16 * u * u * q
        d3 = G / 16 * (6 * u * u * w + 4 * u * w)
    else:
        raise ValueError(f"unknown representation {alpha!r}")
    return (c0, c1, c2, c3), (d0, d1, d2, d3)


def cubic_coeffs(alpha: str, w, p: ModelParams) -> CubicCoeffs:
    """Coefficients of ``C_alpha(w, pi) = sum_j pi^j c_j(w)``."""
    return CubicCoeffs(*_coeffs_and_slopes(alpha, w, p)[0])


def cubic_coeff_slopes(alpha: str, w, p: ModelParams) -> CubicCoeffs:
    return CubicCoeffs(*_coeffs_and_slopes(alpha, w, p)[1])


def cubic_value_and_gradient(alpha: str, w, pi, p: ModelParams):
    """Return ``(C, dC/dw, dC/dpi)`` at ``(w, pi)``."""
    (c0, c1, c2, c3), (d0, d1, d2, d3) = _coeffs_and_slopes(alpha, w, p)
    value = c0 + pi * (c1 + pi * (c2 + pi * c3))
    dw = d0 + pi * (d1 + pi * (d2 + pi * d3))
    dpi = c1 + pi * (2 * c2 + 3 * pi * c3)
    return value, dw, dpi


def hamiltonian_on_axis(alpha: str, w, pi_w, p: ModelParams):
    return pi_w * cubic_value_and_gradient(alpha, w, pi_w, p)[0]


@dataclass
class InstantonTrajectory:
    """Arclength-sampled zero-energy branch from a stable fixed point.

    Samples combine a uniform ``ds`` grid with the integrator's own nodes,
    so sharp folds of the level set stay resolved. ``interpolant`` maps
    arclength to ``(w, pi_w)`` on ``[s[1], s[-1]]``; the first interval is
    the straight seeding step.
    """

    alpha: str
    branch: int
    start_fp: FixedPoint
    s: np.ndarray
    w: np.ndarray
    pi_w: np.ndarray
    dw_ds: np.ndarray
    terminal_fp: FixedPoint | None
    interpolant: Callable | None = None
    velocity: Callable | None = None
    action_profile: np.ndarray = field(default_factory=lambda: np.zeros(0))
    total_action: float = float("nan")
    max_abs_c: float = float("nan")

    @property
    def s_star(self) -> float:
        return float(self.s[-1])

    @property
    def route(self) -> str:
        end = self.terminal_fp.label if self.terminal_fp else "?"
        return f"{self.start_fp.label}->{end}"


@dataclass(frozen=True)
class TraceOptions:
    tau: float = 1.0
    ds: float = 1e-3
    s_max: float = 50.0
    max_extensions: int = 2
    rtol: float = 1e-12
    atol: float = 1e-14
    match_tol: float = 1e-6
    # pi_w can only vanish on C = 0 at a fixed point; beyond the outermost
    # one by this many (1 + |w|) units the branch is treated as open
    escape_margin: float = 3.0
    # the tau term makes the flow stiff far out on the axis (|grad C| ~ w^4)
    method: str = "LSODA"


def _project(alpha, y, p, iters=4):
    """Newton steps along grad C back onto the level set C = 0."""
    for _ in range(iters):
        c, cw, cp = cubic_value_and_gradient(alpha, y[0], y[1], p)
        g2 = cw * cw + cp * cp
        y = y - c * np.array([cw, cp]) / g2
    return y


def trace_instanton(
    alpha: str,
    start_fp: FixedPoint,
    branch: int,
    p: ModelParams,
    opts: TraceOptions = TraceOptions(),
    fixed_points: list[FixedPoint] | None = None,
) -> InstantonTrajectory:
    """Continue the ``C_alpha = 0`` branch leaving ``start_fp``.

    ``branch`` (+1 or -1) selects the orientation of the tangent
    ``(+-dC/dpi, -+dC/dw)``. A first step of length ``ds`` along that
    tangent is projected back onto ``C = 0``; from there the normalized
    continuation field, with the relaxation term ``-tau C grad C``, is
    integrated until ``pi_w`` changes sign.
    """
    if branch not in (1, -1):
        raise ValueError("branch must be +1 or -1")
    if not start_fp.is_stable or start_fp.location.v != 0.0:
        raise ValueError("instantons start at a stable on-axis fixed point")
    fps = fixed_points if fixed_points is not None else find_axis_fixed_points(p)
    tau, ds = opts.tau, opts.ds

    def velocity(s, y):
        # works on one state or on a (2, n) batch of states
        if np.ndim(y) == 1:
            c, cw, cp = cubic_value_and_gradient(alpha, float(y[0]), float(y[1]), p)
            norm = math.hypot(cw, cp)
        else:
            c, cw, cp = cubic_value_and_gradient(alpha, y[0], y[1], p)
            norm = np.hypot(cw, cp)
        return np.array([(branch * cp - tau * c * cw) / norm, (-branch * cw - tau * c * cp) / norm])

    w_i = start_fp.w
    _, cw0, cp0 = cubic_value_and_gradient(alpha, w_i, 0.0, p)
    norm0 = math.hypot(cw0, cp0)
    if norm0 == 0:
        raise InstantonError(f"degenerate gradient of C at w={w_i}")
    tangent = np.array([branch * cp0, -branch * cw0]) / norm0
    y1 = _project(alpha, np.array([w_i, 0.0]) + ds * tangent, p)
    s1 = ds

    def crossing(s, y):
        return y[1]

    crossing.terminal = True

    ws = [fp.w for fp in fps]
    w_lo = min(ws) - opts.escape_margin * (1 + abs(min(ws)))
    w_hi = max(ws) + opts.escape_margin * (1 + abs(max(ws)))

    def escape(s, y):
        return min(y[0] - w_lo, w_hi - y[0])

    escape.terminal = True

    s_end = opts.s_max
    for _ in range(opts.max_extensions + 1):
        sol = solve_ivp(
            velocity, (s1, s_end), y1, method=opts.method, rtol=opts.rtol, atol=opts.atol,
            events=(crossing, escape), dense_output=True,
        )
        if sol.status == -1:
            raise InstantonError(f"continuation failed: {sol.message}")
        if sol.t_events[1].size:
            raise OpenTrajectoryError(
                f"{alpha} branch {branch:+d} from {start_fp.label} runs past the outermost fixed point"
            )
        if sol.t_events[0].size:
            break
        s_end *= 2
    else:
        raise OpenTrajectoryError(
            f"{alpha} branch {branch:+d} from {start_fp.label} did not return to pi_w=0 "
            f"within s={s_end / 2:g}"
        )

    s_star = float(sol.t_events[0][0])
    y_star = sol.y_events[0][0]
    w_star = float(y_star[0])
    candidates = [fp for fp in fps if not fp.is_stable]
    terminal = min(candidates, key=lambda fp: abs(fp.w - w_star), default=None)
    if terminal is None or abs(terminal.w - w_star) > opts.match_tol * max(1.0, abs(w_star)):
        raise ConsistencyError(
            f"{alpha} branch {branch:+d} from {start_fp.label} ends at w={w_star:.9g}, "
            "which matches no unstable fixed point"
        )

    grid = np.union1d(ds * np.arange(1, int(s_star / ds) + 1), sol.t[sol.t < s_star])
    grid = grid[(grid >= s1) & (grid < s_star - 1e-9 * ds)]
    grid = np.append(grid, s_star)
    ys = sol.sol(grid)
    ys[:, -1] = y_star
    dw = velocity(None, ys)[0]
    traj = InstantonTrajectory(
        alpha, branch, start_fp,
        s=np.concatenate(([0.0], grid)),
        w=np.concatenate(([w_i], ys[0])),
        pi_w=np.concatenate(([0.0], ys[1])),
        dw_ds=np.concatenate(([(y1[0] - w_i) / s1], dw)),
        terminal_fp=terminal,
        interpolant=sol.sol,
        velocity=velocity,
    )
    traj.max_abs_c = float(np.max(np.abs(cubic_value_and_gradient(alpha, traj.w, traj.pi_w, p)[0])))
    action_of(traj)
    return traj


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(5)


def action_of(traj: InstantonTrajectory) -> float:
    """Accumulate ``int pi_w dw`` along the samples.

    With an interpolant, each sample interval gets 5-point Gauss-Legendre
    on the dense output; the seeding interval is a straight chord and is
    integrated exactly. Without one, composite Simpson on the samples.
    """
    s, pi, dw = traj.s, traj.pi_w, traj.dw_ds
    if traj.interpolant is None or traj.velocity is None:
        integrand = pi * dw
        if s.size < 3:
            steps = 0.5 * (integrand[1:] + integrand[:-1]) * np.diff(s)
            profile = np.concatenate(([0.0], np.cumsum(steps)))
        else:
            profile = cumulative_simpson(integrand, x=s, initial=0.0)
    else:
        a, b = s[1:-1], s[2:]
        half = 0.5 * (b - a)
        nodes = (0.5 * (a + b))[:, None] + half[:, None] * _GL_NODES[None, :]
        ys = traj.interpolant(nodes.ravel())
        vel = traj.velocity(None, ys)[0].reshape(nodes.shape)
        vals = ys[1].reshape(nodes.shape) * vel
        pieces = half * (vals @ _GL_WEIGHTS)
        chord = 0.5 * pi[1] * (traj.w[1] - traj.w[0])
        profile = np.concatenate(([0.0, chord], chord + np.cumsum(pieces)))
    traj.action_profile = profile
    traj.total_action = float(profile[-1])
    return traj.total_action


@lru_cache(maxsize=512)
def relaxation_basins(fp: FixedPoint, p: ModelParams, kick: float = 1e-4) -> frozenset[str]:
    """Stable fixed points reached by mean-field relaxation from ``fp``.

    Seeds sit ``kick`` away along each unstable direction, with both signs.
    """
    fps = find_axis_fixed_points(p)
    found, failed = set(), []
    for direction in fp.unstable_directions(p):
        for sign in (1.0, -1.0):
            x0 = StereoPoint(*(np.array(fp.location) + sign * kick * direction))
            out = integrate_mf(x0, p, fixed_points=fps).outcome
            if out in ("undecided", "escaped"):
                failed.append(f"{sign:+g}: {out}")
                continue
            found.add(out)
    if not found and failed:
        raise InstantonError(f"basin undecided after relaxation from {fp.label} ({', '.join(failed)})")
    return frozenset(found)


@dataclass
class BarrierTable:
    """Activation barriers between the two stable branches.

    ``a_lu`` is the escape barrier from the lower branch to the upper one;
    ``per_method`` maps each representation (or ``"SW"``) to its pair.
    """

    params: ModelParams
    a_lu: float
    a_ul: float
    per_method: dict[str, tuple[float, float]]
    via: dict[str, tuple[str, str]]
    candidates: list[dict] = field(default_factory=list)

    @property
    def a_min(self) -> float:
        return min(self.a_lu, self.a_ul)

    @property
    def representation_mismatch(self) -> float:
        vals = [v for k, v in self.per_method.items() if k in REPRESENTATIONS]
        if len(vals) < 2:
            return 0.0
        (lu0, ul0), (lu1, ul1) = vals[0], vals[1]
        return max(abs(lu0 - lu1) / abs(lu0), abs(ul0 - ul1) / abs(ul0))


class NotBistableError(InstantonError):
    pass


def _stable_pair(p: ModelParams, fps: list[FixedPoint]) -> tuple[FixedPoint, FixedPoint]:
    by_label = {fp.label: fp for fp in fps}
    if "l" not in by_label or "u" not in by_label:
        raise NotBistableError(
            f"Gamma={p.big_gamma:g}, Omega={p.omega:g} has "
            f"{sum(fp.is_stable for fp in fps)} stable fixed point(s); need two"
        )
    return by_label["l"], by_label["u"]


def _select(records: list[dict], method: str, src: str, dst: str) -> tuple[float, str]:
    best = [r for r in records if r["method"] == method and r["from"] == src and dst in r["reaches"]]
    if not best:
        raise InstantonError(f"{method}: no trajectory from {src} relaxes into {dst}")
    rec = min(best, key=lambda r: r["action"])
    return rec["action"], rec["terminal"]


def activation_barriers(
    p: ModelParams,
    alphas: tuple[str, ...] = REPRESENTATIONS,
    opts: TraceOptions = TraceOptions(),
    keep_trajectories: bool = False,
    rel_tol: float = 1e-6,
) -> BarrierTable:
    """Barriers ``A_{l->u}`` and ``A_{u->l}`` from the minimal escape action.

    Every branch leaving each stable point is traced; a trajectory counts
    towards ``i -> j`` when mean-field relaxation from its terminal fixed
    point can reach ``j``. The first entry of ``alphas`` supplies the
    headline values, the others are cross-checks.
    """
    fps = find_axis_fixed_points(p)
    lo, up = _stable_pair(p, fps)
    records = []
    for alpha in alphas:
        for start in (lo, up):
            for branch in (1, -1):
                try:
                    traj = trace_instanton(alpha, start, branch, p, opts, fps)
                except InstantonError as exc:
                    log.info("skipping %s branch %+d from %s: %s", alpha, branch, start.label, exc)
                    continue
                reaches = relaxation_basins(traj.terminal_fp, p) - {start.label}
                if not reaches:
                    continue
                rec = dict(
                    method=alpha, **{"from": start.label}, branch=branch,
                    terminal=traj.terminal_fp.label, action=traj.total_action, reaches=reaches,
                )
                if keep_trajectories:
                    rec["trajectory"] = traj
                records.append(rec)
    return _assemble(p, alphas, records, rel_tol)


def _assemble(p, methods, records, rel_tol=None) -> BarrierTable:
    per, via = {}, {}
    for m in methods:
        a_lu, via_lu = _select(records, m, "l", "u")
        a_ul, via_ul = _select(records, m, "u", "l")
        per[m] = (a_lu, a_ul)
        via[m] = (via_lu, via_ul)
    head = per[methods[0]]
    table = BarrierTable(p, head[0], head[1], per, via, records)
    if rel_tol is not None and table.representation_mismatch > rel_tol:
        log.warning(
            "H/P barriers disagree by %.2e (relative) at Gamma=%g",
            table.representation_mismatch, p.big_gamma,
        )
    return table


# ---------------------------------------------------------------------------
# semiclassical Wigner baseline


class SwReduced(NamedTuple):
    h_w: float
    d_ww: float


def sw_reduced(w, p: ModelParams) -> SwReduced:
    u = w * w
    q = u + 1
    h = 0.5 * p.omega * q + p.gamma * w - p.big_gamma * w * (u - 1) ** 2 / (q * q)
    d = p.gamma / 8 * q * q + p.big_gamma / 8 * (u - 1) ** 2
    return SwReduced(h, d)


def sw_drift_diffusion(x: StereoPoint, p: ModelParams):
    """Full 2D drift ``(h_v, h_w)`` and diffusion ``(D_vv, D_ww, D_vw)``."""
    v, w = x
    g, G = p.gamma, p.big_gamma
    h_v, h_w = mf_rhs_stereo(x, p)
    v2, w2 = v * v, w * w
    q2 = (v2 + w2 + 1) ** 2
    d_vv = (
        g * (v2 + (w - 1) ** 2) * (v2 + (w + 1) ** 2)
        + G * (v2**4 + 4 * v2**3 * w2 + 2 * v2 * v2 * (3 * w2 * w2 - 6 * w2 - 1)
               + 4 * v2 * w2 * (w2 - 3) ** 2 + (w2 * w2 - 6 * w2 + 1) ** 2) / q2
    ) / 8
    d_ww = (
        g * ((v - 1) ** 2 + w2) * ((v + 1) ** 2 + w2)
        + G * (4 * v2 * w2**3 + 4 * v2 * (v2 - 3) ** 2 * w2 + 2 * (3 * v2 * v2 - 6 * v2 - 1) * w2 * w2
               + (v2 * v2 - 6 * v2 + 1) ** 2 + w2**4) / q2
    ) / 8
    d_vw = 0.5 * v * w * (g + G * (v2 + w2 - 3) * (3 * v2 + 3 * w2 - 1) / q2)
    return (h_v, h_w), (d_vv, d_ww, d_vw)


def _sw_hamiltonian(v, w, pv, pw, p):
    (h_v, h_w), (d_vv, d_ww, d_vw) = sw_drift_diffusion(StereoPoint(v, w), p)
    return pv * h_v + pw * h_w + pv * pv * d_vv + pw * pw * d_ww + 2 * pv * pw * d_vw


def sw_full_field(x: StereoPoint, pi: tuple[float, float], p: ModelParams, step: float = 1e-20):
    """SW Hamiltonian value and its gradient ``(dH/dv, dH/dw, dH/dpi_v, dH/dpi_w)``.

    Momentum derivatives are exact (the Hamiltonian is quadratic in them);
    coordinate derivatives use a complex-step rule, exact to rounding.
    """
    v, w = x
    pv, pw = pi
    (h_v, h_w), (d_vv, d_ww, d_vw) = sw_drift_diffusion(x, p)
    value = pv * h_v + pw * h_w + pv * pv * d_vv + pw * pw * d_ww + 2 * pv * pw * d_vw
    dpv = h_v + 2 * pv * d_vv + 2 * pw * d_vw
    dpw = h_w + 2 * pw * d_ww + 2 * pv * d_vw
    dv = _sw_hamiltonian(v + 1j * step, w, pv, pw, p).imag / step
    dw = _sw_hamiltonian(v, w + 1j * step, pv, pw, p).imag / step
    return value, np.array([dv, dw, dpv, dpw])


def sw_momentum(w, p: ModelParams):
    h, d = sw_reduced(w, p)
    return -h / d


def sw_action(w_i: float, w_star: float, p: ModelParams, fp_tol: float = 1e-8) -> float:
    """Action ``-int h_w / D_ww dw`` of the SW instanton between two fixed points."""
    for w in (w_i, w_star):
        if abs(sw_reduced(w, p).h_w) > fp_tol * max(1.0, w * w):
            raise ValueError(f"w={w} is not a fixed point of the SW drift")
    if w_i == w_star:
        return 0.0
    val, err = quad(lambda w: sw_momentum(w, p), w_i, w_star, epsabs=1e-13, epsrel=1e-12, limit=200)
    return val


def sw_barriers(p: ModelParams) -> BarrierTable:
    """SW barriers; the instanton from ``w_i`` ends at an adjacent fixed point."""
    fps = find_axis_fixed_points(p)
    _stable_pair(p, fps)
    records = []
    for i, start in enumerate(fps):
        if start.label not in ("l", "u"):
            continue
        for j in (i - 1, i + 1):
            if not 0 <= j < len(fps) or fps[j].is_stable:
                continue
            target = fps[j]
            reaches = relaxation_basins(target, p) - {start.label}
            if not reaches:
                continue
            records.append(dict(
                method="SW", **{"from": start.label}, branch=int(np.sign(target.w - start.w)),
                terminal=target.label, action=sw_action(start.w, target.w, p), reaches=reaches,
            ))
    return _assemble(p, ("SW",), records)


# ---------------------------------------------------------------------------
# transition point


class TransitionError(InstantonError):
    pass


def barrier_difference(gamma_nl: float, omega: float, method: str = "H",
                       p_template: ModelParams | None = None,
                       opts: TraceOptions = TraceOptions()) -> float:
    p = (p_template or ModelParams()).with_(omega=omega, big_gamma=gamma_nl)
    if method == "SW":
        table = sw_barriers(p)
    else:
        table = activation_barriers(p, alphas=(method,), opts=opts)
    return table.a_lu - table.a_ul


def transition_point(
    omega: float,
    bracket: tuple[float, float],
    method: str = "H",
    p_template: ModelParams | None = None,
    step: float = 0.25,
    tol: float = 1e-3,
    opts: TraceOptions = TraceOptions(),
) -> float:
    """Gamma at which ``A_{l->u} = A_{u->l}``.

    A coarse scan with spacing ``step`` brackets the sign change, then
    Brent's method refines it to ``tol``.
    """
    lo, hi = bracket
    if not hi > lo:
        raise ValueError("bracket must be increasing")
    diff: Callable[[float], float] = lambda G: barrier_difference(G, omega, method, p_template, opts)
    n = max(1, int(math.ceil((hi - lo) / step - 1e-9)))
    grid = np.linspace(lo, hi, n + 1)
    prev_g, prev_d = grid[0], diff(grid[0])
    for g in grid[1:]:
        d = diff(g)
        if prev_d == 0:
            return float(prev_g)
        if np.sign(d) != np.sign(prev_d):
            return float(brentq(diff, prev_g, g, xtol=tol, rtol=1e-12))
        prev_g, prev_d = g, d
    raise TransitionError(
        f"barrier difference keeps sign {np.sign(prev_d):+.0f} on [{lo}, {hi}] (Omega={omega})"
    )
