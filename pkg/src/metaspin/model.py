"""Mean-field dynamics of the driven-dissipative collective spin.

The magnetization obeys

    dm_x/dt = (Gamma m_z^2 - gamma) m_x m_z
    dm_y/dt = -Omega m_z + (Gamma m_z^2 - gamma) m_y m_z
    dm_z/dt = Omega m_y - (Gamma m_z^2 - gamma) (m_x^2 + m_y^2)

on the unit sphere. Stereographic coordinates v = m_x/(1 - m_z),
w = m_y/(1 - m_z) project from the north pole, so the south pole sits at
the origin and m_z = +1 is the point at infinity. All fixed points lie on
the invariant axis v = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
from numpy.polynomial import Polynomial
from scipy.integrate import solve_ivp

__all__ = [
    "ModelParams",
    "Magnetization",
    "StereoPoint",
    "FixedPoint",
    "MFRelaxation",
    "FixedPointError",
    "to_stereo",
    "from_stereo",
    "mf_rhs_cartesian",
    "mf_rhs_stereo",
    "mf_jacobian",
    "axis_drift",
    "axis_drift_polynomial",
    "find_axis_fixed_points",
    "fixed_point_map",
    "classify",
    "count_stable",
    "bistability_onset",
    "integrate_mf",
]

STABLE, SADDLE, SOURCE = "stable", "saddle", "source"

# |Im| threshold separating real roots from near-real complex pairs
ROOT_IMAG_TOL = 1e-9


class FixedPointError(RuntimeError):
    """Root finding or bifurcation bracketing failed."""


@dataclass(frozen=True)
class ModelParams:
    """Rates of the collective-spin Lindbladian.

    ``omega`` is the coherent drive, ``gamma`` the linear pump rate (the
    reference unit), ``big_gamma`` the nonlinear dissipation rate and
    ``spin_j`` the total spin. Instances are hashable and can key caches.
    """

    omega: float = 0.25
    gamma: float = 1.0
    big_gamma: float = 9.0
    spin_j: float = 8.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not self.big_gamma >= 0:
            raise ValueError(f"big_gamma must be non-negative, got {self.big_gamma}")
        if not self.omega >= 0:
            raise ValueError(f"omega must be non-negative, got {self.omega}")
        two_j = 2 * self.spin_j
        if not self.spin_j > 0 or abs(two_j - round(two_j)) > 1e-12:
            raise ValueError(f"spin_j must be a positive half-integer, got {self.spin_j}")

    @property
    def two_j(self) -> int:
        return int(round(2 * self.spin_j))

    def with_(self, **changes) -> "ModelParams":
        return replace(self, **changes)


class Magnetization(NamedTuple):
    mx: float
    my: float
    mz: float


class StereoPoint(NamedTuple):
    v: float
    w: float


def to_stereo(m: Magnetization, pole_tol: float = 1e-14) -> StereoPoint:
    """Project a unit magnetization onto the stereographic plane."""
    mx, my, mz = m
    denom = 1.0 - mz
    if denom <= pole_tol:
        raise ValueError("north pole (m_z = 1) has no finite stereographic image")
    return StereoPoint(mx / denom, my / denom)


def from_stereo(x: StereoPoint) -> Magnetization:
    v, w = x
    r2 = v * v + w * w
    return Magnetization(2 * v / (r2 + 1), 2 * w / (r2 + 1), (r2 - 1) / (r2 + 1))


def mf_rhs_cartesian(m: Magnetization, p: ModelParams) -> Magnetization:
    mx, my, mz = m
    k = p.big_gamma * mz * mz - p.gamma
    return Magnetization(
        k * mx * mz,
        -p.omega * mz + k * my * mz,
        p.omega * my - k * (mx * mx + my * my),
    )


def _radial(r2):
    """Return f = (r2-1)^2/(r2+1)^2 and df/d(r2)."""
    f = (r2 - 1) ** 2 / (r2 + 1) ** 2
    df = 4 * (r2 - 1) / (r2 + 1) ** 3
    return f, df


def mf_rhs_stereo(x: StereoPoint, p: ModelParams) -> StereoPoint:
    v, w = x
    f, _ = _radial(v * v + w * w)
    damp = p.gamma - p.big_gamma * f
    vdot = p.omega * v * w + damp * v
    wdot = 0.5 * p.omega * (1 - v * v + w * w) + damp * w
    return StereoPoint(vdot, wdot)


def mf_jacobian(x: StereoPoint, p: ModelParams) -> np.ndarray:
    """Jacobian laid out as ``[[d_v vdot, d_v wdot], [d_w vdot, d_w wdot]]``.

    This is the transpose of the usual convention; eigenvalues are unaffected.
    """
    v, w = x
    f, df = _radial(v * v + w * w)
    G, om = p.big_gamma, p.omega
    damp = p.gamma - G * f
    dv_vdot = om * w + damp - 2 * G * v * v * df
    dw_vdot = om * v - 2 * G * v * w * df
    dv_wdot = -om * v - 2 * G * v * w * df
    dw_wdot = om * w + damp - 2 * G * w * w * df
    return np.array([[dv_vdot, dv_wdot], [dw_vdot, dw_wdot]])


def axis_drift(w, p: ModelParams):
    """On-axis drift dw/dt at v = 0 (vectorized over ``w``)."""
    w = np.asarray(w, dtype=float)
    f, _ = _radial(w * w)
    return 0.5 * p.omega * (1 + w * w) + (p.gamma - p.big_gamma * f) * w


def _axis_drift_slope(w: float, p: ModelParams) -> float:
    f, df = _radial(w * w)
    return p.omega * w + p.gamma - p.big_gamma * (f + 2 * w * w * df)


def axis_drift_polynomial(p: ModelParams) -> Polynomial:
    """``axis_drift * (w^2+1)^2`` as a polynomial of degree <= 6."""
    w = Polynomial([0.0, 1.0])
    q = w**2 + 1
    return 0.5 * p.omega * q**3 + p.gamma * w * q**2 - p.big_gamma * w * (w**2 - 1) ** 2


def classify(eigenvalues: Sequence[complex]) -> str:
    n_pos = sum(1 for ev in eigenvalues if ev.real > 0)
    return {0: STABLE, 1: SADDLE, 2: SOURCE}[n_pos]


@dataclass(frozen=True)
class FixedPoint:
    location: StereoPoint
    jacobian_eigenvalues: tuple[complex, complex]
    kind: str
    label: str | None = None
    residual: float = 0.0

    @property
    def w(self) -> float:
        return self.location.w

    @property
    def mz(self) -> float:
        return from_stereo(self.location).mz

    @property
    def is_stable(self) -> bool:
        return self.kind == STABLE

    def unstable_directions(self, p: ModelParams) -> list[np.ndarray]:
        """Unit eigenvectors (column convention) with positive growth rate."""
        jac = mf_jacobian(self.location, p).T
        vals, vecs = np.linalg.eig(jac)
        out = []
        for val, vec in zip(vals, vecs.T):
            if val.real > 0:
                vec = np.real_if_close(vec)
                out.append(np.real(vec) / np.linalg.norm(np.real(vec)))
        return out


def _polish(w: float, p: ModelParams, iters: int = 8) -> float:
    for _ in range(iters):
        slope = _axis_drift_slope(w, p)
        if slope == 0:
            break
        step = float(axis_drift(w, p)) / slope
        w -= step
        if abs(step) <= 1e-15 * max(1.0, abs(w)):
            break
    return w


def _assign_labels(points: list[FixedPoint]) -> list[FixedPoint]:
    labels: dict[int, str] = {}
    stable = [i for i, fp in enumerate(points) if fp.kind == STABLE]
    if len(stable) == 1:
        i = stable[0]
        labels[i] = "u" if points[i].mz > 0 else "l"
    elif len(stable) >= 2:
        by_mz = sorted(stable, key=lambda i: points[i].mz)
        labels[by_mz[0]] = "l"
        labels[by_mz[1]] = "u"
    for kind, prefix in ((SADDLE, "s"), (SOURCE, "r")):
        idx = [i for i, fp in enumerate(points) if fp.kind == kind]
        for n, i in enumerate(idx, start=1):
            labels[i] = f"{prefix}{n}"
    return [replace(fp, label=labels.get(i)) for i, fp in enumerate(points)]


def find_axis_fixed_points(p: ModelParams, residual_tol: float = 1e-10) -> list[FixedPoint]:
    """All fixed points on the invariant axis v = 0, sorted by w.

    Roots come from the companion matrix of the degree-6 numerator of the
    on-axis drift and are then Newton-polished on the drift itself.
    """
    poly = axis_drift_polynomial(p).trim()
    if poly.degree() < 1:
        raise FixedPointError("on-axis drift polynomial is constant")
    roots = poly.roots()
    if not np.all(np.isfinite(roots)):
        raise FixedPointError(f"companion-matrix root finder returned {roots}")
    dpoly = poly.deriv()
    ws = []
    for r in roots:
        for _ in range(6):
            d = dpoly(r)
            if d == 0:
                break
            r = r - poly(r) / d
        if abs(r.imag) > ROOT_IMAG_TOL * max(1.0, abs(r)):
            continue
        ws.append(_polish(float(r.real), p))
    ws.sort()
    points = []
    for w in ws:
        if points and abs(w - points[-1].w) <= 1e-10 * max(1.0, abs(w)):
            continue
        x = StereoPoint(0.0, w)
        res = abs(float(axis_drift(w, p)))
        if res > residual_tol * p.gamma:
            raise FixedPointError(f"fixed point at w={w} has residual {res:.3e}")
        eig = tuple(complex(e) for e in np.linalg.eigvals(mf_jacobian(x, p)))
        points.append(FixedPoint(x, eig, classify(eig), residual=res))
    return _assign_labels(points)


def fixed_point_map(p: ModelParams) -> dict[str, FixedPoint]:
    return {fp.label: fp for fp in find_axis_fixed_points(p) if fp.label}


def count_stable(p: ModelParams) -> int:
    return sum(fp.is_stable for fp in find_axis_fixed_points(p))


def bistability_onset(
    omega: float,
    p_template: ModelParams | None = None,
    bracket: tuple[float, float] = (1.0, 3.0),
    tol: float = 1e-3,
) -> float:
    """Locate the saddle-node value of Gamma where the stable count changes."""
    base = (p_template or ModelParams()).with_(omega=omega)
    lo, hi = bracket
    n_lo = count_stable(base.with_(big_gamma=lo))
    n_hi = count_stable(base.with_(big_gamma=hi))
    if n_lo == n_hi:
        raise FixedPointError(
            f"bracket ({lo}, {hi}) does not straddle a change in stable count "
            f"({n_lo} stable fixed points at both ends)"
        )
    while hi - lo > tol * base.gamma:
        mid = 0.5 * (lo + hi)
        if count_stable(base.with_(big_gamma=mid)) == n_lo:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class MFRelaxation:
    """Outcome of a mean-field relaxation run.

    ``outcome`` is the label of the capturing stable fixed point,
    ``"undecided"`` or ``"escaped"``. ``visited`` lists unstable fixed
    points the trajectory stalled at and was kicked away from.
    """

    t: np.ndarray
    y: np.ndarray
    outcome: str
    visited: list[str] = field(default_factory=list)


def integrate_mf(
    x0: StereoPoint,
    p: ModelParams,
    t_max: float = 2000.0,
    tol: float = 1e-10,
    capture_radius: float = 1e-6,
    bound: float = 1e6,
    kick: float = 1e-4,
    fixed_points: list[FixedPoint] | None = None,
) -> MFRelaxation:
    """Relax ``x0`` under the stereographic mean-field flow.

    The run stops inside a ball of ``capture_radius`` around a stable fixed
    point. A trajectory stalling at a saddle (which happens exactly on the
    invariant axis) is kicked by ``kick`` along the saddle's unstable
    direction and continued.
    """
    fps = fixed_points if fixed_points is not None else find_axis_fixed_points(p)
    x = np.array(x0, dtype=float)
    for fp in fps:
        if fp.is_stable and np.linalg.norm(x - fp.location) < capture_radius:
            return MFRelaxation(np.array([0.0]), x[:, None], fp.label or "stable")

    def rhs(t, y):
        return mf_rhs_stereo(StereoPoint(y[0], y[1]), p)

    def ball_event(target):
        loc = np.array(target.location)

        def event(t, y):
            return math.hypot(y[0] - loc[0], y[1] - loc[1]) - capture_radius

        event.terminal = True
        event.direction = -1
        return event

    def escape(t, y):
        return bound - math.hypot(y[0], y[1])

    escape.terminal = True

    ts, ys, visited = [], [], []
    t0 = 0.0
    while True:
        # a saddle we start next to must not capture us immediately
        targets = [
            fp for fp in fps if fp.kind != SOURCE and np.linalg.norm(x - fp.location) > capture_radius
        ]
        events = [ball_event(fp) for fp in targets] + [escape]
        sol = solve_ivp(rhs, (t0, t_max), x, method="DOP853", rtol=tol, atol=tol * 1e-2, events=events)
        ts.append(sol.t)
        ys.append(sol.y)
        t_end = np.concatenate(ts)
        y_end = np.concatenate(ys, axis=1)
        hit = [i for i, te in enumerate(sol.t_events) if te.size]
        if not hit:
            return MFRelaxation(t_end, y_end, "undecided", visited)
        first = min(hit, key=lambda i: sol.t_events[i][0])
        if first == len(targets):
            return MFRelaxation(t_end, y_end, "escaped", visited)
        fp = targets[first]
        if fp.is_stable:
            return MFRelaxation(t_end, y_end, fp.label or "stable", visited)
        visited.append(fp.label or fp.kind)
        if len(visited) > 2 * len(fps):
            return MFRelaxation(t_end, y_end, "undecided", visited)
        arrival = sol.y_events[first][0] - np.array(fp.location)
        direction = fp.unstable_directions(p)[0]
        sign = -1.0 if np.dot(direction, arrival) > 0 else 1.0
        x = np.array(fp.location) + sign * kick * direction
        t0 = sol.t_events[first][0]
