"""Exact derivation of the auxiliary Hamiltonians from coherent-state symbols.

Spin operators acting on a spin-coherent quasiprobability become first-order
differential operators in the stereographic coordinates ``(v, w)``. After
the WKB substitution ``d_{v,w} -> s J pi_{v,w}`` (``s = -1`` for the Husimi
function, ``s = +1`` for the P function) each operator is a rational symbol,
and products of operators become products of symbols up to terms that vanish
after dividing by ``J`` and letting ``J`` grow.

All algebra happens in the rational function field
``QQ(v, w, pi_v, pi_w, J, Om, ga, Ga)`` (graded lexicographic order), so the
identities checked by :func:`verify_identities` are exact. Complex values are
carried as (real, imaginary) pairs of field elements.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Callable, NamedTuple

import numpy as np
import sympy
from sympy import QQ
from sympy.polys.fields import FracElement, field as frac_field
from sympy.polys.orderings import grlex

from .model import FixedPoint, ModelParams, StereoPoint, mf_jacobian, mf_rhs_stereo

FIELD, v, w, pv, pw, J, Om, ga, Ga = frac_field("v,w,pv,pw,J,Om,ga,Ga", QQ, grlex)
RING = FIELD.ring
SymExpr = FracElement

COORDS = (v, w)
MOMENTA = (pv, pw)
PHASE_VARS = (v, w, pv, pw)
RATE_VARS = (Om, ga, Ga)
SYMBOLIC_PARAMS = SimpleNamespace(omega=Om, gamma=ga, big_gamma=Ga)

REPRESENTATIONS = ("H", "P")


class DerivationError(ArithmeticError):
    """The assembled symbol has a nonzero imaginary part."""


class LimitError(ArithmeticError):
    """``J^-1 L`` grows with ``J``."""


def _gen(x: SymExpr):
    return RING.gens[FIELD.gens.index(x)]


def _lift(x) -> SymExpr:
    return x if isinstance(x, FracElement) else FIELD(x)


@dataclass(frozen=True)
class SymComplex:
    re: SymExpr
    im: SymExpr = field(default_factory=lambda: FIELD(0))

    @staticmethod
    def of(x) -> "SymComplex":
        return x if isinstance(x, SymComplex) else SymComplex(_lift(x))

    def __add__(self, other):
        o = SymComplex.of(other)
        return SymComplex(self.re + o.re, self.im + o.im)

    __radd__ = __add__

    def __sub__(self, other):
        o = SymComplex.of(other)
        return SymComplex(self.re - o.re, self.im - o.im)

    def __rsub__(self, other):
        return SymComplex.of(other) - self

    def __mul__(self, other):
        o = SymComplex.of(other)
        return SymComplex(self.re * o.re - self.im * o.im, self.re * o.im + self.im * o.re)

    __rmul__ = __mul__

    def __neg__(self):
        return SymComplex(-self.re, -self.im)

    def conj(self) -> "SymComplex":
        return SymComplex(self.re, -self.im)


I = SymComplex(FIELD(0), FIELD(1))


# ---------------------------------------------------------------------------
# operator symbols


def _sign(rep: str) -> int:
    if rep == "H":
        return -1
    if rep == "P":
        return 1
    raise ValueError(f"unknown representation {rep!r}")


def _left_symbols(rep: str) -> dict[str, SymComplex]:
    s = _sign(rep)
    d = SymComplex(s * J * pv, s * J * pw)  # d_v + i d_w
    r2 = v * v + w * w + 1
    zbar = SymComplex(v, -w)
    half = QQ(1, 2)
    return {
        "J+": (d + SymComplex(4 * J * v / r2, 4 * J * w / r2)) * half,
        "J-": (-(zbar * zbar * d) + SymComplex(4 * J * v / r2, -4 * J * w / r2)) * half,
        "Jz": (zbar * d + 2 * J * (v * v + w * w - 1) / r2) * half,
    }


_DAGGER = {"J+": "J-", "J-": "J+", "Jz": "Jz"}


def spin_operator_symbol(which: str, side: str, rep: str) -> SymComplex:
    """Symbol of a spin operator acting from the left or the right.

    The right action of ``A`` is the complex conjugate of the left symbol of
    ``A^dagger``.
    """
    if which not in _DAGGER:
        raise ValueError(f"unknown operator {which!r}")
    table = _left_symbols(rep)
    if side == "left":
        return table[which]
    if side == "right":
        return table[_DAGGER[which]].conj()
    raise ValueError(f"side must be 'left' or 'right', got {side!r}")


def _product(ops: tuple[str, ...], side: str, rep: str) -> SymComplex:
    out = SymComplex.of(1)
    for op in ops:
        out = out * spin_operator_symbol(op, side, rep)
    return out


def _dissipator(jump: tuple[str, ...], rep: str, adjoint: bool) -> SymComplex:
    dag = tuple(_DAGGER[o] for o in reversed(jump))
    # forward: L rho L^dag; adjoint: L^dag X L
    sandwich = (
        _product(dag, "left", rep) * _product(jump, "right", rep)
        if adjoint
        else _product(jump, "left", rep) * _product(dag, "right", rep)
    )
    ldl = dag + jump
    return sandwich - (_product(ldl, "left", rep) + _product(ldl, "right", rep)) * QQ(1, 2)


# ---------------------------------------------------------------------------
# derivation


def j_limit(expr: SymExpr) -> SymExpr:
    """``lim_{J -> oo}`` of a rational function, by leading coefficients in J."""
    jg = _gen(J)
    num, den = expr.numer, expr.denom
    dn, dd = num.degree(jg), den.degree(jg)
    if num == 0 or dn < dd:
        return FIELD(0)
    if dn > dd:
        raise LimitError(f"numerator degree {dn} in J exceeds denominator degree {dd}")
    return FIELD(num.coeff_wrt(jg, dn)) / FIELD(den.coeff_wrt(jg, dd))


def _generator_symbol(rep: str) -> SymComplex:
    adjoint = rep == "H"
    jx = (spin_operator_symbol("J+", "left", rep) + spin_operator_symbol("J-", "left", rep)) * QQ(1, 2)
    jx_right = (spin_operator_symbol("J+", "right", rep) + spin_operator_symbol("J-", "right", rep)) * QQ(1, 2)
    # forward: -i[H, rho]; adjoint: +i[H, X]
    sign = 1 if adjoint else -1
    total = (jx - jx_right) * I * (sign * Om)
    total = total + _dissipator(("J+",), rep, adjoint) * (ga / J)
    total = total + _dissipator(("J-", "Jz"), rep, adjoint) * (Ga / J**3)
    return total * (1 / J)


def mirror(expr: SymExpr) -> SymExpr:
    """Image under ``(v, pi_v) -> (-v, -pi_v)``."""
    swap = [(_gen(v), -_gen(v)), (_gen(pv), -_gen(pv))]
    return FIELD(expr.numer.compose(swap)) / FIELD(expr.denom.compose(swap))


def _at_zero_momentum(expr: SymExpr) -> SymExpr:
    return expr.subs(pv, 0).subs(pw, 0)


def momentum_degree(expr: SymExpr) -> int:
    """Total degree in ``(pi_v, pi_w)``; the denominator must be free of them."""
    ip, iw = FIELD.gens.index(pv), FIELD.gens.index(pw)
    if any(m[ip] or m[iw] for m in expr.denom.monoms()):
        raise ValueError("denominator depends on the momenta")
    return max((m[ip] + m[iw] for m in expr.numer.monoms()), default=0)


class _Compiled(NamedTuple):
    value: Callable
    gradient: Callable
    pi_hessian: Callable


def _lower(exprs: list[SymExpr]) -> Callable:
    args = sympy.symbols("v w pv pw Om ga Ga")
    body = [e.as_expr() for e in exprs]
    return sympy.lambdify(args, body, modules="numpy", cse=True)


@dataclass(frozen=True)
class SymbolicHamiltonian:
    """Auxiliary Hamiltonian in one representation, exact and compiled."""

    rep: str
    expr: SymExpr
    compiled: _Compiled = field(repr=False, compare=False)

    def _call(self, fn, x, pi, p: ModelParams) -> np.ndarray:
        args = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (x[0], x[1], pi[0], pi[1])))
        out = fn(*args, p.omega, p.gamma, p.big_gamma)
        return np.array([np.broadcast_to(o, args[0].shape) for o in out], dtype=float)

    def value(self, x, pi, p: ModelParams):
        return self._call(self.compiled.value, x, pi, p)[0]

    def gradient(self, x, pi, p: ModelParams) -> np.ndarray:
        """``(dH/dv, dH/dw, dH/dpi_v, dH/dpi_w)``."""
        return self._call(self.compiled.gradient, x, pi, p)

    def diffusion(self, x, p: ModelParams) -> np.ndarray:
        """Half the momentum Hessian at ``pi = 0``."""
        hvv, hvw, hww = self._call(self.compiled.pi_hessian, x, (0.0, 0.0), p)
        return 0.5 * np.array([[hvv, hvw], [hvw, hww]])

    def coefficients(self) -> dict[tuple[int, int], SymExpr]:
        """Coefficient of each monomial ``pi_v^a pi_w^b``."""
        ip, iw = FIELD.gens.index(pv), FIELD.gens.index(pw)
        groups: dict[tuple[int, int], list] = {}
        for mon, coeff in self.expr.numer.terms():
            reduced = list(mon)
            key = (reduced[ip], reduced[iw])
            reduced[ip] = reduced[iw] = 0
            groups.setdefault(key, []).append((tuple(reduced), coeff))
        den = FIELD(self.expr.denom)
        return {k: FIELD(RING.from_dict(dict(t))) / den for k, t in sorted(groups.items())}


@functools.lru_cache(maxsize=None)
def derive_hamiltonian(rep: str) -> SymbolicHamiltonian:
    """Assemble ``lim J^-1 L(x, s J pi)`` for the given representation.

    ``H`` uses the adjoint generator (Husimi function as a backward
    quantity), ``P`` the forward one. Rates enter as the symbols ``Om``,
    ``ga`` and ``Ga``.
    """
    total = _generator_symbol(rep)
    if total.im != 0:
        raise DerivationError(f"imaginary part does not cancel for {rep}: {total.im}")
    expr = j_limit(total.re)
    grads = [expr.diff(x) for x in PHASE_VARS]
    hess = [expr.diff(pv).diff(pv), expr.diff(pv).diff(pw), expr.diff(pw).diff(pw)]
    compiled = _Compiled(_lower([expr]), _lower(grads), _lower(hess))
    return SymbolicHamiltonian(rep, expr, compiled)


# ---------------------------------------------------------------------------
# verification


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""


def _cubic_source(alpha, w_, p):
    from .instanton import _coeffs_and_slopes

    return _coeffs_and_slopes(alpha, w_, p)


def verify_identities(ham: SymbolicHamiltonian, coeff_source: Callable = _cubic_source) -> list[Check]:
    """Exact checks of ``ham`` against the on-axis cubic and mean-field drift.

    ``coeff_source(alpha, w, params)`` must return ``(coeffs, slopes)`` and
    accept field elements; by default it is the numeric implementation used
    for instanton tracing, so the check covers that code too.
    """
    checks = []
    expr = ham.expr
    checks.append(Check("vanishes at zero momentum", _at_zero_momentum(expr) == 0))
    deg = momentum_degree(expr)
    # pi_w times a cubic on the axis, and four operator factors in the Gamma jump
    checks.append(Check("at most quartic in momenta", deg <= 4, f"degree {deg}"))
    checks.append(Check("mirror symmetric", mirror(expr) == expr))

    coeffs, slopes = coeff_source(ham.rep, w, SYMBOLIC_PARAMS)
    axis = expr.subs(v, 0).subs(pv, 0)
    target = pw * sum((_lift(c) * pw**j for j, c in enumerate(coeffs)), FIELD(0))
    diff = axis - target
    checks.append(Check("axis restriction equals pi_w C", diff == 0, "" if diff == 0 else f"residual {diff}"))
    bad = [j for j, (c, d) in enumerate(zip(coeffs, slopes)) if _lift(c).diff(w) != _lift(d)]
    checks.append(Check("coefficient slopes", not bad, f"mismatch in c{bad}" if bad else ""))

    vdot, wdot = mf_rhs_stereo(StereoPoint(v, w), SYMBOLIC_PARAMS)
    mf_ok = (_at_zero_momentum(expr.diff(pv)) == vdot) and (_at_zero_momentum(expr.diff(pw)) == wdot)
    checks.append(Check("momentum gradient at pi=0 is the mean-field flow", mf_ok))
    return checks


# ---------------------------------------------------------------------------
# numerics


def hamilton_flow(ham: SymbolicHamiltonian, q, p: ModelParams):
    """``(dx/dt, dpi/dt) = (grad_pi H, -grad_x H)`` at ``q = (v, w, pi_v, pi_w)``."""
    g = ham.gradient((q[0], q[1]), (q[2], q[3]), p)
    return np.array([g[2], g[3], -g[0], -g[1]])


@dataclass(frozen=True)
class KMatrixAnalysis:
    """Linearized Hamilton dynamics ``dq/dt = dq . K`` around ``(x*, 0)``.

    ``modes`` holds row eigenvectors (``mode . K = lambda mode``) as rows.
    """

    matrix: np.ndarray
    eigenvalues: np.ndarray
    modes: np.ndarray
    right_vectors: np.ndarray
    pi_zero: np.ndarray
    stable: np.ndarray


def k_matrix(ham: SymbolicHamiltonian, fp: FixedPoint, p: ModelParams, tol: float = 1e-9) -> KMatrixAnalysis:
    x = fp.location
    jac = mf_jacobian(x, p)
    diff = ham.diffusion(x, p)
    kmat = np.block([[jac, np.zeros((2, 2))], [2 * diff, -jac.T]])
    vals, left = np.linalg.eig(kmat.T)
    order = np.lexsort((vals.imag, vals.real))
    vals, left = vals[order], left[:, order]
    modes = left.T
    right = np.linalg.inv(modes)
    norms = np.linalg.norm(modes, axis=1)
    pi_zero = np.linalg.norm(modes[:, 2:], axis=1) <= tol * norms
    return KMatrixAnalysis(kmat, vals, modes, right, pi_zero, vals.real < 0)
