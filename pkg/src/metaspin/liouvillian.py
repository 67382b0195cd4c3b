"""Lindblad generators for the collective spin and their stationary data.

The mirror-symmetric part of the density matrix is carried by real
entries ``p[M, M+k]`` (``rho = p`` for even ``k``, ``rho = i p`` for odd
``k``), giving a real generator ``W`` of dimension ``(2J+1)(J+1)``. The
flat index orders blocks by ``k`` and entries by ``M`` inside a block, so
populations (``k = 0``) come first and ``W`` is block tridiagonal in ``k``.

Gaps of metastable systems shrink like ``exp(-J A)`` and fall far below
double-precision resolution of ``W``. For those cases the generator is
rebuilt with ball arithmetic from python-flint and eliminated block by
block at a configurable working precision.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import ModelParams, find_axis_fixed_points

log = logging.getLogger(__name__)

PRECISION_MODES = ("auto", "double", "extended")
DEFAULT_MEMORY_BUDGET = 2 * 1024**3
DEFAULT_EXTENDED_BITS = 160
EPS = np.finfo(float).eps


class PrecisionError(ArithmeticError):
    """Machine precision cannot resolve the requested quantity."""


class ResourceError(MemoryError):
    pass


class EigenError(RuntimeError):
    pass


def ladder_coefficient(m: float, j: float) -> float:
    """``C_M = sqrt(J(J+1) - M(M+1))``; zero at ``M = J`` and ``M = -J-1``."""
    return math.sqrt(_ladder_sq(round(2 * m), round(2 * j)))


def _ladder_sq(two_m: int, two_j: int) -> int:
    # (J - M)(J + M + 1) in doubled units; exact for half-integer spins
    val = (two_j - two_m) * (two_j + two_m + 2)
    if val < 0 or val % 4:
        raise ValueError(f"M={two_m / 2} is outside [-J-1, J] for J={two_j / 2}")
    return val // 4


# ---------------------------------------------------------------------------
# index map and states


@dataclass(frozen=True)
class SectorIndex:
    """Flat index of ``p[M, M+k]``: block ``k`` ascending, then ``M`` ascending."""

    two_j: int

    @property
    def spin_j(self) -> float:
        return self.two_j / 2

    @property
    def dim(self) -> int:
        return (self.two_j + 1) * (self.two_j + 2) // 2

    def block_size(self, k: int) -> int:
        return self.two_j + 1 - k

    def offset(self, k: int) -> int:
        n = self.two_j + 1
        return k * n - k * (k - 1) // 2

    def index(self, k: int, m: int) -> int:
        """Position of ``p[M, M+k]`` with ``m = M + J`` in ``0 .. 2J-k``."""
        if not (0 <= k <= self.two_j and 0 <= m <= self.two_j - k):
            raise IndexError(f"(k={k}, m={m}) outside the sector for 2J={self.two_j}")
        return self.offset(k) + m

    @property
    def diagonal(self) -> slice:
        return slice(0, self.two_j + 1)

    def m_values(self) -> np.ndarray:
        return np.arange(self.two_j + 1) - self.spin_j


_PHASE = (1.0, 1j)


@dataclass(frozen=True)
class ReducedState:
    """Real vector of ``p[M, M+k]`` with its index map."""

    vector: np.ndarray
    index: SectorIndex
    precision: str = "double"

    def __post_init__(self):
        if self.vector.shape != (self.index.dim,):
            raise ValueError(f"state has shape {self.vector.shape}, expected ({self.index.dim},)")

    @property
    def populations(self) -> np.ndarray:
        return self.vector[self.index.diagonal]

    @property
    def diagonal_sum(self) -> float:
        return float(self.populations.sum())

    def to_density_matrix(self) -> np.ndarray:
        """Hermitian ``rho`` in the ``|J, M>`` basis, ``M`` ascending."""
        n = self.index.two_j + 1
        rho = np.zeros((n, n), dtype=complex)
        for k in range(n):
            seg = self.vector[self.index.offset(k):self.index.offset(k) + n - k] * _PHASE[k % 2]
            rho[np.arange(n - k), np.arange(k, n)] = seg
            rho[np.arange(k, n), np.arange(n - k)] = np.conj(seg)
        return rho

    @classmethod
    def from_density_matrix(cls, rho: np.ndarray) -> "ReducedState":
        """Reduced image of ``rho``; only the mirror-symmetric part survives."""
        n = rho.shape[0]
        index = SectorIndex(n - 1)
        parts = [np.real(np.diagonal(rho, k) / _PHASE[k % 2]) for k in range(n)]
        return cls(np.concatenate(parts), index)


def magnetization_z(state: ReducedState) -> float:
    """``m_z = sum_M M p[M, M] / J``."""
    idx = state.index
    return float(idx.m_values() @ state.populations / idx.spin_j)


# ---------------------------------------------------------------------------
# reduced generator


@dataclass(frozen=True)
class _Term:
    row: int
    col: int
    rate: int  # 0: Omega, 1: gamma, 2: Gamma
    coeff: Fraction
    radicand: int


def _term(row, col, rate, coeff, radicand):
    root = math.isqrt(radicand)
    if root * root == radicand:
        return _Term(row, col, rate, coeff * root, 1)
    return _Term(row, col, rate, coeff, radicand)


def _reduced_terms(two_j: int) -> list[_Term]:
    """Entries of W as exact (rate, rational, sqrt-of-integer) triples."""
    idx = SectorIndex(two_j)
    jj = Fraction(two_j, 2)
    c2 = lambda two_m: _ladder_sq(two_m, two_j)  # noqa: E731
    inv_j, inv_j3 = 1 / jj, 1 / jj**3
    terms = []
    for k in range(two_j + 1):
        for m in range(two_j + 1 - k):
            tm = 2 * m - two_j  # 2M
            big_m = Fraction(tm, 2)
            row = idx.index(k, m)
            if k == 0:
                if m > 0:
                    terms.append(_term(row, idx.index(1, m - 1), 0, Fraction(1), c2(tm - 2)))
                    terms.append(_term(row, idx.index(0, m - 1), 1, inv_j, c2(-tm) ** 2))
                if m < two_j:
                    terms.append(_term(row, idx.index(1, m), 0, Fraction(-1), c2(tm)))
                    terms.append(_term(
                        row, idx.index(0, m + 1), 2, inv_j3 * (big_m + 1) ** 2, c2(tm) ** 2))
                terms.append(_term(row, row, 1, -inv_j * c2(tm), 1))
                terms.append(_term(row, row, 2, -inv_j3 * big_m**2 * c2(-tm), 1))
                continue
            half = Fraction((-1) ** k, 2)
            tmk = tm + 2 * k  # 2(M+k)
            if m > 0:
                terms.append(_term(row, idx.index(k + 1, m - 1), 0, half, c2(tm - 2)))
                terms.append(_term(row, idx.index(k, m - 1), 1, inv_j, c2(-tm) * c2(-tmk)))
            terms.append(_term(row, idx.index(k - 1, m + 1), 0, half, c2(tm)))
            terms.append(_term(row, idx.index(k - 1, m), 0, -half, c2(tmk - 2)))
            if m + k < two_j:
                terms.append(_term(row, idx.index(k + 1, m), 0, -half, c2(tmk)))
                terms.append(_term(
                    row, idx.index(k, m + 1), 2,
                    inv_j3 * (big_m + 1) * (big_m + k + 1), c2(tm) * c2(tmk)))
            terms.append(_Term(row, row, 1, -inv_j / 2 * (c2(tm) + c2(tmk)), 1))
            terms.append(_Term(
                row, row, 2, -inv_j3 / 2 * (big_m**2 * c2(-tm) + (big_m + k) ** 2 * c2(-tmk)), 1))
    return terms


@dataclass(frozen=True)
class SparseGenerator:
    matrix: sp.csr_matrix
    params: ModelParams
    index: SectorIndex = field(repr=False)

    @property
    def dim(self) -> int:
        return self.index.dim


def estimate_memory(two_j: int) -> int:
    """Bytes for the sparse LU of the bordered generator (bandwidth ~ 2J)."""
    dim = (two_j + 1) * (two_j + 2) // 2
    return 16 * dim * (4 * two_j + 12)


def build_reduced_generator(p: ModelParams, memory_budget: int = DEFAULT_MEMORY_BUDGET) -> SparseGenerator:
    """Assemble the real generator of the mirror-symmetric sector."""
    two_j = p.two_j
    need = estimate_memory(two_j)
    if need > memory_budget:
        raise ResourceError(
            f"J={p.spin_j:g} needs about {need / 2**20:.0f} MiB, budget is {memory_budget / 2**20:.0f} MiB"
        )
    rates = (p.omega, p.gamma, p.big_gamma)
    terms = _reduced_terms(two_j)
    rows = np.fromiter((t.row for t in terms), dtype=np.int64, count=len(terms))
    cols = np.fromiter((t.col for t in terms), dtype=np.int64, count=len(terms))
    vals = np.fromiter(
        (rates[t.rate] * float(t.coeff) * math.sqrt(t.radicand) for t in terms),
        dtype=float, count=len(terms),
    )
    idx = SectorIndex(two_j)
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(idx.dim, idx.dim)).tocsr()
    mat.eliminate_zeros()
    return SparseGenerator(mat, p, idx)


# ---------------------------------------------------------------------------
# full generator (small-J oracle)


def spin_operators(j: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Dense ``J+``, ``J-``, ``Jz`` in the basis ``M = -J .. J``."""
    two_j = round(2 * j)
    ms = np.arange(two_j + 1) - j
    jp = np.zeros((two_j + 1, two_j + 1))
    for a in range(two_j):
        jp[a + 1, a] = ladder_coefficient(ms[a], j)
    return jp, jp.T.copy(), np.diag(ms)


@dataclass(frozen=True)
class FullGenerator:
    """Superoperator on row-major ``vec(rho)``."""

    matrix: np.ndarray
    params: ModelParams

    def apply(self, rho: np.ndarray) -> np.ndarray:
        n = rho.shape[0]
        return (self.matrix @ rho.reshape(-1)).reshape(n, n)


def _dissipator(op: np.ndarray) -> np.ndarray:
    n = op.shape[0]
    eye = np.eye(n)
    ldl = op.conj().T @ op
    return np.kron(op, op.conj()) - 0.5 * (np.kron(ldl, eye) + np.kron(eye, ldl.T))


def build_full_generator(p: ModelParams, cap: float = 8) -> FullGenerator:
    """Dense Lindblad superoperator built from operator products."""
    if p.spin_j > cap:
        raise ValueError(f"full generator is an oracle for J <= {cap:g}, got J={p.spin_j:g}")
    j = p.spin_j
    jp, jm, jz = spin_operators(j)
    eye = np.eye(jp.shape[0])
    ham = p.omega * 0.5 * (jp + jm)
    mat = -1j * (np.kron(ham, eye) - np.kron(eye, ham.T))
    mat = mat + p.gamma / j * _dissipator(jp) + p.big_gamma / j**3 * _dissipator(jm @ jz)
    return FullGenerator(mat, p)


# ---------------------------------------------------------------------------
# extended precision block elimination


class _ExtendedSystem:
    """``A = W + g e 1^T`` in ball arithmetic, factored by block elimination.

    Blocks are the ``k`` sectors. Elimination runs from ``k = 2J`` down to
    ``k = 0`` so the dense normalization row ends up in the last pivot.
    Midpoints are taken after every block so radii do not accumulate; the
    arithmetic is plain floating point at ``bits`` of mantissa.
    """

    def __init__(self, p: ModelParams, g: float | None, e_index: int | None, bits: int):
        from flint import arb, arb_mat, ctx, fmpq

        self._arb, self._mat, self._ctx, self.bits = arb, arb_mat, ctx, bits
        idx = self.index = SectorIndex(p.two_j)
        nk = [idx.block_size(k) for k in range(idx.two_j + 1)]
        with self._precision():
            rates = [arb(p.omega), arb(p.gamma), arb(p.big_gamma)]
            roots: dict[int, object] = {}
            diag = [[[arb(0)] * n for _ in range(n)] for n in nk]
            upper = [[[arb(0)] * nk[k + 1] for _ in range(nk[k])] for k in range(idx.two_j)]
            lower = [None] + [[[arb(0)] * nk[k - 1] for _ in range(nk[k])] for k in range(1, idx.two_j + 1)]
            kof = np.repeat(np.arange(idx.two_j + 1), nk)
            for t in _reduced_terms(idx.two_j):
                if t.radicand not in roots:
                    roots[t.radicand] = arb(t.radicand).sqrt()
                val = rates[t.rate] * fmpq(t.coeff.numerator, t.coeff.denominator) * roots[t.radicand]
                kr, kc = int(kof[t.row]), int(kof[t.col])
                mr, mc = t.row - idx.offset(kr), t.col - idx.offset(kc)
                block = diag[kr] if kc == kr else upper[kr] if kc == kr + 1 else lower[kr]
                block[mr][mc] += val
            if g is not None:
                for mc in range(nk[0]):
                    diag[0][e_index][mc] += arb(g)
            self.diag = [arb_mat(b) for b in diag]
            self.upper = [arb_mat(b) for b in upper]
            self.lower = [None] + [arb_mat(b) for b in lower[1:]]
            self._factor()

    def _precision(self):
        ctx = self._ctx
        bits = self.bits

        class _Prec:
            def __enter__(self_inner):
                self_inner.saved = ctx.prec
                ctx.prec = bits

            def __exit__(self_inner, *exc):
                ctx.prec = self_inner.saved

        return _Prec()

    def _factor(self):
        top = self.index.two_j
        self.inv = [None] * (top + 1)
        schur = self.diag[top]
        for k in range(top, -1, -1):
            try:
                self.inv[k] = schur.mid().inv()
            except ZeroDivisionError as exc:
                raise PrecisionError(
                    f"pivot block k={k} is singular at {self.bits} bits; increase the working precision"
                ) from exc
            self.inv[k] = self.inv[k].mid()
            if k:
                schur = (self.diag[k - 1] - self.upper[k - 1] * (self.inv[k] * self.lower[k])).mid()

    def _split(self, vec):
        idx = self.index
        return [self._mat([[x] for x in vec[idx.offset(k):idx.offset(k) + idx.block_size(k)]])
                for k in range(idx.two_j + 1)]

    def solve_blocks(self, rhs):
        with self._precision():
            top = self.index.two_j
            red = [None] * (top + 1)
            red[top] = rhs[top]
            for k in range(top - 1, -1, -1):
                red[k] = (rhs[k] - self.upper[k] * (self.inv[k + 1] * red[k + 1])).mid()
            sol = [None] * (top + 1)
            sol[0] = (self.inv[0] * red[0]).mid()
            for k in range(1, top + 1):
                sol[k] = (self.inv[k] * (red[k] - self.lower[k] * sol[k - 1])).mid()
            return sol

    def apply_blocks(self, x):
        with self._precision():
            top = self.index.two_j
            out = []
            for k in range(top + 1):
                acc = self.diag[k] * x[k]
                if k < top:
                    acc = acc + self.upper[k] * x[k + 1]
                if k:
                    acc = acc + self.lower[k] * x[k - 1]
                out.append(acc.mid())
            return out

    def blocks(self, vec):
        with self._precision():
            return self._split([self._arb(float(v)) for v in vec])

    def dot(self, x, y):
        with self._precision():
            acc = self._arb(0)
            for a, b in zip(x, y):
                acc += (a.transpose() * b)[0, 0]
            return acc.mid()

    def scale(self, x, factor):
        with self._precision():
            return [(b * factor).mid() for b in x]

    @staticmethod
    def to_numpy(x) -> np.ndarray:
        return np.array([float(b[i, 0]) for b in x for i in range(b.nrows())])


# ---------------------------------------------------------------------------
# steady state


def default_pivot(p: ModelParams) -> int:
    """Population index nearest ``J m_z`` of the upper stable branch (the only
    one when monostable)."""
    stable = [fp for fp in find_axis_fixed_points(p) if fp.is_stable]
    mz = max(fp.mz for fp in stable) if stable else 0.0
    return int(np.clip(round(p.spin_j * mz + p.spin_j), 0, p.two_j))


def _bordered(W: SparseGenerator, g: float, e_index: int) -> sp.csc_matrix:
    n = W.index.two_j + 1
    border = sp.coo_matrix((np.full(n, g), (np.full(n, e_index), np.arange(n))), shape=W.matrix.shape)
    return (W.matrix + border).tocsc()


def _condition_estimate(A: sp.csc_matrix, lu) -> float:
    inv = spla.LinearOperator(
        A.shape, matvec=lu.solve, rmatvec=lambda b: lu.solve(b, trans="T"), dtype=float,
    )
    return float(spla.norm(A, 1) * spla.onenormest(inv))


def _check_mode(precision: str):
    if precision not in PRECISION_MODES:
        raise ValueError(f"precision must be one of {PRECISION_MODES}, got {precision!r}")


def steady_state(
    W: SparseGenerator,
    g: float = 1.0,
    e_index: int | None = None,
    precision: str = "auto",
    rel_tol: float = 1e-8,
    bits: int = DEFAULT_EXTENDED_BITS,
) -> ReducedState:
    """Solve ``(W + g e 1^T) p = g e`` for the normalized stationary state.

    In ``double`` mode a sparse LU solve is accepted when the estimated
    condition number times machine epsilon is below ``rel_tol`` and the
    residual is small; otherwise :class:`PrecisionError` is raised. ``auto``
    falls back to block elimination at ``bits`` of precision instead.
    """
    _check_mode(precision)
    if g == 0:
        raise ValueError("weighting factor g must be nonzero")
    idx = W.index
    if e_index is None:
        e_index = default_pivot(W.params)
    if not 0 <= e_index <= idx.two_j:
        raise IndexError(f"e_index={e_index} is not a population position (0..{idx.two_j})")

    if precision != "extended":
        A = _bordered(W, g, e_index)
        lu = spla.splu(A)
        rhs = np.zeros(idx.dim)
        rhs[e_index] = g
        vec = lu.solve(rhs)
        cond = _condition_estimate(A, lu)
        residual = np.abs(W.matrix @ vec).max()
        scale = spla.norm(W.matrix, np.inf)
        ok = cond * EPS <= rel_tol and residual <= rel_tol * scale and abs(vec[idx.diagonal].sum() - 1) <= rel_tol
        if ok:
            return ReducedState(vec, idx, "double")
        msg = (f"steady state at J={W.params.spin_j:g}, Gamma={W.params.big_gamma:g}: condition "
               f"~{cond:.1e}, residual {residual:.1e}")
        if precision == "double":
            raise PrecisionError(msg + "; use extended precision")
        log.info("%s; switching to %d-bit arithmetic", msg, bits)

    system = _ExtendedSystem(W.params, g, e_index, bits)
    rhs = np.zeros(idx.dim)
    rhs[e_index] = g
    vec = system.to_numpy(system.solve_blocks(system.blocks(rhs)))
    return ReducedState(vec, idx, "extended")


# ---------------------------------------------------------------------------
# gap


@dataclass(frozen=True)
class GapResult:
    gap: float
    eigenvalue: complex
    method: str
    condition: float = float("nan")


def _dense_gap(W: SparseGenerator, zero_tol: float, overlap_min: float, steady: ReducedState | None) -> GapResult:
    dense = W.matrix.toarray()
    vals, vecs = sla.eig(dense)
    scale = max(1.0, W.params.gamma)
    zero = int(np.argmin(np.abs(vals)))
    if abs(vals[zero].real) > zero_tol * scale * max(1.0, np.abs(dense).max()):
        raise EigenError(f"no stationary eigenvalue found (closest is {vals[zero]:.3e})")
    if steady is not None:
        v = np.real_if_close(vecs[:, zero])
        cos = abs(np.vdot(v, steady.vector)) / (np.linalg.norm(v) * np.linalg.norm(steady.vector))
        if cos < overlap_min:
            raise EigenError(
                f"eigenvalue {vals[zero]:.3e} does not belong to the steady state (cosine {cos:.4f}); "
                "the gap is below double-precision resolution"
            )
    rest = np.delete(vals, zero)
    best = rest[np.argmax(rest.real)]
    return GapResult(float(-best.real), complex(best), "dense")


def _krylov_gap(W: SparseGenerator, A, lu, nev: int, g: float) -> GapResult:
    op = spla.LinearOperator(A.shape, matvec=lu.solve, dtype=float)
    try:
        mu = spla.eigs(op, k=nev, which="LM", return_eigenvectors=False, tol=1e-12, maxiter=5000)
    except spla.ArpackNoConvergence as exc:
        raise EigenError(
            "shift-invert iteration did not converge; try a small negative shift near the expected gap"
        ) from exc
    vals = 1.0 / mu
    vals = vals[np.abs(vals - g) > 1e-8 * abs(g)]
    best = vals[np.argmax(vals.real)]
    return GapResult(float(-best.real), complex(best), "shift-invert")


def _extended_gap(W: SparseGenerator, g: float, e_index: int, bits: int, max_iter: int = 200,
                  rtol: float = 1e-12) -> GapResult:
    system = _ExtendedSystem(W.params, g, e_index, bits)
    x = system.blocks(np.linspace(1.0, 2.0, W.dim))
    mu_prev = None
    for it in range(max_iter):
        y = system.solve_blocks(x)
        mu = system.dot(x, x) / system.dot(x, y)
        x = system.scale(y, 1 / system.dot(y, y).sqrt())
        mu_f = float(mu)
        if mu_prev is not None and abs(mu_f - mu_prev) <= rtol * abs(mu_f):
            break
        mu_prev = mu_f
    else:
        raise EigenError(
            f"inverse iteration stalled after {max_iter} steps (last {mu_f:.6e}); "
            "the slowest mode may be complex or not isolated; try double precision"
        )
    ax = system.apply_blocks(x)
    res = system.to_numpy(ax) - mu_f * system.to_numpy(x)
    if np.abs(res).max() > 1e-6 * abs(mu_f) * np.abs(system.to_numpy(x)).max():
        raise EigenError(f"eigenpair residual too large at {bits} bits; increase precision")
    if mu_f >= 0:
        raise EigenError(f"slowest mode eigenvalue {mu_f:.3e} is not decaying")
    return GapResult(-mu_f, complex(mu_f), f"extended-{bits}")


def liouvillian_gap_report(
    W: SparseGenerator,
    precision: str = "auto",
    dense_max: int = 4000,
    zero_tol: float = 1e-13,
    overlap_min: float = 0.999,
    rel_tol: float = 1e-6,
    g: float = 1.0,
    e_index: int | None = None,
    bits: int = DEFAULT_EXTENDED_BITS,
    nev: int = 6,
) -> GapResult:
    """Gap with the method and conditioning that produced it.

    Double precision is trusted while ``eps * cond(W + g e 1^T)`` stays
    below ``rel_tol``, which bounds the relative error of the slow
    eigenvalue. Below the dense threshold the full spectrum is computed;
    above it shift-invert Arnoldi runs on the bordered matrix, whose
    spectrum is that of ``W`` with the zero mode moved to ``g``.
    """
    _check_mode(precision)
    if e_index is None:
        e_index = default_pivot(W.params)
    if precision != "extended":
        A = _bordered(W, g, e_index)
        lu = spla.splu(A)
        cond = _condition_estimate(A, lu)
        if cond * EPS <= rel_tol:
            if W.dim <= dense_max:
                steady = ReducedState(lu.solve(np.eye(W.dim)[:, e_index] * g), W.index)
                res = _dense_gap(W, zero_tol, overlap_min, steady)
            else:
                res = _krylov_gap(W, A, lu, nev, g)
            return GapResult(res.gap, res.eigenvalue, res.method, cond)
        msg = f"gap at J={W.params.spin_j:g}, Gamma={W.params.big_gamma:g}: condition ~{cond:.1e}"
        if precision == "double":
            raise PrecisionError(msg + " exceeds double precision; use extended precision")
        log.info("%s; switching to %d-bit arithmetic", msg, bits)
        res = _extended_gap(W, g, e_index, bits)
        return GapResult(res.gap, res.eigenvalue, res.method, cond)
    return _extended_gap(W, g, e_index, bits)


def liouvillian_gap(W: SparseGenerator, **kwargs) -> float:
    """Negative real part of the slowest decaying eigenvalue of ``W``."""
    return liouvillian_gap_report(W, **kwargs).gap


def gap_estimator(lambda_small: float, lambda_big: float) -> float:
    """``ln(lambda(J-4) / lambda(J)) / 4``, a finite-size barrier estimate."""
    if not (lambda_small > 0 and lambda_big > 0):
        raise ValueError(f"gaps must be positive, got {lambda_small!r} and {lambda_big!r}")
    return 0.25 * math.log(lambda_small / lambda_big)
