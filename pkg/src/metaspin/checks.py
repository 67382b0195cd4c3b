"""Verification suite run by ``metaspin verify``.

Each check returns a :class:`~metaspin.symham.Check`; the suite never raises
for a failed comparison, only for programming errors.
"""

from __future__ import annotations

import numpy as np

from .model import (
    Magnetization,
    ModelParams,
    StereoPoint,
    find_axis_fixed_points,
    from_stereo,
    mf_rhs_cartesian,
    mf_rhs_stereo,
    to_stereo,
)
from .symham import Check

ORACLE_SPINS = (1.0, 2.0, 4.0, 6.0)


def full_steady_state(p: ModelParams) -> np.ndarray:
    """Density matrix spanning the null space of the dense generator."""
    from .liouvillian import build_full_generator

    mat = build_full_generator(p).matrix
    vals, vecs = np.linalg.eig(mat)
    k = int(np.argmin(np.abs(vals)))
    n = round(2 * p.spin_j) + 1
    rho = vecs[:, k].reshape(n, n)
    return rho / np.trace(rho)


def full_gap(p: ModelParams, zero_tol: float = 1e-10) -> float:
    """``-Re`` of the slowest nonzero eigenvalue of the dense generator, all sectors."""
    from .liouvillian import build_full_generator

    return _slowest(np.linalg.eigvals(build_full_generator(p).matrix), zero_tol)


def _slowest(vals: np.ndarray, zero_tol: float) -> float:
    decay = np.sort(-vals.real)
    return float(decay[decay > zero_tol][0])


def symmetric_sector_oracle(p: ModelParams) -> tuple[np.ndarray, float]:
    """Dense generator restricted to mirror-symmetric Hermitian matrices.

    Columns follow the ``(k, M)`` order of the reduced generator: the basis
    element for ``(k, M)`` has ``rho[M, M+k] = i^(k mod 2)`` and its Hermitian
    partner. Returns the real matrix and the largest component that leaves
    the sector (zero when the sector is invariant).
    """
    from .liouvillian import build_full_generator

    mat = build_full_generator(p).matrix
    n = round(2 * p.spin_j) + 1
    cells = [(k, m) for k in range(n) for m in range(n - k)]
    out = np.zeros((len(cells), len(cells)))
    leak = 0.0
    for col, (k, m) in enumerate(cells):
        phase = 1j if k % 2 else 1.0
        basis = np.zeros((n, n), dtype=complex)
        basis[m, m + k] = phase
        basis[m + k, m] = np.conj(phase)
        image = (mat @ basis.reshape(-1)).reshape(n, n)
        for row, (kk, mm) in enumerate(cells):
            val = image[mm, mm + kk] / (1j if kk % 2 else 1.0)
            out[row, col] = val.real
            leak = max(leak, abs(val.imag))
    return out, leak


def sector_gap(p: ModelParams, zero_tol: float = 1e-10) -> float:
    return _slowest(np.linalg.eigvals(symmetric_sector_oracle(p)[0]), zero_tol)


def full_magnetization(rho: np.ndarray, j: float) -> float:
    ms = np.arange(rho.shape[0]) - j
    return float(np.real(np.sum(np.diag(rho) * ms)) / j)


def oracle_draws(n: int, seed: int = 20240) -> list[tuple[float, float]]:
    """Deterministic ``(omega, Gamma)`` pairs spanning both regimes."""
    rng = np.random.default_rng(seed)
    return [(float(rng.uniform(0.05, 1.0)), float(rng.uniform(0.0, 12.0))) for _ in range(n)]


def _liouvillian_checks(draws: int) -> list[Check]:
    from .liouvillian import build_reduced_generator, liouvillian_gap, magnetization_z, steady_state

    out = []
    worst_m = worst_gap = worst_trace = worst_leak = worst_entry = 0.0
    for j in ORACLE_SPINS:
        for omega, big_gamma in oracle_draws(draws):
            p = ModelParams(omega=omega, big_gamma=big_gamma, spin_j=j)
            W = build_reduced_generator(p)
            oracle, leak = symmetric_sector_oracle(p)
            worst_leak = max(worst_leak, leak)
            worst_entry = max(worst_entry, float(np.abs(W.matrix.toarray() - oracle).max()))
            pops = W.matrix.tocsr()[W.index.diagonal, :]
            worst_trace = max(worst_trace, float(np.abs(np.asarray(pops.sum(axis=0))).max()))
            m_red = magnetization_z(steady_state(W, precision="double"))
            m_full = full_magnetization(full_steady_state(p), j)
            worst_m = max(worst_m, abs(m_red - m_full))
            g_red, g_full = liouvillian_gap(W, precision="double"), sector_gap(p)
            worst_gap = max(worst_gap, abs(g_red - g_full) / g_full)
    out.append(Check("mirror-symmetric sector is invariant", worst_leak < 1e-12, f"max leak {worst_leak:.1e}"))
    out.append(Check("reduced generator equals the projected dense generator", worst_entry < 1e-12,
                     f"max entry error {worst_entry:.1e}"))
    out.append(Check("reduced generator conserves the trace", worst_trace < 1e-12, f"max {worst_trace:.1e}"))
    out.append(Check("steady-state m_z matches the dense oracle", worst_m < 1e-10, f"max {worst_m:.1e}"))
    out.append(Check("gap matches the dense symmetric-sector spectrum", worst_gap < 1e-8, f"max rel {worst_gap:.1e}"))
    return out


def _model_checks() -> list[Check]:
    rng = np.random.default_rng(7)
    p = ModelParams()
    worst_tan = worst_chain = 0.0
    for _ in range(20):
        x = StereoPoint(*rng.normal(size=2))
        m = from_stereo(x)
        mdot = np.array(mf_rhs_cartesian(m, p))
        worst_tan = max(worst_tan, abs(float(np.dot(m, mdot))))
        h = 1e-6
        fwd = to_stereo(Magnetization(*(np.array(m) + h * mdot)))
        bwd = to_stereo(Magnetization(*(np.array(m) - h * mdot)))
        fd = (np.array(fwd) - np.array(bwd)) / (2 * h)
        worst_chain = max(worst_chain, float(np.abs(fd - np.array(mf_rhs_stereo(x, p))).max()))
    labels = [fp.label for fp in find_axis_fixed_points(p)]
    return [
        Check("mean-field flow is tangent to the sphere", worst_tan < 1e-12, f"max {worst_tan:.1e}"),
        Check("stereographic flow is the projected Cartesian flow", worst_chain < 1e-6, f"max {worst_chain:.1e}"),
        Check("six axis fixed points at the reference point", labels == ["u", "r1", "l", "s1", "s2", "r2"],
              ",".join(str(x) for x in labels)),
    ]


def _instanton_checks() -> list[Check]:
    from .instanton import InstantonError, activation_barriers

    p = ModelParams()
    try:
        table = activation_barriers(p, alphas=("H", "P"), keep_trajectories=True)
    except InstantonError as exc:
        return [Check("instanton barriers at the reference point", False, str(exc))]
    (h_lu, h_ul), (p_lu, p_ul) = table.per_method["H"], table.per_method["P"]
    rel = max(abs(h_lu - p_lu) / h_lu, abs(h_ul - p_ul) / h_ul)
    worst_c = max(rec["trajectory"].max_abs_c for rec in table.candidates if "trajectory" in rec)
    return [
        Check("H and P barriers agree", rel < 1e-6, f"rel {rel:.1e}"),
        Check("trajectories stay on the zero-energy surface", worst_c < 1e-8, f"max |C| {worst_c:.1e}"),
        Check("both barriers positive", min(h_lu, h_ul) > 0, f"{h_lu:.5f}, {h_ul:.5f}"),
    ]


def _symbolic_checks() -> list[Check]:
    from .symham import derive_hamiltonian, k_matrix, verify_identities

    out = []
    p = ModelParams()
    fps = find_axis_fixed_points(p)
    for rep in ("H", "P"):
        ham = derive_hamiltonian(rep)
        out.extend(Check(f"{rep}: {c.name}", c.passed, c.detail) for c in verify_identities(ham))
        bad = []
        for fp in fps:
            ka = k_matrix(ham, fp, p)
            mf = np.sort_complex(np.linalg.eigvals(ka.matrix[:2, :2]))
            spectrum = np.sort_complex(ka.eigenvalues)
            mirrored = np.sort_complex(np.concatenate([mf, -mf]))
            if not np.allclose(spectrum, mirrored, atol=1e-9) or ka.pi_zero.sum() != 2:
                bad.append(fp.label)
        out.append(Check(f"{rep}: K-matrix spectrum pairs with the mean-field Jacobian", not bad,
                         f"failed at {bad}" if bad else ""))
    return out


def run_all(draws: int = 2) -> list[Check]:
    return _model_checks() + _symbolic_checks() + _liouvillian_checks(draws) + _instanton_checks()
