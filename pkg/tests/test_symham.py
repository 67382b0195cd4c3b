from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import solve_ivp
from sympy import QQ

from metaspin.model import ModelParams, StereoPoint, find_axis_fixed_points, from_stereo, mf_jacobian, mf_rhs_stereo
from metaspin.symham import (
    FIELD,
    RING,
    SYMBOLIC_PARAMS,
    Ga,
    Om,
    derive_hamiltonian,
    ga,
    hamilton_flow,
    j_limit,
    k_matrix,
    mirror,
    momentum_degree,
    pv,
    pw,
    spin_operator_symbol,
    v,
    verify_identities,
    w,
    J,
)
from metaspin.instanton import _coeffs_and_slopes, cubic_coeffs, hamiltonian_on_axis

REPS = ("H", "P")
coords = st.floats(-2.5, 2.5)
momenta = st.floats(-1.5, 1.5)
rates = st.builds(ModelParams, omega=st.floats(0.05, 1.0), big_gamma=st.floats(0.0, 12.0))


@pytest.fixture(scope="module", params=REPS)
def ham(request):
    return derive_hamiltonian(request.param)


def _exact(expr, point):
    """Evaluate a field element at rational values of every variable it uses."""
    subs = [(RING.gens[FIELD.gens.index(x)], QQ(*Fraction(val).as_integer_ratio())) for x, val in point.items()]
    num = expr.numer.evaluate(subs)
    den = expr.denom.evaluate(subs)
    return float(QQ.to_sympy(num.LC if num else QQ(0)) / QQ.to_sympy(den.LC))


class TestOperatorSymbols:
    def test_jz_at_zero_momentum_is_stereographic_mz(self):
        s = spin_operator_symbol("Jz", "left", "H")
        re = s.re.subs(pv, 0).subs(pw, 0) / J
        assert re == (v * v + w * w - 1) / (v * v + w * w + 1)
        assert s.im.subs(pv, 0).subs(pw, 0) == 0

    @pytest.mark.parametrize("xy", [(0.3, -0.7), (-1.2, 0.4), (2.0, 1.5)])
    def test_raising_symbol_matches_transverse_magnetization(self, xy):
        s = spin_operator_symbol("J+", "left", "H")
        pt = {v: xy[0], w: xy[1], pv: 0, pw: 0, J: 1}
        m = from_stereo(StereoPoint(*xy))
        assert _exact(s.re / J, pt) == pytest.approx(m.mx, abs=1e-14)
        assert _exact(s.im / J, pt) == pytest.approx(m.my, abs=1e-14)

    @pytest.mark.parametrize("rep", REPS)
    def test_right_action_of_hermitian_operator(self, rep):
        left = spin_operator_symbol("Jz", "left", rep)
        right = spin_operator_symbol("Jz", "right", rep)
        assert right.re == left.re and right.im == -left.im

    def test_unknown_operator(self):
        with pytest.raises(ValueError):
            spin_operator_symbol("Jx", "left", "H")


class TestLimit:
    def test_leading_coefficients(self):
        assert j_limit((3 * J**2 + v) / (J**2 + 1)) == 3

    def test_vanishing_limit(self):
        assert j_limit(v / (J + 1)) == 0

    def test_divergent_limit(self):
        from metaspin.symham import LimitError

        with pytest.raises(LimitError):
            j_limit(J**2 / (J + 1))


class TestDerivation:
    def test_free_of_spin_length(self, ham):
        assert all(m[FIELD.gens.index(J)] == 0 for m in ham.expr.numer.monoms())
        assert all(m[FIELD.gens.index(J)] == 0 for m in ham.expr.denom.monoms())

    def test_identities_hold(self, ham):
        checks = verify_identities(ham)
        assert all(c.passed for c in checks), [c for c in checks if not c.passed]

    def test_zero_momentum(self, ham):
        assert ham.expr.subs(pv, 0).subs(pw, 0) == 0

    def test_quartic(self, ham):
        assert momentum_degree(ham.expr) == 4

    def test_mirror(self, ham):
        assert mirror(ham.expr) == ham.expr

    def test_axis_restriction_exactly_matches_cubic(self, ham):
        coeffs, _ = _coeffs_and_slopes(ham.rep, w, SYMBOLIC_PARAMS)
        axis = ham.expr.subs(v, 0).subs(pv, 0)
        assert axis == pw * sum((c * pw**j for j, c in enumerate(coeffs)), FIELD(0))

    def test_mean_field_limit(self, ham):
        vdot, wdot = mf_rhs_stereo(StereoPoint(v, w), SYMBOLIC_PARAMS)
        assert ham.expr.diff(pv).subs(pv, 0).subs(pw, 0) == vdot
        assert ham.expr.diff(pw).subs(pv, 0).subs(pw, 0) == wdot

    def test_printed_top_coefficient(self):
        c = cubic_coeffs("H", 1.0, ModelParams(big_gamma=9.0))
        assert c.c3 == pytest.approx(9.0 / 8, rel=1e-15)

    def test_p_coefficients_vanish_at_origin(self):
        c = cubic_coeffs("P", 0.0, ModelParams(big_gamma=9.0))
        assert c.c2 == 0.0 and c.c3 == 0.0

    def test_coefficient_groups(self, ham):
        groups = ham.coefficients()
        assert (0, 0) not in groups
        rebuilt = sum((c * pv**a * pw**b for (a, b), c in groups.items()), FIELD(0))
        assert rebuilt == ham.expr

    def test_representations_differ(self):
        assert derive_hamiltonian("H").expr != derive_hamiltonian("P").expr

    def test_cached(self):
        assert derive_hamiltonian("H") is derive_hamiltonian("H")


class TestMutation:
    @pytest.mark.parametrize("slot", [0, 1, 2, 3])
    def test_perturbed_coefficient_is_caught(self, ham, slot):
        def perturbed(alpha, w_, p):
            coeffs, slopes = _coeffs_and_slopes(alpha, w_, p)
            coeffs = list(coeffs)
            coeffs[slot] = coeffs[slot] + w_**2 / 1000
            return coeffs, slopes

        failed = {c.name for c in verify_identities(ham, coeff_source=perturbed) if not c.passed}
        assert "axis restriction equals pi_w C" in failed
        assert "coefficient slopes" in failed

    def test_perturbed_slope_is_caught(self, ham):
        def perturbed(alpha, w_, p):
            coeffs, slopes = _coeffs_and_slopes(alpha, w_, p)
            return coeffs, [slopes[0] + Om / 7, *slopes[1:]]

        failed = {c.name for c in verify_identities(ham, coeff_source=perturbed) if not c.passed}
        assert failed == {"coefficient slopes"}


class TestNumerics:
    def test_compiled_matches_exact_evaluation(self, ham):
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(100):
            num = rng.integers(-40, 41, size=7)
            vals = [Fraction(int(n), 16) for n in num[:4]] + [Fraction(abs(int(n)) + 1, 16) for n in num[4:]]
            point = dict(zip((v, w, pv, pw, Om, ga, Ga), vals))
            exact = _exact(ham.expr, point)
            p = ModelParams(omega=float(vals[4]), gamma=float(vals[5]), big_gamma=float(vals[6]))
            got = float(ham.value((float(vals[0]), float(vals[1])), (float(vals[2]), float(vals[3])), p))
            worst = max(worst, abs(got - exact) / max(1.0, abs(exact)))
        assert worst <= 1e-12

    @given(coords, coords, momenta, momenta, rates)
    def test_gradient_matches_finite_differences(self, ham, x, y, a, b, p):
        q = np.array([x, y, a, b])
        grad = ham.gradient((x, y), (a, b), p)
        h = 1e-6
        for i in range(4):
            dq = np.zeros(4)
            dq[i] = h
            hi, lo = (ham.value(tuple(z[:2]), tuple(z[2:]), p) for z in (q + dq, q - dq))
            fd = (hi - lo) / (2 * h)
            assert abs(fd - grad[i]) <= 1e-6 * max(1.0, abs(grad[i]), abs(ham.value((x, y), (a, b), p)))

    @given(coords, momenta, rates)
    def test_invariant_plane(self, ham, y, b, p):
        vel = hamilton_flow(ham, (0.0, y, 0.0, b), p)
        assert abs(vel[0]) <= 1e-12 and abs(vel[2]) <= 1e-12

    @given(coords, momenta, rates)
    def test_axis_value_matches_cubic(self, ham, y, b, p):
        full = float(ham.value((0.0, y), (0.0, b), p))
        cubic = hamiltonian_on_axis(ham.rep, y, b, p)
        assert full == pytest.approx(cubic, rel=1e-12, abs=1e-12)

    def test_energy_conservation(self, ham):
        p = ModelParams(omega=0.25, big_gamma=9.0)
        u = next(fp for fp in find_axis_fixed_points(p) if fp.label == "u")
        q0 = np.array([0.05, u.w + 0.05, 0.02, -0.03])
        sol = solve_ivp(lambda t, q: hamilton_flow(ham, q, p), (0.0, 1.0), q0,
                        method="DOP853", rtol=1e-12, atol=1e-14)
        h0 = ham.value(tuple(q0[:2]), tuple(q0[2:]), p)
        h1 = ham.value(tuple(sol.y[:2, -1]), tuple(sol.y[2:, -1]), p)
        assert abs(h1 - h0) <= 1e-10

    def test_diffusion_is_symmetric(self, ham):
        # quasi-probability symbols: no sign is implied for the on-axis block
        p = ModelParams(omega=0.25, big_gamma=9.0)
        for fp in find_axis_fixed_points(p):
            d = ham.diffusion(fp.location, p)
            assert np.array_equal(d, d.T)


class TestKMatrix:
    @pytest.fixture(scope="class")
    @staticmethod
    def ref_case():
        p = ModelParams(omega=0.25, big_gamma=9.0)
        return p, find_axis_fixed_points(p)

    def test_spectrum_pairs(self, ham, ref_case):
        p, fps = ref_case
        for fp in fps:
            ka = k_matrix(ham, fp, p)
            lam = np.linalg.eigvals(mf_jacobian(fp.location, p))
            expect = np.sort_complex(np.concatenate([lam, -lam]))
            assert np.allclose(np.sort_complex(ka.eigenvalues), expect, atol=1e-9)
            assert abs(np.trace(ka.matrix)) <= 1e-12

    def test_stable_point_directions(self, ham, ref_case):
        p, fps = ref_case
        for fp in (f for f in fps if f.is_stable):
            ka = k_matrix(ham, fp, p)
            assert np.array_equal(ka.pi_zero, ka.stable)
            assert ka.stable.sum() == 2

    def test_modes_are_left_eigenvectors(self, ham, ref_case):
        p, fps = ref_case
        ka = k_matrix(ham, fps[0], p)
        for lam, mode in zip(ka.eigenvalues, ka.modes):
            assert np.allclose(mode @ ka.matrix, lam * mode, atol=1e-10)
        assert np.allclose(ka.modes @ ka.right_vectors, np.eye(4), atol=1e-10)
