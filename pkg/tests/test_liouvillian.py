import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from metaspin.liouvillian import (
    EigenError,
    PrecisionError,
    ReducedState,
    ResourceError,
    SectorIndex,
    build_full_generator,
    build_reduced_generator,
    default_pivot,
    gap_estimator,
    ladder_coefficient,
    liouvillian_gap,
    liouvillian_gap_report,
    magnetization_z,
    steady_state,
)
from metaspin.model import ModelParams, find_axis_fixed_points

# Dense Lindblad superoperator in mpmath (tests/oracles/compute_oracles.py):
# (omega, Gamma, J) -> (m_z, slowest decay over all sectors, over the
# mirror-symmetric sector).
DENSE_ORACLE = {
    (0.25, 9.0, 1.0): (0.084972560943861878, 2.0012281335421658, 2.0012281335421658),
    (0.25, 9.0, 2.0): (0.15714936932297177, 0.72032341641310599, 0.72032341641310599),
    (0.7, 3.0, 2.0): (0.29647029223882377, 1.3053849748792173, 1.3285890690117036),
    (0.4, 6.0, 4.0): (0.29207571417109171, 0.33532722517567462, 0.33532722517567462),
}

small_params = st.builds(
    ModelParams,
    omega=st.floats(0.05, 1.0),
    big_gamma=st.floats(0.0, 12.0),
    spin_j=st.sampled_from([0.5, 1.0, 1.5, 2.0, 3.0]),
)


def _reduced_vector(rng, two_j):
    return rng.normal(size=SectorIndex(two_j).dim)


class TestIndex:
    @pytest.mark.parametrize("two_j", [1, 2, 7, 64, 128])
    def test_dimension(self, two_j):
        j = two_j / 2
        assert SectorIndex(two_j).dim == round((2 * j + 1) * (j + 1))

    def test_blocks_are_contiguous(self):
        idx = SectorIndex(6)
        flat = [idx.index(k, m) for k in range(7) for m in range(7 - k)]
        assert flat == list(range(idx.dim))

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            SectorIndex(4).index(2, 3)

    def test_ladder_coefficient_vanishes_at_top(self):
        assert ladder_coefficient(3.0, 3.0) == 0.0
        assert ladder_coefficient(-1.0, 1.0) == pytest.approx(math.sqrt(2.0))


class TestReducedState:
    @given(st.integers(1, 8), st.integers(0, 2**32 - 1))
    def test_round_trip(self, two_j, seed):
        vec = _reduced_vector(np.random.default_rng(seed), two_j)
        state = ReducedState(vec, SectorIndex(two_j))
        rho = state.to_density_matrix()
        assert np.allclose(rho, rho.conj().T)
        assert np.array_equal(ReducedState.from_density_matrix(rho).vector, vec)

    def test_magnetization_extremes(self):
        idx = SectorIndex(6)
        top = np.zeros(idx.dim)
        top[6] = 1.0
        assert magnetization_z(ReducedState(top, idx)) == 1.0
        flat = np.zeros(idx.dim)
        flat[:7] = 1 / 7
        assert magnetization_z(ReducedState(flat, idx)) == pytest.approx(0.0, abs=1e-16)

    def test_shape_is_checked(self):
        with pytest.raises(ValueError):
            ReducedState(np.zeros(5), SectorIndex(2))


class TestGenerator:
    def test_spin_one_dimension(self):
        assert build_reduced_generator(ModelParams(spin_j=1.0)).dim == 6

    def test_trace_conservation_reference(self):
        W = build_reduced_generator(ModelParams(omega=0.25, big_gamma=9.0, spin_j=4.0))
        pops = W.matrix.tocsr()[W.index.diagonal, :]
        assert np.abs(np.asarray(pops.sum(axis=0))).max() <= 1e-13

    @given(st.floats(0.05, 1.0), st.floats(0.0, 12.0), st.sampled_from([8.0, 20.0, 40.0, 64.0]))
    def test_trace_conservation(self, omega, big_gamma, j):
        W = build_reduced_generator(ModelParams(omega=omega, big_gamma=big_gamma, spin_j=j))
        pops = W.matrix.tocsr()[W.index.diagonal, :]
        assert np.abs(np.asarray(pops.sum(axis=0))).max() <= 1e-13 * max(1.0, big_gamma)

    def test_sparsity(self):
        W = build_reduced_generator(ModelParams(spin_j=10.0))
        assert np.diff(W.matrix.tocsr().indptr).max() <= 9

    @given(small_params, st.integers(0, 2**32 - 1))
    def test_matches_dense_generator_on_sector(self, p, seed):
        W = build_reduced_generator(p)
        vec = _reduced_vector(np.random.default_rng(seed), p.two_j)
        rho = ReducedState(vec, W.index).to_density_matrix()
        image = build_full_generator(p).apply(rho)
        # the image stays in the sector: real reduced entries, no leak
        n = rho.shape[0]
        for k in range(n):
            seg = np.diagonal(image, k) / (1j if k % 2 else 1.0)
            assert np.abs(seg.imag).max() <= 1e-12 * max(1.0, np.abs(image).max())
        expected = ReducedState.from_density_matrix(image).vector
        assert np.allclose(W.matrix @ vec, expected, rtol=0, atol=1e-12 * max(1.0, np.abs(expected).max()))

    def test_memory_budget(self):
        with pytest.raises(ResourceError):
            build_reduced_generator(ModelParams(spin_j=64.0), memory_budget=1000)


class TestFullGenerator:
    @given(st.integers(0, 2**32 - 1))
    def test_preserves_trace_and_hermiticity(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(5, 5)) + 1j * rng.normal(size=(5, 5))
        rho = a + a.conj().T
        out = build_full_generator(ModelParams(omega=0.3, big_gamma=4.0, spin_j=2.0)).apply(rho)
        assert abs(np.trace(out)) <= 1e-13 * np.abs(rho).max() * 10
        assert np.abs(out - out.conj().T).max() <= 1e-13 * np.abs(out).max()

    def test_pump_only_fills_top_state(self):
        p = ModelParams(omega=0.0, big_gamma=0.0, spin_j=1.0)
        top = np.zeros((3, 3))
        top[2, 2] = 1.0
        assert np.abs(build_full_generator(p).apply(top)).max() == 0.0

    def test_cap(self):
        with pytest.raises(ValueError):
            build_full_generator(ModelParams(spin_j=9.0))


class TestSteadyState:
    @pytest.mark.parametrize("key", sorted(DENSE_ORACLE))
    def test_magnetization_matches_dense_oracle(self, key):
        omega, big_gamma, j = key
        W = build_reduced_generator(ModelParams(omega=omega, big_gamma=big_gamma, spin_j=j))
        assert magnetization_z(steady_state(W)) == pytest.approx(DENSE_ORACLE[key][0], abs=1e-12)

    def test_density_matrix_is_null_vector(self):
        p = ModelParams(omega=0.25, big_gamma=9.0, spin_j=2.0)
        rho = steady_state(build_reduced_generator(p)).to_density_matrix()
        assert np.abs(build_full_generator(p).apply(rho)).max() <= 1e-12
        assert np.trace(rho).real == pytest.approx(1.0, abs=1e-12)
        assert np.linalg.eigvalsh(rho).min() >= -1e-10

    def test_pump_only_state(self):
        W = build_reduced_generator(ModelParams(omega=0.0, big_gamma=0.0, spin_j=1.0))
        state = steady_state(W, e_index=2)
        assert magnetization_z(state) == pytest.approx(1.0, abs=1e-14)

    def test_residual_and_branch_at_moderate_spin(self):
        p = ModelParams(omega=0.25, big_gamma=3.0, spin_j=32.0)
        W = build_reduced_generator(p)
        state = steady_state(W)
        assert np.abs(W.matrix @ state.vector).max() <= 1e-10
        assert state.diagonal_sum == pytest.approx(1.0, abs=1e-10)
        u = next(fp for fp in find_axis_fixed_points(p) if fp.label == "u")
        assert abs(magnetization_z(state) - u.mz) <= 0.05

    def test_weight_and_pivot_invariance(self):
        W = build_reduced_generator(ModelParams(omega=0.25, big_gamma=3.0, spin_j=32.0))
        a = steady_state(W, g=1.0, e_index=32)
        b = steady_state(W, g=10.0, e_index=64)
        assert np.abs(a.vector - b.vector).max() <= 1e-9

    @given(small_params, st.floats(0.1, 10.0), st.data())
    def test_invariance_property(self, p, g, data):
        W = build_reduced_generator(p)
        e = data.draw(st.integers(0, p.two_j))
        a = steady_state(W, precision="double")
        b = steady_state(W, g=g, e_index=e, precision="double")
        assert np.abs(a.vector - b.vector).max() <= 1e-9

    @given(small_params)
    def test_positivity(self, p):
        rho = steady_state(build_reduced_generator(p)).to_density_matrix()
        assert np.linalg.eigvalsh(rho).min() >= -1e-10

    def test_bad_arguments(self):
        W = build_reduced_generator(ModelParams(spin_j=2.0))
        with pytest.raises(ValueError):
            steady_state(W, g=0.0)
        with pytest.raises(IndexError):
            steady_state(W, e_index=5)
        with pytest.raises(ValueError):
            steady_state(W, precision="quad")

    def test_double_precision_refuses_ill_conditioned_solve(self):
        W = build_reduced_generator(ModelParams(omega=0.25, big_gamma=9.0, spin_j=40.0))
        with pytest.raises(PrecisionError, match="extended"):
            steady_state(W, precision="double")

    def test_extended_agrees_with_double(self):
        W = build_reduced_generator(ModelParams(omega=0.25, big_gamma=3.0, spin_j=12.0))
        a = steady_state(W, precision="double")
        b = steady_state(W, precision="extended")
        assert b.precision == "extended"
        assert np.abs(a.vector - b.vector).max() <= 1e-11

    def test_default_pivot_tracks_upper_branch(self):
        p = ModelParams(omega=0.25, big_gamma=3.0, spin_j=32.0)
        u = next(fp for fp in find_axis_fixed_points(p) if fp.label == "u")
        assert default_pivot(p) == round(32 * u.mz + 32)


class TestGap:
    @pytest.mark.parametrize("key", sorted(DENSE_ORACLE))
    def test_matches_symmetric_sector_oracle(self, key):
        omega, big_gamma, j = key
        W = build_reduced_generator(ModelParams(omega=omega, big_gamma=big_gamma, spin_j=j))
        assert liouvillian_gap(W) == pytest.approx(DENSE_ORACLE[key][2], rel=1e-10)

    def test_antisymmetric_mode_can_be_slower(self):
        # the reduced gap is a symmetric-sector quantity; here the
        # antisymmetric sector holds a slower mode
        _, full, sector = DENSE_ORACLE[(0.7, 3.0, 2.0)]
        W = build_reduced_generator(ModelParams(omega=0.7, big_gamma=3.0, spin_j=2.0))
        assert full < sector
        assert liouvillian_gap(W) == pytest.approx(sector, rel=1e-10)

    def test_pump_only_spin_one(self):
        # lower-triangular generator; the slowest decay is the coherence
        # between the two top levels at rate gamma
        W = build_reduced_generator(ModelParams(omega=0.0, big_gamma=0.0, spin_j=1.0))
        dense = W.matrix.toarray()
        assert np.allclose(np.triu(dense[:3, :3], 1), 0)
        assert liouvillian_gap(W, e_index=2) == pytest.approx(1.0, rel=1e-12)

    def test_report_carries_method(self):
        W = build_reduced_generator(ModelParams(omega=0.25, big_gamma=3.0, spin_j=8.0))
        rep = liouvillian_gap_report(W)
        assert rep.method == "dense" and rep.gap > 0 and np.isfinite(rep.condition)

    def test_krylov_matches_dense(self):
        W = build_reduced_generator(ModelParams(omega=0.25, big_gamma=3.0, spin_j=10.0))
        dense = liouvillian_gap_report(W, precision="double")
        krylov = liouvillian_gap_report(W, precision="double", dense_max=10)
        assert krylov.method == "shift-invert"
        assert krylov.gap == pytest.approx(dense.gap, rel=1e-9)

    def test_extended_agrees_with_double(self):
        W = build_reduced_generator(ModelParams(omega=0.25, big_gamma=9.0, spin_j=12.0))
        a = liouvillian_gap_report(W, precision="double")
        b = liouvillian_gap_report(W, precision="extended")
        assert b.method.startswith("extended")
        assert b.gap == pytest.approx(a.gap, rel=1e-8)

    def test_double_precision_refuses_tiny_gap(self):
        W = build_reduced_generator(ModelParams(omega=0.25, big_gamma=9.0, spin_j=40.0))
        with pytest.raises(PrecisionError):
            liouvillian_gap(W, precision="double")

    def test_zero_mode_guard(self):
        # an overlap demand no eigenvector can meet must be reported, not guessed
        W = build_reduced_generator(ModelParams(omega=0.25, big_gamma=3.0, spin_j=4.0))
        with pytest.raises(EigenError):
            liouvillian_gap(W, precision="double", overlap_min=1.1)


class TestEstimator:
    def test_equal_gaps(self):
        assert gap_estimator(0.3, 0.3) == 0.0

    def test_unit(self):
        assert gap_estimator(math.e**4, 1.0) == pytest.approx(1.0, rel=1e-15)

    @pytest.mark.parametrize("pair", [(0.0, 1.0), (1.0, -1.0)])
    def test_rejects_non_positive(self, pair):
        with pytest.raises(ValueError):
            gap_estimator(*pair)
