import numpy as np
import pytest

from akltflow.aklt import AkltChain, GroundSpaceError, spin2_projector_matrix
from akltflow.chainops import (
    ChainOperator,
    ChainOpError,
    SiteRange,
    site_operator,
    spin1_generators,
)
from akltflow.solvers import lowest_eigenpairs, operator_norm

from conftest import random_hermitian

SX, SY, SZ = spin1_generators()


class TestSpin2Projector:
    def test_heisenberg_coupling_spectrum(self):
        # Casimir oracle: S.S on 3x3 has eigenvalues 1 (x5), -1 (x3), -2 (x1)
        ss = sum(np.kron(a, a) for a in (SX, SY, SZ))
        vals = np.sort(np.linalg.eigvalsh(ss.real))
        assert np.allclose(vals, [-2] + [-1] * 3 + [1] * 5, atol=1e-12)
        # the defining polynomial maps them to {0, 0, 1}
        p2 = spin2_projector_matrix()
        pvals = np.sort(np.linalg.eigvalsh(p2))
        assert np.allclose(pvals, [0] * 4 + [1] * 5, atol=1e-12)

    def test_idempotent(self):
        p2 = spin2_projector_matrix()
        assert np.abs(p2 @ p2 - p2).max() < 1e-12

    def test_trace_five(self):
        assert np.isclose(np.trace(spin2_projector_matrix()), 5.0)

    def test_site_range_check(self, chain6):
        with pytest.raises(ChainOpError):
            chain6.spin2_projector(6)


class TestH0:
    def test_full_chain_is_sum_of_bonds(self, chain6):
        h = chain6.h0()
        total = ChainOperator.zero(6)
        for i in range(1, 6):
            total = total + chain6.spin2_projector(i)
        v = np.random.default_rng(1).standard_normal(3 ** 6)
        assert np.allclose(h.apply(v), total.apply(v))

    def test_two_site_interval(self, chain6):
        h = chain6.h0(SiteRange(2, 3))
        vals = np.sort(np.linalg.eigvalsh(h.dense_on(SiteRange(2, 3))))
        assert np.allclose(vals, [0] * 4 + [1] * 5, atol=1e-12)

    def test_short_interval_warns_and_is_zero(self, chain6):
        with pytest.warns(UserWarning):
            h = chain6.h0(SiteRange(3, 3))
        assert h.is_zero()

    def test_kernel_n8_iterative(self, chain8):
        vals, _ = lowest_eigenpairs(chain8.h0(), 5, tol=1e-12)
        assert np.all(np.abs(vals[:4]) < 1e-10)
        assert vals[4] > 0.3


class TestGroundSpace:
    def test_dimension_across_sizes(self):
        for n in range(3, 8):
            chain = AkltChain(n)
            gs = chain.ground_space()
            assert gs.frame.shape == (3 ** n, 4)
            h = chain.h0().to_dense()
            kernel_dim = int(np.sum(np.linalg.eigvalsh(h) < 1e-9))
            assert kernel_dim == 4

    def test_frame_orthonormal_and_annihilated(self, chain6):
        gs = chain6.ground_space()
        assert np.abs(gs.frame.conj().T @ gs.frame - np.eye(4)).max() < 1e-10
        h = chain6.h0()
        for k in range(4):
            assert np.linalg.norm(h.apply(gs.frame[:, k])) < 1e-9

    def test_projector_idempotent(self, chain6):
        p = chain6.ground_space().p_minus
        v = np.random.default_rng(2).standard_normal(3 ** 6)
        assert np.allclose(p.apply(p.apply(v)), p.apply(v), atol=1e-10)

    def test_p_plus_complement(self, chain6):
        gs = chain6.ground_space()
        v = np.random.default_rng(3).standard_normal(3 ** 6)
        assert np.allclose(gs.p_plus.apply(v) + gs.p_minus.apply(v), v, atol=1e-12)

    def test_nesting_of_projections(self, chain6):
        # for I inside J, the large projector factors through the small one
        gs_small = chain6.ground_space(SiteRange(2, 5))
        gs_large = chain6.ground_space()
        pj = gs_large.p_minus_on(6)
        pi = gs_small.p_minus_on(6)
        v = np.random.default_rng(4).standard_normal(3 ** 6)
        assert np.linalg.norm(pj.apply(pi.apply(v)) - pj.apply(v)) < 1e-9

    def test_p_plus_small_kills_p_minus_large(self, chain6):
        gs_small = chain6.ground_space(SiteRange(2, 5))
        gs_large = chain6.ground_space()
        v = np.random.default_rng(5).standard_normal(3 ** 6)
        w = gs_small.p_plus_on(6).apply(gs_large.p_minus.apply(v))
        assert np.linalg.norm(w) < 1e-9

    def test_deterministic_frame(self):
        f1 = AkltChain(7).ground_space().frame
        f2 = AkltChain(7).ground_space().frame
        assert np.abs(f1 - f2).max() < 1e-12

    def test_frustration_freeness_per_bond(self, chain6):
        gs = chain6.ground_space()
        for i in range(1, 6):
            p2 = chain6.spin2_projector(i)
            for k in range(4):
                assert np.linalg.norm(p2.apply(gs.frame[:, k])) < 1e-9

    def test_too_short_interval(self, chain6):
        with pytest.raises(ChainOpError):
            chain6.ground_space(SiteRange(2, 2))


class TestOmega:
    def test_identity(self, chain6):
        assert np.isclose(chain6.omega(ChainOperator.identity(6)), 1.0)

    def test_sz_vanishes(self, chain6):
        for i in (1, 3, 6):
            assert abs(chain6.omega(site_operator(SZ, i, 6))) < 1e-10

    def test_linearity_and_normalization(self, chain6, rng):
        a = site_operator(random_hermitian(rng, 3), 3, 6)
        b = site_operator(random_hermitian(rng, 3), 4, 6)
        lhs = chain6.omega(a * 2.5 + b)
        rhs = 2.5 * chain6.omega(a) + chain6.omega(b)
        assert abs(lhs - rhs) < 1e-12

    def test_interval_independence(self):
        # evaluate on the smallest interval vs. a strictly larger one; the
        # difference obeys the indistinguishability bound 3^(1-d) |A|
        chain = AkltChain(9)
        a = site_operator(SZ @ SZ, 5, 9)  # Sz^2 has a nonzero band average
        omega_small = chain.omega(a)
        gs_large = chain.ground_space(SiteRange(2, 8))
        m = np.array([np.vdot(gs_large.frame[:, k],
                              a.apply_on(SiteRange(2, 8), gs_large.frame[:, k]))
                      for k in range(4)])
        omega_large = m.mean()
        d = 3  # distance from site 5 to the complement of {2..8}
        assert abs(omega_small - omega_large) <= 3.0 ** (-d + 1) * operator_norm(a)


class TestPerturbedHamiltonian:
    def test_t_zero_is_h0(self, chain6, rng):
        pots = [random_hermitian(rng, 9) for _ in range(5)]
        k = chain6.perturbed_hamiltonian(0.0, pots)
        v = rng.standard_normal(3 ** 6)
        assert np.allclose(k.apply(v), chain6.h0().apply(v))

    def test_identity_potentials_shift(self, chain6):
        pots = [np.eye(9, dtype=complex) for _ in range(5)]
        t = 0.03
        k = chain6.perturbed_hamiltonian(t, pots)
        ev_k = np.linalg.eigvalsh(k.to_dense())
        ev_h = np.linalg.eigvalsh(chain6.h0().to_dense())
        assert np.abs(ev_k - (ev_h + t * 5)).max() < 1e-10

    def test_norm_bound_enforced(self, chain6, rng):
        pots = [2.0 * random_hermitian(rng, 9)] + [random_hermitian(rng, 9)] * 4
        with pytest.raises(ChainOpError):
            chain6.perturbed_hamiltonian(0.1, pots)

    def test_nonhermitian_rejected(self, chain6, rng):
        bad = rng.standard_normal((9, 9)) + 1j * rng.standard_normal((9, 9))
        with pytest.raises(ChainOpError):
            chain6.perturbed_hamiltonian(0.1, [bad] + [np.eye(9) * 0.0] * 4)

    def test_band_survives_small_szz(self, chain8):
        szz = np.kron(SZ, SZ)
        k = chain8.perturbed_hamiltonian(0.05, [szz] * 7)
        vals, _ = lowest_eigenpairs(k, 5, tol=1e-10)
        band_width = vals[3] - vals[0]
        gap = vals[4] - vals[3]
        assert band_width < gap


class TestChainInvariants:
    def test_h0_commutes_with_total_sz(self, chain6):
        h = chain6.h0()
        sz_tot = chain6.total_sz()
        v = np.random.default_rng(6).standard_normal(3 ** 6) + 0j
        lhs = h.apply(sz_tot.apply(v))
        rhs = sz_tot.apply(h.apply(v))
        assert np.linalg.norm(lhs - rhs) < 1e-12 * np.linalg.norm(v)

    def test_gap_stable_in_length(self, chain6, chain8):
        g6, g8 = chain6.spectral_gap(), chain8.spectral_gap()
        assert abs(g6 - g8) / g8 < 0.10
