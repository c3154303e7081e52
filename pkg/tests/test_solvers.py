import numpy as np
import pytest

from akltflow.aklt import AkltChain
from akltflow.chainops import (
    ChainOperator,
    LocalBlock,
    SiteRange,
    site_operator,
    spin1_generators,
)
from akltflow.solvers import krylov_expmv, lowest_eigenpairs, operator_norm, solve_shifted

from conftest import random_hermitian

SX, SY, SZ = spin1_generators()


class TestLowestEigenpairs:
    def test_two_site_projector_spectrum(self, chain6):
        h = chain6.h0(SiteRange(3, 4))
        vals, vecs = lowest_eigenpairs(h, 9, rng=SiteRange(3, 4))
        assert np.allclose(vals[:4], 0.0, atol=1e-12)
        assert np.allclose(vals[4:], 1.0, atol=1e-12)

    def test_identity(self):
        op = ChainOperator.identity(4)
        vals, _ = lowest_eigenpairs(op, 3)
        assert np.allclose(vals, 1.0)

    def test_h0_n6_against_dense_oracle(self, chain6):
        # oracle first: dense full diagonalization
        dense_vals = np.linalg.eigvalsh(chain6.h0().to_dense())
        vals, vecs = lowest_eigenpairs(chain6.h0(), 5, tol=1e-12, dense=False)
        assert np.abs(vals - dense_vals[:5]).max() < 1e-10
        assert np.allclose(vals[:4], 0.0, atol=1e-10)
        assert vals[4] > 0.1
        # orthonormal frame even inside the degenerate kernel
        g = vecs.conj().T @ vecs
        assert np.abs(g - np.eye(5)).max() < 1e-10


class TestOperatorNorm:
    def test_identity(self):
        assert np.isclose(operator_norm(ChainOperator.identity(5)), 1.0)

    def test_single_site_sz(self):
        assert np.isclose(operator_norm(site_operator(SZ, 3, 6)), 1.0)

    def test_bond_projector(self, chain6):
        assert np.isclose(operator_norm(chain6.spin2_projector(2)), 1.0, atol=1e-10)

    def test_zero(self):
        assert operator_norm(ChainOperator.zero(8)) == 0.0

    def test_antihermitian(self, rng):
        m = 1j * random_hermitian(rng, 9, norm=0.3)
        op = ChainOperator(6, [(1.0, LocalBlock(SiteRange(2, 3), m))],
                           "anti-hermitian")
        assert np.isclose(operator_norm(op), 0.3, atol=1e-9)


class TestKrylovExpmv:
    def test_s_zero(self, rng, chain6):
        v = rng.standard_normal(3 ** 6) + 0j
        out = krylov_expmv(chain6.h0(), 0.0, v)
        assert np.array_equal(out, v)

    def test_unitarity(self, rng, chain6):
        v = rng.standard_normal(3 ** 6) + 1j * rng.standard_normal(3 ** 6)
        out = krylov_expmv(chain6.h0(), 0.7, v, tol=1e-10)
        assert abs(np.linalg.norm(out) - np.linalg.norm(v)) < 1e-10

    def test_diagonal_phase(self):
        h = site_operator(SZ, 1, 1)
        v = np.array([1.0, 0.0, 0.0], dtype=complex)  # m = +1
        out = krylov_expmv(h, np.pi, v)
        assert np.allclose(out, np.exp(1j * np.pi) * v, atol=1e-12)

    def test_composition(self, rng, chain6):
        v = rng.standard_normal(3 ** 6) + 0j
        tol = 1e-10
        one = krylov_expmv(chain6.h0(), 0.9, v, tol=tol)
        two = krylov_expmv(chain6.h0(), 0.5, krylov_expmv(chain6.h0(), 0.4, v, tol=tol),
                           tol=tol)
        assert np.linalg.norm(one - two) < 10 * tol * np.linalg.norm(v)

    def test_against_dense_oracle(self, rng):
        chain = AkltChain(4)
        h = chain.h0()
        from scipy.linalg import expm

        dense = expm(1j * 0.37 * h.to_dense())
        v = rng.standard_normal(3 ** 4) + 1j * rng.standard_normal(3 ** 4)
        out = krylov_expmv(h, 0.37, v, tol=1e-12)
        assert np.linalg.norm(out - dense @ v) < 1e-9


class TestSolveShifted:
    def test_projected_resolvent(self, rng, chain6):
        # solve (H0 - 0) x = P+ b on the excited space of the 6-site kernel
        gs = chain6.ground_space()
        h = chain6.h0()
        rng_full = SiteRange(1, 6)
        b = rng.standard_normal(3 ** 6) + 1j * rng.standard_normal(3 ** 6)
        x = solve_shifted(lambda v: h.apply_on(rng_full, v), 0.0, b,
                          gs.project_out, rtol=1e-12)
        resid = gs.project_out(h.apply_on(rng_full, x)) - gs.project_out(b)
        assert np.linalg.norm(resid) < 1e-8 * np.linalg.norm(b)
