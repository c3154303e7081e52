import numpy as np
import pytest

from akltflow.chainops import (
    ANTIHERMITIAN,
    GENERAL,
    HERMITIAN,
    ChainOperator,
    ChainOpError,
    ConjugatedBlock,
    LocalBlock,
    LowRankBlock,
    SiteRange,
    compose,
    conjugate,
    embed,
    site_operator,
    spin1_generators,
    unitary_of,
)

from conftest import random_hermitian

SX, SY, SZ = spin1_generators()


class TestSpinMatrices:
    def test_sz_diagonal(self):
        assert np.allclose(SZ, np.diag([1.0, 0.0, -1.0]))

    def test_su2_commutators(self):
        def comm(a, b):
            return a @ b - b @ a

        assert np.allclose(comm(SX, SY), 1j * SZ)
        assert np.allclose(comm(SY, SZ), 1j * SX)
        assert np.allclose(comm(SZ, SX), 1j * SY)

    def test_casimir(self):
        assert np.allclose(SX @ SX + SY @ SY + SZ @ SZ, 2.0 * np.eye(3))

    def test_hermitian(self):
        for s in (SX, SY, SZ):
            assert np.allclose(s, s.conj().T)


class TestSiteRange:
    def test_validation(self):
        with pytest.raises(ChainOpError):
            SiteRange(3, 2)
        with pytest.raises(ChainOpError):
            SiteRange(0, 2)

    def test_cover_overlap(self):
        a, b = SiteRange(2, 4), SiteRange(4, 6)
        assert a.overlaps(b)
        assert a.cover(b) == SiteRange(2, 6)
        assert not SiteRange(1, 2).overlaps(SiteRange(4, 5))


class TestEmbed:
    def test_identity_block_is_global_identity(self):
        op = embed(LocalBlock(SiteRange(3, 4), np.eye(9)), 6)
        v = np.random.default_rng(0).standard_normal(3 ** 6)
        assert np.allclose(op.apply(v), v)

    def test_disjoint_supports_commute_exactly(self, rng):
        a = embed(LocalBlock(SiteRange(1, 2), random_hermitian(rng, 9)), 6)
        b = embed(LocalBlock(SiteRange(4, 5), random_hermitian(rng, 9)), 6)
        c = compose(a, b, "commutator")
        assert c.is_zero(tol=0.0)  # structurally zero, no tolerance

    def test_sz_diagonal_action(self):
        op = site_operator(SZ, 1, 2)
        # basis state |m1=+1, m2=0> is index 0*3 + 1
        v = np.zeros(9)
        v[1] = 1.0
        assert np.allclose(op.apply(v), v)

    def test_out_of_range_rejected(self):
        with pytest.raises(ChainOpError):
            embed(LocalBlock(SiteRange(6, 7), np.eye(9)), 6)


class TestCompose:
    def test_commutator_with_itself_vanishes(self, rng):
        a = embed(LocalBlock(SiteRange(2, 3), random_hermitian(rng, 9)), 5)
        c = compose(a, a, "commutator")
        assert c.is_zero()

    def test_product_support_is_cover(self, rng):
        a = embed(LocalBlock(SiteRange(1, 2), random_hermitian(rng, 9)), 6)
        b = embed(LocalBlock(SiteRange(3, 4), random_hermitian(rng, 9)), 6)
        p = compose(a, b, "multiply")
        assert p.support() == SiteRange(1, 4)

    def test_hermiticity_tags(self, rng):
        a = embed(LocalBlock(SiteRange(1, 2), random_hermitian(rng, 9)), 4)
        b = embed(LocalBlock(SiteRange(2, 3), random_hermitian(rng, 9)), 4)
        assert (a + b).herm == HERMITIAN
        c = compose(a, b, "commutator")
        assert c.herm == ANTIHERMITIAN
        # verify the tag against the dense adjoint
        dense = c.to_dense()
        assert np.allclose(dense, -dense.conj().T)
        assert (a * 1j).herm == ANTIHERMITIAN
        assert (a * (1 + 1j)).herm == GENERAL

    def test_mismatched_lengths_rejected(self, rng):
        a = embed(LocalBlock(SiteRange(1, 2), random_hermitian(rng, 9)), 4)
        b = embed(LocalBlock(SiteRange(1, 2), random_hermitian(rng, 9)), 5)
        with pytest.raises(ChainOpError):
            compose(a, b, "add")

    def test_double_commutator_oracle(self):
        # dense 3x3 oracle for ad^2 of (i Sz) acting on Sx
        z = 1j * SZ
        ad1 = z @ SX - SX @ z
        ad2 = z @ ad1 - ad1 @ z
        z_op = site_operator(SZ, 1, 3) * 1j
        x_op = site_operator(SX, 1, 3)
        once = compose(z_op, x_op, "commutator")
        twice = compose(z_op, once, "commutator")
        got = twice.terms[0][1].mat * twice.terms[0][0]
        assert np.allclose(got, ad2)
        assert np.allclose(ad2, -SX)  # the oracle value itself


class TestCoalescing:
    def test_identical_supports_merge(self, rng):
        m1, m2 = random_hermitian(rng, 9), random_hermitian(rng, 9)
        op = ChainOperator(4, [(1.0, LocalBlock(SiteRange(2, 3), m1)),
                               (2.0, LocalBlock(SiteRange(2, 3), m2))], HERMITIAN)
        assert op.n_terms() == 1
        assert np.allclose(op.terms[0][1].mat, m1 + 2 * m2)

    def test_tiny_blocks_dropped(self, rng):
        m = random_hermitian(rng, 9)
        op = ChainOperator(4, [(1.0, LocalBlock(SiteRange(1, 2), m)),
                               (-1.0, LocalBlock(SiteRange(1, 2), m))], HERMITIAN)
        assert op.n_terms() == 0 and op.is_zero()


class TestLowRankBlock:
    def test_matches_dense(self, rng):
        left = rng.standard_normal((27, 3)) + 1j * rng.standard_normal((27, 3))
        right = rng.standard_normal((27, 3)) + 1j * rng.standard_normal((27, 3))
        blk = LowRankBlock(SiteRange(2, 4), left, right)
        op = ChainOperator(5, [(1.0, blk)], GENERAL)
        dense_op = ChainOperator(5, [(1.0, LocalBlock(SiteRange(2, 4), blk.dense()))],
                                 GENERAL)
        v = rng.standard_normal(3 ** 5) + 1j * rng.standard_normal(3 ** 5)
        assert np.allclose(op.apply(v), dense_op.apply(v))

    def test_frobenius(self, rng):
        left = rng.standard_normal((9, 2))
        right = rng.standard_normal((9, 2))
        blk = LowRankBlock(SiteRange(1, 2), left, right)
        assert np.isclose(blk.fro(), np.linalg.norm(blk.dense()))


class TestConjugate:
    def test_zero_generator_returns_input(self, rng):
        a = embed(LocalBlock(SiteRange(1, 2), random_hermitian(rng, 9)), 4)
        z = ChainOperator.zero(4, herm=ANTIHERMITIAN)
        assert conjugate(a, z) is a

    def test_disjoint_supports_unchanged(self, rng):
        a = embed(LocalBlock(SiteRange(1, 1), random_hermitian(rng, 3)), 5)
        z = ChainOperator(5, [(1.0, LocalBlock(SiteRange(3, 4),
                                               1j * random_hermitian(rng, 9)))],
                          ANTIHERMITIAN)
        out = conjugate(a, z)
        v = rng.standard_normal(3 ** 5) + 0j
        assert np.allclose(out.apply(v), a.apply(v))

    def test_spectrum_preserved_dense_path(self, rng):
        a = embed(LocalBlock(SiteRange(1, 3), random_hermitian(rng, 27)), 4)
        z = ChainOperator(4, [(1.0, LocalBlock(SiteRange(2, 4),
                                               1j * random_hermitian(rng, 27)))],
                          ANTIHERMITIAN)
        out = conjugate(a, z)
        ev_a = np.linalg.eigvalsh(a.to_dense())
        ev_o = np.linalg.eigvalsh(out.to_dense())
        assert np.abs(ev_a - ev_o).max() < 1e-12

    def test_lazy_block_matches_dense(self, rng):
        sup = SiteRange(1, 3)
        x = random_hermitian(rng, 27)
        u_sup = SiteRange(2, 3)
        z = 1j * random_hermitian(rng, 9)
        from scipy.linalg import expm

        u = expm(z)
        blk = ConjugatedBlock(sup, u_sup, u, ((1.0, LocalBlock(sup, x)),),
                              subtract=True)
        dense = blk.dense()
        op = ChainOperator(3, [(1.0, blk)], HERMITIAN)
        dense_op = ChainOperator(3, [(1.0, LocalBlock(sup, dense))], HERMITIAN)
        v = rng.standard_normal(27) + 1j * rng.standard_normal(27)
        assert np.allclose(op.apply(v), dense_op.apply(v))

    def test_requires_antihermitian_tag(self, rng):
        a = embed(LocalBlock(SiteRange(1, 2), random_hermitian(rng, 9)), 4)
        with pytest.raises(ChainOpError):
            conjugate(a, a)

    def test_unitary_of_matches_expm(self, rng):
        z = ChainOperator(3, [(1.0, LocalBlock(SiteRange(1, 2),
                                               1j * random_hermitian(rng, 9)))],
                          ANTIHERMITIAN)
        from scipy.linalg import expm

        u = unitary_of(z)
        assert np.allclose(u, expm(z.dense_on(SiteRange(1, 2))))
        assert np.allclose(u @ u.conj().T, np.eye(9))


class TestNormIndependence:
    def test_single_term_norm_independent_of_chain_length(self, rng):
        from akltflow.solvers import operator_norm

        m = random_hermitian(rng, 9, norm=0.7)
        n4 = operator_norm(embed(LocalBlock(SiteRange(2, 3), m), 4))
        n9 = operator_norm(embed(LocalBlock(SiteRange(5, 6), m), 9))
        dense = np.abs(np.linalg.eigvalsh(m)).max()
        assert np.isclose(n4, dense, atol=1e-10)
        assert np.isclose(n9, dense, atol=1e-8)
