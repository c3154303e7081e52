import warnings
from fractions import Fraction

import numpy as np
import pytest

from akltflow.aklt import AkltChain
from akltflow.chainops import SiteRange, spin1_generators
from akltflow.flow import (
    GapFailure,
    SeriesConfig,
    advance,
    final_boundary_step,
    init_flow,
    ledger_report,
    local_g,
    ls_diag,
    run_flow,
    verify_consistency,
    z_generator,
)
from akltflow.intervals import IntervalLabel, bar_star, is_bulk, star, validate
from akltflow.solvers import lowest_eigenpairs, norm_estimate, operator_norm

from conftest import random_hermitian

SX, SY, SZ = spin1_generators()
SZZ = np.kron(SZ, SZ)
EPS_APPROX = 0.37  # measured chain gap, close enough for unit-test thresholds


def make_lat(n, t):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return validate(n, t)


@pytest.fixture(scope="module")
def lat9():
    return make_lat(9, Fraction(1, 4))


@pytest.fixture(scope="module")
def lat7():
    return make_lat(7, Fraction(1, 4))


@pytest.fixture(scope="module")
def lat10():
    return validate(10, Fraction(1, 9))


@pytest.fixture(scope="module")
def chain9():
    return AkltChain(9)


@pytest.fixture(scope="module")
def chain10():
    return AkltChain(10)


def szz_potentials(n):
    return [SZZ.copy() for _ in range(n - 1)]


def random_potentials(n, seed=5):
    rng = np.random.default_rng(seed)
    return [random_hermitian(rng, 9) for _ in range(n - 1)]


class TestInit:
    def test_zero_potentials_trivial(self, lat9, chain9):
        state = init_flow(lat9, [np.zeros((9, 9))] * 8, chain=chain9,
                          epsilon=EPS_APPROX)
        assert not state.v_raw and not state.w_pots

    def test_populated_keys_n10(self, lat10, chain10):
        state = init_flow(lat10, szz_potentials(10), chain=chain10,
                          epsilon=EPS_APPROX)
        assert [tuple(k) for k in state.v_raw] == [(1, 2)]
        assert sorted(tuple(k) for k in state.w_pots) == [(1, 1), (1, 3)]

    def test_interval_potential_norm_at_most_one(self, lat10, chain10):
        state = init_flow(lat10, random_potentials(10), chain=chain10,
                          epsilon=EPS_APPROX)
        for op in list(state.v_raw.values()) + list(state.w_pots.values()):
            assert operator_norm(op) <= 1.0 + 1e-12

    def test_norm_violation_rejected(self, lat10, chain10):
        pots = szz_potentials(10)
        pots[3] = 1.5 * pots[3]
        with pytest.raises(Exception):
            init_flow(lat10, pots, chain=chain10, epsilon=EPS_APPROX)

    def test_reconstruction_equals_bare_hamiltonian(self, lat9, chain9):
        pots = random_potentials(9)
        state = init_flow(lat9, pots, chain=chain9, epsilon=EPS_APPROX)
        k_bare = chain9.perturbed_hamiltonian(float(lat9.t), pots)
        rec = state.reconstruct()
        defect = norm_estimate(lambda v: rec.apply(v) - k_bare.apply(v),
                               3 ** 9, iters=12)
        assert defect < 1e-12


class TestLocalG:
    def test_first_step_is_bare_star_hamiltonian(self, lat10, chain10):
        state = init_flow(lat10, szz_potentials(10), chain=chain10,
                          epsilon=EPS_APPROX)
        step = IntervalLabel(1, 2)
        g, e = local_g(state, step)
        assert e == 0.0
        s = star(lat10, step)
        href = chain10.h0(s)
        v = np.random.default_rng(0).standard_normal(s.dim)
        assert np.allclose(g.apply_on(s, v), href.apply_on(s, v))

    def test_band_energy_matches_band_eigenvalue(self, lat9, chain9):
        # after the first step, G of the second step contains one member
        # potential; the star frame must be an exact eigenframe at E
        state = init_flow(lat9, random_potentials(9), chain=chain9,
                          epsilon=EPS_APPROX)
        state = advance(state, SeriesConfig())
        step = state.next_step()
        g, e = local_g(state, step)
        s = star(lat9, step)
        members = [lab for lab, d in state.v_diag.items()
                   if s.contains(d.bar) and not d.op.is_zero()]
        frame = chain9.ground_space(s).frame
        resid = max(np.linalg.norm(g.apply_on(s, frame[:, k].astype(complex))
                                   - e * frame[:, k]) for k in range(4))
        assert resid < 1e-10
        # term-by-term oracle for E
        e_ref = sum(state.sqrt_t * state.v_diag[lab].omega for lab in members)
        assert abs(e - e_ref) < 1e-13

    def test_premature_request_rejected(self, lat9, chain9):
        state = init_flow(lat9, random_potentials(9), chain=chain9,
                          epsilon=EPS_APPROX)
        later = [lab for lab in state.v_raw if tuple(lab) == (1, 3)][0]
        with pytest.raises(Exception, match="before"):
            local_g(state, later)


class TestZGenerator:
    def test_zero_potential_gives_zero(self, lat10, chain10):
        state = init_flow(lat10, [np.zeros((9, 9))] * 9, chain=chain10,
                          epsilon=EPS_APPROX)
        z = z_generator(state, IntervalLabel(1, 2), SeriesConfig())
        assert z.is_zero()

    def test_antihermitian(self, lat10, chain10):
        state = init_flow(lat10, szz_potentials(10), chain=chain10,
                          epsilon=EPS_APPROX)
        z = z_generator(state, IntervalLabel(1, 2), SeriesConfig())
        s = star(lat10, IntervalLabel(1, 2))
        zd = z.dense_on(s)
        assert np.abs(zd + zd.conj().T).max() < 1e-12

    def test_first_order_norm_bound(self, lat10, chain10):
        state = init_flow(lat10, szz_potentials(10), chain=chain10,
                          epsilon=EPS_APPROX)
        step = IntervalLabel(1, 2)
        cfg = SeriesConfig(j_max=1)
        z = z_generator(state, step, cfg)
        g, e = local_g(state, step)
        s = star(lat10, step)
        gd = g.dense_on(s)
        vals = np.linalg.eigvalsh(gd)
        gap = np.sort(vals - e)[4]
        v_norm = operator_norm(state.v_raw[step])
        assert operator_norm(z) <= state.sqrt_t * (2.0 / gap) * v_norm + 1e-12

    def test_gap_abort(self, lat10, chain10):
        state = init_flow(lat10, szz_potentials(10), chain=chain10,
                          epsilon=EPS_APPROX)
        cfg = SeriesConfig(gap_fraction=10.0)
        with pytest.raises(GapFailure):
            z_generator(state, IntervalLabel(1, 2), cfg)


class TestLsDiag:
    def test_first_order_diag_has_no_offdiagonal(self, lat10, chain10):
        state = init_flow(lat10, szz_potentials(10), chain=chain10,
                          epsilon=EPS_APPROX)
        step = IntervalLabel(1, 2)
        terms = ls_diag(state, step, SeriesConfig())
        s = star(lat10, step)
        frame = chain10.ground_space(s).frame
        first = terms[0].dense_on(s)
        pm = frame @ frame.conj().T
        pp = np.eye(s.dim) - pm
        assert np.abs(pm @ first @ pp).max() < 1e-12

    def test_series_identity_dense_oracle(self, lat10, chain10):
        # oracle: exact conjugation on the star subspace
        state = init_flow(lat10, szz_potentials(10), chain=chain10,
                          epsilon=EPS_APPROX)
        step = IntervalLabel(1, 2)
        cfg = SeriesConfig(j_max=8)
        s = star(lat10, step)
        g, e = local_g(state, step)
        gd = g.dense_on(s)
        v = state.v_raw[step].dense_on(s)
        z = z_generator(state, step, cfg).dense_on(s)
        from scipy.linalg import expm

        u = expm(z)
        sqrt_t = state.sqrt_t
        lhs = u @ (gd + sqrt_t * v) @ u.conj().T
        rhs = gd.astype(complex).copy()
        for j, term in enumerate(ls_diag(state, step, cfg), start=1):
            rhs += sqrt_t * sqrt_t ** (j - 1) * term.dense_on(s)
        defect = np.linalg.norm(lhs - rhs, 2)
        # the defect is the series truncation residual: small but nonzero
        assert defect < 5e-4
        # and the off-diagonal part of the conjugation is equally small
        frame = chain10.ground_space(s).frame
        pm = frame @ frame.conj().T
        off = pm @ (lhs - gd) @ (np.eye(s.dim) - pm)
        assert np.linalg.norm(off, 2) < 5e-4

    def test_zero_potential_empty_series(self, lat10, chain10):
        state = init_flow(lat10, [np.zeros((9, 9))] * 9, chain=chain10,
                          epsilon=EPS_APPROX)
        assert ls_diag(state, IntervalLabel(1, 2), SeriesConfig()) == []


class TestAdvance:
    def test_zero_potentials_identity_step(self, lat9, chain9):
        state = init_flow(lat9, [np.zeros((9, 9))] * 8, chain=chain9,
                          epsilon=EPS_APPROX)
        new = advance(state, SeriesConfig())
        assert new.trace[-1].z_norm == 0.0
        assert new.v_diag[new.step].op.is_zero()

    def test_diagonalized_potential_block_defect(self, lat9, chain9):
        state = init_flow(lat9, random_potentials(9), chain=chain9,
                          epsilon=EPS_APPROX)
        new = advance(state, SeriesConfig())
        d = new.v_diag[new.step]
        fb = chain9.ground_space(d.bar).frame
        cols = np.column_stack([d.op.apply_on(d.bar, fb[:, k].astype(complex))
                                for k in range(4)])
        cols -= fb @ (fb.conj().T @ cols)
        assert np.linalg.norm(cols, 2) < 1e-12

    def test_single_bulk_label_growth_goes_to_boundary(self, lat7):
        chain7 = AkltChain(7)
        state = init_flow(lat7, random_potentials(7), chain=chain7,
                          epsilon=EPS_APPROX)
        assert [tuple(k) for k in state.v_raw] == [(1, 2)]
        new = advance(state, SeriesConfig())
        assert not new.v_raw  # nothing re-enters the raw bulk family
        assert all(not is_bulk(lat7, lab) for lab in new.w_pots)
        assert new.v_diag[IntervalLabel(1, 2)] is not None

    def test_consistency_defect_per_step(self, lat9, chain9):
        cfg = SeriesConfig()
        state = init_flow(lat9, random_potentials(9), chain=chain9,
                          epsilon=EPS_APPROX)
        while state.next_step() is not None:
            new = advance(state, cfg)
            defect = verify_consistency(state, new)
            assert defect < 1e-10
            state = new

    def test_spectrum_preserved_through_flow(self, lat9, chain9):
        cfg = SeriesConfig()
        pots = random_potentials(9)
        state = init_flow(lat9, pots, chain=chain9, epsilon=EPS_APPROX)
        k_bare = chain9.perturbed_hamiltonian(float(lat9.t), pots)
        ref, _ = lowest_eigenpairs(k_bare, 6, tol=1e-12)
        while state.next_step() is not None:
            state = advance(state, cfg)
        rec = state.reconstruct()
        got, _ = lowest_eigenpairs(rec, 6, tol=1e-12)
        assert np.abs(ref - got).max() < 1e-9

    def test_hermiticity_of_reconstruction(self, lat7):
        chain7 = AkltChain(7)
        state = init_flow(lat7, random_potentials(7), chain=chain7,
                          epsilon=EPS_APPROX)
        state = advance(state, SeriesConfig())
        dense = state.reconstruct().to_dense()
        assert np.abs(dense - dense.conj().T).max() < 1e-11

    def test_diagonalized_potentials_never_change(self, lat9, chain9):
        cfg = SeriesConfig()
        state = init_flow(lat9, random_potentials(9), chain=chain9,
                          epsilon=EPS_APPROX)
        s1 = advance(state, cfg)
        first = s1.step
        op_before = s1.v_diag[first].op
        s2 = advance(s1, cfg)
        assert s2.v_diag[first].op is op_before  # object identity

    def test_support_discipline(self, lat9, chain9):
        from akltflow.intervals import sites_of
        from akltflow.chainops import payload_support

        cfg = SeriesConfig()
        state = init_flow(lat9, random_potentials(9), chain=chain9,
                          epsilon=EPS_APPROX)
        while state.next_step() is not None:
            state = advance(state, cfg)
            for lab, op in state.v_raw.items():
                for _, p in op.terms:
                    if p is not None:
                        assert sites_of(lat9, lab).contains(payload_support(p))
            for lab, d in state.v_diag.items():
                for _, p in d.op.terms:
                    if p is not None:
                        assert d.bar.contains(payload_support(p))
            for lab, op in state.w_pots.items():
                for _, p in op.terms:
                    if p is not None:
                        assert sites_of(lat9, lab).contains(payload_support(p))


class TestFinalStep:
    def test_zero_boundary_trivial(self, lat9, chain9):
        cfg = SeriesConfig()
        state = init_flow(lat9, [np.zeros((9, 9))] * 8, chain=chain9,
                          epsilon=EPS_APPROX)
        while state.next_step() is not None:
            state = advance(state, cfg)
        res = final_boundary_step(state, cfg)
        assert res.w_norm == 0.0 and res.defect <= cfg.defect_tol
        v = np.random.default_rng(1).standard_normal(3 ** 9) + 0j
        assert np.linalg.norm(res.w_prime.apply(v)) < 1e-10

    def test_block_defect_below_tolerance(self, lat9, chain9):
        state, res = run_flow(lat9, random_potentials(9), SeriesConfig(),
                              check_consistency=False, chain=chain9)
        assert res.defect <= SeriesConfig().defect_tol
        frame = chain9.ground_space().frame
        cols = np.column_stack([res.w_prime.apply(frame[:, k].astype(complex))
                                for k in range(4)])
        cols -= frame @ (frame.conj().T @ cols)
        assert np.linalg.norm(cols, 2) <= SeriesConfig().defect_tol * 1.01

    def test_transformed_spectrum_matches(self, lat9, chain9):
        pots = random_potentials(9)
        state, res = run_flow(lat9, pots, SeriesConfig(),
                              check_consistency=False, chain=chain9)
        k_bare = chain9.perturbed_hamiltonian(float(lat9.t), pots)
        ref, _ = lowest_eigenpairs(k_bare, 6, tol=1e-12)
        import scipy.sparse.linalg as spla

        lo = spla.LinearOperator((3 ** 9, 3 ** 9),
                                 matvec=lambda v: res.g_op.apply(v)
                                 + state.sqrt_t * res.w_prime.apply(v),
                                 dtype=complex)
        got = np.sort(spla.eigsh(lo, k=6, which="SA", tol=1e-12, ncv=40,
                                 return_eigenvectors=False))
        assert np.abs(ref - got).max() < 1e-8

    def test_premature_call_rejected(self, lat9, chain9):
        state = init_flow(lat9, random_potentials(9), chain=chain9,
                          epsilon=EPS_APPROX)
        with pytest.raises(Exception, match="remain"):
            final_boundary_step(state, SeriesConfig())


class TestLedger:
    def test_rows_and_summary(self, lat9, chain9):
        state, res = run_flow(lat9, random_potentials(9), SeriesConfig(),
                              check_consistency=False, chain=chain9)
        rep = ledger_report(state)
        rows = rep["rows"]
        assert rows, "ledger must not be empty"
        kinds = {r["kind"] for r in rows}
        assert "gap" in kinds
        assert kinds & {"V", "V*", "W"}
        for r in rows:
            assert isinstance(r["passed"], bool)
            assert np.isfinite(r["norm"]) and np.isfinite(r["bound"])
        assert rep["summary"]["gap_failures"] == 0

    def test_initial_length_one_bound_is_one(self, lat10, chain10):
        state = init_flow(lat10, random_potentials(10), chain=chain10,
                          epsilon=EPS_APPROX)
        recs = [r for r in state.ledger.records if r.label[0] == 1]
        assert recs
        for r in recs:
            assert np.isclose(r.bound, 1.0)
            assert r.norm <= 1.0 + 1e-12 and r.passed

    def test_gap_of_first_step_equals_star_chain_gap(self, lat10, chain10):
        state = init_flow(lat10, szz_potentials(10), chain=chain10,
                          epsilon=EPS_APPROX)
        new = advance(state, SeriesConfig())
        s = star(lat10, IntervalLabel(1, 2))
        assert abs(new.trace[-1].gap_of_g - chain10.spectral_gap(s)) < 1e-9
