"""The acceptance suite: one callable check per criterion.

Each criterion measures properties at fixed sizes and couplings with the
tolerances pinned here; nothing is deferred to later calibration.  The
checks are exposed as a library so that both the CLI ``acceptance``
subcommand and the test suite run exactly the same code and print one
pass/fail line per criterion.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from dataclasses import replace as dc_replace

from .aklt import AkltChain
from .chainops import ChainOperator, SiteRange, site_operator, spin1_generators
from .config import build_potentials, RunConfig
from .flow import (
    SeriesConfig,
    advance,
    final_boundary_step,
    init_flow,
    ledger_report,
    run_flow,
    verify_consistency,
)
from .intervals import validate
from .lowrank import BandRotation
from .probes import SectorEvolver, lr_check, ltqo_defect
from .solvers import lowest_eigenpairs, norm_estimate
from .splitting import compare_splittings, residual_exponent, sz_edge_case

SEED = 1


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    details: dict = field(default_factory=dict)
    runtime: float = 0.0

    def as_dict(self) -> dict:
        return {"number": self.number, "name": self.name, "passed": self.passed,
                "details": self.details, "runtime_s": round(self.runtime, 2)}

    def line(self) -> str:
        return (f"[{'PASS' if self.passed else 'FAIL'}] criterion {self.number} "
                f"({self.name}, {self.runtime:.0f}s): {self.details}")


class AcceptanceContext:
    """Shared heavy objects: chains (with cached ground data) and the one
    full flow run that criteria 4 and 8 both inspect."""

    def __init__(self):
        self._chains: dict[int, AkltChain] = {}
        self._flow = None
        self._spectra: dict = {}

    def chain(self, n: int) -> AkltChain:
        if n not in self._chains:
            self._chains[n] = AkltChain(n)
        return self._chains[n]

    def flow_n10(self):
        """The criterion-4 flow, keeping every intermediate state."""
        if self._flow is None:
            lat = validate(10, Fraction(1, 9))
            pots = random_potentials(10)
            cfg = SeriesConfig()
            states = [init_flow(lat, pots, chain=self.chain(10))]
            while states[-1].next_step() is not None:
                new = advance(states[-1], cfg)
                defect = verify_consistency(states[-1], new)
                rec = dc_replace(new.trace[-1], consistency_defect=defect)
                new = dc_replace(new, trace=new.trace[:-1] + (rec,))
                states.append(new)
            result = final_boundary_step(states[-1], cfg)
            self._flow = (states, result, pots)
        return self._flow

    def spectrum(self, n: int, t: Fraction):
        key = (n, t)
        if key not in self._spectra:
            pots = random_potentials(n)
            rep = compare_splittings(self.chain(n), float(t), pots, (3,), k=8)
            self._spectra[key] = rep
        return self._spectra[key]


def random_potentials(n: int):
    cfg = RunConfig(n_sites=n, seed=SEED, potential_kind="random")
    return build_potentials(cfg)


# ---------------------------------------------------------------------------
# criteria


def criterion_1(ctx: AcceptanceContext) -> CriterionResult:
    """Four-dimensional kernel at every size; gap stable from N=8 to N=10."""
    t0 = time.time()
    details = {}
    ok = True
    gaps = {}
    for n in (6, 8, 10):
        chain = ctx.chain(n)
        vals, _ = lowest_eigenpairs(chain.h0(), 5, tol=1e-12)
        kernel_ok = np.all(np.abs(vals[:4]) < 1e-9) and vals[4] > 1e-9
        gaps[n] = float(vals[4])
        details[f"n{n}_lowest5"] = [float(v) for v in vals]
        ok = ok and bool(kernel_ok)
    drift = abs(gaps[8] - gaps[10]) / gaps[10]
    details["gap_drift_8_to_10"] = drift
    ok = ok and drift < 0.10
    return CriterionResult(1, "ground structure", ok, details, time.time() - t0)


def criterion_2(ctx: AcceptanceContext) -> CriterionResult:
    """Band indistinguishability bound at N=10 plus decay sweep at N=12."""
    t0 = time.time()
    _, _, sz = spin1_generators()
    details = {}
    chain = ctx.chain(10)
    center = 5
    rec = ltqo_defect(chain, site_operator(sz, center, 10),
                      SiteRange(center, center), SiteRange(1, 10))
    details["n10_distance"] = rec.distance
    details["n10_defect"] = rec.defect
    details["n10_bound"] = rec.bound
    ok = rec.passed

    chain12 = ctx.chain(12)
    center = 6
    sweep = []
    for pad in range(0, 5):
        outer = SiteRange(1 + pad, 12 - pad)
        r = ltqo_defect(chain12, site_operator(sz, center, 12),
                        SiteRange(center, center), outer)
        sweep.append((r.distance, r.defect))
    sweep.sort()
    details["n12_sweep"] = [[d, v] for d, v in sweep]
    ratios = []
    for (d1, v1), (d2, v2) in zip(sweep, sweep[1:]):
        if d2 == d1 + 1 and v1 > 1e-14:
            ratios.append(v2 / v1)
    details["n12_decay_ratios"] = ratios
    # decay by a factor <= 1/3 per unit distance, within a factor-2 envelope
    ok = ok and all(r <= 2.0 / 3.0 for r in ratios)
    return CriterionResult(2, "band indistinguishability", bool(ok), details,
                           time.time() - t0)


def criterion_3(ctx: AcceptanceContext) -> CriterionResult:
    """Edge Sz field: two pairs split by 4|t|/3 within 5 percent."""
    t0 = time.time()
    rep = sz_edge_case(ctx.chain(10), 0.05)
    intra_frac = rep.intra_pair / rep.inter_pair
    dev_frac = rep.deviation_from_four_thirds / (4.0 / 3.0)
    ok = intra_frac < 0.05 and dev_frac < 0.05
    details = {"eigenvalues": list(rep.eigenvalues),
               "intra_over_inter": intra_frac,
               "inter_per_t": rep.inter_pair_per_t,
               "deviation_fraction": dev_frac}
    return CriterionResult(3, "edge field splitting", bool(ok), details,
                           time.time() - t0)


def criterion_4(ctx: AcceptanceContext) -> CriterionResult:
    """Flow exactness at N=10, t=1/9: consistency, spectrum, block defects."""
    t0 = time.time()
    states, result, pots = ctx.flow_n10()
    state = states[-1]
    chain = ctx.chain(10)
    details = {}

    defects = [r.consistency_defect for r in state.trace]
    details["consistency_defects"] = defects
    ok = all(d is not None and d < 1e-8 for d in defects)

    # (c) block-off-diagonal defect of every diagonalized potential
    block_defects = []
    for lab, d in state.v_diag.items():
        if d.op.is_zero():
            block_defects.append(0.0)
            continue
        fb = chain.ground_space(d.bar).frame
        cols = np.column_stack([d.op.apply_on(d.bar, fb[:, k].astype(complex))
                                for k in range(4)])
        cols = cols - fb @ (fb.conj().T @ cols)
        block_defects.append(float(np.linalg.norm(cols, 2)))
    details["block_defects"] = block_defects
    details["final_defect"] = result.defect
    ok = ok and all(b < 1e-8 for b in block_defects) and result.defect < 1e-8

    # (b) eight lowest eigenvalues preserved at every step
    korig = chain.perturbed_hamiltonian(1.0 / 9.0, pots)
    vals, vecs = lowest_eigenpairs(korig, 8, tol=1e-12)
    details["orig_lowest8"] = [float(v) for v in vals]

    drifts = []
    # after init: the reconstruction is the bare Hamiltonian itself
    rec0 = states[0].reconstruct()
    d0 = norm_estimate(lambda v: rec0.apply(v) - korig.apply(v), korig.dim, iters=15)
    drifts.append(d0)

    # after each bulk step: transport eigenvectors through the rotations and
    # measure them directly on the reconstructed operator
    cur = vecs.astype(complex)
    for st in states[1:]:
        cur = _rotate_cols(st.z_log[-1][1], cur)
        rec_op = st.reconstruct()
        drifts.append(_eig_drift(rec_op.apply, cur, vals))
    # after the closing step
    final_apply = lambda v: result.g_op.apply(v) + state.sqrt_t * result.w_prime.apply(v)
    fin = cur
    for rot in result.rotations:
        fin = np.column_stack([rot.apply(fin[:, k]) for k in range(fin.shape[1])])
    drifts.append(_eig_drift(final_apply, fin, vals))
    details["eig_drift_per_step"] = [float(x) for x in drifts]
    ok = ok and all(x < 1e-8 for x in drifts)

    details["final_passes"] = result.passes
    return CriterionResult(4, "flow exactness", bool(ok), details, time.time() - t0)


def _rotate_cols(z_op: ChainOperator, cols: np.ndarray) -> np.ndarray:
    if z_op.is_zero():
        return cols
    blk = z_op.terms[0][1]
    ncols = blk.left.shape[1] // 2
    a, frame = blk.left[:, :ncols], blk.right[:, :ncols]
    rot = BandRotation.build(frame, a)
    sup = blk.support
    out = np.empty_like(cols)
    for k in range(cols.shape[1]):
        t3 = cols[:, k].reshape(3 ** (sup.start - 1), sup.dim, -1)
        w = np.tensordot(rot.basis.conj(), t3, axes=([0], [1]))
        upd = np.tensordot(rot.basis @ rot.exp_plus, w, axes=([1], [0]))
        out[:, k] = (t3 + upd.transpose(1, 0, 2)).reshape(-1)
    return out


def _eig_drift(apply_op, cols: np.ndarray, ref_vals: np.ndarray) -> float:
    worst = 0.0
    for k in range(cols.shape[1]):
        v = cols[:, k]
        hv = apply_op(v)
        lam = np.vdot(v, hv).real / np.vdot(v, v).real
        resid = np.linalg.norm(hv - lam * v)
        worst = max(worst, abs(lam - ref_vals[k]), resid)
    return worst


def criterion_5(ctx: AcceptanceContext) -> CriterionResult:
    """Persistent gap and boundary-matrix splittings with a t-sweep."""
    t0 = time.time()
    details = {}
    points = [(10, Fraction(1, 9)), (13, Fraction(1, 16)), (11, Fraction(1, 25))]
    ok = True
    residuals = []
    for n, t in points:
        validate(n, t)  # the sweep keeps the lattice conditions intact
        rep = ctx.spectrum(n, t)
        key = f"n{n}_t{t}"
        details[key] = {"gap": rep.gap, "epsilon": rep.epsilon,
                        "banded": rep.banded,
                        "discrepancy_d3": rep.discrepancy[3],
                        "budget_d3": rep.budget[3],
                        "residual_d3": rep.residual[3]}
        residuals.append((float(t), rep.residual[3]))
        if (n, t) == (10, Fraction(1, 9)):
            ok = ok and rep.banded and rep.gap >= rep.epsilon / 4.0
        ok = ok and rep.banded
    expo = residual_exponent(residuals)
    details["residual_exponent"] = expo
    details["residuals"] = residuals
    positive = [r for _, r in residuals if r > 1e-14]
    if len(positive) >= 2:
        ok = ok and expo is not None and expo > 1.2
    # with fewer than two positive residuals the budget already covers the
    # discrepancy and the higher-order term is unresolved: that is a pass
    return CriterionResult(5, "band vs boundary matrix", bool(ok), details,
                           time.time() - t0)


def criterion_6(ctx: AcceptanceContext) -> CriterionResult:
    """Light-cone bound at N=8 for distance >= 4 over s in [0, 1]."""
    t0 = time.time()
    chain = ctx.chain(8)
    _, _, sz = spin1_generators()
    a_op = site_operator(sz, 2, 8)
    b_op = site_operator(sz, 7, 8)
    interval = SiteRange(1, 8)
    ev = SectorEvolver(chain, interval)
    rows = []
    ok = True
    distance = None
    for s in np.arange(0.0, 1.0 + 1e-12, 0.05):
        rec = lr_check(chain, a_op, b_op, interval, float(s), a=1.0, evolver=ev)
        distance = rec.distance
        rows.append([rec.s, rec.measured, rec.bound, rec.passed])
        ok = ok and rec.passed
    ok = ok and distance is not None and distance >= 4
    details = {"distance": distance,
               "samples": len(rows),
               "worst_margin": max((r[1] - r[2]) for r in rows),
               "first_rows": rows[:3]}
    return CriterionResult(6, "light-cone bound", bool(ok), details,
                           time.time() - t0)


def criterion_7(ctx: AcceptanceContext) -> CriterionResult:
    """Dense-oracle equivalence of every iterative eigensolve at N=6."""
    t0 = time.time()
    chain = ctx.chain(6)
    details = {}
    ok = True

    h = chain.h0()
    dense_vals = np.linalg.eigvalsh(h.to_dense())
    it_vals, _ = lowest_eigenpairs(h, 5, tol=1e-12, dense=False)
    details["h0_dev"] = float(np.abs(it_vals - dense_vals[:5]).max())
    ok = ok and details["h0_dev"] < 1e-9

    pots = random_potentials(6)
    k_op = chain.perturbed_hamiltonian(0.04, pots)
    dense_k = np.linalg.eigvalsh(k_op.to_dense())
    it_k, _ = lowest_eigenpairs(k_op, 8, tol=1e-12, dense=False)
    details["k_dev"] = float(np.abs(it_k - dense_k[:8]).max())
    ok = ok and details["k_dev"] < 1e-9

    # ground projector: iterative kernel vs dense kernel
    gs = chain.ground_space()
    w, v = np.linalg.eigh(h.to_dense())
    dense_frame = v[:, :4]
    p_it = gs.frame @ gs.frame.conj().T
    p_dn = dense_frame @ dense_frame.conj().T
    details["projector_dev"] = float(np.abs(p_it - p_dn).max())
    ok = ok and details["projector_dev"] < 1e-9

    # the flow at N=6 (t=1/25: no bulk labels, one closing step): the
    # transformed spectrum must match the dense spectrum of the bare one
    lat = validate(6, Fraction(1, 25))
    state, result = run_flow(lat, [0.2 * m for m in pots], SeriesConfig(),
                             check_consistency=True, chain=chain)
    kt = chain.perturbed_hamiltonian(1.0 / 25.0, [0.2 * m for m in pots])
    dense_kt = np.linalg.eigvalsh(kt.to_dense())
    tr_vals, _ = lowest_eigenpairs_from_apply(
        lambda v_: result.g_op.apply(v_) + state.sqrt_t * result.w_prime.apply(v_),
        kt.dim, 6)
    details["flow_dev"] = float(np.abs(tr_vals - dense_kt[:6]).max())
    ok = ok and details["flow_dev"] < 1e-9
    return CriterionResult(7, "dense-oracle equivalence", bool(ok), details,
                           time.time() - t0)


def lowest_eigenpairs_from_apply(apply_op, dim: int, k: int):
    import scipy.sparse.linalg as spla

    lo = spla.LinearOperator((dim, dim), matvec=apply_op, dtype=complex)
    vals, vecs = spla.eigsh(lo, k=k, which="SA", tol=1e-12,
                            ncv=min(dim - 1, max(4 * k + 10, 30)), maxiter=5000)
    order = np.argsort(vals)
    return vals[order], vecs[:, order]


def criterion_8(ctx: AcceptanceContext) -> CriterionResult:
    """Ledger honesty: bounds compared, failures reported, run completed."""
    t0 = time.time()
    states, result, _ = ctx.flow_n10()
    state = states[-1]
    rep = ledger_report(state)
    details = {"summary": rep["summary"]}
    rows = rep["rows"]
    norm_rows = [r for r in rows if r["kind"] != "gap"]
    gap_rows = [r for r in rows if r["kind"] == "gap"]
    ok = len(norm_rows) > 0 and len(gap_rows) > 0
    ok = ok and all(np.isfinite(r["norm"]) and np.isfinite(r["bound"]) for r in rows)
    ok = ok and all("passed" in r for r in rows)
    # the run completed (we have a final-step result) even if norm bounds
    # failed at this desk-scale coupling; gaps stayed above the abort line
    ok = ok and result is not None
    ok = ok and all(g["passed"] for g in gap_rows)
    details["norm_failures"] = [r for r in norm_rows if not r["passed"]]
    details["gap_rows"] = gap_rows
    return CriterionResult(8, "ledger honesty", bool(ok), details, time.time() - t0)


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4,
            criterion_5, criterion_6, criterion_7, criterion_8]


def run_acceptance(numbers=None, verbose: bool = True,
                   ctx: AcceptanceContext | None = None) -> list[CriterionResult]:
    ctx = ctx or AcceptanceContext()
    results = []
    for fn in CRITERIA:
        num = int(fn.__name__.split("_")[1])
        if numbers and num not in numbers:
            continue
        res = fn(ctx)
        results.append(res)
        if verbose:
            print(res.line())
    return results
