"""Coarse-grained interval bookkeeping for the block-diagonalization flow.

For a coupling ``t`` the chain is overlaid with a macroscopic lattice of
spacing ``sqrt(1/t)`` microscopic sites, which must be an integer, and the
chain length must fit a whole number of macroscopic cells.  Intervals are
labelled ``(k, j)``: macroscopic length ``k``, left macroscopic endpoint
``j``.  Each interval has two enlargements: the *star* pushes the endpoints
out by fractions of a cell (all endpoint arithmetic is done in exact
rationals before intersecting with the integer lattice, so no boundary site
is ever gained or lost to floating point), and the *bar* adds one
microscopic site on each side where available.  ``tilde_star`` is the
smallest labelled interval containing the star.

Labels are ordered shortest-first, then left-to-right; the *bulk* labels
(those touching neither chain end) are the flow's diagonalization steps,
visited in the restricted order.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator, NamedTuple

from .chainops import SiteRange


class LatticeError(ValueError):
    pass


class IntervalLabel(NamedTuple):
    k: int
    j: int


@dataclass(frozen=True)
class MacroLattice:
    """Validated coarse graining of an N-site chain at coupling t."""

    n_sites: int
    t: Fraction
    step: int         # sqrt(1/t), in microscopic sites
    macro_count: int  # number of macroscopic lattice points, (N-1)*sqrt(t) + 1

    @property
    def last_label(self) -> IntervalLabel:
        return IntervalLabel(self.macro_count - 1, 1)

    @property
    def sentinel(self) -> IntervalLabel:
        # the conventional predecessor of (1, 1)
        return IntervalLabel(0, self.n_sites)


def validate(n_sites: int, t) -> MacroLattice:
    """Check the two integrality conditions and build the lattice.

    Raises ``LatticeError`` naming the failing condition and suggesting the
    nearest valid (N, t) combinations.
    """
    if n_sites < 2:
        raise LatticeError("need at least 2 sites")
    t = Fraction(t)
    if t <= 0:
        raise LatticeError("coupling t must be positive")
    inv = 1 / t
    root = math.isqrt(math.ceil(inv)) if inv.denominator == 1 else 0
    if inv.denominator != 1 or root * root != inv.numerator:
        near = [Fraction(1, s * s) for s in range(1, 6)]
        raise LatticeError(
            f"sqrt(1/t) is not an integer for t = {t}; nearest valid couplings: "
            + ", ".join(str(x) for x in near)
        )
    step = root
    span = Fraction(n_sites - 1, step)
    if span.denominator != 1:
        lo = (n_sites - 1) // step * step + 1
        raise LatticeError(
            f"(N-1)*sqrt(t) = {n_sites - 1}/{step} is not an integer; "
            f"nearest valid N for t = {t}: {lo} or {lo + step}"
        )
    if step <= 2:
        warnings.warn(
            f"macroscopic spacing {step} leaves degenerate enlargement margins; "
            "separation estimates are vacuous at this scale"
        )
    return MacroLattice(n_sites, t, step, int(span) + 1)


# ---------------------------------------------------------------------------
# labels and site sets


def is_valid_label(lat: MacroLattice, lab: IntervalLabel) -> bool:
    return lab.k >= 1 and lab.j >= 1 and lab.j + lab.k <= lat.macro_count


def _check(lat: MacroLattice, lab: IntervalLabel) -> None:
    if not is_valid_label(lat, lab):
        raise LatticeError(f"label {tuple(lab)} invalid for {lat.macro_count} macro sites")


def labels(lat: MacroLattice) -> Iterator[IntervalLabel]:
    """All valid labels in the (k ascending, j ascending) order."""
    for k in range(1, lat.macro_count):
        for j in range(1, lat.macro_count - k + 1):
            yield IntervalLabel(k, j)


def bulk_labels(lat: MacroLattice) -> list[IntervalLabel]:
    return [lab for lab in labels(lat) if is_bulk(lat, lab)]


def sites_of(lat: MacroLattice, lab: IntervalLabel) -> SiteRange:
    _check(lat, lab)
    lo = 1 + (lab.j - 1) * lat.step
    hi = 1 + (lab.j - 1 + lab.k) * lat.step
    return SiteRange(lo, hi)


def star(lat: MacroLattice, lab: IntervalLabel) -> SiteRange:
    """Enlarged interval; fractional endpoints keep only integer sites."""
    _check(lat, lab)
    lo = 1 + (Fraction(lab.j) - Fraction(4, 3)) * lat.step
    hi = 1 + (Fraction(lab.j) - Fraction(2, 3) + lab.k) * lat.step
    lo_i = max(1, math.ceil(lo))
    hi_i = min(lat.n_sites, math.floor(hi))
    return SiteRange(lo_i, hi_i)


def bar_star(lat: MacroLattice, lab: IntervalLabel) -> SiteRange:
    s = star(lat, lab)
    return SiteRange(max(1, s.start - 1), min(lat.n_sites, s.end + 1))


def tilde_star(lat: MacroLattice, lab: IntervalLabel) -> IntervalLabel:
    """Smallest labelled interval containing the star.

    Minimal in k first; among containing candidates at minimal k the
    smallest j wins (the tie can only occur near the chain edges).
    """
    s = star(lat, lab)
    for k in range(1, lat.macro_count):
        for j in range(1, lat.macro_count - k + 1):
            cand = IntervalLabel(k, j)
            if sites_of(lat, cand).contains(s):
                return cand
    raise LatticeError(f"no labelled interval contains star of {tuple(lab)}")


def is_bulk(lat: MacroLattice, lab: IntervalLabel) -> bool:
    s = sites_of(lat, lab)
    return s.start != 1 and s.end != lat.n_sites


def classify(lat: MacroLattice, lab: IntervalLabel) -> str:
    return "bulk" if is_bulk(lat, lab) else "boundary"


def label_for_sites(lat: MacroLattice, rng: SiteRange) -> IntervalLabel:
    """Label whose site set equals ``rng`` (raises if none)."""
    if (rng.start - 1) % lat.step or (rng.end - 1) % lat.step:
        raise LatticeError(f"{rng} does not sit on the macroscopic grid")
    j = (rng.start - 1) // lat.step + 1
    k = (rng.end - rng.start) // lat.step
    lab = IntervalLabel(k, j)
    _check(lat, lab)
    return lab


# ---------------------------------------------------------------------------
# orderings


def order_succ(lat: MacroLattice, pair: IntervalLabel,
               restricted: bool = False) -> IntervalLabel | None:
    """Successor in the (k, j) order; ``restricted`` skips non-bulk labels.

    Accepts the sentinel pair (0, N) as predecessor of the first label;
    returns None past the last (restricted: last bulk) label.
    """
    pair = IntervalLabel(*pair)
    if pair == lat.sentinel:
        k, j = 1, 0
    else:
        _check(lat, pair)
        k, j = pair
    while True:
        j += 1
        if j + k > lat.macro_count:
            k += 1
            j = 1
            if j + k > lat.macro_count:
                return None
        lab = IntervalLabel(k, j)
        if not restricted or is_bulk(lat, lab):
            return lab


def restricted_order(lat: MacroLattice) -> list[IntervalLabel]:
    """All bulk labels, in the order the flow visits them."""
    out = []
    lab = lat.sentinel
    while True:
        lab = order_succ(lat, lab, restricted=True)
        if lab is None:
            return out
        out.append(lab)


def order_index(lat: MacroLattice, lab: IntervalLabel) -> int:
    """Position of a label in the unrestricted order (sentinel is -1)."""
    lab = IntervalLabel(*lab)
    if lab == lat.sentinel:
        return -1
    _check(lat, lab)
    return sum(lat.macro_count - k for k in range(1, lab.k)) + lab.j - 1


# ---------------------------------------------------------------------------
# growth sets


def growth_sets(lat: MacroLattice, step_lab: IntervalLabel,
                target: IntervalLabel):
    """The three source sets feeding a target interval during one step.

    Set 1: later bulk labels whose interval meets the step's star, differs
    from the target, and whose union with the tilde closes it.  Set 2:
    earlier bulk labels whose star meets the step's star without being
    contained in it, with the two tildes closing the target.  Set 3: bulk
    labels whose star lies strictly inside the step's star and touches one
    of its endpoints (independent of the target).
    """
    _check(lat, step_lab)
    _check(lat, target)
    if not is_bulk(lat, step_lab):
        raise LatticeError(f"step {tuple(step_lab)} is not a bulk label")
    s_star = star(lat, step_lab)
    t_sites = sites_of(lat, target)
    tilde = sites_of(lat, tilde_star(lat, step_lab))
    me = order_index(lat, step_lab)

    set1, set2, set3 = [], [], []
    for lab in bulk_labels(lat):
        lsites = sites_of(lat, lab)
        lstar = star(lat, lab)
        idx = order_index(lat, lab)
        if (idx > me and lsites.overlaps(s_star) and lsites != t_sites
                and _union_equals(tilde, lsites, t_sites)):
            set1.append(lab)
        if (idx < me and lstar.overlaps(s_star)
                and not (s_star.contains(lstar) and lstar != s_star)
                and _union_equals(tilde, sites_of(lat, tilde_star(lat, lab)), t_sites)):
            set2.append(lab)
        if (s_star.contains(lstar) and lstar != s_star
                and (lstar.start <= s_star.start <= lstar.end
                     or lstar.start <= s_star.end <= lstar.end)):
            set3.append(lab)
    return set1, set2, set3


def _union_equals(a: SiteRange, b: SiteRange, want: SiteRange) -> bool:
    if not a.overlaps(b) and a.end + 1 != b.start and b.end + 1 != a.start:
        return False  # disjoint, non-adjacent pieces do not form an interval
    return a.cover(b) == want


def union_target(lat: MacroLattice, step_lab: IntervalLabel,
                 partner: SiteRange) -> IntervalLabel:
    """Label of tilde(step) united with a partner site set.

    This is how the flow routes a term created by conjugating a potential
    that straddles the step's star: the result is supported in the union,
    which the label family contains because overlapping labelled intervals
    have labelled unions.
    """
    tilde = sites_of(lat, tilde_star(lat, step_lab))
    return label_for_sites(lat, tilde.cover(partner))


def label_table(lat: MacroLattice) -> list[dict]:
    """Full dump of the label family (one row per label)."""
    rows = []
    for lab in labels(lat):
        s = sites_of(lat, lab)
        st = star(lat, lab)
        bs = bar_star(lat, lab)
        td = tilde_star(lat, lab)
        rows.append({
            "k": lab.k,
            "j": lab.j,
            "sites": [s.start, s.end],
            "kind": classify(lat, lab),
            "star": [st.start, st.end],
            "bar_star": [bs.start, bs.end],
            "tilde_star": [td.k, td.j],
        })
    return rows
