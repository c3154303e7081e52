"""The unperturbed spin-1 chain: nearest-neighbour spin-2 projectors, local
Hamiltonians, four-dimensional ground bands and the normalized ground-band
trace.

The Hamiltonian on an interval is the sum of the projectors onto the total
spin-2 subspace of each bond inside the interval.  It is frustration free:
its kernel is annihilated by every bond term separately, which makes the
ground energy exactly zero and gives the nesting relations between ground
projectors of nested intervals that the block-diagonalization flow relies
on.
"""

from __future__ import annotations

import functools
import warnings
from dataclasses import dataclass, field

import numpy as np

from .chainops import (
    HERMITIAN,
    ChainOperator,
    ChainOpError,
    LocalBlock,
    LowRankBlock,
    SiteRange,
    cover_of,
    payload_support,
    spin1_generators,
)
from .solvers import lowest_eigenpairs

KERNEL_DIM = 4
KERNEL_TOL = 1e-9


class GroundSpaceError(RuntimeError):
    pass


@functools.lru_cache(maxsize=1)
def spin2_projector_matrix() -> np.ndarray:
    """81x81 projector onto the spin-2 multiplet of two spin-1 sites:
    S.S/2 + (S.S)^2/6 + 1/3.  Real symmetric (the imaginary parts of the
    two transverse couplings cancel), kept in float64 so that kernel
    solves stay in real arithmetic."""
    sx, sy, sz = spin1_generators()
    ss = sum(np.kron(a, a) for a in (sx, sy, sz))
    p2 = ss / 2.0 + (ss @ ss) / 6.0 + np.eye(9) / 3.0
    assert np.abs(p2.imag).max() < 1e-14
    return np.ascontiguousarray(p2.real)


@dataclass(frozen=True)
class GroundSpace:
    """Orthonormal 4-frame spanning the kernel of the interval Hamiltonian."""

    interval: SiteRange
    frame: np.ndarray = field(repr=False)  # (dim, 4)
    n_sites: int = 0  # ambient chain length

    @property
    def p_minus(self) -> ChainOperator:
        return self.p_minus_on(self.n_sites or self.interval.end)

    @property
    def p_plus(self) -> ChainOperator:
        return self.p_plus_on(self.n_sites or self.interval.end)

    def p_minus_on(self, n_sites: int) -> ChainOperator:
        blk = LowRankBlock(self.interval, self.frame, self.frame)
        return ChainOperator(n_sites, [(1.0 + 0.0j, blk)], HERMITIAN)

    def p_plus_on(self, n_sites: int) -> ChainOperator:
        return ChainOperator.identity(n_sites) - self.p_minus_on(n_sites)

    def project_out(self, v: np.ndarray) -> np.ndarray:
        """Orthogonal projection of an interval-space vector onto the
        excited space."""
        return v - self.frame @ (self.frame.conj().T @ v)

    def band_average(self, mat_vec) -> complex:
        """Normalized trace over the band of an operator given as a matvec
        on the interval space."""
        return sum(np.vdot(self.frame[:, i], mat_vec(self.frame[:, i]))
                   for i in range(KERNEL_DIM)) / KERNEL_DIM


class AkltChain:
    """Open chain of N spin-1 sites with the projector Hamiltonian.

    Ground spaces and spectral data are cached per interval; instances are
    read-only after construction and safe to share.
    """

    def __init__(self, n_sites: int):
        if n_sites < 2:
            raise ChainOpError("chain needs at least 2 sites")
        self.n_sites = n_sites
        self._ground: dict[SiteRange, GroundSpace] = {}
        self._gap: dict[SiteRange, float] = {}

    @property
    def full_range(self) -> SiteRange:
        return SiteRange(1, self.n_sites)

    # -- Hamiltonians --------------------------------------------------------

    def spin2_projector(self, i: int) -> ChainOperator:
        """Bond projector on sites (i, i+1)."""
        if not (1 <= i <= self.n_sites - 1):
            raise ChainOpError(f"bond {i} out of range for N={self.n_sites}")
        blk = LocalBlock(SiteRange(i, i + 1), spin2_projector_matrix())
        return ChainOperator(self.n_sites, [(1.0 + 0.0j, blk)], HERMITIAN)

    def h0(self, interval: SiteRange | None = None) -> ChainOperator:
        """Sum of bond projectors with both sites inside the interval."""
        if interval is None:
            interval = self.full_range
        if len(interval) < 2:
            warnings.warn(f"interval {interval} holds no bond; Hamiltonian is zero")
        terms = []
        p2 = spin2_projector_matrix()
        for i in range(interval.start, interval.end):
            terms.append((1.0 + 0.0j, LocalBlock(SiteRange(i, i + 1), p2)))
        return ChainOperator(self.n_sites, terms, HERMITIAN)

    def perturbed_hamiltonian(self, t: float, potentials) -> ChainOperator:
        """H0 + t * sum of bond potentials.

        ``potentials`` maps bond index i (1-based left site) to a 9x9
        hermitian matrix of norm at most 1; a list is read as bonds
        1..N-1 in order.
        """
        pots = _as_bond_dict(potentials, self.n_sites)
        terms = list(self.h0().terms)
        for i, mat in sorted(pots.items()):
            mat = np.asarray(mat, dtype=complex)
            if mat.shape != (9, 9):
                raise ChainOpError(f"bond potential {i} must be 9x9")
            if np.abs(mat - mat.conj().T).max() > 1e-12:
                raise ChainOpError(f"bond potential {i} is not hermitian")
            if np.linalg.norm(mat, 2) > 1.0 + 1e-9:
                raise ChainOpError(f"bond potential {i} has norm > 1")
            terms.append((complex(t), LocalBlock(SiteRange(i, i + 1), mat)))
        return ChainOperator(self.n_sites, terms, HERMITIAN)

    # -- ground structure ----------------------------------------------------

    def ground_space(self, interval: SiteRange | None = None,
                     tol: float = KERNEL_TOL) -> GroundSpace:
        if interval is None:
            interval = self.full_range
        if len(interval) < 2:
            raise ChainOpError("ground space needs an interval of >= 2 sites")
        if interval not in self._ground:
            self._ground[interval] = self._compute_ground(interval, tol)
        return self._ground[interval]

    def _compute_ground(self, interval: SiteRange, tol: float) -> GroundSpace:
        h = self.h0(interval)
        vals, vecs = lowest_eigenpairs(h, KERNEL_DIM + 1, tol=1e-12, rng=interval)
        if vals[KERNEL_DIM - 1] > tol or vals[KERNEL_DIM] < tol:
            raise GroundSpaceError(
                f"kernel of {interval} is not 4-dimensional at tol {tol}: "
                f"lowest eigenvalues {vals}"
            )
        frame = _canonical_frame(vecs[:, :KERNEL_DIM], interval)
        # refine: frustration-free zero is exact, so one residual check suffices
        resid = max(np.linalg.norm(h.apply_on(interval, frame[:, k]))
                    for k in range(KERNEL_DIM))
        if resid > tol:
            raise GroundSpaceError(f"kernel residual {resid:.2e} above {tol:.1e}")
        return GroundSpace(interval, frame, self.n_sites)

    def spectral_gap(self, interval: SiteRange | None = None) -> float:
        """Fifth eigenvalue of the interval Hamiltonian (ground energy is 0)."""
        if interval is None:
            interval = self.full_range
        if interval not in self._gap:
            vals, _ = lowest_eigenpairs(self.h0(interval), KERNEL_DIM + 1,
                                        tol=1e-12, rng=interval)
            self._gap[interval] = float(vals[KERNEL_DIM])
        return self._gap[interval]

    # -- the ground-band trace -----------------------------------------------

    def omega(self, op: ChainOperator) -> complex:
        """Normalized ground-band trace, evaluated on the smallest interval
        containing the operator's support (any larger interval gives the
        same value up to numerical error, by consistency of the nested
        ground projections)."""
        if op.n_sites != self.n_sites:
            raise ChainOpError("operator lives on a different chain")
        out = op.identity_coeff()
        sup = cover_of(payload_support(p) for _, p in op.terms if p is not None)
        if sup is None:
            return out
        interval = self.smallest_enclosing(sup)
        gs = self.ground_space(interval)
        nonid = ChainOperator(self.n_sites,
                              [(c, p) for c, p in op.terms if p is not None],
                              op.herm, coalesce=False)
        out += gs.band_average(lambda v: nonid.apply_on(interval, v))
        return complex(out)

    def smallest_enclosing(self, sup: SiteRange) -> SiteRange:
        """Smallest interval of >= 2 sites containing a support."""
        if len(sup) >= 2:
            return sup
        if sup.end < self.n_sites:
            return SiteRange(sup.start, sup.end + 1)
        return SiteRange(sup.start - 1, sup.end)

    # -- misc ----------------------------------------------------------------

    def total_sz(self) -> ChainOperator:
        _, _, sz = spin1_generators()
        terms = [(1.0 + 0.0j, LocalBlock(SiteRange(i, i), sz))
                 for i in range(1, self.n_sites + 1)]
        return ChainOperator(self.n_sites, terms, HERMITIAN)


def _as_bond_dict(potentials, n_sites: int) -> dict[int, np.ndarray]:
    if isinstance(potentials, dict):
        out = dict(potentials)
    else:
        out = {i + 1: m for i, m in enumerate(potentials)}
    for i in out:
        if not (1 <= i <= n_sites - 1):
            raise ChainOpError(f"bond index {i} out of range")
    return out


# ---------------------------------------------------------------------------
# deterministic frame


def _basis_sz_values(n_sites: int) -> np.ndarray:
    """Total-Sz eigenvalue of each product basis state (digit 0 -> m=+1)."""
    idx = np.arange(3 ** n_sites)
    out = np.zeros(idx.shape[0])
    for _ in range(n_sites):
        out += 1.0 - (idx % 3)
        idx //= 3
    return out


def _canonical_frame(raw: np.ndarray, interval: SiteRange) -> np.ndarray:
    """Rotate a kernel frame to the reproducible basis.

    The four kernel vectors carry total Sz in {+1, 0, 0, -1}; the m = 0
    pair is resolved by total spin (singlet before triplet), and each
    vector's first significant coefficient is phased to be real positive.
    Ordering: m descending, then total spin ascending.
    """
    nloc = len(interval)
    mz = _basis_sz_values(nloc)
    mzmat = raw.conj().T @ (mz[:, None] * raw)
    mvals, mrot = np.linalg.eigh(mzmat)
    frame = (raw @ mrot).astype(complex)  # columns sorted by m ascending
    frame = frame[:, ::-1]  # m descending
    mvals = mvals[::-1]

    # resolve the m = 0 pair with total spin
    zero_cols = [k for k in range(KERNEL_DIM) if abs(mvals[k]) < 0.5]
    if len(zero_cols) == 2:
        sub = frame[:, zero_cols]
        s2 = sub.conj().T @ _apply_total_s2(sub, nloc)
        svals, srot = np.linalg.eigh((s2 + s2.conj().T) / 2.0)
        frame[:, zero_cols] = sub @ srot  # total spin ascending

    for k in range(KERNEL_DIM):
        col = frame[:, k]
        lead = np.argmax(np.abs(col) > 1e-8 * np.abs(col).max())
        phase = col[lead] / abs(col[lead])
        frame[:, k] = col / phase
    # symmetric re-orthonormalization: fixes roundoff without remixing columns
    g = frame.conj().T @ frame
    evals, evecs = np.linalg.eigh(g)
    g_isqrt = evecs @ np.diag(1.0 / np.sqrt(evals)) @ evecs.conj().T
    frame = frame @ g_isqrt
    if np.abs(frame.imag).max() < 1e-12:
        frame = np.ascontiguousarray(frame.real)
    return frame


def _apply_total_s2(vecs: np.ndarray, n_sites: int) -> np.ndarray:
    """(sum_i S_i)^2 applied to columns of interval-space vectors."""
    gens = spin1_generators()
    shape = (3,) * n_sites

    def total(g, cols):
        acc = np.zeros(cols.shape, dtype=complex)
        for j in range(n_sites):
            for c in range(cols.shape[1]):
                t = cols[:, c].reshape(shape)
                t = np.tensordot(g, t, axes=([1], [j]))
                t = np.moveaxis(t, 0, j)
                acc[:, c] += t.reshape(-1)
        return acc

    out = np.zeros(vecs.shape, dtype=complex)
    for g in gens:
        out += total(g, total(g, vecs))
    return out
