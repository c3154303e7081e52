"""Support-local operator algebra for open chains of spin-1 sites.

Operators are kept as sums of blocks that act nontrivially only on a
contiguous range of sites and as the identity elsewhere.  Nothing is ever
materialized on the full 3^N space unless a caller explicitly asks for a
dense matrix (feasible only for short chains); matrix-vector products embed
each block into the chain via reshape/tensordot.

Block payloads come in four kinds:

* ``LocalBlock``      -- a dense matrix on its support (the common case),
* ``LowRankBlock``    -- ``left @ right^H``, used for projector corrections,
* ``ConjugatedBlock`` -- ``U X U^H`` (optionally minus ``X``) with ``U``
  dense on a sub-support; kept lazy because materializing it can be orders
  of magnitude larger than its factors,
* ``CallableBlock``   -- an arbitrary matvec closure (used for operators
  assembled from subspace rotations on the whole chain).

All values are immutable after construction; concurrent read-only use is
safe.
"""

from __future__ import annotations

import math
import numbers
import warnings
from dataclasses import dataclass, field

import numpy as np

LOCAL_DIM = 3

#: supports with at most this many sites may be materialized densely
DENSE_SITES_MAX = 8

COALESCE_TOL = 1e-14


class ChainOpError(ValueError):
    pass


class SeriesDivergenceWarning(UserWarning):
    """The truncated commutator series stopped before reaching tolerance."""


# ---------------------------------------------------------------------------
# site ranges


@dataclass(frozen=True, order=True)
class SiteRange:
    """Contiguous range of sites, 1-based and inclusive at both ends."""

    start: int
    end: int

    def __post_init__(self):
        if not (1 <= self.start <= self.end):
            raise ChainOpError(f"invalid site range [{self.start}, {self.end}]")

    def __len__(self) -> int:
        return self.end - self.start + 1

    @property
    def dim(self) -> int:
        return LOCAL_DIM ** len(self)

    def sites(self) -> range:
        return range(self.start, self.end + 1)

    def contains(self, other: "SiteRange") -> bool:
        return self.start <= other.start and other.end <= self.end

    def overlaps(self, other: "SiteRange") -> bool:
        return self.start <= other.end and other.start <= self.end

    def cover(self, other: "SiteRange") -> "SiteRange":
        return SiteRange(min(self.start, other.start), max(self.end, other.end))

    def __str__(self) -> str:
        return f"[{self.start},{self.end}]"


def cover_of(ranges) -> SiteRange | None:
    out = None
    for r in ranges:
        if r is None:
            continue
        out = r if out is None else out.cover(r)
    return out


# ---------------------------------------------------------------------------
# payloads


@dataclass(frozen=True)
class LocalBlock:
    """Dense matrix acting on ``support``, identity elsewhere."""

    support: SiteRange
    mat: np.ndarray = field(repr=False)

    def __post_init__(self):
        d = self.support.dim
        if self.mat.shape != (d, d):
            raise ChainOpError(
                f"block on {self.support} must be {d}x{d}, got {self.mat.shape}"
            )

    def apply_mid(self, t3: np.ndarray) -> np.ndarray:
        # t3: (left, dim, right); contract the middle axis
        return np.tensordot(self.mat, t3, axes=([1], [1])).transpose(1, 0, 2)

    def dense(self) -> np.ndarray:
        return self.mat

    def fro(self) -> float:
        return float(np.linalg.norm(self.mat))


@dataclass(frozen=True)
class LowRankBlock:
    """``left @ right^H`` on ``support`` (rank = number of columns)."""

    support: SiteRange
    left: np.ndarray = field(repr=False)
    right: np.ndarray = field(repr=False)

    def __post_init__(self):
        d = self.support.dim
        if self.left.shape[0] != d or self.right.shape[0] != d:
            raise ChainOpError("low-rank factors do not match support dimension")
        if self.left.shape[1] != self.right.shape[1]:
            raise ChainOpError("low-rank factors must have equal rank")

    def apply_mid(self, t3: np.ndarray) -> np.ndarray:
        w = np.tensordot(self.right.conj(), t3, axes=([0], [1]))  # (r, L, R)
        return np.tensordot(self.left, w, axes=([1], [0])).transpose(1, 0, 2)

    def dense(self) -> np.ndarray:
        return self.left @ self.right.conj().T

    def fro(self) -> float:
        # ||L R^H||_F = ||R L^H L R^H||^(1/2) via the small Gram matrices
        g = (self.left.conj().T @ self.left) @ (self.right.conj().T @ self.right)
        return float(math.sqrt(abs(np.trace(g).real)))


@dataclass(frozen=True)
class ConjugatedBlock:
    """``U X U^H`` (or ``U X U^H - X``) with ``U`` unitary on a sub-support.

    ``inner`` is a tuple of ``(coeff, payload)`` whose supports all lie
    within ``support``; ``u`` lives on ``u_support``.  Kept lazy: only the
    factors are stored.
    """

    support: SiteRange
    u_support: SiteRange
    u: np.ndarray = field(repr=False)
    inner: tuple = field(repr=False)
    subtract: bool = False

    def _apply_inner(self, t3: np.ndarray) -> np.ndarray:
        out = np.zeros_like(t3)
        for coeff, payload in self.inner:
            out += coeff * apply_within(self.support, payload, t3)
        return out

    def apply_mid(self, t3: np.ndarray) -> np.ndarray:
        ub = LocalBlock(self.u_support, self.u)
        ubh = LocalBlock(self.u_support, self.u.conj().T)
        w = apply_within(self.support, ubh, t3)
        w = self._apply_inner(w)
        w = apply_within(self.support, ub, w)
        if self.subtract:
            w = w - self._apply_inner(t3)
        return w

    def dense(self) -> np.ndarray:
        if len(self.support) > DENSE_SITES_MAX:
            raise ChainOpError(f"refusing to densify conjugated block on {self.support}")
        x = np.zeros((self.support.dim, self.support.dim), dtype=complex)
        for coeff, payload in self.inner:
            x += coeff * embed_dense(self.support, payload_support(payload), payload_dense(payload))
        u = embed_dense(self.support, self.u_support, self.u)
        out = u @ x @ u.conj().T
        if self.subtract:
            out -= x
        return out

    def fro(self) -> float:
        # cheap upper bound: unitary conjugation preserves the norm
        s = sum(abs(c) * payload_fro(p) for c, p in self.inner)
        return (2.0 if self.subtract else 1.0) * s


@dataclass(frozen=True)
class CallableBlock:
    """Matvec closure on ``support``; no dense form."""

    support: SiteRange
    matvec: object = field(repr=False)  # vec (dim,) -> vec (dim,)
    label: str = ""

    def apply_mid(self, t3: np.ndarray) -> np.ndarray:
        left, d, right = t3.shape
        out = np.empty_like(t3, dtype=complex)
        for i in range(left):
            for k in range(right):
                out[i, :, k] = self.matvec(np.ascontiguousarray(t3[i, :, k]))
        return out

    def dense(self) -> np.ndarray:
        raise ChainOpError(f"callable block '{self.label}' has no dense form")

    def fro(self) -> float:
        raise ChainOpError(f"callable block '{self.label}' has no cheap norm")


def payload_support(payload) -> SiteRange:
    return payload.support


def payload_dense(payload) -> np.ndarray:
    return payload.dense()


def payload_fro(payload) -> float:
    return payload.fro()


def apply_within(outer: SiteRange, payload, t3: np.ndarray) -> np.ndarray:
    """Apply a payload supported inside ``outer`` to the middle axis of t3."""
    sup = payload_support(payload)
    if not outer.contains(sup):
        raise ChainOpError(f"payload support {sup} not inside {outer}")
    left, dmid, right = t3.shape
    dl = LOCAL_DIM ** (sup.start - outer.start)
    di = sup.dim
    dr = LOCAL_DIM ** (outer.end - sup.end)
    t5 = t3.reshape(left * dl, di, dr * right)
    return payload.apply_mid(t5).reshape(left, dmid, right)


def embed_dense(outer: SiteRange, inner: SiteRange, mat: np.ndarray) -> np.ndarray:
    """Dense embedding ``I (x) mat (x) I`` of a block into a larger range."""
    if not outer.contains(inner):
        raise ChainOpError(f"{inner} not inside {outer}")
    dl = LOCAL_DIM ** (inner.start - outer.start)
    dr = LOCAL_DIM ** (outer.end - inner.end)
    out = mat
    if dl > 1:
        out = np.kron(np.eye(dl), out)
    if dr > 1:
        out = np.kron(out, np.eye(dr))
    return out


# ---------------------------------------------------------------------------
# hermiticity tags

HERMITIAN = "hermitian"
ANTIHERMITIAN = "anti-hermitian"
GENERAL = "general"


def _combine_add(tag_a: str, tag_b: str) -> str:
    return tag_a if tag_a == tag_b else GENERAL


def _scale_tag(tag: str, c: complex) -> str:
    if tag == GENERAL:
        return GENERAL
    if c.imag == 0.0:
        return tag
    if c.real == 0.0:
        return ANTIHERMITIAN if tag == HERMITIAN else HERMITIAN
    return GENERAL


# ---------------------------------------------------------------------------
# the operator


class ChainOperator:
    """Sum of support-local blocks on a chain of ``n_sites`` spin-1 sites.

    ``terms`` is a list of ``(coeff, payload)``; a payload of ``None``
    stands for the global identity.  The object is immutable; all algebra
    returns new operators.
    """

    __slots__ = ("n_sites", "terms", "herm")

    def __init__(self, n_sites: int, terms=(), herm: str = GENERAL, coalesce: bool = True):
        if n_sites < 1:
            raise ChainOpError("chain must have at least one site")
        terms = list(terms)
        for coeff, payload in terms:
            if payload is not None and payload_support(payload).end > n_sites:
                raise ChainOpError(
                    f"term support {payload_support(payload)} exceeds chain of {n_sites} sites"
                )
        self.n_sites = n_sites
        self.terms = _coalesce(terms) if coalesce else terms
        self.herm = herm

    # -- constructors -------------------------------------------------------

    @staticmethod
    def zero(n_sites: int, herm: str = HERMITIAN) -> "ChainOperator":
        return ChainOperator(n_sites, [], herm)

    @staticmethod
    def identity(n_sites: int, coeff: complex = 1.0) -> "ChainOperator":
        tag = HERMITIAN if complex(coeff).imag == 0.0 else GENERAL
        return ChainOperator(n_sites, [(complex(coeff), None)], tag)

    @staticmethod
    def from_block(n_sites: int, support: SiteRange, mat: np.ndarray,
                   herm: str | None = None, coeff: complex = 1.0) -> "ChainOperator":
        mat = np.asarray(mat, dtype=complex)
        if herm is None:
            herm = _detect_tag(mat)
        return ChainOperator(n_sites, [(complex(coeff), LocalBlock(support, mat))], herm)

    # -- bookkeeping ---------------------------------------------------------

    @property
    def dim(self) -> int:
        return LOCAL_DIM ** self.n_sites

    def support(self) -> SiteRange | None:
        """Smallest range covering all non-identity terms (None if scalar)."""
        return cover_of(payload_support(p) for _, p in self.terms if p is not None)

    def identity_coeff(self) -> complex:
        return sum((c for c, p in self.terms if p is None), 0.0 + 0.0j)

    def is_zero(self, tol: float = COALESCE_TOL) -> bool:
        for coeff, payload in self.terms:
            if payload is None:
                if abs(coeff) > tol:
                    return False
            elif abs(coeff) * payload_fro(payload) > tol:
                return False
        return True

    def n_terms(self) -> int:
        return len(self.terms)

    # -- algebra -------------------------------------------------------------

    def __add__(self, other: "ChainOperator") -> "ChainOperator":
        if not isinstance(other, ChainOperator):
            return NotImplemented
        if other.n_sites != self.n_sites:
            raise ChainOpError("mismatched chain lengths")
        return ChainOperator(self.n_sites, self.terms + other.terms,
                             _combine_add(self.herm, other.herm))

    def __sub__(self, other: "ChainOperator") -> "ChainOperator":
        return self + (other * -1.0)

    def __mul__(self, c) -> "ChainOperator":
        if not isinstance(c, numbers.Number):
            return NotImplemented
        c = complex(c)
        return ChainOperator(self.n_sites, [(c * coeff, p) for coeff, p in self.terms],
                             _scale_tag(self.herm, c), coalesce=False)

    __rmul__ = __mul__

    def adjoint(self) -> "ChainOperator":
        out_terms = []
        for coeff, payload in self.terms:
            if payload is None:
                out_terms.append((np.conj(coeff), None))
            elif isinstance(payload, LocalBlock):
                out_terms.append((np.conj(coeff), LocalBlock(payload.support, payload.mat.conj().T)))
            elif isinstance(payload, LowRankBlock):
                out_terms.append((np.conj(coeff),
                                  LowRankBlock(payload.support, payload.right, payload.left)))
            else:
                raise ChainOpError("adjoint of lazy payloads is not supported")
        tag = {HERMITIAN: HERMITIAN, ANTIHERMITIAN: ANTIHERMITIAN}.get(self.herm, GENERAL)
        return ChainOperator(self.n_sites, out_terms, tag, coalesce=False)

    # -- action --------------------------------------------------------------

    def apply(self, v: np.ndarray) -> np.ndarray:
        """Matrix-vector product on the full chain."""
        return self.apply_on(SiteRange(1, self.n_sites), v)

    def is_real(self) -> bool:
        """True when every term keeps real vectors real."""
        for coeff, payload in self.terms:
            if complex(coeff).imag != 0.0:
                return False
            if isinstance(payload, LocalBlock):
                if np.iscomplexobj(payload.mat):
                    return False
            elif isinstance(payload, LowRankBlock):
                if np.iscomplexobj(payload.left) or np.iscomplexobj(payload.right):
                    return False
            elif payload is not None:
                return False
        return True

    def apply_on(self, rng: SiteRange, v: np.ndarray) -> np.ndarray:
        """Matvec on the subspace of ``rng``; all supports must lie inside."""
        v = np.asarray(v)
        if v.shape[0] != rng.dim:
            raise ChainOpError(f"vector dim {v.shape[0]} does not match {rng}")
        dtype = complex if (np.iscomplexobj(v) or not self.is_real()) else np.float64
        out = np.zeros(rng.dim, dtype=dtype)
        ident = 0.0 + 0.0j
        t3 = v.reshape(1, rng.dim, 1)
        for coeff, payload in self.terms:
            if payload is None:
                ident += coeff
            else:
                out += _real_if_possible(coeff) * apply_within(rng, payload, t3).reshape(-1)
        if ident != 0.0:
            out += _real_if_possible(ident) * v
        return out

    def dense_on(self, rng: SiteRange) -> np.ndarray:
        """Dense matrix of the operator restricted to ``rng``."""
        if len(rng) > DENSE_SITES_MAX:
            raise ChainOpError(f"refusing to densify on {len(rng)} sites")
        d = rng.dim
        out = np.zeros((d, d), dtype=complex)
        for coeff, payload in self.terms:
            if payload is None:
                out += coeff * np.eye(d)
            else:
                sup = payload_support(payload)
                if not rng.contains(sup):
                    raise ChainOpError(f"term on {sup} sticks out of {rng}")
                out += coeff * embed_dense(rng, sup, payload_dense(payload))
        return out

    def to_dense(self) -> np.ndarray:
        return self.dense_on(SiteRange(1, self.n_sites))


def _detect_tag(mat: np.ndarray, tol: float = 1e-12) -> str:
    scale = np.abs(mat).max() or 1.0
    if np.abs(mat - mat.conj().T).max() <= tol * scale:
        return HERMITIAN
    if np.abs(mat + mat.conj().T).max() <= tol * scale:
        return ANTIHERMITIAN
    return GENERAL


def _real_if_possible(c: complex):
    c = complex(c)
    return c.real if c.imag == 0.0 else c


def _coalesce(terms):
    """Merge dense blocks with identical supports, drop negligible terms."""
    ident = 0.0 + 0.0j
    dense: dict[SiteRange, np.ndarray] = {}
    rest = []
    for coeff, payload in terms:
        if payload is None:
            ident += complex(coeff)
        elif isinstance(payload, LocalBlock):
            sup = payload.support
            piece = _real_if_possible(coeff) * payload.mat
            dense[sup] = dense[sup] + piece if sup in dense else piece
        else:
            if abs(coeff) > 0.0:
                rest.append((complex(coeff), payload))
    out = []
    if abs(ident) > COALESCE_TOL:
        out.append((ident, None))
    for sup in sorted(dense):
        mat = dense[sup]
        if np.linalg.norm(mat) > COALESCE_TOL:
            out.append((1.0 + 0.0j, LocalBlock(sup, mat)))
    out.extend(rest)
    return out


# ---------------------------------------------------------------------------
# spin-1 matrices


def spin1_generators() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Standard spin-1 matrices (Sx, Sy, Sz) in the basis m = +1, 0, -1."""
    s = math.sqrt(2.0)
    sp = np.array([[0, s, 0], [0, 0, s], [0, 0, 0]], dtype=complex)
    sm = sp.conj().T
    sx = 0.5 * (sp + sm)
    sy = -0.5j * (sp - sm)
    sz = np.diag([1.0, 0.0, -1.0]).astype(complex)
    return sx, sy, sz


def embed(block: LocalBlock, n_sites: int, herm: str | None = None) -> ChainOperator:
    """Promote a local block to a chain operator (identity off-support)."""
    if block.support.end > n_sites:
        raise ChainOpError(f"support {block.support} out of range for N={n_sites}")
    if herm is None:
        herm = _detect_tag(block.mat)
    return ChainOperator(n_sites, [(1.0 + 0.0j, block)], herm)


def site_operator(mat: np.ndarray, site: int, n_sites: int) -> ChainOperator:
    return embed(LocalBlock(SiteRange(site, site), np.asarray(mat, dtype=complex)), n_sites)


# ---------------------------------------------------------------------------
# compose


def compose(a: ChainOperator, b: ChainOperator, mode: str) -> ChainOperator:
    """add / multiply / commutator of two chain operators.

    Products are formed densely on the cover of each pair of term supports,
    so both operands must consist of densifiable payloads with small joint
    supports.
    """
    if a.n_sites != b.n_sites:
        raise ChainOpError("mismatched chain lengths")
    if mode == "add":
        return a + b
    if mode not in ("multiply", "commutator"):
        raise ChainOpError(f"unknown compose mode '{mode}'")

    n = a.n_sites
    out_terms = []
    for ca, pa in a.terms:
        for cb, pb in b.terms:
            c = ca * cb
            if pa is None and pb is None:
                if mode == "multiply":
                    out_terms.append((c, None))
                continue
            if pa is None:
                if mode == "multiply":
                    out_terms.append((c, pb))
                continue
            if pb is None:
                if mode == "multiply":
                    out_terms.append((c, pa))
                continue
            sa, sb = payload_support(pa), payload_support(pb)
            if mode == "commutator" and not sa.overlaps(sb):
                continue  # disjoint supports commute exactly
            cov = sa.cover(sb)
            ma = embed_dense(cov, sa, payload_dense(pa))
            mb = embed_dense(cov, sb, payload_dense(pb))
            prod = ma @ mb
            if mode == "commutator":
                prod = prod - mb @ ma
            out_terms.append((c, LocalBlock(cov, prod)))

    if mode == "commutator":
        if a.herm == b.herm and a.herm in (HERMITIAN, ANTIHERMITIAN):
            tag = ANTIHERMITIAN
        elif {a.herm, b.herm} == {HERMITIAN, ANTIHERMITIAN}:
            tag = HERMITIAN
        else:
            tag = GENERAL
    else:
        tag = GENERAL
    return ChainOperator(n, out_terms, tag)


# ---------------------------------------------------------------------------
# conjugation e^Z A e^{-Z}


def conjugate(a: ChainOperator, z: ChainOperator, series_tol: float = 1e-12,
              max_order: int = 40, dense_sites: int = 7) -> ChainOperator:
    """``e^z a e^{-z}`` for anti-hermitian ``z``.

    Exact path: ``z``'s blocks are exponentiated densely on their own
    support and applied as a unitary conjugation; the result is a dense
    block when the joint support has at most ``dense_sites`` sites and a
    lazy conjugated block otherwise (same floats up to roundoff, bounded
    memory).  Falls back to the truncated commutator series only when
    ``z``'s support is too large to exponentiate, warning if the series is
    cut off before reaching ``series_tol``.
    """
    if a.n_sites != z.n_sites:
        raise ChainOpError("mismatched chain lengths")
    if z.herm != ANTIHERMITIAN:
        raise ChainOpError("generator must be tagged anti-hermitian")
    zsup = z.support()
    if zsup is None or z.is_zero():
        return a

    if len(zsup) <= DENSE_SITES_MAX:
        u = unitary_of(z, zsup)
        return conjugate_with_unitary(a, LocalBlock(zsup, u), dense_sites=dense_sites)

    # series path
    out_terms = list(a.terms)
    term = a
    prev = math.inf
    for order in range(1, max_order + 1):
        term = compose(z, term, "commutator") * (1.0 / order)
        size = sum(abs(c) * payload_fro(p) for c, p in term.terms if p is not None)
        out_terms.extend(term.terms)
        if size < series_tol:
            break
        if order == max_order:
            warnings.warn(
                f"commutator series truncated at order {max_order} with residual ~{size:.3e}"
                + ("" if size <= prev else " (growing)"),
                SeriesDivergenceWarning,
            )
        prev = size
    return ChainOperator(a.n_sites, out_terms, a.herm)


def unitary_of(z: ChainOperator, zsup: SiteRange | None = None) -> np.ndarray:
    """Dense ``e^z`` on the support of ``z`` (``z`` anti-hermitian)."""
    from scipy.linalg import expm

    if zsup is None:
        zsup = z.support()
    if zsup is None:
        raise ChainOpError("zero generator has no support")
    return expm(z.dense_on(zsup))


def conjugate_with_unitary(a: ChainOperator, ublock: LocalBlock,
                           subtract: bool = False, dense_sites: int = 7) -> ChainOperator:
    """``U a U^H`` (or ``U a U^H - a``) for a unitary dense on a sub-support.

    Terms whose support is disjoint from the unitary's commute exactly and
    pass through unchanged (or drop out when ``subtract``).
    """
    usup = ublock.support
    touched = []
    out_terms = []
    for coeff, payload in a.terms:
        if payload is None or not payload_support(payload).overlaps(usup):
            if not subtract:
                out_terms.append((coeff, payload))
        else:
            touched.append((coeff, payload))
    if touched:
        cov = cover_of([usup] + [payload_support(p) for _, p in touched])
        blk = ConjugatedBlock(cov, usup, ublock.mat, tuple(touched), subtract=subtract)
        if len(cov) <= dense_sites:
            out_terms.append((1.0 + 0.0j, LocalBlock(cov, blk.dense())))
        else:
            out_terms.append((1.0 + 0.0j, blk))
    return ChainOperator(a.n_sites, out_terms, a.herm)
