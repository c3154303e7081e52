"""Low-rank operator tools for whole-chain block-diagonalization.

The final diagonalization step works against the projector onto the
four-dimensional ground band of the full chain.  Every generator built
there has the form ``A F^H - F A^H`` with ``F`` the band frame, so the
unitary it generates acts nontrivially only on an (at most) eight-
dimensional invariant subspace and can be applied exactly with two thin
matrix products.  The order-by-order pieces of the transformed interaction
are sums of such rank-few operators; this module keeps them in factored
``left @ right^H`` form with rank compression.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm


@dataclass
class LowRankOp:
    """``left @ right^H`` on an n-dimensional space."""

    left: np.ndarray
    right: np.ndarray

    @property
    def rank(self) -> int:
        return self.left.shape[1]

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.left @ (self.right.conj().T @ v)

    def adjoint(self) -> "LowRankOp":
        return LowRankOp(self.right, self.left)

    def __add__(self, other: "LowRankOp") -> "LowRankOp":
        return LowRankOp(np.hstack([self.left, other.left]),
                         np.hstack([self.right, other.right]))

    def scale(self, c: complex) -> "LowRankOp":
        return LowRankOp(c * self.left, self.right)

    def spectral_norm(self) -> float:
        ql, rl = np.linalg.qr(self.left)
        qr_, rr = np.linalg.qr(self.right)
        core = rl @ rr.conj().T
        if core.size == 0:
            return 0.0
        return float(np.linalg.svd(core, compute_uv=False)[0])

    def compress(self, tol: float = 1e-13, max_rank: int = 96) -> "LowRankOp":
        if self.rank == 0:
            return self
        ql, rl = np.linalg.qr(self.left)
        qr_, rr = np.linalg.qr(self.right)
        u, s, vh = np.linalg.svd(rl @ rr.conj().T)
        keep = int(np.sum(s > tol * (s[0] if s.size else 1.0)))
        keep = min(keep, max_rank)
        u = ql @ (u[:, :keep] * s[:keep])
        v = qr_ @ vh[:keep].conj().T
        return LowRankOp(u, v)

    @staticmethod
    def zero(n: int) -> "LowRankOp":
        return LowRankOp(np.zeros((n, 0), dtype=complex), np.zeros((n, 0), dtype=complex))


def band_generator_commutator(a: np.ndarray, f: np.ndarray, apply_op,
                              band_value: float | None = None) -> LowRankOp:
    """``[A F^H - F A^H, O]`` for a hermitian operator given as a matvec.

    ``f`` is the orthonormal band frame (``O f = band_value * f`` when
    ``band_value`` is given, which shortcuts two products); ``a`` spans the
    excited-space part of the generator (``f^H a = 0``).
    """
    of = band_value * f if band_value is not None else _apply_cols(apply_op, f)
    oa = _apply_cols(apply_op, a)
    # [AF^H - FA^H, O] = A(OF)^H - (OA)F^H + (OF)A^H - F(OA)^H
    left = np.hstack([a, -oa, of, -f])
    right = np.hstack([of, f, a, oa])
    return LowRankOp(left, right)


def commutator_with_lowrank(a: np.ndarray, f: np.ndarray, x: LowRankOp) -> LowRankOp:
    """``[A F^H - F A^H, X]`` for a factored ``X``."""
    zl = a @ (f.conj().T @ x.left) - f @ (a.conj().T @ x.left)   # Z @ L
    # X @ Z = L (R^H A) F^H - L (R^H F) A^H
    xl = x.left @ (x.right.conj().T @ a)
    xf = x.left @ (x.right.conj().T @ f)
    left = np.hstack([zl, -xl, xf])
    right = np.hstack([x.right, f, a])
    return LowRankOp(left, right)


def _apply_cols(apply_op, cols: np.ndarray) -> np.ndarray:
    out = np.empty_like(cols, dtype=complex)
    for k in range(cols.shape[1]):
        out[:, k] = apply_op(cols[:, k])
    return out


@dataclass
class BandRotation:
    """Exact ``e^Z`` for ``Z = A F^H - F A^H`` with ``F^H A = 0``.

    ``Z`` vanishes outside span([F, A]); the exponential is the identity
    plus a rotation of that small subspace, precomputed for both signs.
    """

    basis: np.ndarray = field(repr=False)
    exp_plus: np.ndarray = field(repr=False)   # e^M - 1 on the subspace
    exp_minus: np.ndarray = field(repr=False)  # e^{-M} - 1

    @staticmethod
    def build(f: np.ndarray, a: np.ndarray, tol: float = 1e-15) -> "BandRotation":
        u, s, vh = np.linalg.svd(a, full_matrices=False)
        keep = s > tol * max(1.0, s[0] if s.size else 0.0)
        qa = u[:, keep]
        ra = s[keep, None] * vh[keep]
        nb, na = f.shape[1], qa.shape[1]
        basis = np.hstack([f, qa])
        m = np.zeros((nb + na, nb + na), dtype=complex)
        m[nb:, :nb] = ra
        m[:nb, nb:] = -ra.conj().T
        eye = np.eye(nb + na)
        return BandRotation(basis, expm(m) - eye, expm(-m) - eye)

    def apply(self, v: np.ndarray, inverse: bool = False) -> np.ndarray:
        d = self.exp_minus if inverse else self.exp_plus
        w = self.basis.conj().T @ v
        return v + self.basis @ (d @ w)


@dataclass
class RotatedOperator:
    """Hermitian base matvec conjugated by a stack of band rotations."""

    base: object  # vec -> vec
    rotations: list

    def apply(self, v: np.ndarray) -> np.ndarray:
        w = v
        for rot in reversed(self.rotations):
            w = rot.apply(w, inverse=True)
        w = self.base(w)
        for rot in self.rotations:
            w = rot.apply(w)
        return w
