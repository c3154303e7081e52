"""Iterative linear algebra on chain operators.

Everything is matrix-free: eigensolves, spectral norms and the Krylov
propagator only ever call ``ChainOperator.apply_on`` for the smallest range
covering the operator, so costs scale with the local support rather than
with the chain length.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.sparse.linalg as spla

from .chainops import (
    ANTIHERMITIAN,
    HERMITIAN,
    ChainOperator,
    ChainOpError,
    SiteRange,
)

#: full dense eigensolves are allowed up to this many sites (3^6 = 729)
DENSE_EIG_SITES = 6


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float | None = None):
        if residual is not None:
            message = f"{message} (achieved residual {residual:.3e})"
        super().__init__(message)
        self.residual = residual


def _as_linear_operator(op: ChainOperator, rng: SiteRange) -> spla.LinearOperator:
    dtype = np.float64 if op.is_real() else complex
    return spla.LinearOperator(
        (rng.dim, rng.dim), matvec=lambda v: op.apply_on(rng, v), dtype=dtype
    )


def lowest_eigenpairs(op: ChainOperator, k: int, tol: float = 1e-10,
                      rng: SiteRange | None = None, dense: bool | None = None):
    """k smallest eigenvalues of a hermitian operator with orthonormal vectors.

    Uses a dense eigensolve when the covering range is small, Lanczos
    (ARPACK ``which='SA'``) otherwise.  Vectors live on the covering range
    (the full chain by default).
    """
    if op.herm != HERMITIAN:
        raise ChainOpError("lowest_eigenpairs requires a hermitian operator")
    if k < 1:
        raise ChainOpError("need k >= 1")
    if rng is None:
        rng = SiteRange(1, op.n_sites)
    if dense is None:
        dense = len(rng) <= DENSE_EIG_SITES
    if dense:
        mat = op.dense_on(rng)
        vals, vecs = np.linalg.eigh(mat)
        return vals[:k].real, vecs[:, :k]
    lo = _as_linear_operator(op, rng)
    ncv = min(rng.dim - 1, max(4 * k + 10, 30))
    try:
        vals, vecs = spla.eigsh(lo, k=k, which="SA", tol=tol, ncv=ncv, maxiter=5000)
    except spla.ArpackNoConvergence as exc:
        if len(exc.eigenvalues) >= k:
            vals, vecs = exc.eigenvalues, exc.eigenvectors
        else:
            raise ConvergenceError(
                f"Lanczos found only {len(exc.eigenvalues)}/{k} eigenpairs"
            ) from exc
    order = np.argsort(vals)
    vals, vecs = vals[order][:k].real, vecs[:, order][:, :k]
    # ARPACK Ritz vectors of a degenerate cluster may lose orthogonality
    vecs, _ = np.linalg.qr(vecs)
    return vals, vecs


def operator_norm(op: ChainOperator, tol: float = 1e-10) -> float:
    """Spectral norm of a hermitian or anti-hermitian chain operator.

    Identity factors never change the norm, so the computation happens on
    the covering range: densely when small, by Lanczos at both spectral
    ends otherwise.
    """
    if op.herm == ANTIHERMITIAN:
        return operator_norm(op * 1.0j, tol=tol)
    if op.herm != HERMITIAN:
        raise ChainOpError("operator_norm requires (anti-)hermitian input")

    rng = op.support()
    ident = op.identity_coeff().real
    if rng is None:
        return abs(ident)
    if len(rng) <= DENSE_EIG_SITES:
        vals = np.linalg.eigvalsh(op.dense_on(rng))
        return float(np.abs(vals).max())

    lo = _as_linear_operator(op, rng)
    probe = lo.matvec(np.random.default_rng(7).standard_normal(rng.dim))
    if np.linalg.norm(probe) == 0.0:
        return 0.0
    out = 0.0
    for which in ("LA", "SA"):
        try:
            vals = spla.eigsh(lo, k=1, which=which, tol=tol,
                              ncv=min(rng.dim - 1, 40), maxiter=4000,
                              return_eigenvectors=False)
            out = max(out, float(np.abs(vals).max()))
        except spla.ArpackNoConvergence as exc:
            if len(exc.eigenvalues):
                out = max(out, float(np.abs(exc.eigenvalues).max()))
            else:
                raise ConvergenceError(f"norm estimation failed ({which})") from exc
    return out


def norm_estimate(matvec, dim: int, iters: int = 40, seed: int = 11) -> float:
    """Power-iteration estimate of the spectral norm of a normal operator.

    Robust for operators of very small norm (e.g. consistency defects),
    where Lanczos relative tolerances become meaningless.
    """
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim) + 1j * rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = matvec(v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        est = max(est, nw)
        v = w / nw
    return float(est)


# ---------------------------------------------------------------------------
# Krylov propagator


def krylov_expmv(h: ChainOperator, s: float, v: np.ndarray, tol: float = 1e-10,
                 m_max: int = 80) -> np.ndarray:
    """``exp(i s h) v`` for hermitian ``h`` via the Lanczos process.

    The Krylov dimension grows until the update norm falls below ``tol``;
    if that fails the step is split in half recursively.
    """
    if h.herm != HERMITIAN:
        raise ChainOpError("krylov_expmv requires a hermitian generator")
    v = np.asarray(v, dtype=complex)
    if s == 0.0:
        return v.copy()
    nv = np.linalg.norm(v)
    if nv == 0.0:
        return v.copy()

    rng = SiteRange(1, h.n_sites)
    out = _lanczos_expmv(lambda x: h.apply_on(rng, x), s, v, nv, tol, m_max)
    if out is None:
        half = krylov_expmv(h, s / 2.0, v, tol=tol / 2.0, m_max=m_max)
        return krylov_expmv(h, s / 2.0, half, tol=tol / 2.0, m_max=m_max)
    return out


def _lanczos_expmv(matvec, s, v, nv, tol, m_max):
    n = v.shape[0]
    m_max = min(m_max, n)
    V = np.empty((m_max, n), dtype=complex)
    alpha = np.empty(m_max)
    beta = np.empty(m_max)
    V[0] = v / nv
    prev = None
    w = None
    for m in range(m_max):
        w = matvec(V[m])
        a = np.real(np.vdot(V[m], w))
        alpha[m] = a
        w = w - a * V[m]
        if m > 0:
            w = w - beta[m - 1] * V[m - 1]
        # full reorthogonalization: cheap at these Krylov sizes, avoids ghost modes
        w -= V[: m + 1].T @ (V[: m + 1].conj() @ w)
        b = np.linalg.norm(w)
        beta[m] = b
        t = np.diag(alpha[: m + 1]).astype(complex)
        for i in range(m):
            t[i, i + 1] = beta[i]
            t[i + 1, i] = beta[i]
        evals, evecs = np.linalg.eigh(t)
        coef = evecs @ (np.exp(1j * s * evals) * evecs[0].conj())
        cur = nv * (V[: m + 1].T @ coef)
        if prev is not None and np.linalg.norm(cur - prev) <= tol * nv:
            return cur
        if b < 1e-14:  # invariant subspace: result exact
            return cur
        prev = cur
        if m + 1 < m_max:
            V[m + 1] = w / b
    return None


# ---------------------------------------------------------------------------
# resolvent solves on the excited-space range


def solve_shifted(apply_h, e: float, rhs: np.ndarray, project,
                  rtol: float = 1e-12, maxiter: int = 5000) -> np.ndarray:
    """Solve ``(H - e) x = rhs`` restricted to a positive-definite subspace.

    ``project`` must be the orthogonal projection onto that subspace; both
    the right-hand side and every iterate are kept inside it, where
    ``H - e`` is positive definite, so conjugate gradients applies.
    """
    b = project(rhs)
    nb = np.linalg.norm(b)
    if nb == 0.0:
        return np.zeros_like(rhs)

    def mv(x):
        return project(apply_h(project(x)) - e * project(x))

    lo = spla.LinearOperator((b.shape[0], b.shape[0]), matvec=mv, dtype=complex)
    x, info = spla.cg(lo, b, rtol=rtol, atol=0.0, maxiter=maxiter)
    if info != 0:
        x, info = spla.minres(lo, b, rtol=rtol, maxiter=maxiter)
        if info != 0:
            res = float(np.linalg.norm(mv(x) - b) / nb)
            raise ConvergenceError("resolvent solve did not converge", residual=res)
    return project(x)


def extremal_eigenvalue(matvec, dim: int, which: str = "SA", tol: float = 1e-9,
                        ncv: int = 40, maxiter: int = 4000) -> float:
    """Smallest ('SA') or largest ('LA') eigenvalue of a hermitian matvec."""
    lo = spla.LinearOperator((dim, dim), matvec=matvec, dtype=complex)
    try:
        vals = spla.eigsh(lo, k=1, which=which, tol=tol, ncv=min(dim - 1, ncv),
                          maxiter=maxiter, return_eigenvectors=False)
    except spla.ArpackNoConvergence as exc:
        if not len(exc.eigenvalues):
            raise ConvergenceError(f"extremal eigenvalue ({which}) failed") from exc
        vals = exc.eigenvalues
    return float(vals[0].real)
