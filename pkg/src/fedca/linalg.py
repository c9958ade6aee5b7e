"""Small dense kernels used by the server-side aggregation math.

Everything here is a pure function of its inputs. Matrices are plain
``float64`` numpy arrays; item tables are ``(m, d)`` with ``d`` small.
"""

from __future__ import annotations

import numpy as np

RANK_RTOL = 1e-10
_JACOBI_MAX_SWEEPS = 50


def _as_finite_matrix(A, name="A") -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} has non-finite entries")
    return A


def jacobi_eigh(G):
    """Eigen-decomposition of symmetric matrices by cyclic Jacobi rotations.

    ``G`` may be a single ``(d, d)`` matrix or a stack ``(b, d, d)``; the
    rotations are applied to the whole stack at once. Returns eigenvalues in
    descending order and the matching eigenvectors as columns.
    """
    G = np.asarray(G, dtype=np.float64)
    single = G.ndim == 2
    A = np.array(G[None] if single else G, copy=True)
    b, d, _ = A.shape
    V = np.broadcast_to(np.eye(d), (b, d, d)).copy()

    scale = np.sqrt(np.einsum("bij,bij->b", A, A))
    tol = (1e-15 * np.maximum(scale, np.finfo(float).tiny)) ** 2
    for _ in range(_JACOBI_MAX_SWEEPS):
        off = np.einsum("bij,bij->b", A, A) - np.einsum("bii,bii->b", A, A)
        if np.all(off <= tol):
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = A[:, p, q]
                active = apq != 0.0
                if not active.any():
                    continue
                safe = np.where(active, apq, 1.0)
                # huge theta overflows to inf and correctly yields t = 0
                with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
                    theta = (A[:, q, q] - A[:, p, p]) / (2.0 * safe)
                    t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
                t = np.where(theta == 0.0, 1.0, t)
                t = np.where(active, t, 0.0)
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                c_, s_ = c[:, None], s[:, None]

                col_p = A[:, :, p].copy()
                col_q = A[:, :, q]
                A[:, :, p] = c_ * col_p - s_ * col_q
                A[:, :, q] = s_ * col_p + c_ * col_q
                row_p = A[:, p, :].copy()
                row_q = A[:, q, :]
                A[:, p, :] = c_ * row_p - s_ * row_q
                A[:, q, :] = s_ * row_p + c_ * row_q
                A[:, p, q] = 0.0
                A[:, q, p] = 0.0

                v_p = V[:, :, p].copy()
                v_q = V[:, :, q]
                V[:, :, p] = c_ * v_p - s_ * v_q
                V[:, :, q] = s_ * v_p + c_ * v_q

    evals = np.diagonal(A, axis1=1, axis2=2).copy()
    order = np.argsort(-evals, axis=1, kind="stable")
    evals = np.take_along_axis(evals, order, axis=1)
    V = np.take_along_axis(V, order[:, None, :], axis=2)
    if single:
        return evals[0], V[0]
    return evals, V


def _fix_signs(U: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each column positive; argmax picks the lowest row on ties
    if U.shape[0] == 0:
        return U
    lead = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[lead, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs + 0.0


def left_vectors_from_gram(A: np.ndarray, evals: np.ndarray, V: np.ndarray, k: int) -> np.ndarray:
    """Turn an eigenpair of ``A.T @ A`` into the top-k left singular vectors of A."""
    r, d = A.shape
    # ||A v|| resolves small singular values far better than sqrt(eigenvalue)
    AV = A @ V[:, : min(k, d)]
    sigma = np.linalg.norm(AV, axis=0)
    smax = float(np.sqrt(max(evals[0], 0.0))) if evals.size else 0.0
    U = np.zeros((r, k))
    for j in range(AV.shape[1]):
        if smax == 0.0 or sigma[j] <= RANK_RTOL * smax:
            break
        u = AV[:, j] / sigma[j]
        # re-orthogonalise against earlier columns
        for i in range(j):
            u -= (U[:, i] @ u) * U[:, i]
        norm = np.linalg.norm(u)
        if norm <= 0.5:
            break
        U[:, j] = u / norm
    return _fix_signs(U)


def svd_left_topk(A, k: int) -> np.ndarray:
    """Left singular vectors of the ``k`` largest singular values of ``A``.

    Columns past the numerical rank (singular values at or below
    ``1e-10 * sigma_max``) are zero. Each nonzero column has its
    largest-magnitude entry positive.
    """
    A = _as_finite_matrix(A)
    if A.shape[0] < 1 or A.shape[1] < 1:
        raise ValueError(f"A must be non-empty, got shape {A.shape}")
    if k < 1:
        raise ValueError("k must be >= 1")
    evals, V = jacobi_eigh(A.T @ A)
    return left_vectors_from_gram(A, evals, V, k)


def svd_left_topk_many(mats, k: int) -> list[np.ndarray]:
    """``svd_left_topk`` over a list of matrices sharing a column count.

    The d x d Gram eigenproblems are solved as one batched Jacobi sweep.
    """
    mats = [_as_finite_matrix(A) for A in mats]
    if not mats:
        return []
    grams = np.stack([A.T @ A for A in mats])
    evals, V = jacobi_eigh(grams)
    return [left_vectors_from_gram(A, evals[i], V[i], k) for i, A in enumerate(mats)]


def project_simplex(t) -> np.ndarray:
    """Euclidean projection onto {w : sum(w) = 1, w >= 0} by sort and threshold.

    A target that is already feasible is returned unchanged (as a copy).
    """
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 1 or t.size == 0:
        raise ValueError("project_simplex needs a non-empty 1-D vector")
    if not np.all(np.isfinite(t)):
        raise ValueError("project_simplex target has non-finite entries")
    if np.all(t >= 0.0) and abs(t.sum() - 1.0) <= 1e-12:
        return t.copy()
    u = np.sort(t)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, t.size + 1)
    support = np.nonzero(u - css / idx > 0)[0][-1]
    tau = css[support] / (support + 1)
    return np.maximum(t - tau, 0.0)


def apply_epsilon_floor(w, eps: float) -> np.ndarray:
    w = np.maximum(np.asarray(w, dtype=np.float64), eps)
    return w / w.sum()


def frobenius_dist_sq(A, B) -> float:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch {A.shape} vs {B.shape}")
    diff = A - B
    return float(np.sum(diff * diff))


def pairwise_dist_sq(flat: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between the rows of ``flat``.

    Uses the Gram expansion so the cost is one GEMM; the result is made
    exactly symmetric with a zero diagonal and clipped at zero.
    """
    flat = np.asarray(flat, dtype=np.float64)
    gram = flat @ flat.T
    sq = np.einsum("ij,ij->i", flat, flat)
    D = sq[:, None] + sq[None, :] - 2.0 * gram
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return np.maximum(D, 0.0)
