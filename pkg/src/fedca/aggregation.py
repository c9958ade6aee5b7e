"""Server-side aggregation: kernels, proxy coefficients and weight solving.

Every baseline aggregator is a degeneration of the composite objective

    sum_v (w_v - p_v)^2 + alpha * (w_v - s_v)^2 - beta * w_v * c_v

over the probability simplex, selected through ``AggregationSpec.mode``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .linalg import (
    apply_epsilon_floor,
    frobenius_dist_sq,
    pairwise_dist_sq,
    project_simplex,
    svd_left_topk,
)

logger = logging.getLogger(__name__)

MODES = (
    "composite",
    "fcf_average",
    "fedavg_weighted",
    "fedatt_proxy",
    "similarity_only",
    "complementarity_only",
    "topk_similar",
)
PROXIES = ("uniform", "data_size", "attention")
SIGNS = ("default", "inverted")

# baselines whose weights are just a proxy vector
_PROXY_MODES = {
    "fcf_average": "uniform",
    "fedavg_weighted": "data_size",
    "fedatt_proxy": "attention",
}


@dataclass(frozen=True)
class AggregationSpec:
    mode: str = "composite"
    alpha: float = 0.5
    beta: float = 0.5
    k: int = 4
    proxy: str = "data_size"
    epsilon_floor: Optional[float] = None
    s: Optional[int] = None
    complementarity_sign: str = "default"

    def __post_init__(self):
        if self.mode == "local":
            # local training is self-only aggregation
            object.__setattr__(self, "mode", "topk_similar")
            object.__setattr__(self, "s", 1)
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.proxy not in PROXIES:
            raise ValueError(f"unknown proxy {self.proxy!r}")
        if self.complementarity_sign not in SIGNS:
            raise ValueError(f"unknown complementarity_sign {self.complementarity_sign!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.mode == "topk_similar" and (self.s is None or self.s < 1):
            raise ValueError("topk_similar needs s >= 1")
        if self.epsilon_floor is not None and self.epsilon_floor <= 0:
            raise ValueError("epsilon_floor must be positive")

    @property
    def effective_proxy(self) -> str:
        if self.mode in _PROXY_MODES:
            return _PROXY_MODES[self.mode]
        if self.mode == "topk_similar":
            return "uniform"
        return self.proxy

    @property
    def effective_alpha(self) -> float:
        return self.alpha if self.mode in ("composite", "similarity_only") else 0.0

    @property
    def effective_beta(self) -> float:
        return self.beta if self.mode in ("composite", "complementarity_only") else 0.0

    @property
    def needs_similarity(self) -> bool:
        return self.effective_alpha > 0 or self.mode == "topk_similar"

    @property
    def needs_signatures(self) -> bool:
        return self.effective_beta > 0


@dataclass
class CohortSnapshot:
    """Uploads from one round's participants; tables stacked as (c, m, d)."""

    client_ids: Sequence[int]
    tables: np.ndarray
    signatures: Optional[Sequence[np.ndarray]]
    data_sizes: np.ndarray

    def __post_init__(self):
        self.tables = np.asarray(self.tables, dtype=np.float64)
        self.data_sizes = np.asarray(self.data_sizes, dtype=np.float64)
        c = len(self.client_ids)
        if c == 0:
            raise ValueError("empty cohort")
        if self.tables.ndim != 3 or self.tables.shape[0] != c or self.data_sizes.shape != (c,):
            raise ValueError("cohort lists must be parallel")
        if self.signatures is not None and len(self.signatures) != c:
            raise ValueError("cohort lists must be parallel")

    def __len__(self):
        return len(self.client_ids)


@dataclass
class RoundWeights:
    W: np.ndarray
    S: Optional[np.ndarray] = None
    C: Optional[np.ndarray] = None


def similarity(Q_u, Q_v) -> float:
    """1 / (1 + ||Q_u - Q_v||_F^2)."""
    return 1.0 / (1.0 + frobenius_dist_sq(Q_u, Q_v))


def similarity_matrix(tables: np.ndarray) -> np.ndarray:
    flat = tables.reshape(tables.shape[0], -1)
    return 1.0 / (1.0 + pairwise_dist_sq(flat))


def pad_signature(U: np.ndarray, pad_to: int) -> np.ndarray:
    r = U.shape[0]
    if pad_to < r:
        raise ValueError(f"pad_to={pad_to} is shorter than the {r} signature rows")
    if pad_to == r:
        return U
    return np.vstack([U, np.zeros((pad_to - r, U.shape[1]))])


def client_signature(Q_s, k: int, pad_to: int) -> np.ndarray:
    """Top-k left singular vectors of the trained rows, zero-padded to ``pad_to`` rows."""
    Q_s = np.asarray(Q_s, dtype=np.float64)
    if pad_to < Q_s.shape[0]:
        raise ValueError(f"pad_to={pad_to} is shorter than the {Q_s.shape[0]} trained rows")
    return pad_signature(svd_left_topk(Q_s, k), pad_to)


def _mean_angle_cos(dots: np.ndarray, k: int) -> np.ndarray:
    angles = np.arccos(np.clip(dots, -1.0, 1.0))
    return np.cos(angles.sum(axis=-1) / k)


def complementarity(X_u, X_v, k: int) -> float:
    """cos of the mean angle between matching signature columns.

    Zero columns give a zero dot product, i.e. a neutral right angle.
    """
    X_u = np.asarray(X_u, dtype=np.float64)
    X_v = np.asarray(X_v, dtype=np.float64)
    if X_u.shape != X_v.shape:
        raise ValueError(f"shape mismatch {X_u.shape} vs {X_v.shape}")
    if X_u.shape[1] != k:
        raise ValueError(f"signatures have {X_u.shape[1]} columns, expected k={k}")
    dots = np.einsum("ij,ij->j", X_u, X_v)
    return float(_mean_angle_cos(dots, k))


def complementarity_matrix(signatures: Sequence[np.ndarray], k: int) -> np.ndarray:
    """Pairwise complementarity; signatures of unequal length are zero-padded."""
    c = len(signatures)
    pad_to = max(X.shape[0] for X in signatures)
    # (k, c, pad_to) so each column's Gram is a contiguous GEMM
    cols = np.zeros((k, c, pad_to))
    for i, sig in enumerate(signatures):
        sig = np.asarray(sig, dtype=np.float64)
        if sig.shape[1] != k:
            raise ValueError(f"signatures have {sig.shape[1]} columns, expected k={k}")
        cols[:, i, : sig.shape[0]] = sig.T
    dots = np.empty((c, c, k))
    for col in range(k):
        G = cols[col] @ cols[col].T
        dots[:, :, col] = 0.5 * (G + G.T)
    return _mean_angle_cos(dots, k)


def proxy_coefficients(mode: str, cohort: CohortSnapshot) -> np.ndarray:
    c = len(cohort)
    if mode == "uniform":
        return np.full(c, 1.0 / c)
    if mode == "data_size":
        sizes = cohort.data_sizes
        return sizes / sizes.sum()
    if mode == "attention":
        flat = cohort.tables.reshape(c, -1)
        dist = np.sqrt(np.sum((flat - flat.mean(axis=0)) ** 2, axis=1))
        z = -dist - np.max(-dist)
        e = np.exp(z)
        return e / e.sum()
    raise ValueError(f"unknown proxy mode {mode!r}")


def qp_objective(w, p, s, c, alpha: float, beta: float) -> float:
    w, p, s, c = (np.asarray(x, dtype=np.float64) for x in (w, p, s, c))
    return float(np.sum((w - p) ** 2 + alpha * (w - s) ** 2 - beta * w * c))


def solve_weights(p, s, c, alpha: float, beta: float, epsilon_floor: Optional[float] = None) -> np.ndarray:
    """Exact simplex-constrained minimizer of the composite objective.

    The objective is a separable quadratic with curvature (1 + alpha) per
    coordinate, so completing the square reduces it to projecting
    ``(p + alpha * s + beta / 2 * c) / (1 + alpha)`` onto the simplex.
    """
    p = np.asarray(p, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if not (p.shape == s.shape == c.shape) or p.ndim != 1:
        raise ValueError(f"length mismatch {p.shape}, {s.shape}, {c.shape}")
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be >= 0")
    target = p.copy()
    if alpha != 0:
        target = target + alpha * s
    if beta != 0:
        target = target + (0.5 * beta) * c
    if alpha != 0:
        target = target / (1.0 + alpha)
    w = project_simplex(target)
    if epsilon_floor is not None:
        w = apply_epsilon_floor(w, epsilon_floor)
    return w


def aggregate(cohort: CohortSnapshot, w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (len(cohort),):
        raise ValueError(f"weight length {w.shape} != cohort size {len(cohort)}")
    return np.tensordot(w, cohort.tables, axes=1)


def topk_weights(S: np.ndarray, s: int) -> np.ndarray:
    """Uniform weight over each row's ``s`` most similar clients (self first on ties)."""
    c = S.shape[0]
    if s > c:
        logger.warning("topk s=%d exceeds cohort size %d; clipping", s, c)
        s = c
    W = np.zeros_like(S)
    idx = np.arange(c)
    for u in range(c):
        order = np.lexsort((idx, idx != u, -S[u]))
        W[u, order[:s]] = 1.0 / s
    return W


def compute_round_weights(spec: AggregationSpec, cohort: CohortSnapshot) -> RoundWeights:
    """Weight matrix for one round; row u holds w_u over the cohort."""
    c = len(cohort)
    S = similarity_matrix(cohort.tables) if spec.needs_similarity else None
    if spec.mode == "topk_similar":
        return RoundWeights(topk_weights(S, spec.s), S=S)

    p = proxy_coefficients(spec.effective_proxy, cohort)
    alpha, beta = spec.effective_alpha, spec.effective_beta
    C = None
    if spec.needs_signatures:
        if cohort.signatures is None:
            raise ValueError(f"mode {spec.mode} needs client signatures")
        C = complementarity_matrix(cohort.signatures, spec.k)
        if spec.complementarity_sign == "inverted":
            C = -C
    zeros = np.zeros(c)
    W = np.empty((c, c))
    for u in range(c):
        W[u] = solve_weights(
            p,
            S[u] if S is not None else zeros,
            C[u] if C is not None else zeros,
            alpha,
            beta,
            spec.epsilon_floor,
        )
    return RoundWeights(W, S=S, C=C)
