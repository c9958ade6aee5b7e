"""Client-side model: private user vector, personal item table, BCE + SGD."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from .dataset import ClientDataset, sample_negatives

INIT_STD = 0.01
PRED_CLAMP = 1e-12

# stream tags mixed into SeedSequence entropy so derived seeds never collide
TAG_USER_INIT = 1
TAG_ITEM_INIT = 2
TAG_EPOCH = 3


@dataclass
class ClientState:
    user_id: int
    p: np.ndarray  # (d,), never leaves the client
    Q: np.ndarray  # (m, d)
    interacted: frozenset[int] = field(default=frozenset())
    rng_seed: int = 0

    @property
    def m(self) -> int:
        return self.Q.shape[0]

    @property
    def d(self) -> int:
        return self.Q.shape[1]

    def copy(self) -> "ClientState":
        return replace(self, p=self.p.copy(), Q=self.Q.copy())


@dataclass(frozen=True)
class TrainBatch:
    items: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        items = np.asarray(self.items, dtype=np.int64)
        labels = np.asarray(self.labels, dtype=np.float64)
        if items.ndim != 1 or items.size == 0 or items.shape != labels.shape:
            raise ValueError("batch needs matching non-empty item and label vectors")
        if not np.all((labels == 0.0) | (labels == 1.0)):
            raise ValueError("labels must be 0 or 1")
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "labels", labels)


def derive_seed(*parts: int) -> int:
    """Hash integer parts into a 64-bit seed."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])


def init_item_table(m: int, d: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, TAG_ITEM_INIT])
    return rng.normal(0.0, INIT_STD, size=(m, d))


def init_client(user_id: int, m: int, d: int, seed: int, interacted=(), Q0=None) -> ClientState:
    """Gaussian(0, 0.01) initialization.

    The user vector comes from a (seed, user_id) stream. The item table comes
    from a stream keyed on ``seed`` alone, so every client starts from the
    same global table (pass ``Q0`` to reuse an already drawn one).
    """
    if m < 1 or d < 1:
        raise ValueError("m and d must be >= 1")
    rng = np.random.default_rng([seed, TAG_USER_INIT, user_id])
    p = rng.normal(0.0, INIT_STD, size=d)
    Q = init_item_table(m, d, seed) if Q0 is None else np.array(Q0, dtype=np.float64)
    if Q.shape != (m, d):
        raise ValueError(f"Q0 has shape {Q.shape}, expected {(m, d)}")
    return ClientState(user_id, p, Q, frozenset(interacted), derive_seed(seed, user_id))


def predict(p, q):
    """sigmoid(p . q); ``q`` may be a single vector or a matrix of item rows."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != p.shape[-1]:
        raise ValueError(f"length mismatch {p.shape} vs {q.shape}")
    return expit(q @ p)


def bce_loss(batch: TrainBatch, state: ClientState) -> float:
    r_hat = np.clip(predict(state.p, state.Q[batch.items]), PRED_CLAMP, 1.0 - PRED_CLAMP)
    r = batch.labels
    return float(-np.sum(r * np.log(r_hat) + (1.0 - r) * np.log(1.0 - r_hat)))


def bce_gradients(batch: TrainBatch, state: ClientState):
    """Exact gradients of ``bce_loss`` (unclamped) w.r.t. p and the batch item rows.

    Returns ``(grad_p, rows, grad_rows)``; duplicate items are accumulated.
    """
    qb = state.Q[batch.items]
    err = expit(qb @ state.p) - batch.labels
    grad_p = err @ qb
    rows, inv = np.unique(batch.items, return_inverse=True)
    grad_rows = np.zeros((rows.size, state.d))
    np.add.at(grad_rows, inv, err[:, None] * state.p[None, :])
    return grad_p, rows, grad_rows


def sgd_step(state: ClientState, batch: TrainBatch, eta: float) -> None:
    """One simultaneous SGD update of p and the touched Q rows, in place."""
    grad_p, rows, grad_rows = bce_gradients(batch, state)
    state.p -= eta * grad_p
    state.Q[rows] -= eta * grad_rows


def local_train(
    state: ClientState,
    cd: ClientDataset,
    epochs: int,
    eta: float,
    negatives: int,
    epoch_seed: int,
    batch_size: int = 256,
    negative_exclude=None,
) -> ClientState:
    """Run ``epochs`` passes of mini-batch SGD on positives plus fresh negatives.

    Returns a new state; the input is left untouched. Item rows that never
    appear in a batch keep their exact values. ``negative_exclude`` is the
    item set negatives avoid (default: every item the client interacted with).
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if eta < 0:
        raise ValueError("eta must be >= 0")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    out = state.copy()
    if eta == 0:
        return out
    pos = np.asarray(cd.train_items, dtype=np.int64)
    for epoch in range(epochs):
        seed = derive_seed(epoch_seed, TAG_EPOCH, epoch)
        neg = sample_negatives(cd, negatives, out.m, seed, negative_exclude)
        items = np.concatenate([pos, neg])
        labels = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
        order = np.random.default_rng(seed).permutation(items.size)
        items, labels = items[order], labels[order]
        for start in range(0, items.size, batch_size):
            sl = slice(start, start + batch_size)
            sgd_step(out, TrainBatch(items[sl], labels[sl]), eta)
    return out


def interpolate(Q_prev, Q_global, rho: float) -> np.ndarray:
    """rho * Q_prev + (1 - rho) * Q_global."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must be in [0, 1], got {rho}")
    Q_prev = np.asarray(Q_prev, dtype=np.float64)
    Q_global = np.asarray(Q_global, dtype=np.float64)
    if Q_prev.shape != Q_global.shape:
        raise ValueError(f"shape mismatch {Q_prev.shape} vs {Q_global.shape}")
    if rho == 1.0:
        return Q_prev.copy()
    if rho == 0.0:
        return Q_global.copy()
    # same as rho * Q_prev + (1 - rho) * Q_global, but exact where the tables agree
    return Q_prev + (1.0 - rho) * (Q_global - Q_prev)


def trained_rows(state: ClientState) -> np.ndarray:
    """Rows of Q for the client's interacted items, ascending item id."""
    if not state.interacted:
        raise ValueError(f"user {state.user_id}: empty interacted set")
    return state.Q[sorted(state.interacted)]


# checkpoint blob: <user_id, m, d> as int64 LE, then p and Q row-major as float64 LE
_HEADER = struct.Struct("<qqq")


def state_to_bytes(state: ClientState) -> bytes:
    header = _HEADER.pack(state.user_id, state.m, state.d)
    return header + state.p.astype("<f8").tobytes() + state.Q.astype("<f8").tobytes()


def state_from_bytes(blob: bytes, interacted=(), rng_seed: int = 0) -> ClientState:
    user_id, m, d = _HEADER.unpack_from(blob)
    expected = _HEADER.size + 8 * (d + m * d)
    if len(blob) != expected:
        raise ValueError(f"checkpoint size {len(blob)} != expected {expected}")
    body = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size)
    p = body[:d].astype(np.float64)
    Q = body[d:].reshape(m, d).astype(np.float64)
    return ClientState(user_id, p, Q, frozenset(interacted), rng_seed)


def save_state(state: ClientState, path) -> None:
    Path(path).write_bytes(state_to_bytes(state))


def load_state(path, interacted=(), rng_seed: int = 0) -> ClientState:
    return state_from_bytes(Path(path).read_bytes(), interacted, rng_seed)
