"""Leave-one-out ranking metrics (HR@K, NDCG@K) for train and test targets."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .client import ClientState, derive_seed, predict
from .dataset import ClientDataset

PROTOCOLS = ("full_rank", "sampled_99")
N_SAMPLED = 99

TAG_EVAL_TEST = 11
TAG_EVAL_TRAIN = 12


class RankResult(NamedTuple):
    target_item: int
    rank: int
    candidate_count: int


@dataclass
class RoundMetrics:
    round: int
    mode: str
    hr10_test: float
    ndcg10_test: float
    hr10_train: float
    ndcg10_train: float
    seconds: float = 0.0

    def to_record(self, with_timing: bool = True) -> dict:
        rec = asdict(self)
        if not with_timing:
            rec.pop("seconds")
        return rec


def rank_target(scores, target_index: int, item_ids=None) -> RankResult:
    """1-based rank of ``scores[target_index]``; ties go to the smaller item id.

    ``item_ids`` gives the item id of each candidate (defaults to positions).
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    if n == 0:
        raise ValueError("no candidates")
    if not 0 <= target_index < n:
        raise IndexError(f"target index {target_index} out of range for {n} candidates")
    ids = np.arange(n) if item_ids is None else np.asarray(item_ids)
    t = scores[target_index]
    tid = ids[target_index]
    rank = 1 + int(np.count_nonzero(scores > t)) + int(np.count_nonzero((scores == t) & (ids < tid)))
    return RankResult(int(tid), rank, n)


def hr_at_k(rank: int, K: int = 10) -> int:
    if rank < 1:
        raise ValueError("rank must be >= 1")
    return int(rank <= K)


def ndcg_at_k(rank: int, K: int = 10) -> float:
    if rank < 1:
        raise ValueError("rank must be >= 1")
    return 1.0 / math.log2(rank + 1) if rank <= K else 0.0


def _rank_among(scores, target, pool, protocol, seed) -> RankResult:
    if protocol == "sampled_99" and pool.size > N_SAMPLED:
        rng = np.random.default_rng(seed)
        pool = np.sort(rng.choice(pool, size=N_SAMPLED, replace=False))
    cand = np.append(pool, target)
    return rank_target(scores[cand], cand.size - 1, item_ids=cand)


def evaluate_client(
    state: ClientState,
    working_table,
    cd: ClientDataset,
    protocol: str = "full_rank",
    seed: int = 0,
) -> tuple[RankResult, RankResult]:
    """Rank the held-out test item and one held-in train item.

    Candidates are the client's non-interacted items plus the target. The
    train target is a seeded choice among the train items.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    table = np.asarray(working_table, dtype=np.float64)
    m = table.shape[0]
    scores = predict(state.p, table)
    mask = np.ones(m, dtype=bool)
    mask[list(cd.all_interacted)] = False
    pool = np.flatnonzero(mask)

    test = _rank_among(scores, cd.test_item, pool, protocol,
                       derive_seed(seed, TAG_EVAL_TEST, cd.user_id))
    pick = np.random.default_rng(derive_seed(seed, TAG_EVAL_TRAIN, cd.user_id))
    train_target = cd.train_items[int(pick.integers(len(cd.train_items)))]
    train = _rank_among(scores, train_target, pool, protocol,
                        derive_seed(seed, TAG_EVAL_TRAIN, cd.user_id, 1))
    return test, train


def summarize(round_idx: int, mode: str, results, K: int = 10, seconds: float = 0.0) -> RoundMetrics:
    """Mean HR/NDCG over (test, train) rank pairs, reduced in the given order."""
    test_ranks = np.array([t.rank for t, _ in results])
    train_ranks = np.array([r.rank for _, r in results])

    def hr(ranks):
        return float(np.mean([hr_at_k(int(x), K) for x in ranks]))

    def ndcg(ranks):
        return float(np.mean([ndcg_at_k(int(x), K) for x in ranks]))

    return RoundMetrics(
        round=round_idx,
        mode=mode,
        hr10_test=hr(test_ranks),
        ndcg10_test=ndcg(test_ranks),
        hr10_train=hr(train_ranks),
        ndcg10_train=ndcg(train_ranks),
        seconds=seconds,
    )
