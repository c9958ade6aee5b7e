"""Round loop of composite-aggregation federated recommendation.

Per round: every cohort client receives a personalized aggregate built from
the previous round's weights, mixes it with its own table (``rho``), trains
locally and uploads its item table. The server then recomputes the weight
rows of the cohort from the fresh uploads.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import sparse

from .aggregation import CohortSnapshot, RoundWeights, compute_round_weights, proxy_coefficients
from .client import (
    ClientState,
    derive_seed,
    init_client,
    init_item_table,
    interpolate,
    local_train,
    trained_rows,
)
from .config import ExperimentConfig
from .dataset import ClientDataset, InteractionDataset, load_ratings, split_all, subsample_train
from .evaluation import RoundMetrics, evaluate_client, summarize
from .linalg import svd_left_topk_many

logger = logging.getLogger(__name__)

TAG_COHORT = 21
TAG_TRAIN = 22
TAG_SUBSAMPLE = 23
# weight matrices at most this dense are aggregated as CSR
SPARSE_DENSITY = 0.04


def sample_cohort(n: int, cohort_size: Optional[int], round_idx: int, global_seed: int) -> list[int]:
    """Uniform draw without replacement, sorted; clipped to n."""
    if n < 1:
        raise ValueError("no clients")
    if cohort_size is None or cohort_size >= n:
        return list(range(n))
    if cohort_size < 1:
        raise ValueError("cohort_size must be >= 1")
    rng = np.random.default_rng(derive_seed(global_seed, TAG_COHORT, round_idx))
    return sorted(int(u) for u in rng.choice(n, size=cohort_size, replace=False))


@dataclass
class ServerState:
    round: int
    tables: np.ndarray  # (n, m, d) last upload per client
    signatures: list  # unpadded (|I_u|, k) per client, None until first upload
    W: np.ndarray  # (n, n) current weight row per client; zero outside its cohort
    history: list = field(default_factory=list)
    last_kernels: Optional[RoundWeights] = None
    last_cohort: list = field(default_factory=list)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    history: list[RoundMetrics]
    weights: np.ndarray
    kernels: Optional[RoundWeights]
    cohort: list[int]


def prepare_clients(config: ExperimentConfig, ds: InteractionDataset) -> list[ClientDataset]:
    splits = split_all(ds)
    if config.train_ratio < 1.0:
        splits = [
            subsample_train(cd, config.train_ratio, derive_seed(config.global_seed, TAG_SUBSAMPLE, cd.user_id))
            for cd in splits
        ]
    return splits


class Federation:
    """Simulated server plus clients for one experiment."""

    def __init__(
        self,
        config: ExperimentConfig,
        dataset: Optional[InteractionDataset] = None,
        workers: int = 1,
    ):
        self.config = config
        self.spec = config.aggregation_spec()
        self.workers = max(1, int(workers))
        self.dataset = dataset if dataset is not None else load_ratings(config.dataset, config.format)
        self.splits = prepare_clients(config, self.dataset)
        self.n, self.m = self.dataset.n, self.dataset.m
        d, seed = config.dim, config.global_seed

        Q0 = init_item_table(self.m, d, seed)
        self.clients: list[ClientState] = [
            init_client(cd.user_id, self.m, d, seed, interacted=cd.train_items, Q0=Q0)
            for cd in self.splits
        ]
        self.data_sizes = np.array([len(cd.train_items) for cd in self.splits], dtype=np.float64)
        tables = np.broadcast_to(Q0, (self.n, self.m, d)).copy()
        # cold start: proxy weights over everyone
        everyone = CohortSnapshot(list(range(self.n)), tables, None, self.data_sizes)
        if self.spec.mode == "topk_similar":
            # sigma is defined on the shared initial tables: all ties, so self first
            W = compute_round_weights(self.spec, everyone).W
        else:
            p0 = proxy_coefficients(self.spec.effective_proxy, everyone)
            W = np.broadcast_to(p0, (self.n, self.n)).copy()
        self.server = ServerState(round=0, tables=tables, signatures=[None] * self.n, W=W)
        self._agg_cache: Optional[tuple[int, np.ndarray]] = None
        if config.negatives_exclude == "train":
            self._neg_exclude = [frozenset(cd.train_items) for cd in self.splits]
        else:
            self._neg_exclude = [cd.all_interacted for cd in self.splits]

    # -- server side -------------------------------------------------------

    def aggregates(self, ids: Sequence[int]) -> np.ndarray:
        """Personalized aggregates sum_v W[u, v] Q_v for the given clients, (len, m, d)."""
        srv = self.server
        if self._agg_cache is not None and self._agg_cache[0] == srv.round:
            return self._agg_cache[1][list(ids)] if len(ids) != self.n else self._agg_cache[1]
        flat = srv.tables.reshape(self.n, -1)
        W = srv.W[list(ids)]
        if np.count_nonzero(W) <= SPARSE_DENSITY * W.size:
            # path choice depends only on W, so results stay reproducible
            out = sparse.csr_matrix(W) @ flat
        else:
            out = W @ flat
        out = out.reshape(len(ids), self.m, self.config.dim)
        if len(ids) == self.n:
            self._agg_cache = (srv.round, out)
        return out

    def working_table(self, u: int, agg_u: np.ndarray) -> np.ndarray:
        return interpolate(self.clients[u].Q, agg_u, self.config.rho)

    # -- client side -------------------------------------------------------

    def _client_round(self, u: int, agg_u: np.ndarray, round_idx: int) -> ClientState:
        cfg = self.config
        start = self.working_table(u, agg_u) if cfg.train_from == "interpolated" else agg_u.copy()
        state = replace(self.clients[u], Q=start)
        return local_train(
            state,
            self.splits[u],
            epochs=cfg.epochs,
            eta=cfg.eta,
            negatives=cfg.negatives,
            epoch_seed=derive_seed(cfg.global_seed, TAG_TRAIN, u, round_idx),
            batch_size=cfg.batch_size,
            negative_exclude=self._neg_exclude[u],
        )

    def _map(self, fn, items):
        if self.workers == 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, items))

    # -- round loop --------------------------------------------------------

    def run_round(self) -> Optional[RoundMetrics]:
        cfg, srv = self.config, self.server
        start = time.perf_counter()
        t = srv.round + 1
        cohort = sample_cohort(self.n, cfg.cohort_size, t, cfg.global_seed)
        if not cohort:
            raise ValueError("empty cohort")
        agg = self.aggregates(cohort)

        trained = self._map(lambda j: self._client_round(cohort[j], agg[j], t), list(range(len(cohort))))
        del agg
        self._agg_cache = None

        for u, state in zip(cohort, trained):
            self.clients[u] = state
            srv.tables[u] = state.Q
        if self.spec.needs_signatures:
            # each client's own SVD; batched here only to share the Jacobi sweep
            sigs = svd_left_topk_many([trained_rows(s) for s in trained], self.spec.k)
            for u, sig in zip(cohort, sigs):
                srv.signatures[u] = sig

        full = len(cohort) == self.n
        snapshot = CohortSnapshot(
            client_ids=cohort,
            tables=srv.tables if full else srv.tables[cohort],
            signatures=[srv.signatures[u] for u in cohort] if self.spec.needs_signatures else None,
            data_sizes=self.data_sizes[cohort],
        )
        rw = compute_round_weights(self.spec, snapshot)
        if full:
            srv.W = rw.W
        else:
            srv.W[cohort, :] = 0.0
            srv.W[np.ix_(cohort, cohort)] = rw.W
        srv.last_kernels = rw
        srv.last_cohort = cohort
        srv.round = t

        if t % cfg.eval_every == 0 or t == cfg.rounds:
            metrics = self.evaluate(seconds=time.perf_counter() - start)
            srv.history.append(metrics)
            return metrics
        return None

    def evaluate(self, seconds: float = 0.0) -> RoundMetrics:
        """Score every client on its interpolated table (own table mixed with its aggregate)."""
        cfg = self.config
        agg = self.aggregates(list(range(self.n)))

        def one(u):
            table = self.working_table(u, agg[u])
            return evaluate_client(self.clients[u], table, self.splits[u], cfg.eval_protocol, cfg.global_seed)

        results = self._map(one, list(range(self.n)))
        return summarize(self.server.round, self.config.mode, results, cfg.top_k, seconds)

    def run(self, on_metrics: Optional[Callable[[RoundMetrics], None]] = None) -> ExperimentResult:
        for _ in range(self.config.rounds):
            metrics = self.run_round()
            if metrics is not None:
                logger.info(
                    "round %d %s hr@10 test=%.4f train=%.4f",
                    metrics.round, metrics.mode, metrics.hr10_test, metrics.hr10_train,
                )
                if on_metrics is not None:
                    on_metrics(metrics)
        srv = self.server
        return ExperimentResult(self.config, list(srv.history), srv.W, srv.last_kernels, srv.last_cohort)


def run_experiment(
    config: ExperimentConfig,
    dataset: Optional[InteractionDataset] = None,
    workers: int = 1,
    on_metrics=None,
) -> ExperimentResult:
    if config.rounds < 1:
        raise ValueError("rounds must be >= 1")
    return Federation(config, dataset=dataset, workers=workers).run(on_metrics)


GAP_COLUMNS = ("s", "hr10_train", "hr10_test", "ndcg10_train", "ndcg10_test", "gap_hr10", "gap_ndcg10")


def run_gap_experiment(
    config: ExperimentConfig,
    s_values: Sequence[int],
    dataset: Optional[InteractionDataset] = None,
    workers: int = 1,
) -> list[dict]:
    """Final train/test metrics of top-s similarity aggregation for each s."""
    if not s_values:
        raise ValueError("s_values must be non-empty")
    if dataset is None:
        dataset = load_ratings(config.dataset, config.format)
    rows = []
    for s in s_values:
        cfg = config.replace(mode="topk_similar", s=int(s))
        final = run_experiment(cfg, dataset=dataset, workers=workers).history[-1]
        rows.append({
            "s": int(s),
            "hr10_train": final.hr10_train,
            "hr10_test": final.hr10_test,
            "ndcg10_train": final.ndcg10_train,
            "ndcg10_test": final.ndcg10_test,
            "gap_hr10": final.hr10_train - final.hr10_test,
            "gap_ndcg10": final.ndcg10_train - final.ndcg10_test,
        })
    return rows
