"""Rating-log ingestion, per-user partitioning and leave-one-out splits."""

from __future__ import annotations

import io
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

logger = logging.getLogger(__name__)

FORMATS = ("tsv4", "csv4")
CSV_HEADER = ("userId", "movieId", "rating", "timestamp")


class ParseError(ValueError):
    """A rating log line could not be parsed."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class Interaction(NamedTuple):
    user_id: int
    item_id: int
    label: int
    timestamp: int


@dataclass
class InteractionDataset:
    interactions: list[Interaction]
    n: int
    m: int
    user_ids: dict[str, int]
    item_ids: dict[str, int]
    dropped_users: int = 0

    def raw_user(self, user_id: int) -> str:
        return self._inverse("user_ids")[user_id]

    def raw_item(self, item_id: int) -> str:
        return self._inverse("item_ids")[item_id]

    def _inverse(self, attr):
        cache = self.__dict__.setdefault("_inverse_cache", {})
        if attr not in cache:
            cache[attr] = {v: k for k, v in getattr(self, attr).items()}
        return cache[attr]


@dataclass(frozen=True)
class ClientDataset:
    """One client's leave-one-out split. Train items are implicit positives."""

    user_id: int
    train_items: tuple[int, ...]
    test_item: int
    all_interacted: frozenset[int] = field(default=frozenset())

    def __post_init__(self):
        if not self.train_items:
            raise ValueError(f"user {self.user_id}: empty train set")
        if self.test_item in self.train_items:
            raise ValueError(f"user {self.user_id}: test item also in train")
        if not self.all_interacted:
            object.__setattr__(
                self, "all_interacted", frozenset(self.train_items) | {self.test_item}
            )


def _read_text(source) -> str:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source).decode("utf-8")
    if isinstance(source, str):
        return source
    if isinstance(source, Path):
        return source.read_text(encoding="utf-8")
    data = source.read()
    return data.decode("utf-8") if isinstance(data, bytes) else data


def parse_ratings(source, fmt: str = "tsv4") -> InteractionDataset:
    """Parse a rating log into a binarized, densely indexed dataset.

    ``source`` may be bytes, text, a path or a readable stream. Ratings > 0
    become positives; anything else is dropped. Lines with only three fields
    get their line number as timestamp. Users left with fewer than two
    interactions are dropped (see ``dropped_users``). Repeated (user, item)
    pairs keep their latest record.
    """
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    delim = "\t" if fmt == "tsv4" else ","
    text = _read_text(source)
    lines = text.splitlines()
    if not any(line.strip() for line in lines):
        raise ParseError(0, "empty rating stream")

    records: dict[tuple[str, str], tuple[int, int]] = {}
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(delim)]
        if fmt == "csv4" and line_no == 1 and tuple(parts) == CSV_HEADER:
            continue
        if len(parts) not in (3, 4):
            raise ParseError(line_no, f"expected 3 or 4 fields, got {len(parts)}")
        user, item = parts[0], parts[1]
        if not user or not item:
            raise ParseError(line_no, "empty user or item id")
        try:
            rating = float(parts[2])
            ts = int(float(parts[3])) if len(parts) == 4 else line_no
        except ValueError as exc:
            raise ParseError(line_no, str(exc)) from None
        if not math.isfinite(rating):
            raise ParseError(line_no, "non-finite rating")
        if rating <= 0:
            continue
        key = (user, item)
        prev = records.get(key)
        if prev is None or (ts, line_no) >= prev:
            records[key] = (ts, line_no)

    per_user = defaultdict(int)
    for user, _ in records:
        per_user[user] += 1
    keep = {u for u, c in per_user.items() if c >= 2}
    dropped = len(per_user) - len(keep)
    if dropped:
        logger.info("dropped %d users with fewer than 2 interactions", dropped)

    # first-appearance order of the surviving records
    ordered = sorted(
        ((line_no, user, item, ts) for (user, item), (ts, line_no) in records.items()
         if user in keep)
    )
    user_ids: dict[str, int] = {}
    item_ids: dict[str, int] = {}
    interactions = []
    for _, user, item, ts in ordered:
        u = user_ids.setdefault(user, len(user_ids))
        i = item_ids.setdefault(item, len(item_ids))
        interactions.append(Interaction(u, i, 1, ts))
    if not interactions:
        raise ParseError(0, "no users with at least two positive interactions")
    return InteractionDataset(
        interactions=interactions,
        n=len(user_ids),
        m=len(item_ids),
        user_ids=user_ids,
        item_ids=item_ids,
        dropped_users=dropped,
    )


def load_ratings(path, fmt: str = "tsv4") -> InteractionDataset:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset not found: {path}")
    return parse_ratings(path, fmt)


def partition_by_user(ds: InteractionDataset) -> list[list[Interaction]]:
    parts: list[list[Interaction]] = [[] for _ in range(ds.n)]
    for rec in ds.interactions:
        parts[rec.user_id].append(rec)
    return parts


def leave_one_out_split(items: Iterable[Interaction]) -> ClientDataset:
    """Hold out the latest interaction (ties go to the larger item id)."""
    items = list(items)
    if len(items) < 2:
        raise ValueError("leave-one-out needs at least two interactions")
    users = {rec.user_id for rec in items}
    if len(users) != 1:
        raise ValueError(f"interactions span several users: {sorted(users)}")
    ordered = sorted(items, key=lambda rec: (rec.timestamp, rec.item_id))
    test = ordered[-1]
    return ClientDataset(
        user_id=test.user_id,
        train_items=tuple(rec.item_id for rec in ordered[:-1]),
        test_item=test.item_id,
    )


def split_all(ds: InteractionDataset) -> list[ClientDataset]:
    return [leave_one_out_split(part) for part in partition_by_user(ds)]


def subsample_train(cd: ClientDataset, ratio: float, seed) -> ClientDataset:
    """Keep ceil(ratio * |train|) train items, drawn without replacement.

    The dropped items no longer count as interacted for this client.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    if ratio == 1.0:
        return cd
    n_train = len(cd.train_items)
    keep = math.ceil(ratio * n_train)
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(n_train, size=keep, replace=False))
    return ClientDataset(
        user_id=cd.user_id,
        train_items=tuple(cd.train_items[j] for j in chosen),
        test_item=cd.test_item,
    )


def sample_negatives(cd: ClientDataset, n_neg: int, m: int, seed, exclude=None) -> np.ndarray:
    """Draw ``n_neg`` items per train positive (label 0), uniformly with replacement.

    Items in ``exclude`` (default: ``cd.all_interacted``) are never drawn.
    """
    exclude = cd.all_interacted if exclude is None else exclude
    if m <= len(exclude):
        raise ValueError(
            f"user {cd.user_id}: no non-interacted items among m={m}"
        )
    if n_neg <= 0:
        return np.empty(0, dtype=np.int64)
    mask = np.ones(m, dtype=bool)
    mask[list(exclude)] = False
    pool = np.flatnonzero(mask)
    rng = np.random.default_rng(seed)
    return pool[rng.integers(0, pool.size, size=n_neg * len(cd.train_items))]


def dump_splits(clients: list[ClientDataset], ds: InteractionDataset, out) -> None:
    """Write splits as JSON lines ``{user, train, test}`` using raw ids."""
    fh = out if isinstance(out, io.TextIOBase) else open(out, "w", encoding="utf-8")
    try:
        for cd in clients:
            rec = {
                "user": ds.raw_user(cd.user_id),
                "train": [ds.raw_item(i) for i in cd.train_items],
                "test": ds.raw_item(cd.test_item),
            }
            fh.write(json.dumps(rec) + "\n")
    finally:
        if fh is not out:
            fh.close()
