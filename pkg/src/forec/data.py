"""Rating ingestion, k-core filtering, item alignment, splits and negative sampling.

Ratings files are UTF-8, one interaction per line, tab separated::

    user_id <TAB> item_id <TAB> rating <TAB> timestamp
"""
from __future__ import annotations

import hashlib
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPLIT_SCHEME = "leave-one-out: latest->test, second latest->valid, rest->train"


class RatingsParseError(ValueError):
    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class SplitError(ValueError):
    pass


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class InteractionRecord:
    user_id: str
    item_id: str
    rating: float
    timestamp: int

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise ValueError("empty user or item id")
        if not 1.0 <= self.rating <= 5.0:
            raise ValueError(f"rating {self.rating} outside [1, 5]")
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")


def load_ratings(path, market_code: str | None = None) -> list[InteractionRecord]:
    """Read a ratings file; records come back in file order.

    Blank lines are skipped. Any malformed line raises RatingsParseError
    naming the line number.
    """
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise RatingsParseError(path, line_no, f"expected 4 tab-separated fields, got {len(parts)}")
            user, item, rating, ts = parts
            try:
                rating_f = float(rating)
                ts_i = int(ts)
            except ValueError as exc:
                raise RatingsParseError(path, line_no, str(exc)) from None
            try:
                records.append(InteractionRecord(user, item, rating_f, ts_i))
            except ValueError as exc:
                raise RatingsParseError(path, line_no, str(exc)) from None
    return records


def write_ratings(path, records: Iterable[InteractionRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(f"{r.user_id}\t{r.item_id}\t{r.rating:.1f}\t{r.timestamp}\n")


def kcore_filter(records: Sequence[InteractionRecord], min_count: int = 5) -> list[InteractionRecord]:
    """Iteratively drop users and items with fewer than ``min_count`` interactions.

    The result is the maximal subset in which every user and every item has at
    least ``min_count`` interactions; input order is preserved.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    alive = list(records)
    while True:
        users = Counter(r.user_id for r in alive)
        items = Counter(r.item_id for r in alive)
        kept = [r for r in alive if users[r.user_id] >= min_count and items[r.item_id] >= min_count]
        if len(kept) == len(alive):
            return kept
        alive = kept


@dataclass
class MarketDataset:
    """One market after filtering.

    User indices are dense within the market but may start at ``user_offset``
    so that several markets in one experiment never share a user row. Item
    indices refer to the global vocabulary ``item_index``.
    """

    market_code: str
    user_index: dict[str, int]
    item_index: dict[str, int]
    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    n_items: int = 0

    def __post_init__(self):
        if not self.n_items:
            self.n_items = len(self.item_index)

    @property
    def n_interactions(self) -> int:
        return len(self.users)

    @property
    def n_users(self) -> int:
        return len(self.user_index)

    @property
    def user_offset(self) -> int:
        return min(self.user_index.values()) if self.user_index else 0

    @property
    def catalog(self) -> np.ndarray:
        """Global indices of the items this market actually contains."""
        return np.unique(self.items)

    def item_ids(self) -> list[str]:
        inv = sorted(self.item_index, key=self.item_index.get)
        return inv

    def records(self) -> list[InteractionRecord]:
        users = sorted(self.user_index, key=self.user_index.get)
        items = self.item_ids()
        off = self.user_offset
        return [InteractionRecord(users[u - off], items[i], 5.0, int(t))
                for u, i, t in zip(self.users, self.items, self.timestamps)]


def build_market(records: Sequence[InteractionRecord], market_code: str,
                 item_index: dict[str, int] | None = None, user_offset: int = 0) -> MarketDataset:
    user_ids = sorted({r.user_id for r in records})
    user_index = {u: k + user_offset for k, u in enumerate(user_ids)}
    if item_index is None:
        item_index = {i: k for k, i in enumerate(sorted({r.item_id for r in records}))}
    missing = {r.item_id for r in records} - item_index.keys()
    if missing:
        raise KeyError(f"items missing from vocabulary: {sorted(missing)[:5]}")
    return MarketDataset(
        market_code=market_code,
        user_index=user_index,
        item_index=dict(item_index),
        users=np.array([user_index[r.user_id] for r in records], dtype=np.int64),
        items=np.array([item_index[r.item_id] for r in records], dtype=np.int64),
        timestamps=np.array([r.timestamp for r in records], dtype=np.int64),
    )


def align_items(datasets: Sequence[MarketDataset]) -> tuple[dict[str, int], list[MarketDataset]]:
    """Build one sorted item vocabulary over all markets and re-index each market."""
    if not datasets:
        raise ValueError("align_items needs at least one dataset")
    vocab = sorted(set().union(*(d.item_index for d in datasets)))
    shared = {item: k for k, item in enumerate(vocab)}
    out = []
    for d in datasets:
        local_ids = d.item_ids()
        remap = np.array([shared[i] for i in local_ids], dtype=np.int64)
        out.append(replace(d, item_index=dict(shared), items=remap[d.items] if len(d.items) else d.items.copy(),
                           n_items=len(shared)))
    return shared, out


def make_users_disjoint(datasets: Sequence[MarketDataset]) -> list[MarketDataset]:
    """Shift user indices so markets occupy consecutive, non-overlapping ranges."""
    out, offset = [], 0
    for d in datasets:
        shift = offset - d.user_offset
        out.append(replace(d, user_index={u: k + shift for u, k in d.user_index.items()},
                           users=d.users + shift))
        offset += d.n_users
    return out


def prepare_markets(record_sets: dict[str, Sequence[InteractionRecord]], min_count: int = 5) -> list[MarketDataset]:
    """k-core each market independently, then align items and separate users."""
    markets = [build_market(kcore_filter(recs, min_count), code) for code, recs in record_sets.items()]
    _, markets = align_items(markets)
    return make_users_disjoint(markets)


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitDataset:
    market_code: str
    n_items: int
    n_users_total: int
    train: dict[int, list[int]]
    valid: dict[int, int]
    test: dict[int, int]
    catalog: np.ndarray
    scheme: str = SPLIT_SCHEME
    known_positives: dict[int, frozenset] = field(default_factory=dict)

    def __post_init__(self):
        if not self.known_positives:
            self.known_positives = {
                u: frozenset(self.train[u]) | {self.valid[u], self.test[u]} for u in self.train
            }

    @property
    def users(self) -> list[int]:
        return sorted(self.train)

    def train_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        users = [u for u in self.users for _ in self.train[u]]
        items = [i for u in self.users for i in self.train[u]]
        return np.array(users, dtype=np.int64), np.array(items, dtype=np.int64)

    @property
    def n_train(self) -> int:
        return sum(len(v) for v in self.train.values())

    def with_train(self, train: dict[int, list[int]]) -> "SplitDataset":
        """Copy with a different train partition; known positives are kept."""
        return replace(self, train=train, known_positives=dict(self.known_positives))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for u in self.users:
            h.update(f"{u}:{self.train[u]}:{self.valid[u]}:{self.test[u]};".encode())
        h.update(f"{self.n_items}:{self.n_users_total}".encode())
        return h.hexdigest()[:16]


def leave_one_out_split(dataset: MarketDataset, n_users_total: int | None = None) -> SplitDataset:
    """Latest interaction per user -> test, second latest -> valid, rest -> train.

    Timestamp ties keep input order, so the later record wins the test slot.
    """
    order = np.argsort(dataset.timestamps, kind="stable")
    per_user: dict[int, list[int]] = defaultdict(list)
    for idx in order:
        per_user[int(dataset.users[idx])].append(int(dataset.items[idx]))
    train, valid, test = {}, {}, {}
    for u in sorted(per_user):
        seq = per_user[u]
        if len(seq) < 3:
            raise SplitError(f"user {u} has {len(seq)} interactions; leave-one-out needs >= 3")
        train[u], valid[u], test[u] = seq[:-2], seq[-2], seq[-1]
    if n_users_total is None:
        n_users_total = (max(per_user) + 1) if per_user else 0
    return SplitDataset(dataset.market_code, dataset.n_items, n_users_total, train, valid, test,
                        catalog=dataset.catalog)


def truncate_train(split: SplitDataset, fraction: float) -> tuple[SplitDataset, list[int]]:
    """Keep the ceil(fraction * n_u) most recent train interactions of each user.

    Returns the new split and the users that were bumped up to one interaction.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    train, flagged = {}, []
    for u, items in split.train.items():
        keep = math.ceil(fraction * len(items) - 1e-12)
        if keep < 1:
            keep = 1
            flagged.append(u)
        train[u] = items[len(items) - keep:]
    return split.with_train(train), flagged


def write_split(split: SplitDataset, directory) -> None:
    """Persist a split as line-oriented text files in stable order."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "train.tsv", "w", encoding="utf-8") as fh:
        for u in split.users:
            for i in split.train[u]:
                fh.write(f"{u}\t{i}\n")
    for name, part in (("valid.tsv", split.valid), ("test.tsv", split.test)):
        with open(d / name, "w", encoding="utf-8") as fh:
            for u in split.users:
                fh.write(f"{u}\t{part[u]}\n")
    with open(d / "meta.tsv", "w", encoding="utf-8") as fh:
        fh.write(f"market_code\t{split.market_code}\n")
        fh.write(f"n_items\t{split.n_items}\n")
        fh.write(f"n_users_total\t{split.n_users_total}\n")
        fh.write(f"scheme\t{split.scheme}\n")
        fh.write("catalog\t" + ",".join(str(int(i)) for i in split.catalog) + "\n")


def read_split(directory) -> SplitDataset:
    d = Path(directory)
    meta = dict(line.rstrip("\n").split("\t", 1) for line in open(d / "meta.tsv", encoding="utf-8"))
    train: dict[int, list[int]] = defaultdict(list)
    for line in open(d / "train.tsv", encoding="utf-8"):
        u, i = line.split()
        train[int(u)].append(int(i))

    def _pairs(name):
        return {int(u): int(i) for u, i in (line.split() for line in open(d / name, encoding="utf-8"))}

    catalog = np.array([int(x) for x in meta["catalog"].split(",") if x], dtype=np.int64)
    return SplitDataset(meta["market_code"], int(meta["n_items"]), int(meta["n_users_total"]),
                        dict(train), _pairs("valid.tsv"), _pairs("test.tsv"), catalog=catalog,
                        scheme=meta["scheme"])


# ---------------------------------------------------------------------------
# negatives


class NegativeSampler:
    """Draws items a user has never interacted with.

    ``pool`` restricts the candidate items (a market catalog, or the whole
    global vocabulary when omitted). Training draws come from one seeded
    stream and differ from call to call; evaluation draws depend only on
    ``(seed, user)``.
    """

    def __init__(self, known_positives: dict[int, frozenset], n_items: int,
                 pool: np.ndarray | None = None, seed: int = 0, stream: int = 0):
        self.known_positives = known_positives
        self.n_items = n_items
        self.pool = np.arange(n_items, dtype=np.int64) if pool is None else np.asarray(pool, dtype=np.int64)
        self.seed = seed
        self.stream = stream
        self.rng = np.random.default_rng([seed, stream])
        n_rows = max(known_positives, default=-1) + 1
        self._positive = np.zeros((n_rows, n_items), dtype=bool)
        for u, items in known_positives.items():
            self._positive[u, list(items)] = True
        self._eligible = (~self._positive[:, self.pool]).sum(axis=1)

    @classmethod
    def for_split(cls, split: SplitDataset, scope: str = "market", seed: int = 0,
                  stream: int = 0) -> "NegativeSampler":
        if scope == "market":
            pool = split.catalog
        elif scope == "global":
            pool = None
        else:
            raise ValueError(f"unknown negatives scope {scope!r}")
        return cls(split.known_positives, split.n_items, pool, seed, stream)

    def reseeded(self, stream: int) -> "NegativeSampler":
        """Same positives and pool, fresh training stream."""
        clone = object.__new__(NegativeSampler)
        clone.__dict__.update(self.__dict__)
        clone.stream = stream
        clone.rng = np.random.default_rng([self.seed, stream])
        return clone

    def eligible_count(self, user: int) -> int:
        return int(self._eligible[user])

    def sample_train(self, users: np.ndarray, n: int = 4) -> np.ndarray:
        """``n`` negatives per entry of ``users`` (uniform, with replacement)."""
        users = np.asarray(users, dtype=np.int64)
        if users.size and self._eligible[users].min() == 0:
            bad = users[self._eligible[users] == 0][0]
            raise SamplingError(f"user {bad} has no negative items available")
        rows = np.repeat(users, n)
        picks = self.pool[self.rng.integers(0, len(self.pool), size=rows.size)]
        clash = self._positive[rows, picks]
        while clash.any():
            idx = np.flatnonzero(clash)
            picks[idx] = self.pool[self.rng.integers(0, len(self.pool), size=idx.size)]
            clash[idx] = self._positive[rows[idx], picks[idx]]
        return picks.reshape(-1, n)

    def sample_train_negatives(self, user: int, n: int = 4) -> list[int]:
        return [int(i) for i in self.sample_train(np.array([user]), n)[0]]

    def sample_eval(self, user: int, n: int = 99) -> list[int]:
        candidates = self.pool[~self._positive[user, self.pool]]
        if len(candidates) < n:
            raise SamplingError(f"user {user}: only {len(candidates)} eligible items, need {n}")
        rng = np.random.default_rng([self.seed, int(user)])
        return [int(i) for i in rng.choice(candidates, size=n, replace=False)]

    def eval_negatives(self, users: Iterable[int], n: int = 99) -> dict[int, list[int]]:
        return {int(u): self.sample_eval(u, n) for u in users}


def sample_train_negatives(sampler: NegativeSampler, positive: tuple[int, int], n: int = 4) -> list[int]:
    return sampler.sample_train_negatives(positive[0], n)


def sample_eval_negatives(sampler: NegativeSampler, user: int, n: int = 99) -> list[int]:
    return sampler.sample_eval(user, n)
